#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "tagforge/core/tensor.hpp"

namespace tagforge {

/// A parameter as the optimizer and checkpoint see it: a stable name, the
/// tensor (shared storage), and its per-layer learning-rate scale.
template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  T lr_scale = T(1);
};

template <typename T>
struct AdamState {
  T lr = T(2e-5);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps_opt = T(1e-8);
  T weight_decay = T(1e-4);
  long step_count = 0;
  std::map<std::string, std::vector<T>> first_moment;
  std::map<std::string, std::vector<T>> second_moment;
};

/// One Adam update over all params: the L2 term weight_decay*w is added to
/// each gradient, bias-corrected moments drive the step, the per-layer
/// learning_rate_scale multiplies lr, and gradients are cleared afterwards.
template <typename T>
void adam_step(AdamState<T>& st, std::vector<NamedParam<T>>& params) {
  ++st.step_count;
  const double bc1 = 1.0 - std::pow(double(st.beta1), double(st.step_count));
  const double bc2 = 1.0 - std::pow(double(st.beta2), double(st.step_count));
  for (auto& p : params) {
    check(p.tensor.tracked(), "adam_step: missing gradients for " + p.name);
    const std::size_t n = p.tensor.size();
    auto& m = st.first_moment[p.name];
    auto& v = st.second_moment[p.name];
    if (m.empty()) m.assign(n, T(0));
    if (v.empty()) v.assign(n, T(0));
    check(m.size() == n && v.size() == n, "adam_step: moment shape mismatch");

    T* w = p.tensor.data();
    std::vector<T>& grad = p.tensor.grad();
    const T step_lr = st.lr * p.lr_scale;
    for (std::size_t i = 0; i < n; ++i) {
      const T g = grad[i] + st.weight_decay * w[i];
      m[i] = st.beta1 * m[i] + (T(1) - st.beta1) * g;
      v[i] = st.beta2 * v[i] + (T(1) - st.beta2) * g * g;
      const T mhat = T(double(m[i]) / bc1);
      const T vhat = T(double(v[i]) / bc2);
      w[i] -= step_lr * mhat / (std::sqrt(vhat) + st.eps_opt);
    }
    p.tensor.zero_grad();
  }
}

}  // namespace tagforge
