#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "tagforge/core/adam.hpp"
#include "tagforge/core/ops.hpp"
#include "tagforge/core/rng.hpp"
#include "tagforge/core/tensor.hpp"

namespace tagforge {

struct NetConfig {
  int width1 = 32, width2 = 64, width3 = 128;  // stage channel counts
  int blocks = 2;                              // residual blocks per stage
  int head_width = 256;
  int num_classes = 6;
  double loc_bias_init = -2.0;      // final-layer loc logit bias at init
  // Final-layer weight init multiplier. Small on purpose: the pose channels
  // must start well inside the valid homogeneous region (|p7|, |p8| < 2/S, or
  // the divisor flips sign across the marker and corners explode before any
  // training signal exists).
  double head_weight_scale = 0.01;
};

namespace detail {

template <typename T>
LayerParams<T> make_conv(int kh, int kw, int ic, int oc, Rng& rng,
                         bool trainable_bias, double weight_scale = 1.0) {
  LayerParams<T> p;
  p.weights = Tensor<T>({kh, kw, ic, oc});
  const double stddev = std::sqrt(2.0 / (double(kh) * kw * ic)) * weight_scale;
  T* w = p.weights.data();
  for (std::size_t i = 0; i < p.weights.size(); ++i)
    w[i] = T(rng.gaussian() * stddev);
  p.weights.set_requires_grad();
  p.bias = Tensor<T>({oc});
  p.bias_trainable = trainable_bias;
  if (trainable_bias) p.bias.set_requires_grad();
  return p;
}

}  // namespace detail

/// conv + batchnorm unit; convs feeding a batchnorm keep a fixed zero bias.
template <typename T>
struct ConvBN {
  LayerParams<T> conv;
  BatchNormLayer<T> bn;

  ConvBN() = default;
  ConvBN(int kh, int kw, int ic, int oc, Rng& rng)
      : conv(detail::make_conv<T>(kh, kw, ic, oc, rng, /*trainable_bias=*/false)),
        bn(oc) {}
};

template <typename T>
struct ResBlock {
  ConvBN<T> a, b;

  ResBlock() = default;
  ResBlock(int c, Rng& rng) : a(3, 3, c, c, rng), b(3, 3, c, c, rng) {}

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    Tensor<T> y = relu(batchnorm2d(conv2d(x, a.conv, 1, 1), a.bn, training));
    y = batchnorm2d(conv2d(y, b.conv, 1, 1), b.bn, training);
    return relu(add(x, y));
  }
};

/// Stride-8 fully convolutional detector: three stride-2 stages of
/// conv-bn-relu plus residual blocks, then a 1x1 head producing the
/// (1 + C + 6)-channel grid. Channel layout: [0] loc logit, [1..C] class
/// logits, [C+1..C+6] projective params.
template <typename T>
class DetectorNet {
 public:
  NetConfig cfg;

  DetectorNet() = default;

  DetectorNet(const NetConfig& config, Rng& rng) : cfg(config) {
    check_config(cfg.width1 > 0 && cfg.width2 > 0 && cfg.width3 > 0 &&
                     cfg.blocks >= 0 && cfg.head_width > 0 && cfg.num_classes > 0,
                 "net: invalid dimensions");
    stage_conv_[0] = ConvBN<T>(3, 3, 3, cfg.width1, rng);
    for (int i = 0; i < cfg.blocks; ++i)
      stage_blocks_[0].emplace_back(cfg.width1, rng);
    stage_conv_[1] = ConvBN<T>(3, 3, cfg.width1, cfg.width2, rng);
    for (int i = 0; i < cfg.blocks; ++i)
      stage_blocks_[1].emplace_back(cfg.width2, rng);
    stage_conv_[2] = ConvBN<T>(3, 3, cfg.width2, cfg.width3, rng);
    for (int i = 0; i < cfg.blocks; ++i)
      stage_blocks_[2].emplace_back(cfg.width3, rng);
    head_ = ConvBN<T>(1, 1, cfg.width3, cfg.head_width, rng);
    out_ = detail::make_conv<T>(1, 1, cfg.head_width, 1 + cfg.num_classes + 6, rng,
                                /*trainable_bias=*/true, cfg.head_weight_scale);
    out_.bias.data()[0] = T(cfg.loc_bias_init);
  }

  int out_channels() const { return 1 + cfg.num_classes + 6; }

  /// {N,H,W,3} -> {N,H/8,W/8,1+C+6}; H and W must be divisible by 8.
  Tensor<T> forward(const Tensor<T>& x, bool training) {
    check_config(x.rank() == 4 && x.dim(3) == 3, "net: input must be {N,H,W,3}");
    check_config(x.dim(1) % 8 == 0 && x.dim(2) % 8 == 0,
                 "net: input dims must be divisible by 8");
    Tensor<T> y = x;
    for (int s = 0; s < 3; ++s) {
      y = relu(batchnorm2d(conv2d(y, stage_conv_[s].conv, 2, 1), stage_conv_[s].bn,
                           training));
      for (auto& blk : stage_blocks_[s]) y = blk.forward(y, training);
    }
    y = relu(batchnorm2d(conv2d(y, head_.conv, 1, 0), head_.bn, training));
    return conv2d(y, out_, 1, 0);
  }

  /// Trainable parameters in a fixed order (optimizer + checkpoint contract).
  std::vector<NamedParam<T>> params() {
    std::vector<NamedParam<T>> ps;
    auto add_convbn = [&ps](const std::string& prefix, ConvBN<T>& cb) {
      ps.push_back({prefix + ".conv.w", cb.conv.weights, cb.conv.learning_rate_scale});
      ps.push_back({prefix + ".bn.gamma", cb.bn.params.weights, T(1)});
      ps.push_back({prefix + ".bn.beta", cb.bn.params.bias, T(1)});
    };
    for (int s = 0; s < 3; ++s) {
      const std::string stage = "stage" + std::to_string(s + 1);
      add_convbn(stage, stage_conv_[s]);
      for (std::size_t i = 0; i < stage_blocks_[s].size(); ++i) {
        const std::string blk = stage + ".block" + std::to_string(i);
        add_convbn(blk + ".a", stage_blocks_[s][i].a);
        add_convbn(blk + ".b", stage_blocks_[s][i].b);
      }
    }
    add_convbn("head", head_);
    ps.push_back({"out.w", out_.weights, out_.learning_rate_scale});
    ps.push_back({"out.b", out_.bias, out_.learning_rate_scale});
    return ps;
  }

  /// Every tensor that defines the model state (checkpoint contract):
  /// trainable parameters plus batchnorm running statistics.
  std::vector<std::pair<std::string, Tensor<T>*>> state_tensors() {
    std::vector<std::pair<std::string, Tensor<T>*>> ts;
    auto add_convbn = [&ts](const std::string& prefix, ConvBN<T>& cb) {
      ts.push_back({prefix + ".conv.w", &cb.conv.weights});
      ts.push_back({prefix + ".bn.gamma", &cb.bn.params.weights});
      ts.push_back({prefix + ".bn.beta", &cb.bn.params.bias});
      ts.push_back({prefix + ".bn.running_mean", &cb.bn.running_mean});
      ts.push_back({prefix + ".bn.running_var", &cb.bn.running_var});
    };
    for (int s = 0; s < 3; ++s) {
      const std::string stage = "stage" + std::to_string(s + 1);
      add_convbn(stage, stage_conv_[s]);
      for (std::size_t i = 0; i < stage_blocks_[s].size(); ++i) {
        const std::string blk = stage + ".block" + std::to_string(i);
        add_convbn(blk + ".a", stage_blocks_[s][i].a);
        add_convbn(blk + ".b", stage_blocks_[s][i].b);
      }
    }
    add_convbn("head", head_);
    ts.push_back({"out.w", &out_.weights});
    ts.push_back({"out.b", &out_.bias});
    return ts;
  }

 private:
  ConvBN<T> stage_conv_[3];
  std::vector<ResBlock<T>> stage_blocks_[3];
  ConvBN<T> head_;
  LayerParams<T> out_;
};

}  // namespace tagforge
