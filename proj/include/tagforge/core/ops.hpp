#pragma once

#include <cmath>
#include <vector>

#include "tagforge/core/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace tagforge {

/// One trainable layer's parameters. The generator bank carries
/// learning_rate_scale 1000; frozen tensors flip the trainable flags.
template <typename T>
struct LayerParams {
  Tensor<T> weights;
  Tensor<T> bias;
  T learning_rate_scale = T(1);
  bool weights_trainable = true;
  bool bias_trainable = true;
};

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape() == b.shape(), "add: shape mismatch");
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];

  std::vector<std::shared_ptr<Node<T>>> parents;
  if (a.tracked()) parents.push_back(a.node());
  if (b.tracked()) parents.push_back(b.node());
  return make_tracked(std::move(out), std::move(parents),
                      [an = a.node(), bn = b.node()](const std::vector<T>& g) {
                        if (an)
                          for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
                        if (bn)
                          for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i];
                      });
}

/// y = x * mul + shift. The contrast op I*(W-B)+B is this with mul=W-B, shift=B.
template <typename T>
Tensor<T> scale_shift(const Tensor<T>& x, T mul, T shift) {
  Tensor<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = px[i] * mul + shift;

  std::vector<std::shared_ptr<Node<T>>> parents;
  if (x.tracked()) parents.push_back(x.node());
  return make_tracked(std::move(out), std::move(parents),
                      [xn = x.node(), mul](const std::vector<T>& g) {
                        if (xn)
                          for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i] * mul;
                      });
}

/// Per-channel multiply along the trailing axis (white balance core).
template <typename T>
Tensor<T> mul_channels(const Tensor<T>& x, const std::vector<T>& factors) {
  const int C = x.dim(x.rank() - 1);
  check(int(factors.size()) == C, "mul_channels: factor count != channels");
  Tensor<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = px[i] * factors[i % C];

  std::vector<std::shared_ptr<Node<T>>> parents;
  if (x.tracked()) parents.push_back(x.node());
  return make_tracked(std::move(out), std::move(parents),
                      [xn = x.node(), factors, C](const std::vector<T>& g) {
                        if (xn)
                          for (std::size_t i = 0; i < g.size(); ++i)
                            xn->grad[i] += g[i] * factors[i % C];
                      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = px[i] > T(0) ? px[i] : T(0);

  std::vector<std::shared_ptr<Node<T>>> parents;
  if (x.tracked()) parents.push_back(x.node());
  return make_tracked(std::move(out), std::move(parents),
                      [xn = x.node(), x](const std::vector<T>& g) {
                        if (!xn) return;
                        const T* px = x.data();
                        for (std::size_t i = 0; i < g.size(); ++i)
                          if (px[i] > T(0)) xn->grad[i] += g[i];
                      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = T(1) / (T(1) + std::exp(-px[i]));

  std::vector<std::shared_ptr<Node<T>>> parents;
  if (x.tracked()) parents.push_back(x.node());
  Tensor<T> y = out;  // shares the buffer; safe to capture while `out` moves
  return make_tracked(std::move(out), std::move(parents),
                      [xn = x.node(), y](const std::vector<T>& g) {
                        if (!xn) return;
                        const T* py = y.data();
                        for (std::size_t i = 0; i < g.size(); ++i)
                          xn->grad[i] += g[i] * py[i] * (T(1) - py[i]);
                      });
}

/// Clamp to [0,1]. Subgradient: pass-through only where the pre-clip value is
/// strictly inside (0,1).
template <typename T>
Tensor<T> clip01(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    po[i] = px[i] < T(0) ? T(0) : (px[i] > T(1) ? T(1) : px[i]);

  std::vector<std::shared_ptr<Node<T>>> parents;
  if (x.tracked()) parents.push_back(x.node());
  return make_tracked(std::move(out), std::move(parents),
                      [xn = x.node(), x](const std::vector<T>& g) {
                        if (!xn) return;
                        const T* px = x.data();
                        for (std::size_t i = 0; i < g.size(); ++i)
                          if (px[i] > T(0) && px[i] < T(1)) xn->grad[i] += g[i];
                      });
}

/// Softmax across the trailing (channel) axis, independently per pixel.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  const int C = x.dim(x.rank() - 1);
  const std::size_t pixels = x.size() / C;
  Tensor<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t p = 0; p < pixels; ++p) {
    const T* xi = px + p * C;
    T* yi = po + p * C;
    T mx = xi[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, xi[c]);
    T sum = T(0);
    for (int c = 0; c < C; ++c) {
      yi[c] = std::exp(xi[c] - mx);
      sum += yi[c];
    }
    for (int c = 0; c < C; ++c) yi[c] /= sum;
  }

  std::vector<std::shared_ptr<Node<T>>> parents;
  if (x.tracked()) parents.push_back(x.node());
  Tensor<T> y = out;  // shares the buffer; safe to capture while `out` moves
  return make_tracked(std::move(out), std::move(parents),
                      [xn = x.node(), y, C, pixels](const std::vector<T>& g) {
                        if (!xn) return;
                        const T* py = y.data();
                        for (std::size_t p = 0; p < pixels; ++p) {
                          const T* yi = py + p * C;
                          const T* gi = g.data() + p * C;
                          T dot = T(0);
                          for (int c = 0; c < C; ++c) dot += gi[c] * yi[c];
                          for (int c = 0; c < C; ++c)
                            xn->grad[p * C + c] += yi[c] * (gi[c] - dot);
                        }
                      });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T s = T(0);
  const T* px = x.data();
  for (std::size_t i = 0; i < x.size(); ++i) s += px[i];
  Tensor<T> out = Tensor<T>::scalar(s);

  std::vector<std::shared_ptr<Node<T>>> parents;
  if (x.tracked()) parents.push_back(x.node());
  return make_tracked(std::move(out), std::move(parents),
                      [xn = x.node()](const std::vector<T>& g) {
                        if (!xn) return;
                        for (std::size_t i = 0; i < xn->grad.size(); ++i)
                          xn->grad[i] += g[0];
                      });
}

/// Broadcasts {H,W,1} to {H,W,C}; backward sums the C gradients per pixel.
template <typename T>
Tensor<T> replicate_channels(const Tensor<T>& x, int channels) {
  check(x.rank() == 3 && x.dim(2) == 1, "replicate_channels: input must be {H,W,1}");
  check(channels >= 1, "replicate_channels: channels must be positive");
  const int H = x.dim(0), W = x.dim(1);
  Tensor<T> out({H, W, channels});
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t i = 0, n = x.size(); i < n; ++i)
    for (int c = 0; c < channels; ++c) po[i * channels + c] = px[i];

  std::vector<std::shared_ptr<Node<T>>> parents;
  if (x.tracked()) parents.push_back(x.node());
  return make_tracked(std::move(out), std::move(parents),
                      [xn = x.node(), channels](const std::vector<T>& g) {
                        if (!xn) return;
                        for (std::size_t i = 0; i < xn->grad.size(); ++i) {
                          T s = T(0);
                          for (int c = 0; c < channels; ++c)
                            s += g[i * channels + c];
                          xn->grad[i] += s;
                        }
                      });
}

/// Stacks N same-shape {H,W,C} images into {N,H,W,C}.
template <typename T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& items) {
  check(!items.empty(), "stack_batch: empty batch");
  const Shape& s0 = items[0].shape();
  check(s0.size() == 3, "stack_batch: items must be rank 3");
  const std::size_t item_size = items[0].size();
  Shape out_shape = {int(items.size()), s0[0], s0[1], s0[2]};
  Tensor<T> out(out_shape);
  T* po = out.data();
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::vector<std::shared_ptr<Node<T>>> item_nodes;
  for (std::size_t n = 0; n < items.size(); ++n) {
    check(items[n].shape() == s0, "stack_batch: mixed shapes");
    std::copy(items[n].data(), items[n].data() + item_size, po + n * item_size);
    item_nodes.push_back(items[n].node());
    if (items[n].tracked()) parents.push_back(items[n].node());
  }
  return make_tracked(std::move(out), std::move(parents),
                      [item_nodes, item_size](const std::vector<T>& g) {
                        for (std::size_t n = 0; n < item_nodes.size(); ++n) {
                          if (!item_nodes[n]) continue;
                          auto& dst = item_nodes[n]->grad;
                          const T* src = g.data() + n * item_size;
                          for (std::size_t i = 0; i < item_size; ++i) dst[i] += src[i];
                        }
                      });
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation over {N,H,W,IC} with weights {KH,KW,IC,OC}.
// The inner loop runs over OC (contiguous), each acc[oc] a fixed-order chain
// of std::fma, so results are bit-stable under any thread count.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const LayerParams<T>& p, int stride,
                 int padding) {
  check(x.rank() == 4, "conv2d: input must be {N,H,W,C}");
  check(p.weights.rank() == 4, "conv2d: weights must be {KH,KW,IC,OC}");
  check(stride >= 1, "conv2d: stride must be >= 1");
  const int N = x.dim(0), H = x.dim(1), W = x.dim(2), IC = x.dim(3);
  const int KH = p.weights.dim(0), KW = p.weights.dim(1);
  const int OC = p.weights.dim(3);
  check_config(p.weights.dim(2) == IC, "conv2d: channel mismatch");
  check_config(int(p.bias.size()) == OC, "conv2d: bias size mismatch");
  const int OH = (H + 2 * padding - KH) / stride + 1;
  const int OW = (W + 2 * padding - KW) / stride + 1;
  check_config(OH >= 1 && OW >= 1, "conv2d: output would be empty");

  Tensor<T> out({N, OH, OW, OC});
  const T* px = x.data();
  const T* pw = p.weights.data();
  const T* pb = p.bias.data();
  T* po = out.data();

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int row = 0; row < N * OH; ++row) {
    const int n = row / OH, oy = row % OH;
    std::vector<T> acc(OC);
    for (int ox = 0; ox < OW; ++ox) {
      for (int oc = 0; oc < OC; ++oc) acc[oc] = pb[oc];
      for (int ky = 0; ky < KH; ++ky) {
        const int iy = oy * stride - padding + ky;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < KW; ++kx) {
          const int ix = ox * stride - padding + kx;
          if (ix < 0 || ix >= W) continue;
          const T* xin = px + idx4(n, iy, ix, 0, H, W, IC);
          const T* wrow = pw + ((std::size_t(ky) * KW + kx) * IC) * OC;
          for (int ic = 0; ic < IC; ++ic) {
            const T v = xin[ic];
            const T* wr = wrow + std::size_t(ic) * OC;
            T* a = acc.data();
#ifdef _OPENMP
#pragma omp simd
#endif
            for (int oc = 0; oc < OC; ++oc) a[oc] = std::fma(v, wr[oc], a[oc]);
          }
        }
      }
      std::copy(acc.begin(), acc.end(), po + idx4(n, oy, ox, 0, OH, OW, OC));
    }
  }

  std::vector<std::shared_ptr<Node<T>>> parents;
  if (x.tracked()) parents.push_back(x.node());
  if (p.weights.tracked()) parents.push_back(p.weights.node());
  if (p.bias.tracked()) parents.push_back(p.bias.node());

  auto bw = [x, w = p.weights, xn = x.node(), wn = p.weights.node(),
             bn = p.bias.node(), N, H, W, IC, KH, KW, OC, OH, OW, stride,
             padding](const std::vector<T>& g) {
    const T* px = x.data();
    const T* pw = w.data();

    if (bn) {
      T* db = bn->grad.data();
      for (int i = 0; i < N * OH * OW; ++i) {
        const T* gi = g.data() + std::size_t(i) * OC;
        for (int oc = 0; oc < OC; ++oc) db[oc] += gi[oc];
      }
    }

    if (wn) {
      T* dw = wn->grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (int tap = 0; tap < KH * KW * IC; ++tap) {
        const int ky = tap / (KW * IC);
        const int kx = (tap / IC) % KW;
        const int ic = tap % IC;
        T* dwrow = dw + std::size_t(tap) * OC;
        for (int n = 0; n < N; ++n)
          for (int oy = 0; oy < OH; ++oy) {
            const int iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= H) continue;
            for (int ox = 0; ox < OW; ++ox) {
              const int ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= W) continue;
              const T v = px[idx4(n, iy, ix, ic, H, W, IC)];
              const T* gi = g.data() + idx4(n, oy, ox, 0, OH, OW, OC);
#ifdef _OPENMP
#pragma omp simd
#endif
              for (int oc = 0; oc < OC; ++oc)
                dwrow[oc] = std::fma(v, gi[oc], dwrow[oc]);
            }
          }
      }
    }

    if (xn) {
      // Weights transposed to {KH,KW,OC,IC} so the ic loop is contiguous.
      std::vector<T> wt(std::size_t(KH) * KW * OC * IC);
      for (int ky = 0; ky < KH; ++ky)
        for (int kx = 0; kx < KW; ++kx)
          for (int ic = 0; ic < IC; ++ic)
            for (int oc = 0; oc < OC; ++oc)
              wt[((std::size_t(ky) * KW + kx) * OC + oc) * IC + ic] =
                  pw[((std::size_t(ky) * KW + kx) * IC + ic) * OC + oc];
      T* dx = xn->grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (int row = 0; row < N * H; ++row) {
        const int n = row / H, iy = row % H;
        for (int ix = 0; ix < W; ++ix) {
          T* dxi = dx + idx4(n, iy, ix, 0, H, W, IC);
          for (int ky = 0; ky < KH; ++ky) {
            const int oyn = iy + padding - ky;
            if (oyn % stride != 0) continue;
            const int oy = oyn / stride;
            if (oy < 0 || oy >= OH) continue;
            for (int kx = 0; kx < KW; ++kx) {
              const int oxn = ix + padding - kx;
              if (oxn % stride != 0) continue;
              const int ox = oxn / stride;
              if (ox < 0 || ox >= OW) continue;
              const T* gi = g.data() + idx4(n, oy, ox, 0, OH, OW, OC);
              const T* wrow = wt.data() + ((std::size_t(ky) * KW + kx) * OC) * IC;
              for (int oc = 0; oc < OC; ++oc) {
                const T gv = gi[oc];
                const T* wr = wrow + std::size_t(oc) * IC;
#ifdef _OPENMP
#pragma omp simd
#endif
                for (int ic = 0; ic < IC; ++ic)
                  dxi[ic] = std::fma(gv, wr[ic], dxi[ic]);
              }
            }
          }
        }
      }
    }
  };

  return make_tracked(std::move(out), std::move(parents), std::move(bw));
}

// ---------------------------------------------------------------------------
// transposed_conv2d: one-hot {1,1,C} against a {S,S,C} kernel selects slice k.
// Mathematically the S x S x C transposed convolution; implemented as slice
// selection. A zero vector yields a zero output (bias is fixed at zero).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& one_hot, const LayerParams<T>& p) {
  check(one_hot.rank() == 3 && one_hot.dim(0) == 1 && one_hot.dim(1) == 1,
        "transposed_conv2d: input must be {1,1,C}");
  check(p.weights.rank() == 3, "transposed_conv2d: weights must be {S,S,C}");
  const int C = one_hot.dim(2);
  check(p.weights.dim(2) == C, "transposed_conv2d: class count mismatch");
  const int S = p.weights.dim(0);
  check(p.weights.dim(1) == S, "transposed_conv2d: kernel must be square");

  int hot = -1, ones = 0;
  const T* ph = one_hot.data();
  for (int c = 0; c < C; ++c) {
    if (ph[c] == T(1)) {
      hot = c;
      ++ones;
    } else {
      check(ph[c] == T(0), "transposed_conv2d: input is not one-hot");
    }
  }
  check(ones <= 1, "transposed_conv2d: input is not one-hot");

  Tensor<T> out({S, S, 1});
  const T* pw = p.weights.data();
  T* po = out.data();
  if (hot >= 0)
    for (int i = 0; i < S * S; ++i) po[i] = pw[std::size_t(i) * C + hot];

  std::vector<std::shared_ptr<Node<T>>> parents;
  if (p.weights.tracked()) parents.push_back(p.weights.node());
  return make_tracked(std::move(out), std::move(parents),
                      [wn = p.weights.node(), hot, S, C](const std::vector<T>& g) {
                        if (!wn || hot < 0) return;
                        for (int i = 0; i < S * S; ++i)
                          wn->grad[std::size_t(i) * C + hot] += g[i];
                      });
}

// ---------------------------------------------------------------------------
// Batch normalization over {N,H,W,C}: per-channel statistics across batch and
// spatial dims, biased variance, running stats with keep-old momentum.
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormLayer {
  LayerParams<T> params;  // weights = gamma, bias = beta, both {C}
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.9);
  T eps = T(1e-5);

  explicit BatchNormLayer(int C = 1)
      : running_mean({C}), running_var({C}) {
    params.weights = Tensor<T>({C}, std::vector<T>(C, T(1)));
    params.bias = Tensor<T>({C});
    params.weights.set_requires_grad();
    params.bias.set_requires_grad();
    for (int c = 0; c < C; ++c) running_var.data()[c] = T(1);
  }
};

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, BatchNormLayer<T>& layer, bool training) {
  check(x.rank() == 4, "batchnorm2d: input must be {N,H,W,C}");
  const int C = x.dim(3);
  check(layer.params.weights.dim(0) == C, "batchnorm2d: channel mismatch");
  const std::size_t M = x.size() / C;  // elements per channel
  const T* px = x.data();
  const T* gamma = layer.params.weights.data();
  const T* beta = layer.params.bias.data();

  std::vector<T> mean(C), inv_std(C);
  if (training) {
    std::vector<double> sum(C, 0.0), sumsq(C, 0.0);
    for (std::size_t i = 0; i < M; ++i) {
      const T* xi = px + i * C;
      for (int c = 0; c < C; ++c) {
        sum[c] += double(xi[c]);
        sumsq[c] += double(xi[c]) * double(xi[c]);
      }
    }
    T* rm = layer.running_mean.data();
    T* rv = layer.running_var.data();
    for (int c = 0; c < C; ++c) {
      const double mu = sum[c] / double(M);
      const double var = std::max(0.0, sumsq[c] / double(M) - mu * mu);
      mean[c] = T(mu);
      inv_std[c] = T(1.0 / std::sqrt(var + double(layer.eps)));
      rm[c] = layer.momentum * rm[c] + (T(1) - layer.momentum) * T(mu);
      rv[c] = layer.momentum * rv[c] + (T(1) - layer.momentum) * T(var);
    }
  } else {
    const T* rm = layer.running_mean.data();
    const T* rv = layer.running_var.data();
    for (int c = 0; c < C; ++c) {
      mean[c] = rm[c];
      inv_std[c] = T(1) / std::sqrt(rv[c] + layer.eps);
    }
  }

  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.size());
  T* po = out.data();
  for (std::size_t i = 0; i < M; ++i)
    for (int c = 0; c < C; ++c) {
      const std::size_t k = i * C + c;
      xhat[k] = (px[k] - mean[c]) * inv_std[c];
      po[k] = gamma[c] * xhat[k] + beta[c];
    }

  std::vector<std::shared_ptr<Node<T>>> parents;
  if (x.tracked()) parents.push_back(x.node());
  if (layer.params.weights.tracked()) parents.push_back(layer.params.weights.node());
  if (layer.params.bias.tracked()) parents.push_back(layer.params.bias.node());

  auto bw = [xn = x.node(), gn = layer.params.weights.node(),
             bn = layer.params.bias.node(), gamma_t = layer.params.weights,
             xhat = std::move(xhat), inv_std = std::move(inv_std), C, M,
             training](const std::vector<T>& g) {
    std::vector<double> dgamma(C, 0.0), dbeta(C, 0.0);
    for (std::size_t i = 0; i < M; ++i)
      for (int c = 0; c < C; ++c) {
        const std::size_t k = i * C + c;
        dgamma[c] += double(g[k]) * double(xhat[k]);
        dbeta[c] += double(g[k]);
      }
    if (gn)
      for (int c = 0; c < C; ++c) gn->grad[c] += T(dgamma[c]);
    if (bn)
      for (int c = 0; c < C; ++c) bn->grad[c] += T(dbeta[c]);
    if (!xn) return;
    const T* gamma = gamma_t.data();
    T* dx = xn->grad.data();
    if (training) {
      // dL/dx via batch statistics: the mean/var terms feed back into x.
      for (std::size_t i = 0; i < M; ++i)
        for (int c = 0; c < C; ++c) {
          const std::size_t k = i * C + c;
          const T t = g[k] - T(dbeta[c] / double(M)) -
                      xhat[k] * T(dgamma[c] / double(M));
          dx[k] += gamma[c] * inv_std[c] * t;
        }
    } else {
      for (std::size_t i = 0; i < M; ++i)
        for (int c = 0; c < C; ++c) {
          const std::size_t k = i * C + c;
          dx[k] += gamma[c] * inv_std[c] * g[k];
        }
    }
  };

  return make_tracked(std::move(out), std::move(parents), std::move(bw));
}

}  // namespace tagforge
