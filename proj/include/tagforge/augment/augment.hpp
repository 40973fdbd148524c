#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "tagforge/core/ops.hpp"
#include "tagforge/core/rng.hpp"
#include "tagforge/core/tensor.hpp"

namespace tagforge {

/// One draw of all image-capture augmentation variables. Applied in the fixed
/// order blur -> white balance -> contrast -> noise -> clip.
struct AugmentationSample {
  double d = 0.0;                    // blur angle, radians in (0, 2pi]
  double l = 0.0;                    // blur length, pixels
  double wb[3] = {1.0, 1.0, 1.0};    // per-channel gains
  double white = 1.0;                // contrast white point W
  double black = 0.0;                // contrast black point B
  double noise = 0.0;                // noise amplitude n, spans (-n/2, n/2)
};

struct AugmentRanges {
  double blur_max = 10.0;  // l sampled in (0, blur_max]
  double wb_lo = 0.7, wb_hi = 1.3;
  double white_lo = 0.6, white_hi = 1.4;
  double black_lo = -0.4, black_hi = 0.4;
  double noise = 0.3;  // fixed amplitude, not a range
};

inline AugmentationSample sample_augmentation(Rng& rng, const AugmentRanges& r) {
  AugmentationSample s;
  s.d = rng.uniform_open(0.0, 2.0 * std::numbers::pi);
  s.l = rng.uniform_open(0.0, r.blur_max);
  for (int c = 0; c < 3; ++c) s.wb[c] = rng.uniform_open(r.wb_lo, r.wb_hi);
  for (int attempt = 0;; ++attempt) {
    s.white = rng.uniform_open(r.white_lo, r.white_hi);
    s.black = rng.uniform_open(r.black_lo, r.black_hi);
    if (s.white != s.black) break;
    check(attempt < 64, "sample_augmentation: cannot draw W != B");
  }
  s.noise = r.noise;
  return s;
}

/// Odd-sided square kernel whose support is a length-l line segment through
/// the center at angle d; entries are nonnegative and sum to 1.
struct BlurKernel {
  int side = 1;
  std::vector<double> k;  // side*side, row-major
};

/// Rasterizes the segment by bilinear-splatting evenly spaced samples along
/// it, then normalizing. l < 1 collapses to the identity kernel. The angle is
/// reduced mod pi first, so kernel(d) and kernel(d + pi) coincide up to the
/// roundoff of forming d + pi.
inline BlurKernel make_blur_kernel(double d, double l) {
  check(l >= 0.0, "make_blur_kernel: negative length");
  BlurKernel bk;
  if (l < 1.0) {
    bk.side = 1;
    bk.k = {1.0};
    return bk;
  }
  double dc = std::fmod(d, std::numbers::pi);
  if (dc < 0.0) dc += std::numbers::pi;

  const int radius = int(std::ceil(l / 2.0));
  bk.side = 2 * radius + 1;
  bk.k.assign(std::size_t(bk.side) * bk.side, 0.0);

  const int n = std::max(2, int(std::ceil(4.0 * l)));
  const double cd = std::cos(dc), sd = std::sin(dc);
  for (int i = 0; i < n; ++i) {
    const double t = -l / 2.0 + double(i) * (l / double(n - 1));
    const double x = radius + t * cd, y = radius + t * sd;
    const double xf = std::floor(x), yf = std::floor(y);
    const int x0 = int(xf), y0 = int(yf);
    const double fx = x - xf, fy = y - yf;
    bk.k[std::size_t(y0) * bk.side + x0] += (1 - fx) * (1 - fy);
    bk.k[std::size_t(y0) * bk.side + x0 + 1] += fx * (1 - fy);
    bk.k[std::size_t(y0 + 1) * bk.side + x0] += (1 - fx) * fy;
    bk.k[std::size_t(y0 + 1) * bk.side + x0 + 1] += fx * fy;
  }
  double total = 0.0;
  for (double v : bk.k) total += v;
  for (double& v : bk.k) v /= total;
  return bk;
}

namespace detail {

/// Correlation with `flip` false, convolution (kernel rotated 180 degrees)
/// with it true; zero padding, output size = input size.
template <typename T>
Tensor<T> blur_apply(const Tensor<T>& x, const BlurKernel& bk, bool flip) {
  check(x.rank() == 3, "motion_blur: image must be {H,W,C}");
  const int H = x.dim(0), W = x.dim(1), C = x.dim(2);
  const int side = bk.side, r = side / 2;
  Tensor<T> out({H, W, C});
  const T* px = x.data();
  T* po = out.data();
  for (int y = 0; y < H; ++y)
    for (int xo = 0; xo < W; ++xo) {
      T* oi = po + idx3(y, xo, 0, W, C);
      for (int a = 0; a < side; ++a) {
        const int sy = flip ? y - a + r : y + a - r;
        if (sy < 0 || sy >= H) continue;
        for (int b = 0; b < side; ++b) {
          const int sx = flip ? xo - b + r : xo + b - r;
          if (sx < 0 || sx >= W) continue;
          const T kv = T(bk.k[std::size_t(a) * side + b]);
          const T* si = px + idx3(sy, sx, 0, W, C);
          for (int c = 0; c < C; ++c) oi[c] += kv * si[c];
        }
      }
    }
  return out;
}

}  // namespace detail

/// Exact adjoint of motion_blur: the same kernel applied as a convolution
/// (equivalently, correlation with the 180-degree flip).
template <typename T>
Tensor<T> motion_blur_backward(const Tensor<T>& grad, const BlurKernel& bk) {
  return detail::blur_apply(grad, bk, /*flip=*/true);
}

template <typename T>
Tensor<T> motion_blur(const Tensor<T>& x, const BlurKernel& bk) {
  Tensor<T> out = detail::blur_apply(x, bk, /*flip=*/false);
  std::vector<std::shared_ptr<Node<T>>> parents;
  if (x.tracked()) parents.push_back(x.node());
  Shape gshape = x.shape();
  return make_tracked(std::move(out), std::move(parents),
                      [xn = x.node(), bk, gshape](const std::vector<T>& g) {
                        if (!xn) return;
                        Tensor<T> gt(gshape, std::vector<T>(g.begin(), g.end()));
                        Tensor<T> gx = motion_blur_backward(gt, bk);
                        const T* pg = gx.data();
                        for (std::size_t i = 0; i < xn->grad.size(); ++i)
                          xn->grad[i] += pg[i];
                      });
}

template <typename T>
Tensor<T> white_balance(const Tensor<T>& x, const double wb[3]) {
  check_config(x.rank() == 3 && x.dim(2) == 3, "white_balance: image must be {H,W,3}");
  return mul_channels(x, std::vector<T>{T(wb[0]), T(wb[1]), T(wb[2])});
}

/// I_C = I * (W - B) + B.
template <typename T>
Tensor<T> contrast(const Tensor<T>& x, double white, double black) {
  check(white != black, "contrast: W must differ from B");
  return scale_shift(x, T(white - black), T(black));
}

/// Adds i.i.d. uniform noise in (-n/2, n/2), then clips to [0,1]. The noise is
/// a constant in the graph; gradients pass only where the pre-clip value is
/// strictly inside (0,1).
template <typename T>
Tensor<T> add_noise(const Tensor<T>& x, Rng& rng, double n) {
  check(n >= 0.0, "add_noise: negative amplitude");
  Tensor<T> noisy = x;
  if (n > 0.0) {
    Tensor<T> noise(x.shape());
    T* pn = noise.data();
    for (std::size_t i = 0; i < noise.size(); ++i)
      pn[i] = T(rng.uniform_open(-n / 2.0, n / 2.0));
    noisy = add(x, noise);
  }
  return clip01(noisy);
}

/// Full capture pipeline in the pinned order.
template <typename T>
Tensor<T> apply_augmentation(const Tensor<T>& img, const AugmentationSample& s,
                             Rng& rng) {
  Tensor<T> out = motion_blur(img, make_blur_kernel(s.d, s.l));
  out = white_balance(out, s.wb);
  out = contrast(out, s.white, s.black);
  return add_noise(out, rng, s.noise);
}

}  // namespace tagforge
