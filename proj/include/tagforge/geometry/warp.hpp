#pragma once

#include <cmath>

#include "tagforge/core/tensor.hpp"
#include "tagforge/geometry/transform.hpp"

namespace tagforge {

namespace detail {

/// Bilinear taps of (u, v) into an H x W grid; taps outside contribute 0.
template <typename T, typename Fn>
inline void for_each_tap(double u, double v, int H, int W, Fn&& fn) {
  const double uf = std::floor(u), vf = std::floor(v);
  const int u0 = int(uf), v0 = int(vf);
  const double fu = u - uf, fv = v - vf;
  const double wts[4] = {(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv};
  const int us[4] = {u0, u0 + 1, u0, u0 + 1};
  const int vs[4] = {v0, v0, v0 + 1, v0 + 1};
  for (int k = 0; k < 4; ++k)
    if (us[k] >= 0 && us[k] < W && vs[k] >= 0 && vs[k] < H && wts[k] != 0.0)
      fn(vs[k], us[k], T(wts[k]));
}

}  // namespace detail

/// Adjoint of the warp: output-pixel gradients scatter back to the four
/// source pixels each bilinear read touched, with the same weights. `map` is
/// the same source->output transform used by the forward warp.
template <typename T>
Tensor<T> warp_backward(const Tensor<T>& grad_out, const Mat3& map, int src_size) {
  check(grad_out.rank() == 3, "warp_backward: grad must be {H,W,C}");
  const int OH = grad_out.dim(0), OW = grad_out.dim(1), C = grad_out.dim(2);
  const Mat3 inv = map.inverse();
  Tensor<T> gsrc({src_size, src_size, C});
  const T* pg = grad_out.data();
  T* ps = gsrc.data();
  for (int y = 0; y < OH; ++y)
    for (int x = 0; x < OW; ++x) {
      const double w = inv.m[6] * x + inv.m[7] * y + inv.m[8];
      if (std::abs(w) < 1e-12) continue;
      const double u = (inv.m[0] * x + inv.m[1] * y + inv.m[2]) / w;
      const double v = (inv.m[3] * x + inv.m[4] * y + inv.m[5]) / w;
      const T* gi = pg + idx3(y, x, 0, OW, C);
      detail::for_each_tap<T>(u, v, src_size, src_size,
                              [&](int ty, int tx, T wt) {
                                T* si = ps + idx3(ty, tx, 0, src_size, C);
                                for (int c = 0; c < C; ++c) si[c] += wt * gi[c];
                              });
    }
  return gsrc;
}

template <typename T>
Tensor<T> warp_backward(const Tensor<T>& grad_out, const ProjectiveTransform& t,
                        int src_size) {
  return warp_backward(grad_out, t.mat, src_size);
}

/// Inverse-mapping warp: each output pixel samples the source at T^-1 (x,y,1)
/// with bilinear interpolation; samples outside the source are 0. `map` sends
/// source coordinates to output coordinates.
template <typename T>
Tensor<T> warp_image(const Tensor<T>& src, const Mat3& map, int out_size) {
  check(src.rank() == 3, "warp_image: source must be {H,W,C}");
  const int SH = src.dim(0), SW = src.dim(1), C = src.dim(2);
  check(SH == SW, "warp_image: source must be square");
  const Mat3 inv = map.inverse();
  Tensor<T> out({out_size, out_size, C});
  const T* ps = src.data();
  T* po = out.data();
  for (int y = 0; y < out_size; ++y)
    for (int x = 0; x < out_size; ++x) {
      const double w = inv.m[6] * x + inv.m[7] * y + inv.m[8];
      if (std::abs(w) < 1e-12) continue;
      const double u = (inv.m[0] * x + inv.m[1] * y + inv.m[2]) / w;
      const double v = (inv.m[3] * x + inv.m[4] * y + inv.m[5]) / w;
      T* oi = po + idx3(y, x, 0, out_size, C);
      detail::for_each_tap<T>(u, v, SH, SW, [&](int ty, int tx, T wt) {
        const T* si = ps + idx3(ty, tx, 0, SW, C);
        for (int c = 0; c < C; ++c) oi[c] += wt * si[c];
      });
    }

  std::vector<std::shared_ptr<Node<T>>> parents;
  if (src.tracked()) parents.push_back(src.node());
  return make_tracked(std::move(out), std::move(parents),
                      [sn = src.node(), map, out_size, SH, C](const std::vector<T>& g) {
                        if (!sn) return;
                        Tensor<T> gt({out_size, out_size, C},
                                     std::vector<T>(g.begin(), g.end()));
                        Tensor<T> gs = warp_backward(gt, map, SH);
                        const T* pg = gs.data();
                        for (std::size_t i = 0; i < sn->grad.size(); ++i)
                          sn->grad[i] += pg[i];
                      });
}

template <typename T>
Tensor<T> warp_image(const Tensor<T>& src, const ProjectiveTransform& t, int out_size) {
  return warp_image(src, t.mat, out_size);
}

}  // namespace tagforge
