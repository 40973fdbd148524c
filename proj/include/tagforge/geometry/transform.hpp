#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <utility>

#include "tagforge/core/rng.hpp"
#include "tagforge/geometry/mat3.hpp"

namespace tagforge {

/// One draw of the warp random variables.
struct WarpParams {
  double t_x = 0, t_y = 0;  // translation, pixels
  double r = 0;             // rotation, radians
  double s_x = 1, s_y = 1;  // scale
  double h_x = 0, h_y = 0;  // shear, radians
  double w_x = 0, w_y = 0;  // projective terms
};

/// Sampling ranges for warp params. Translation spans (0, img_size) and
/// rotation (0, 2*pi] and is not configurable; the rest are. Scale defaults
/// are the desk range (screen sizes 16..80 px at S=32, img 160); the
/// paper-proportional range (8/128, 320/128) is expressible via config.
struct WarpRanges {
  double scale_lo = 0.5;
  double scale_hi = 2.5;
  double shear_max = 3.0 * std::numbers::pi / 12.0;
  double proj_max = 0.0015;
};

/// Homography with bottom-right entry fixed at 1. `pose` carries the
/// (p1,p2,p4,p5,p7,p8) six-tuple used by target encoding, the corner loss and
/// decoding: columns 0,1 of the raw product, which the trailing Shift factor
/// does not touch, so they coincide with the shiftless prefix product whose
/// own bottom-right entry is exactly 1. H = [[p1,p2,cx],[p4,p5,cy],[p7,p8,1]]
/// applied to zero-centered corners (+-S/2) then reproduces the footprint.
struct ProjectiveTransform {
  Mat3 mat;                    // full product, normalized so mat.m[8] == 1
  std::array<double, 6> pose;  // (p1, p2, p4, p5, p7, p8)
};

/// T = Translate * Projective * Rotate * Shear * Scale * Shift(-S/2, -S/2),
/// multiplied left to right in exactly that order.
inline ProjectiveTransform compose_transform(const WarpParams& p, double marker_size) {
  Mat3 tr = Mat3::identity();
  tr.m[2] = p.t_x;
  tr.m[5] = p.t_y;
  Mat3 pr = Mat3::identity();
  pr.m[6] = p.w_x;
  pr.m[7] = p.w_y;
  Mat3 ro = Mat3::identity();
  ro.m[0] = std::cos(p.r);
  ro.m[1] = -std::sin(p.r);
  ro.m[3] = std::sin(p.r);
  ro.m[4] = std::cos(p.r);
  Mat3 sh = Mat3::identity();
  sh.m[1] = p.h_y;
  sh.m[3] = p.h_x;
  Mat3 sc = Mat3::identity();
  sc.m[0] = p.s_x;
  sc.m[4] = p.s_y;
  Mat3 shift = Mat3::identity();
  shift.m[2] = -marker_size / 2.0;
  shift.m[5] = -marker_size / 2.0;

  const Mat3 raw = tr * pr * ro * sh * sc * shift;

  ProjectiveTransform t;
  t.pose = {raw.m[0], raw.m[1], raw.m[3], raw.m[4], raw.m[6], raw.m[7]};
  const double k = raw.m[8];
  if (std::abs(k) < 1e-12) throw SamplingError("compose_transform: degenerate product");
  t.mat = raw;
  for (double& v : t.mat.m) v /= k;
  if (std::abs(t.mat.det()) < 1e-12)
    throw SamplingError("compose_transform: non-invertible transform");
  return t;
}

/// Image-space marker footprint: T applied to the marker square's corners in
/// (0,0)..(S,S) order, consistent winding (accepted params preserve orientation).
template <typename QuadT>
QuadT transform_corners(const ProjectiveTransform& t, double S) {
  QuadT q;
  q.p[0] = t.mat.apply(0, 0);
  q.p[1] = t.mat.apply(S, 0);
  q.p[2] = t.mat.apply(S, S);
  q.p[3] = t.mat.apply(0, S);
  return q;
}

inline WarpParams sample_warp_params(Rng& rng, int img_size, const WarpRanges& rr) {
  WarpParams p;
  p.t_x = rng.uniform_open(0.0, double(img_size));
  p.t_y = rng.uniform_open(0.0, double(img_size));
  p.r = rng.uniform_open(0.0, 2.0 * std::numbers::pi);
  p.s_x = rng.uniform_open(rr.scale_lo, rr.scale_hi);
  p.s_y = rng.uniform_open(rr.scale_lo, rr.scale_hi);
  p.h_x = rng.uniform_open(-rr.shear_max, rr.shear_max);
  p.h_y = rng.uniform_open(-rr.shear_max, rr.shear_max);
  p.w_x = rng.uniform_open(-rr.proj_max, rr.proj_max);
  p.w_y = rng.uniform_open(-rr.proj_max, rr.proj_max);
  return p;
}

/// Rejection sampling: a draw is accepted when all four transformed marker
/// corners land inside [0, img_size) on both axes.
inline std::pair<WarpParams, ProjectiveTransform> sample_accepted_transform(
    Rng& rng, int img_size, double marker_size, int max_attempts,
    const WarpRanges& rr = WarpRanges{}) {
  check(max_attempts >= 1, "sample_accepted_transform: max_attempts must be >= 1");
  for (int a = 0; a < max_attempts; ++a) {
    WarpParams p = sample_warp_params(rng, img_size, rr);
    ProjectiveTransform t;
    try {
      t = compose_transform(p, marker_size);
    } catch (const SamplingError&) {
      continue;
    }
    bool ok = true;
    const double S = marker_size;
    const double corners[4][2] = {{0, 0}, {S, 0}, {S, S}, {0, S}};
    for (auto& c : corners) {
      Vec2 q = t.mat.apply(c[0], c[1]);
      if (!(q.x >= 0.0 && q.x < img_size && q.y >= 0.0 && q.y < img_size)) {
        ok = false;
        break;
      }
    }
    if (ok) return {p, t};
  }
  throw SamplingError("sample_accepted_transform: attempts exhausted");
}

}  // namespace tagforge
