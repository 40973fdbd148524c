#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include <nlohmann/json.hpp>

#include "tagforge/core/tensor.hpp"
#include "tagforge/geometry/quad.hpp"

namespace tagforge {

struct Detection {
  double center_x = 0, center_y = 0;  // image px
  double score = 0;                   // loc value at the peak
  int class_id = 0;
  double class_conf = 0;  // softmax probability of class_id
  std::array<double, 6> proj{};
  Quad corners;
};

struct GridPeak {
  int x = 0, y = 0;
  double score = 0;
};

/// Regional maxima of a {G,G} loc map: cells above `threshold` that dominate
/// their 3x3 neighborhood. Equal-valued neighbors are won by the earlier cell
/// in scan order (row-major), so a plateau yields exactly one peak.
template <typename T>
std::vector<GridPeak> find_peaks(const Tensor<T>& loc, double threshold = 0.5) {
  check(loc.rank() == 2, "find_peaks: loc must be {G,G}");
  const int GH = loc.dim(0), GW = loc.dim(1);
  const T* p = loc.data();
  std::vector<GridPeak> peaks;
  for (int j = 0; j < GH; ++j)
    for (int i = 0; i < GW; ++i) {
      const T v = p[std::size_t(j) * GW + i];
      if (!(double(v) > threshold)) continue;
      const std::size_t self = std::size_t(j) * GW + i;
      bool is_peak = true;
      for (int dj = -1; dj <= 1 && is_peak; ++dj)
        for (int di = -1; di <= 1 && is_peak; ++di) {
          if (di == 0 && dj == 0) continue;
          const int ni = i + di, nj = j + dj;
          if (ni < 0 || ni >= GW || nj < 0 || nj >= GH) continue;
          const std::size_t nb = std::size_t(nj) * GW + ni;
          if (p[nb] > v || (p[nb] == v && nb < self)) is_peak = false;
        }
      if (is_peak) peaks.push_back({i, j, double(v)});
    }
  return peaks;
}

/// Per-axis quadratic interpolation around an integer peak:
/// offset = (f(-1) - f(+1)) / (2 (f(-1) - 2 f(0) + f(+1))), clamped to
/// [-0.5, 0.5]. Axes where the peak sits on the grid border, or where the
/// curvature denominator vanishes, keep offset 0.
template <typename T>
std::pair<double, double> subpixel_refine(const Tensor<T>& loc, const GridPeak& pk) {
  check(loc.rank() == 2, "subpixel_refine: loc must be {G,G}");
  const int GH = loc.dim(0), GW = loc.dim(1);
  const T* p = loc.data();
  auto at = [&](int i, int j) { return double(p[std::size_t(j) * GW + i]); };
  auto axis_offset = [](double fm, double f0, double fp) {
    const double den = 2.0 * (fm - 2.0 * f0 + fp);
    if (den == 0.0) return 0.0;
    return std::clamp((fm - fp) / den, -0.5, 0.5);
  };
  double ox = 0.0, oy = 0.0;
  if (pk.x > 0 && pk.x < GW - 1)
    ox = axis_offset(at(pk.x - 1, pk.y), at(pk.x, pk.y), at(pk.x + 1, pk.y));
  if (pk.y > 0 && pk.y < GH - 1)
    oy = axis_offset(at(pk.x, pk.y - 1), at(pk.x, pk.y), at(pk.x, pk.y + 1));
  return {pk.x + ox, pk.y + oy};
}

/// Turns one raw {G,G,1+C+6} network output into detections. The loc channel
/// is a logit (sigmoid applied here); class channels are softmaxed at the
/// integer peak cell; corners come from H = [[p1,p2,cx],[p4,p5,cy],[p7,p8,1]]
/// applied to the zero-centered marker square. Detections with a non-finite
/// corner are dropped (counted in *dropped when given). Result is sorted by
/// score descending, scan order on ties.
template <typename T>
std::vector<Detection> decode(const Tensor<T>& out, int stride, int marker_size,
                              double threshold = 0.5, int* dropped = nullptr) {
  check(out.rank() == 3 && out.dim(2) >= 8, "decode: output must be {G,G,1+C+6}");
  const int GH = out.dim(0), GW = out.dim(1), ch = out.dim(2);
  const int C = ch - 7;
  const T* po = out.data();

  Tensor<T> loc({GH, GW});
  T* pl = loc.data();
  for (int j = 0; j < GH; ++j)
    for (int i = 0; i < GW; ++i) {
      const double z = double(po[idx3(j, i, 0, GW, ch)]);
      pl[std::size_t(j) * GW + i] = T(1.0 / (1.0 + std::exp(-z)));
    }

  std::vector<Detection> dets;
  if (dropped) *dropped = 0;
  for (const GridPeak& pk : find_peaks(loc, threshold)) {
    auto [gx, gy] = subpixel_refine(loc, pk);
    Detection d;
    d.score = pk.score;
    d.center_x = stride * gx;
    d.center_y = stride * gy;

    const T* cell = po + idx3(pk.y, pk.x, 0, GW, ch);
    double zmax = double(cell[1]);
    for (int c = 1; c < C; ++c) zmax = std::max(zmax, double(cell[1 + c]));
    double denom = 0.0;
    for (int c = 0; c < C; ++c) denom += std::exp(double(cell[1 + c]) - zmax);
    d.class_id = 0;
    for (int c = 1; c < C; ++c)
      if (double(cell[1 + c]) > double(cell[1 + d.class_id])) d.class_id = c;
    d.class_conf = std::exp(double(cell[1 + d.class_id]) - zmax) / denom;

    for (int k = 0; k < 6; ++k) d.proj[k] = double(cell[1 + C + k]);

    const double h = marker_size / 2.0;
    const double canon[4][2] = {{-h, -h}, {h, -h}, {h, h}, {-h, h}};
    bool finite = true;
    for (int k = 0; k < 4; ++k) {
      const double x = canon[k][0], y = canon[k][1];
      const double w = d.proj[4] * x + d.proj[5] * y + 1.0;
      const double u = (d.proj[0] * x + d.proj[1] * y + d.center_x) / w;
      const double v = (d.proj[2] * x + d.proj[3] * y + d.center_y) / w;
      if (!std::isfinite(u) || !std::isfinite(v)) {
        finite = false;
        break;
      }
      d.corners.p[k] = {u, v};
    }
    if (!finite) {
      if (dropped) ++*dropped;
      continue;
    }
    dets.push_back(d);
  }
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return dets;
}

inline nlohmann::json detections_to_json(const std::vector<Detection>& dets) {
  nlohmann::json arr = nlohmann::json::array();
  for (const Detection& d : dets) {
    nlohmann::json j;
    j["center"] = {d.center_x, d.center_y};
    j["score"] = d.score;
    j["class_id"] = d.class_id;
    j["class_conf"] = d.class_conf;
    j["proj"] = d.proj;
    j["corners"] = {d.corners.p[0].x, d.corners.p[0].y, d.corners.p[1].x,
                    d.corners.p[1].y, d.corners.p[2].x, d.corners.p[2].y,
                    d.corners.p[3].x, d.corners.p[3].y};
    arr.push_back(std::move(j));
  }
  return arr;
}

}  // namespace tagforge
