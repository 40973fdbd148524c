#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "tagforge/geometry/mat3.hpp"

namespace tagforge {

/// Four image-space corners with consistent winding.
struct Quad {
  std::array<Vec2, 4> p;
};

inline double polygon_signed_area(const std::vector<Vec2>& pts) {
  double a = 0.0;
  const std::size_t n = pts.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& u = pts[i];
    const Vec2& v = pts[(i + 1) % n];
    a += u.x * v.y - v.x * u.y;
  }
  return 0.5 * a;
}

/// Clips a convex polygon to the left half-plane of the directed edge (a, b).
inline std::vector<Vec2> clip_halfplane(const std::vector<Vec2>& poly, Vec2 a, Vec2 b) {
  std::vector<Vec2> out;
  const std::size_t n = poly.size();
  auto side = [&](const Vec2& q) {
    return (b.x - a.x) * (q.y - a.y) - (b.y - a.y) * (q.x - a.x);
  };
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& cur = poly[i];
    const Vec2& nxt = poly[(i + 1) % n];
    const double sc = side(cur), sn = side(nxt);
    if (sc >= 0.0) out.push_back(cur);
    if ((sc > 0.0 && sn < 0.0) || (sc < 0.0 && sn > 0.0)) {
      const double t = sc / (sc - sn);
      out.push_back({cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
    }
  }
  return out;
}

/// Intersection-over-union of two convex quads via Sutherland-Hodgman
/// clipping and the shoelace formula. Degenerate (near-zero-area) input
/// yields 0 and sets *degenerate when provided.
inline double quad_iou(const Quad& qa, const Quad& qb, bool* degenerate = nullptr) {
  if (degenerate) *degenerate = false;
  std::vector<Vec2> a(qa.p.begin(), qa.p.end());
  std::vector<Vec2> b(qb.p.begin(), qb.p.end());
  double area_a = polygon_signed_area(a);
  double area_b = polygon_signed_area(b);
  if (std::abs(area_a) < 1e-12 || std::abs(area_b) < 1e-12) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  // Canonicalize to counterclockwise so "left of edge" means inside.
  if (area_a < 0.0) std::reverse(a.begin(), a.end());
  if (area_b < 0.0) std::reverse(b.begin(), b.end());

  std::vector<Vec2> inter = a;
  for (std::size_t i = 0; i < b.size() && !inter.empty(); ++i)
    inter = clip_halfplane(inter, b[i], b[(i + 1) % b.size()]);
  const double ai = inter.size() >= 3 ? std::abs(polygon_signed_area(inter)) : 0.0;
  const double u = std::abs(area_a) + std::abs(area_b) - ai;
  return u > 0.0 ? ai / u : 0.0;
}

}  // namespace tagforge
