#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <utility>
#include <vector>

#include "tagforge/composer/composer.hpp"
#include "tagforge/core/tensor.hpp"

namespace tagforge {

struct LossConfig {
  double a = 100.0;  // class weight
  double b = 50.0;   // loc weight
  int K = 5;         // corner-loss sample cells
  double eps = 1e-9;
};

struct LossReport {
  double l_loc = 0, l_class = 0, l_proj = 0, total = 0;
};

inline double total_loss(const LossReport& r, const LossConfig& cfg) {
  return cfg.a * r.l_class + cfg.b * r.l_loc + r.l_proj;
}

namespace lossdetail {

/// Homogeneous-divisor floor for predicted corners. Legitimate targets keep
/// w within a few percent of 1, so the guard only engages for badly divergent
/// predictions; it bounds their corners (and hence their gradients) instead
/// of letting a near-zero divisor blow both up.
inline constexpr double kMinCornerW = 0.25;

/// Marker corners from a pose six-tuple with the translation terms zeroed,
/// on the zero-centered square (+-S/2). The homogeneous divisor is clamped
/// away from zero (|w| >= kMinCornerW) so corners stay bounded; the clamp
/// region contributes no gradient to p7/p8.
inline std::array<Vec2, 4> corners_from_pose(const std::array<double, 6>& p,
                                             double S, bool* clamped = nullptr) {
  const double h = S / 2.0;
  const double canon[4][2] = {{-h, -h}, {h, -h}, {h, h}, {-h, h}};
  std::array<Vec2, 4> out;
  for (int k = 0; k < 4; ++k) {
    const double x = canon[k][0], y = canon[k][1];
    double w = p[4] * x + p[5] * y + 1.0;
    if (std::abs(w) < kMinCornerW) {
      w = w < 0.0 ? -kMinCornerW : kMinCornerW;
      if (clamped) clamped[k] = true;
    } else if (clamped) {
      clamped[k] = false;
    }
    out[k] = {(p[0] * x + p[1] * y) / w, (p[2] * x + p[3] * y) / w};
  }
  return out;
}

/// Population standard deviation of the 8 pooled corner coordinates.
inline double corner_sigma(const std::array<Vec2, 4>& c) {
  double mean = 0.0;
  for (const Vec2& v : c) mean += v.x + v.y;
  mean /= 8.0;
  double ss = 0.0;
  for (const Vec2& v : c)
    ss += (v.x - mean) * (v.x - mean) + (v.y - mean) * (v.y - mean);
  return std::sqrt(ss / 8.0);
}

/// The pose shared by every mask cell, read from the first one in scan order.
template <typename T>
std::array<double, 6> target_pose(const TargetEncoding<T>& t) {
  const int GH = t.mask.dim(0), GW = t.mask.dim(1);
  const T* pm = t.mask.data();
  const T* pp = t.proj.data();
  for (int j = 0; j < GH; ++j)
    for (int i = 0; i < GW; ++i) {
      const std::size_t cell = std::size_t(j) * GW + i;
      if (pm[cell] > T(0)) {
        std::array<double, 6> p;
        for (int k = 0; k < 6; ++k) p[k] = double(pp[cell * 6 + k]);
        return p;
      }
    }
  throw ContractViolation("target_pose: empty mask");
}

/// Corner-loss sampling cells: the cell containing the true center (nearest
/// integer, clamped to the grid) plus its in-bounds abutting neighbors, stably
/// ranked by target loc value descending, truncated to K. Candidate order
/// before ranking is fixed: center, +x, -x, +y, -y.
template <typename T>
std::vector<std::pair<int, int>> proj_sample_cells(const TargetEncoding<T>& t,
                                                   int K) {
  const int GH = t.loc.dim(0), GW = t.loc.dim(1);
  const int gi = std::clamp(int(std::lround(t.center_x)), 0, GW - 1);
  const int gj = std::clamp(int(std::lround(t.center_y)), 0, GH - 1);
  std::vector<std::pair<int, int>> cand;
  const int offs[5][2] = {{0, 0}, {1, 0}, {-1, 0}, {0, 1}, {0, -1}};
  for (auto& o : offs) {
    const int i = gi + o[0], j = gj + o[1];
    if (i >= 0 && i < GW && j >= 0 && j < GH) cand.emplace_back(i, j);
  }
  const T* pl = t.loc.data();
  std::stable_sort(cand.begin(), cand.end(),
                   [&](const std::pair<int, int>& a, const std::pair<int, int>& b) {
                     return pl[std::size_t(a.second) * GW + a.first] >
                            pl[std::size_t(b.second) * GW + b.first];
                   });
  if (int(cand.size()) > K) cand.resize(K);
  return cand;
}

}  // namespace lossdetail

/// Sum over ALL grid cells of squared error, normalized by the marker's
/// occupied-cell count (not the cell total).
template <typename T>
double loc_loss(const Tensor<T>& pred, const Tensor<T>& target, int num_pix) {
  check(num_pix >= 1, "loc_loss: num_pix must be >= 1");
  check(pred.shape() == target.shape(), "loc_loss: shape mismatch");
  double s = 0.0;
  const T* pp = pred.data();
  const T* pt = target.data();
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = double(pp[i]) - double(pt[i]);
    s += e * e;
  }
  return s / num_pix;
}

/// -sum target*log(max(pred, eps)) / (C * num_pix); all-zero target rows
/// contribute nothing, so unoccupied cells never affect the loss.
template <typename T>
double class_loss(const Tensor<T>& pred, const Tensor<T>& onehot, int num_pix,
                  double eps = 1e-9) {
  check(num_pix >= 1, "class_loss: num_pix must be >= 1");
  check(pred.shape() == onehot.shape() && pred.rank() == 3,
        "class_loss: shape mismatch");
  const int C = pred.dim(2);
  double s = 0.0;
  const T* pp = pred.data();
  const T* pt = onehot.data();
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pt[i] > T(0))
      s -= double(pt[i]) * std::log(std::max(double(pp[i]), eps));
  return s / (double(C) * num_pix);
}

/// Rank-weighted mean absolute error between normalized corner sets, summed
/// over the K sampling cells: sum_k sum_{8 coords} |chat - c| / (8k).
template <typename T>
double proj_loss(const Tensor<T>& pred_proj, const TargetEncoding<T>& target,
                 int marker_size, int K = 5) {
  check(pred_proj.rank() == 3 && pred_proj.dim(2) == 6,
        "proj_loss: pred must be {G,G,6}");
  check(target.num_pix >= 1, "proj_loss: empty target mask");
  const int GW = pred_proj.dim(1);

  const auto tpose = lossdetail::target_pose(target);
  const auto tcorners = lossdetail::corners_from_pose(tpose, marker_size);
  const double sigma = lossdetail::corner_sigma(tcorners);
  check(sigma >= 1e-9, "proj_loss: degenerate target corners");

  double loss = 0.0;
  const T* pp = pred_proj.data();
  const auto cells = lossdetail::proj_sample_cells(target, K);
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const std::size_t cell =
        (std::size_t(cells[k].second) * GW + cells[k].first) * 6;
    std::array<double, 6> ppose;
    for (int q = 0; q < 6; ++q) ppose[q] = double(pp[cell + q]);
    const auto pcorners = lossdetail::corners_from_pose(ppose, marker_size);
    double cellsum = 0.0;
    for (int c = 0; c < 4; ++c)
      cellsum += std::abs(pcorners[c].x / sigma - tcorners[c].x / sigma) +
                 std::abs(pcorners[c].y / sigma - tcorners[c].y / sigma);
    loss += cellsum / (8.0 * double(k + 1));
  }
  return loss;
}

/// Training loss over a raw head-output batch {N,G,G,1+C+6}: applies sigmoid
/// to the loc channel and softmax to the class channels internally, evaluates
/// the three components batch-averaged, and backpropagates analytically into
/// the head output. Returns the total as a scalar graph node.
template <typename T>
Tensor<T> compute_loss(const Tensor<T>& out,
                       const std::vector<TargetEncoding<T>>& targets,
                       int marker_size, const LossConfig& cfg,
                       LossReport* report = nullptr) {
  check(out.rank() == 4, "compute_loss: output must be {N,G,G,ch}");
  const int N = out.dim(0), GH = out.dim(1), GW = out.dim(2), ch = out.dim(3);
  const int C = ch - 7;
  check(C >= 1, "compute_loss: need at least one class channel");
  check(int(targets.size()) == N, "compute_loss: batch/target count mismatch");

  const T* po = out.data();
  std::vector<T> grad(out.size(), T(0));  // d(total)/d(out), batch-averaged
  double sum_loc = 0.0, sum_class = 0.0, sum_proj = 0.0;

  for (int n = 0; n < N; ++n) {
    const TargetEncoding<T>& tg = targets[n];
    check(tg.num_pix >= 1, "compute_loss: empty target mask");
    const std::size_t base = std::size_t(n) * GH * GW * ch;
    const double wloc = cfg.b / (double(tg.num_pix) * N);
    const double wcls = cfg.a / (double(C) * tg.num_pix * N);

    // loc: sum over all cells of (sigmoid(z) - y)^2 / num_pix
    for (int j = 0; j < GH; ++j)
      for (int i = 0; i < GW; ++i) {
        const std::size_t cell = base + (std::size_t(j) * GW + i) * ch;
        const double z = double(po[cell]);
        const double p = 1.0 / (1.0 + std::exp(-z));
        const double y = double(tg.loc.data()[std::size_t(j) * GW + i]);
        sum_loc += (p - y) * (p - y) / tg.num_pix;
        grad[cell] += T(wloc * 2.0 * (p - y) * p * (1.0 - p));
      }

    // class: masked softmax cross-entropy
    std::vector<double> prob(C);
    for (int j = 0; j < GH; ++j)
      for (int i = 0; i < GW; ++i) {
        const std::size_t gcell = std::size_t(j) * GW + i;
        if (tg.mask.data()[gcell] <= T(0)) continue;
        const std::size_t cell = base + gcell * ch;
        double zmax = double(po[cell + 1]);
        for (int c = 1; c < C; ++c)
          zmax = std::max(zmax, double(po[cell + 1 + c]));
        double denom = 0.0;
        for (int c = 0; c < C; ++c) {
          prob[c] = std::exp(double(po[cell + 1 + c]) - zmax);
          denom += prob[c];
        }
        int truec = 0;
        for (int c = 0; c < C; ++c) {
          prob[c] /= denom;
          if (tg.class_onehot.data()[gcell * C + c] > T(0)) truec = c;
        }
        sum_class -= std::log(std::max(prob[truec], cfg.eps)) /
                     (double(C) * tg.num_pix);
        if (prob[truec] >= cfg.eps)  // below the clip the loss is flat
          for (int c = 0; c < C; ++c)
            grad[cell + 1 + c] +=
                T(wcls * (prob[c] - (c == truec ? 1.0 : 0.0)));
      }

    // proj: rank-weighted corner MAE on the sampling cells
    const auto tpose = lossdetail::target_pose(tg);
    const auto tcorners = lossdetail::corners_from_pose(tpose, marker_size);
    const double sigma = lossdetail::corner_sigma(tcorners);
    check(sigma >= 1e-9, "compute_loss: degenerate target corners");
    const auto cells = lossdetail::proj_sample_cells(tg, cfg.K);
    const double h = marker_size / 2.0;
    const double canon[4][2] = {{-h, -h}, {h, -h}, {h, h}, {-h, h}};
    for (std::size_t k = 0; k < cells.size(); ++k) {
      const std::size_t cell =
          base + (std::size_t(cells[k].second) * GW + cells[k].first) * ch;
      std::array<double, 6> ppose;
      for (int q = 0; q < 6; ++q) ppose[q] = double(po[cell + 1 + C + q]);
      bool clamped[4];
      const auto pcorners = lossdetail::corners_from_pose(ppose, marker_size, clamped);
      const double wk = 1.0 / (8.0 * double(k + 1));
      for (int c = 0; c < 4; ++c) {
        const double x = canon[c][0], y = canon[c][1];
        double w = ppose[4] * x + ppose[5] * y + 1.0;
        if (std::abs(w) < lossdetail::kMinCornerW)
          w = w < 0.0 ? -lossdetail::kMinCornerW : lossdetail::kMinCornerW;
        const double du = pcorners[c].x - tcorners[c].x;
        const double dv = pcorners[c].y - tcorners[c].y;
        sum_proj += (std::abs(du) + std::abs(dv)) / sigma * wk;
        const double su = (du > 0) - (du < 0), sv = (dv > 0) - (dv < 0);
        const double gu = su / sigma * wk / N, gv = sv / sigma * wk / N;
        grad[cell + 1 + C + 0] += T(gu * x / w);
        grad[cell + 1 + C + 1] += T(gu * y / w);
        grad[cell + 1 + C + 2] += T(gv * x / w);
        grad[cell + 1 + C + 3] += T(gv * y / w);
        if (!clamped[c]) {
          grad[cell + 1 + C + 4] +=
              T((-gu * pcorners[c].x - gv * pcorners[c].y) * x / w);
          grad[cell + 1 + C + 5] +=
              T((-gu * pcorners[c].x - gv * pcorners[c].y) * y / w);
        }
      }
    }
  }

  LossReport rep;
  rep.l_loc = sum_loc / N;
  rep.l_class = sum_class / N;
  rep.l_proj = sum_proj / N;
  rep.total = total_loss(rep, cfg);
  if (report) *report = rep;

  Tensor<T> total = Tensor<T>::scalar(T(rep.total));
  std::vector<std::shared_ptr<Node<T>>> parents;
  if (out.tracked()) parents.push_back(out.node());
  return make_tracked(std::move(total), std::move(parents),
                      [on = out.node(), grad = std::move(grad)](const std::vector<T>& g) {
                        if (!on) return;
                        for (std::size_t i = 0; i < grad.size(); ++i)
                          on->grad[i] += g[0] * grad[i];
                      });
}

}  // namespace tagforge
