#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tagforge/augment/augment.hpp"
#include "tagforge/composer/composer.hpp"
#include "tagforge/core/parallel.hpp"
#include "tagforge/core/rng.hpp"
#include "tagforge/detector/decode.hpp"
#include "tagforge/detector/net.hpp"
#include "tagforge/geometry/quad.hpp"
#include "tagforge/io/image_io.hpp"

namespace tagforge {

struct GroundTruth {
  Quad corners;
  int class_id = 0;
};

struct EvalRecord {
  GroundTruth truth;
  bool matched = false;
  double iou = 0.0;
  bool class_correct = false;
};

struct ScorePair {
  double precision = 1.0, recall = 0.0;
};

/// Greedy matcher: detections in score order claim the best-IoU unmatched
/// truth with IoU > 0.5 (and the right class when gated); every other
/// detection is a false positive, every unclaimed truth a false negative.
/// Empty denominators give precision 1, recall 0.
inline ScorePair match_and_score(const std::vector<std::vector<GroundTruth>>& truths,
                                 const std::vector<std::vector<Detection>>& detections,
                                 bool require_class,
                                 std::vector<EvalRecord>* records = nullptr) {
  check_config(truths.size() == detections.size(),
               "match_and_score: annotation/image count mismatch");
  long long tp = 0, fp = 0, fn = 0;
  if (records) records->clear();
  for (std::size_t img = 0; img < truths.size(); ++img) {
    std::vector<Detection> dets = detections[img];
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection& a, const Detection& b) {
                       return a.score > b.score;
                     });
    std::vector<EvalRecord> recs(truths[img].size());
    for (std::size_t t = 0; t < truths[img].size(); ++t) recs[t].truth = truths[img][t];

    for (const Detection& d : dets) {
      int best = -1;
      double best_iou = 0.5;  // must strictly exceed the IoU threshold
      for (std::size_t t = 0; t < recs.size(); ++t) {
        if (recs[t].matched) continue;
        if (require_class && d.class_id != recs[t].truth.class_id) continue;
        const double iou = quad_iou(d.corners, recs[t].truth.corners);
        if (iou > best_iou) {
          best_iou = iou;
          best = int(t);
        }
      }
      if (best >= 0) {
        recs[best].matched = true;
        recs[best].iou = best_iou;
        recs[best].class_correct = d.class_id == recs[best].truth.class_id;
        ++tp;
      } else {
        ++fp;
      }
    }
    for (const EvalRecord& r : recs)
      if (!r.matched) ++fn;
    if (records) records->insert(records->end(), recs.begin(), recs.end());
  }
  ScorePair s;
  s.precision = (tp + fp) == 0 ? 1.0 : double(tp) / double(tp + fp);
  s.recall = (tp + fn) == 0 ? 0.0 : double(tp) / double(tp + fn);
  return s;
}

/// One emitted dataset item: composed image plus sidecar ground truth.
template <typename T>
struct DatasetItem {
  std::string image_path;
  Tensor<T> image;
  GroundTruth truth;
};

/// Loads a composer-emitted dataset directory (scene PNGs + JSON sidecars).
template <typename T>
std::vector<DatasetItem<T>> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  check_config(fs::is_directory(dir), "load_dataset: not a directory: " + dir);
  std::vector<std::string> sidecars;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json")
      sidecars.push_back(e.path().string());
  std::sort(sidecars.begin(), sidecars.end());
  check_config(!sidecars.empty(), "load_dataset: no sidecars in " + dir);

  std::vector<DatasetItem<T>> items;
  for (const std::string& sc : sidecars) {
    std::ifstream f(sc);
    if (!f) throw IoError("load_dataset: cannot read " + sc);
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw IoError("load_dataset: bad sidecar " + sc + ": " + e.what());
    }
    DatasetItem<T> item;
    item.truth.class_id = j.at("class_id").get<int>();
    const auto c = j.at("corners");
    check_config(c.size() == 8, "load_dataset: corners must hold 8 reals");
    for (int k = 0; k < 4; ++k)
      item.truth.corners.p[k] = {c[2 * k].get<double>(), c[2 * k + 1].get<double>()};
    fs::path img_path(sc);
    img_path.replace_extension(".png");
    item.image_path = img_path.string();
    item.image = load_image<T>(item.image_path);
    items.push_back(std::move(item));
  }
  return items;
}

/// Runs the detector on one {H,W,3} image (eval mode) and decodes.
template <typename T>
std::vector<Detection> detect_image(DetectorNet<T>& net, const Tensor<T>& img,
                                    int stride, int marker_size,
                                    double threshold = 0.5, int* dropped = nullptr) {
  Tensor<T> batch = stack_batch(std::vector<Tensor<T>>{img});
  Tensor<T> out = net.forward(batch, /*training=*/false);
  const int GH = out.dim(1), GW = out.dim(2), ch = out.dim(3);
  Tensor<T> grid({GH, GW, ch});
  std::copy(out.data(), out.data() + grid.size(), grid.data());
  return decode(grid, stride, marker_size, threshold, dropped);
}

// ---------------------------------------------------------------------------
// Augmentation sweeps (Table-style protocol)
// ---------------------------------------------------------------------------

enum class SweepKind { blur, noise, contrast, white_balance };

struct SweepSpec {
  SweepKind kind = SweepKind::blur;
  std::vector<std::vector<double>> levels;  // one tuple per level
};

inline SweepKind sweep_kind_from_string(const std::string& s) {
  if (s == "blur") return SweepKind::blur;
  if (s == "noise") return SweepKind::noise;
  if (s == "contrast") return SweepKind::contrast;
  if (s == "white_balance") return SweepKind::white_balance;
  throw ConfigError("unknown sweep kind: " + s);
}

/// Default levels: blur lengths {5,10,15}; noise amplitude 0.3 (spanning
/// +-0.15); contrast (B,W) corner pairs; one-hot-ish white-balance tints.
inline SweepSpec default_sweep_spec(SweepKind kind) {
  SweepSpec s;
  s.kind = kind;
  switch (kind) {
    case SweepKind::blur:
      s.levels = {{5}, {10}, {15}};
      break;
    case SweepKind::noise:
      s.levels = {{0.3}};
      break;
    case SweepKind::contrast:
      s.levels = {{0.4, 1.4}, {0.4, 0.6}, {-0.4, 0.6}, {-0.4, 1.4}};
      break;
    case SweepKind::white_balance:
      s.levels = {{1.3, 0.7, 0.7}, {0.7, 1.3, 0.7}, {0.7, 0.7, 1.3}};
      break;
  }
  return s;
}

struct SweepRow {
  std::string level;
  double precision = 1, recall = 0, precision_code = 1, recall_code = 0;
};

namespace evaldetail {

inline std::string format_level(SweepKind kind, const std::vector<double>& lv) {
  char buf[96];
  switch (kind) {
    case SweepKind::blur:
      std::snprintf(buf, sizeof buf, "l=%g", lv.at(0));
      break;
    case SweepKind::noise:
      std::snprintf(buf, sizeof buf, "n=%g", lv.at(0));
      break;
    case SweepKind::contrast:
      std::snprintf(buf, sizeof buf, "B=%g;W=%g", lv.at(0), lv.at(1));
      break;
    case SweepKind::white_balance:
      std::snprintf(buf, sizeof buf, "wb=%g;%g;%g", lv.at(0), lv.at(1), lv.at(2));
      break;
  }
  return buf;
}

/// Applies one sweep augmentation at a fixed level. Blur angles come from the
/// caller's per-image stream. Identity levels reproduce the input bit-exactly
/// aside from the mandatory [0,1] clip.
template <typename T>
Tensor<T> apply_level(const Tensor<T>& img, SweepKind kind,
                      const std::vector<double>& lv, Rng& rng) {
  switch (kind) {
    case SweepKind::blur: {
      const double angle = rng.uniform_open(0.0, 2.0 * std::numbers::pi);
      return clip01(motion_blur(img, make_blur_kernel(angle, lv.at(0))));
    }
    case SweepKind::noise: {
      Rng noise_rng = rng;  // independent copy; draw count varies with size
      return add_noise(img, noise_rng, lv.at(0));
    }
    case SweepKind::contrast:
      return clip01(contrast(img, /*white=*/lv.at(1), /*black=*/lv.at(0)));
    case SweepKind::white_balance: {
      const double wb[3] = {lv.at(0), lv.at(1), lv.at(2)};
      return clip01(white_balance(img, wb));
    }
  }
  throw ConfigError("apply_level: unreachable");
}

}  // namespace evaldetail

/// Scores the dataset at every sweep level, with and without class gating.
/// Per-image randomness (blur angle, noise) comes from child streams of
/// `seed`, so rows are independent of evaluation order.
template <typename T>
std::vector<SweepRow> run_sweep(DetectorNet<T>& net, const std::vector<DatasetItem<T>>& items,
                                const SweepSpec& spec, int stride, int marker_size,
                                std::uint64_t seed, double threshold = 0.5,
                                int workers = 1) {
  check_config(!spec.levels.empty(), "run_sweep: no levels");
  std::vector<SweepRow> rows;
  for (std::size_t li = 0; li < spec.levels.size(); ++li) {
    const auto& lv = spec.levels[li];
    std::vector<std::vector<GroundTruth>> truths(items.size());
    std::vector<std::vector<Detection>> dets(items.size());
    parallel_for(items.size(), workers, [&](std::size_t i) {
      Rng rng = Rng::child(seed, li, i);
      Tensor<T> img = evaldetail::apply_level(items[i].image, spec.kind, lv, rng);
      truths[i] = {items[i].truth};
      dets[i] = detect_image(net, img, stride, marker_size, threshold);
    });
    SweepRow row;
    row.level = evaldetail::format_level(spec.kind, lv);
    const ScorePair plain = match_and_score(truths, dets, /*require_class=*/false);
    const ScorePair coded = match_and_score(truths, dets, /*require_class=*/true);
    row.precision = plain.precision;
    row.recall = plain.recall;
    row.precision_code = coded.precision;
    row.recall_code = coded.recall;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out) {
  out << "level,precision,recall,precision_code,recall_code\n";
  char buf[160];
  for (const SweepRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f\n", r.level.c_str(),
                  r.precision, r.recall, r.precision_code, r.recall_code);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// Confusion matrix (small-marker classification stress test)
// ---------------------------------------------------------------------------

struct ConfusionMatrix {
  int classes = 0;
  std::vector<long long> counts;  // row = true class, col = predicted
  long long at(int t, int p) const { return counts[std::size_t(t) * classes + p]; }
  /// Row-normalized rates; rows without samples stay all-zero.
  std::vector<double> normalized() const {
    std::vector<double> out(counts.size(), 0.0);
    for (int t = 0; t < classes; ++t) {
      long long row = 0;
      for (int p = 0; p < classes; ++p) row += at(t, p);
      if (row == 0) continue;
      for (int p = 0; p < classes; ++p)
        out[std::size_t(t) * classes + p] = double(at(t, p)) / double(row);
    }
    return out;
  }
};

/// Composes scenes whose markers are capped at max_marker_px on the long side
/// (scale_hi = max_marker_px / S) and tallies (true, predicted) pairs over
/// detections that hit IoU > 0.5 against the scene's footprint.
template <typename T>
ConfusionMatrix confusion_matrix(DetectorNet<T>& net, const MarkerBank<T>& bank,
                                 const BackgroundSet<T>& bgs, SceneConfig cfg,
                                 int max_marker_px, int num_scenes,
                                 std::uint64_t seed, double threshold = 0.5) {
  check_config(max_marker_px >= 8, "confusion_matrix: max_marker_px must be >= 8");
  check_config(num_scenes >= 1, "confusion_matrix: need at least one scene");
  cfg.warp.scale_hi = double(max_marker_px) / cfg.marker_size;
  cfg.warp.scale_lo = std::min(cfg.warp.scale_lo, cfg.warp.scale_hi * 0.5);

  ConfusionMatrix cm;
  cm.classes = cfg.num_classes;
  cm.counts.assign(std::size_t(cfg.num_classes) * cfg.num_classes, 0);
  for (int n = 0; n < num_scenes; ++n) {
    Rng rng = Rng::child(seed, 0x434f4e46ull, std::uint64_t(n));
    auto item = make_scene(bank, bgs, rng, cfg, /*train_mode=*/false);
    check(item.has_value(), "confusion_matrix: scene sampling exhausted retries");
    const Scene<T>& scene = item->first;
    const Quad truth = transform_corners<Quad>(scene.transform, cfg.marker_size);
    for (const Detection& d :
         detect_image(net, scene.image, cfg.stride, cfg.marker_size, threshold)) {
      if (quad_iou(d.corners, truth) > 0.5) {
        ++cm.counts[std::size_t(scene.class_id) * cfg.num_classes + d.class_id];
        break;  // one truth per scene; the top-scoring hit counts
      }
    }
  }
  return cm;
}

inline void write_confusion_csv(const ConfusionMatrix& cm, std::ostream& out) {
  out << "true_class";
  for (int p = 0; p < cm.classes; ++p) out << ",pred_" << p;
  out << "\n";
  const std::vector<double> norm = cm.normalized();
  char buf[48];
  for (int t = 0; t < cm.classes; ++t) {
    out << t;
    for (int p = 0; p < cm.classes; ++p) {
      std::snprintf(buf, sizeof buf, ",%.6f", norm[std::size_t(t) * cm.classes + p]);
      out << buf;
    }
    out << "\n";
  }
}

}  // namespace tagforge
