// tagforge: train a marker bank + detector, compose datasets, and run the
// detection/evaluation pipeline. Exit codes: 0 success, 2 usage or config
// error, 3 I/O failure, 4 internal invariant breach.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "tagforge/core/parallel.hpp"
#include "tagforge/eval/harness.hpp"
#include "tagforge/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace tagforge;

namespace {

int default_workers() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : int(n);
}

/// --seed wins; otherwise E2E_SEED; otherwise fallback.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag,
                           std::uint64_t fallback) {
  if (flag) return *flag;
  if (const char* env = std::getenv("E2E_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError("E2E_SEED is not an unsigned integer");
    }
  }
  return fallback;
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config file is not valid JSON: ") + e.what());
  }
  return j;
}

/// Input loading in non-train commands: unreadable input is a usage error.
template <typename Fn>
auto as_usage(Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
}

Trainer<float> restore(const std::string& checkpoint_dir) {
  return as_usage([&] {
    CheckpointData data = load_checkpoint(checkpoint_dir);
    TrainConfig cfg = train_config_from_json(data.config);
    cfg.resume = checkpoint_dir;
    return Trainer<float>(cfg);
  });
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << text;
  if (!f) throw IoError("write failed: " + path);
}

AugmentRanges clean_ranges() {
  AugmentRanges a;
  a.blur_max = 0.0;
  a.wb_lo = a.wb_hi = 1.0;
  a.white_lo = a.white_hi = 1.0;
  a.black_lo = a.black_hi = 0.0;
  a.noise = 0.0;
  return a;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<long long> steps;
  std::optional<int> batch;
  std::optional<int> checkpoint_every;
  std::optional<double> lr;
  std::optional<double> gen_lr_scale;
  std::string out_dir;
  std::string resume;
  std::string background_dir;
};

int cmd_train(const TrainArgs& a) {
  nlohmann::json j = a.config_path.empty() ? nlohmann::json::object()
                                           : read_json_file(a.config_path);
  const bool config_has_seed = j.contains("seed");
  TrainConfig cfg = train_config_from_json(j);
  if (!config_has_seed) cfg.seed = resolve_seed(a.seed, cfg.seed);
  if (a.seed) cfg.seed = *a.seed;
  if (a.steps) cfg.steps = *a.steps;
  if (a.batch) cfg.batch = *a.batch;
  if (a.checkpoint_every) cfg.checkpoint_every = *a.checkpoint_every;
  if (a.lr) cfg.lr = *a.lr;
  if (a.gen_lr_scale) cfg.gen_lr_scale = *a.gen_lr_scale;
  if (!a.out_dir.empty()) cfg.out_dir = a.out_dir;
  if (!a.resume.empty()) cfg.resume = a.resume;
  if (!a.background_dir.empty()) cfg.background_dir = a.background_dir;
  check_config(cfg.batch >= 1 && cfg.steps >= 0, "train: bad overrides");

  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw IoError("cannot create out dir: " + cfg.out_dir);
  write_text((fs::path(cfg.out_dir) / "config.json").string(),
             train_config_to_json(cfg).dump(2) + "\n");

  Trainer<float> trainer(cfg);
  const auto log_path = fs::path(cfg.out_dir) / "train_log.jsonl";
  std::ofstream log(log_path, trainer.step() > 0 ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot open training log: " + log_path.string());

  std::fprintf(stderr, "training: %lld steps, batch %d, seed %llu, out %s\n",
               cfg.steps, cfg.batch, (unsigned long long)cfg.seed,
               cfg.out_dir.c_str());
  trainer.run(log, [&](std::uint64_t step, const LossReport& r) {
    if (step % 25 == 0 || step == std::uint64_t(cfg.steps))
      std::fprintf(stderr, "step %llu  total %.4f  loc %.4f  class %.4f  proj %.4f\n",
                   (unsigned long long)step, r.total, r.l_loc, r.l_class, r.l_proj);
  });
  std::cout << nlohmann::json{{"command", "train"},
                              {"seed", cfg.seed},
                              {"steps", cfg.steps},
                              {"checkpoint", trainer.checkpoint_dir()}}
                   .dump()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// compose
// ---------------------------------------------------------------------------

int cmd_compose(const std::string& checkpoint, const std::string& config_path,
                const std::string& out_dir, int count,
                std::optional<std::uint64_t> seed_flag, bool clean, int workers) {
  check_config(count >= 1, "compose: --n must be >= 1");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create out dir: " + out_dir);

  TrainConfig cfg;
  if (!checkpoint.empty()) {
    CheckpointData data = as_usage([&] { return load_checkpoint(checkpoint); });
    cfg = train_config_from_json(data.config);
    cfg.resume = checkpoint;
  } else if (!config_path.empty()) {
    cfg = train_config_from_json(read_json_file(config_path));
  }
  cfg.seed = resolve_seed(seed_flag, cfg.seed);
  Trainer<float> trainer(cfg);
  SceneConfig sc = trainer.scene_config();
  if (clean) sc.aug = clean_ranges();

  parallel_for(std::size_t(count), workers, [&](std::size_t n) {
    Rng rng = Rng::child(cfg.seed, 0x7363656eull /* scene stream */, n);
    auto item = make_scene(trainer.bank(), trainer.backgrounds(), rng, sc,
                           /*train_mode=*/false);
    check(item.has_value(), "compose: scene sampling exhausted retries");
    char name[32];
    std::snprintf(name, sizeof name, "scene_%05zu.png", n);
    write_scene((fs::path(out_dir) / name).string(), item->first, sc.marker_size);
  });
  std::cout << nlohmann::json{{"command", "compose"},
                              {"seed", cfg.seed},
                              {"count", count},
                              {"clean", clean},
                              {"out", out_dir}}
                   .dump()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// export-markers
// ---------------------------------------------------------------------------

int cmd_export_markers(const std::string& checkpoint, const std::string& config_path,
                       const std::string& out_dir,
                       std::optional<std::uint64_t> seed_flag) {
  TrainConfig cfg;
  if (!checkpoint.empty()) {
    CheckpointData data = as_usage([&] { return load_checkpoint(checkpoint); });
    cfg = train_config_from_json(data.config);
    cfg.resume = checkpoint;
  } else if (!config_path.empty()) {
    cfg = train_config_from_json(read_json_file(config_path));
  }
  cfg.seed = resolve_seed(seed_flag, cfg.seed);
  Trainer<float> trainer(cfg);
  export_markers(trainer.bank(), out_dir);
  std::cout << nlohmann::json{{"command", "export-markers"},
                              {"classes", cfg.classes},
                              {"out", out_dir}}
                   .dump()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// detect
// ---------------------------------------------------------------------------

/// Pads an {H,W,3} image on the bottom/right to multiples of `stride` by
/// replicating edge pixels, so grid coordinates of the original are unchanged.
Tensor<float> pad_to_stride(const Tensor<float>& img, int stride, int* pad_bottom,
                            int* pad_right) {
  const int H = img.dim(0), W = img.dim(1), C = img.dim(2);
  const int H2 = (H + stride - 1) / stride * stride;
  const int W2 = (W + stride - 1) / stride * stride;
  *pad_bottom = H2 - H;
  *pad_right = W2 - W;
  if (H2 == H && W2 == W) return img;
  Tensor<float> out({H2, W2, C});
  const float* src = img.data();
  float* dst = out.data();
  for (int y = 0; y < H2; ++y) {
    const int sy = y < H ? y : H - 1;
    for (int x = 0; x < W2; ++x) {
      const int sx = x < W ? x : W - 1;
      for (int c = 0; c < C; ++c)
        dst[idx3(y, x, c, W2, C)] = src[idx3(sy, sx, c, W, C)];
    }
  }
  return out;
}

int cmd_detect(const std::string& checkpoint, const std::vector<std::string>& images,
               double threshold, const std::string& out_path) {
  Trainer<float> trainer = restore(checkpoint);
  const TrainConfig& cfg = trainer.config();

  nlohmann::json results = nlohmann::json::array();
  for (const std::string& path : images) {
    Tensor<float> img = as_usage([&] { return load_image<float>(path); });
    int pb = 0, pr = 0;
    Tensor<float> padded = pad_to_stride(img, cfg.stride, &pb, &pr);
    int dropped = 0;
    std::vector<Detection> dets = detect_image(trainer.net(), padded, cfg.stride,
                                               cfg.marker_size, threshold, &dropped);
    nlohmann::json entry;
    entry["image"] = path;
    entry["width"] = img.dim(1);
    entry["height"] = img.dim(0);
    if (pb || pr) entry["padding"] = {{"bottom", pb}, {"right", pr}};
    entry["dropped_nonfinite"] = dropped;
    entry["detections"] = detections_to_json(dets);
    results.push_back(std::move(entry));
  }
  const std::string text = results.dump(2) + "\n";
  if (out_path.empty())
    std::cout << text;
  else
    write_text(out_path, text);
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

int cmd_evaluate(const std::string& checkpoint, const std::string& dataset,
                 double threshold, int workers) {
  Trainer<float> trainer = restore(checkpoint);
  const TrainConfig& cfg = trainer.config();
  auto items = as_usage([&] { return load_dataset<float>(dataset); });

  std::vector<std::vector<GroundTruth>> truths(items.size());
  std::vector<std::vector<Detection>> dets(items.size());
  parallel_for(items.size(), workers, [&](std::size_t i) {
    truths[i] = {items[i].truth};
    dets[i] = detect_image(trainer.net(), items[i].image, cfg.stride,
                           cfg.marker_size, threshold);
  });
  const ScorePair plain = match_and_score(truths, dets, /*require_class=*/false);
  const ScorePair coded = match_and_score(truths, dets, /*require_class=*/true);
  std::cout << nlohmann::json{{"command", "evaluate"},
                              {"dataset", dataset},
                              {"images", items.size()},
                              {"threshold", threshold},
                              {"precision", plain.precision},
                              {"recall", plain.recall},
                              {"precision_code", coded.precision},
                              {"recall_code", coded.recall}}
                   .dump()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

std::vector<double> parse_tuple(const std::string& s) {
  std::vector<double> vals;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    std::size_t next = s.find(':', pos);
    const std::string tok = s.substr(pos, next == std::string::npos ? next : next - pos);
    try {
      vals.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw ConfigError("sweep: bad level tuple '" + s + "'");
    }
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  return vals;
}

int cmd_sweep(const std::string& checkpoint, const std::string& dataset,
              const std::string& kind_str, const std::vector<std::string>& level_strs,
              const std::string& out_csv, std::optional<std::uint64_t> seed_flag,
              double threshold, int workers) {
  Trainer<float> trainer = restore(checkpoint);
  const TrainConfig& cfg = trainer.config();
  auto items = as_usage([&] { return load_dataset<float>(dataset); });

  SweepSpec spec = default_sweep_spec(sweep_kind_from_string(kind_str));
  if (!level_strs.empty()) {
    spec.levels.clear();
    for (const auto& s : level_strs) spec.levels.push_back(parse_tuple(s));
  }
  const std::uint64_t seed = resolve_seed(seed_flag, cfg.seed);
  auto rows = run_sweep(trainer.net(), items, spec, cfg.stride, cfg.marker_size,
                        seed, threshold, workers);

  std::ostringstream csv;
  write_sweep_csv(rows, csv);
  if (out_csv.empty())
    std::cout << csv.str();
  else
    write_text(out_csv, csv.str());
  std::cerr << nlohmann::json{{"command", "sweep"},
                              {"kind", kind_str},
                              {"seed", seed},
                              {"images", items.size()},
                              {"out", out_csv.empty() ? "-" : out_csv}}
                   .dump()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// confusion
// ---------------------------------------------------------------------------

int cmd_confusion(const std::string& checkpoint, int num_scenes, int max_marker_px,
                  std::optional<std::uint64_t> seed_flag, double threshold,
                  const std::string& out_csv) {
  Trainer<float> trainer = restore(checkpoint);
  const TrainConfig& cfg = trainer.config();
  const std::uint64_t seed = resolve_seed(seed_flag, cfg.seed);
  ConfusionMatrix cm =
      confusion_matrix(trainer.net(), trainer.bank(), trainer.backgrounds(),
                       trainer.scene_config(), max_marker_px, num_scenes, seed,
                       threshold);
  std::ostringstream csv;
  write_confusion_csv(cm, csv);
  if (out_csv.empty())
    std::cout << csv.str();
  else
    write_text(out_csv, csv.str());
  std::cerr << nlohmann::json{{"command", "confusion"},
                              {"seed", seed},
                              {"scenes", num_scenes},
                              {"max_marker_px", max_marker_px}}
                   .dump()
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tagforge: learnable fiducial markers with a joint detector"};
  app.require_subcommand(1);

  // train
  TrainArgs ta;
  auto* train = app.add_subcommand("train", "optimize the marker bank and detector");
  train->add_option("--config", ta.config_path, "JSON config file");
  train->add_option("--seed", ta.seed, "run seed (overrides config and E2E_SEED)");
  train->add_option("--steps", ta.steps, "number of optimization steps");
  train->add_option("--batch", ta.batch, "batch size");
  train->add_option("--checkpoint-every", ta.checkpoint_every, "checkpoint period");
  train->add_option("--lr", ta.lr, "detector learning rate");
  train->add_option("--gen-lr-scale", ta.gen_lr_scale, "marker bank lr multiplier");
  train->add_option("--out", ta.out_dir, "output directory");
  train->add_option("--resume", ta.resume, "checkpoint directory to continue from");
  train->add_option("--background-dir", ta.background_dir,
                    "background image directory (default: procedural textures)");

  // compose
  std::string co_ckpt, co_config, co_out;
  int co_n = 100, co_workers = default_workers();
  std::optional<std::uint64_t> co_seed;
  bool co_clean = false;
  auto* compose = app.add_subcommand("compose", "emit scene PNGs + JSON sidecars");
  compose->add_option("--checkpoint", co_ckpt, "checkpoint dir (marker bank source)");
  compose->add_option("--config", co_config, "JSON config (when no checkpoint)");
  compose->add_option("--out", co_out, "output directory")->required();
  compose->add_option("--n", co_n, "number of scenes");
  compose->add_option("--seed", co_seed, "scene stream seed");
  compose->add_flag("--clean", co_clean, "skip augmentation (evaluation datasets)");
  compose->add_option("--workers", co_workers, "parallel scene workers");

  // export-markers
  std::string em_ckpt, em_config, em_out;
  std::optional<std::uint64_t> em_seed;
  auto* exportm = app.add_subcommand("export-markers", "write marker images as PNG");
  exportm->add_option("--checkpoint", em_ckpt, "checkpoint dir");
  exportm->add_option("--config", em_config, "JSON config (when no checkpoint)");
  exportm->add_option("--out", em_out, "output directory")->required();
  exportm->add_option("--seed", em_seed, "bank seed (when no checkpoint)");

  // detect
  std::string de_ckpt, de_out;
  std::vector<std::string> de_images;
  double de_thresh = 0.5;
  auto* detect = app.add_subcommand("detect", "decode detections from images");
  detect->add_option("--checkpoint", de_ckpt, "checkpoint dir")->required();
  detect->add_option("images", de_images, "input images")->required();
  detect->add_option("--threshold", de_thresh, "peak threshold");
  detect->add_option("--out", de_out, "output JSON path (default stdout)");

  // evaluate
  std::string ev_ckpt, ev_dataset;
  double ev_thresh = 0.5;
  int ev_workers = default_workers();
  auto* evaluate = app.add_subcommand("evaluate", "precision/recall on a dataset");
  evaluate->add_option("--checkpoint", ev_ckpt, "checkpoint dir")->required();
  evaluate->add_option("--dataset", ev_dataset, "dataset directory")->required();
  evaluate->add_option("--threshold", ev_thresh, "peak threshold");
  evaluate->add_option("--workers", ev_workers, "parallel evaluation workers");

  // sweep
  std::string sw_ckpt, sw_dataset, sw_kind = "blur", sw_out;
  std::vector<std::string> sw_levels;
  std::optional<std::uint64_t> sw_seed;
  double sw_thresh = 0.5;
  int sw_workers = default_workers();
  auto* sweep = app.add_subcommand("sweep", "robustness sweep CSV over corruption levels");
  sweep->add_option("--checkpoint", sw_ckpt, "checkpoint dir")->required();
  sweep->add_option("--dataset", sw_dataset, "dataset directory")->required();
  sweep->add_option("--kind", sw_kind, "blur | noise | contrast | wb");
  sweep->add_option("--level", sw_levels,
                    "level tuple, ':'-separated (repeatable; default per kind)");
  sweep->add_option("--out", sw_out, "CSV path (default stdout)");
  sweep->add_option("--seed", sw_seed, "corruption seed");
  sweep->add_option("--threshold", sw_thresh, "peak threshold");
  sweep->add_option("--workers", sw_workers, "parallel evaluation workers");

  // confusion
  std::string cf_ckpt, cf_out;
  int cf_n = 200, cf_px = 32;
  std::optional<std::uint64_t> cf_seed;
  double cf_thresh = 0.5;
  auto* confusion =
      app.add_subcommand("confusion", "class confusion at capped marker size");
  confusion->add_option("--checkpoint", cf_ckpt, "checkpoint dir")->required();
  confusion->add_option("--n", cf_n, "number of scenes");
  confusion->add_option("--max-marker-px", cf_px, "marker long-side cap in px");
  confusion->add_option("--seed", cf_seed, "scene seed");
  confusion->add_option("--threshold", cf_thresh, "peak threshold");
  confusion->add_option("--out", cf_out, "CSV path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*compose)
      return cmd_compose(co_ckpt, co_config, co_out, co_n, co_seed, co_clean, co_workers);
    if (*exportm) return cmd_export_markers(em_ckpt, em_config, em_out, em_seed);
    if (*detect) return cmd_detect(de_ckpt, de_images, de_thresh, de_out);
    if (*evaluate) return cmd_evaluate(ev_ckpt, ev_dataset, ev_thresh, ev_workers);
    if (*sweep)
      return cmd_sweep(sw_ckpt, sw_dataset, sw_kind, sw_levels, sw_out, sw_seed,
                       sw_thresh, sw_workers);
    if (*confusion)
      return cmd_confusion(cf_ckpt, cf_n, cf_px, cf_seed, cf_thresh, cf_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 4;
  }
  return 2;
}
