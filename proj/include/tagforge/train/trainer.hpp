#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tagforge/composer/composer.hpp"
#include "tagforge/core/adam.hpp"
#include "tagforge/core/checkpoint.hpp"
#include "tagforge/detector/net.hpp"
#include "tagforge/generator/marker_bank.hpp"
#include "tagforge/loss/loss.hpp"

namespace tagforge {

/// Full training run description. JSON schema mirrors the field names; nested
/// groups are "augmentation", "warp", "texture", "loss", "net". Unknown keys
/// are rejected so config typos fail loudly.
struct TrainConfig {
  int img_size = 160;
  int marker_size = 32;
  int classes = 6;
  int stride = 8;
  int batch = 8;
  double lr = 2e-5;
  double weight_decay = 1e-4;
  double gen_lr_scale = 1000.0;
  long long steps = 1000;
  std::uint64_t seed = 0;
  int checkpoint_every = 1000;
  std::string out_dir = "run";
  std::string resume;          // checkpoint directory to continue from
  std::string background_dir;  // empty -> procedural textures
  AugmentRanges aug;
  WarpRanges warp;
  TextureConfig texture;
  LossConfig loss;
  NetConfig net;
};

namespace traindetail {

inline void reject_unknown(const nlohmann::json& j,
                           std::initializer_list<const char*> known,
                           const std::string& scope) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known)
      if (key == k) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("unknown config key: " + scope + key);
  }
}

template <typename V>
void get_to(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) {
    try {
      j.at(key).get_to(out);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("config key has wrong type: ") + key);
    }
  }
}

}  // namespace traindetail

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  using traindetail::get_to;
  traindetail::reject_unknown(
      j,
      {"img_size", "marker_size", "classes", "stride", "batch", "lr",
       "weight_decay", "gen_lr_scale", "steps", "seed", "checkpoint_every",
       "out_dir", "resume", "background_dir", "augmentation", "warp", "texture",
       "loss", "net"},
      "");
  TrainConfig c;
  get_to(j, "img_size", c.img_size);
  get_to(j, "marker_size", c.marker_size);
  get_to(j, "classes", c.classes);
  get_to(j, "stride", c.stride);
  get_to(j, "batch", c.batch);
  get_to(j, "lr", c.lr);
  get_to(j, "weight_decay", c.weight_decay);
  get_to(j, "gen_lr_scale", c.gen_lr_scale);
  get_to(j, "steps", c.steps);
  get_to(j, "seed", c.seed);
  get_to(j, "checkpoint_every", c.checkpoint_every);
  get_to(j, "out_dir", c.out_dir);
  get_to(j, "resume", c.resume);
  get_to(j, "background_dir", c.background_dir);
  if (j.contains("augmentation")) {
    const auto& a = j.at("augmentation");
    traindetail::reject_unknown(a,
                                {"blur_max", "wb_lo", "wb_hi", "white_lo",
                                 "white_hi", "black_lo", "black_hi", "noise"},
                                "augmentation.");
    get_to(a, "blur_max", c.aug.blur_max);
    get_to(a, "wb_lo", c.aug.wb_lo);
    get_to(a, "wb_hi", c.aug.wb_hi);
    get_to(a, "white_lo", c.aug.white_lo);
    get_to(a, "white_hi", c.aug.white_hi);
    get_to(a, "black_lo", c.aug.black_lo);
    get_to(a, "black_hi", c.aug.black_hi);
    get_to(a, "noise", c.aug.noise);
  }
  if (j.contains("warp")) {
    const auto& w = j.at("warp");
    traindetail::reject_unknown(
        w, {"scale_lo", "scale_hi", "shear_max", "proj_max"}, "warp.");
    get_to(w, "scale_lo", c.warp.scale_lo);
    get_to(w, "scale_hi", c.warp.scale_hi);
    get_to(w, "shear_max", c.warp.shear_max);
    get_to(w, "proj_max", c.warp.proj_max);
  }
  if (j.contains("texture")) {
    const auto& t = j.at("texture");
    traindetail::reject_unknown(t, {"octaves", "lo", "hi"}, "texture.");
    get_to(t, "octaves", c.texture.octaves);
    get_to(t, "lo", c.texture.lo);
    get_to(t, "hi", c.texture.hi);
  }
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    traindetail::reject_unknown(l, {"a", "b", "K", "eps"}, "loss.");
    get_to(l, "a", c.loss.a);
    get_to(l, "b", c.loss.b);
    get_to(l, "K", c.loss.K);
    get_to(l, "eps", c.loss.eps);
  }
  if (j.contains("net")) {
    const auto& n = j.at("net");
    traindetail::reject_unknown(n,
                                {"width1", "width2", "width3", "blocks",
                                 "head_width", "loc_bias_init", "head_weight_scale"},
                                "net.");
    get_to(n, "width1", c.net.width1);
    get_to(n, "width2", c.net.width2);
    get_to(n, "width3", c.net.width3);
    get_to(n, "blocks", c.net.blocks);
    get_to(n, "head_width", c.net.head_width);
    get_to(n, "loc_bias_init", c.net.loc_bias_init);
    get_to(n, "head_weight_scale", c.net.head_weight_scale);
  }

  check_config(c.img_size > 0 && c.stride > 0 && c.img_size % c.stride == 0,
               "config: img_size must be a positive multiple of stride");
  check_config(c.marker_size > 0, "config: marker_size must be positive");
  check_config(c.classes >= 1, "config: classes must be >= 1");
  check_config(c.batch >= 1, "config: batch must be >= 1");
  check_config(c.steps >= 0, "config: steps must be >= 0");
  check_config(c.lr > 0 && c.gen_lr_scale > 0, "config: learning rates must be positive");
  check_config(c.loss.a > 0 && c.loss.b > 0 && c.loss.K >= 1,
               "config: loss constants out of range");
  check_config(c.aug.blur_max >= 0 && c.aug.noise >= 0,
               "config: augmentation amplitudes must be nonnegative");
  check_config(c.warp.scale_lo > 0 && c.warp.scale_hi > c.warp.scale_lo,
               "config: warp scale range must be positive and increasing");
  c.net.num_classes = c.classes;
  return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["img_size"] = c.img_size;
  j["marker_size"] = c.marker_size;
  j["classes"] = c.classes;
  j["stride"] = c.stride;
  j["batch"] = c.batch;
  j["lr"] = c.lr;
  j["weight_decay"] = c.weight_decay;
  j["gen_lr_scale"] = c.gen_lr_scale;
  j["steps"] = c.steps;
  j["seed"] = c.seed;
  j["checkpoint_every"] = c.checkpoint_every;
  j["out_dir"] = c.out_dir;
  j["resume"] = c.resume;
  j["background_dir"] = c.background_dir;
  j["augmentation"] = {{"blur_max", c.aug.blur_max}, {"wb_lo", c.aug.wb_lo},
                       {"wb_hi", c.aug.wb_hi},       {"white_lo", c.aug.white_lo},
                       {"white_hi", c.aug.white_hi}, {"black_lo", c.aug.black_lo},
                       {"black_hi", c.aug.black_hi}, {"noise", c.aug.noise}};
  j["warp"] = {{"scale_lo", c.warp.scale_lo},
               {"scale_hi", c.warp.scale_hi},
               {"shear_max", c.warp.shear_max},
               {"proj_max", c.warp.proj_max}};
  j["texture"] = {{"octaves", c.texture.octaves}, {"lo", c.texture.lo}, {"hi", c.texture.hi}};
  j["loss"] = {{"a", c.loss.a}, {"b", c.loss.b}, {"K", c.loss.K}, {"eps", c.loss.eps}};
  j["net"] = {{"width1", c.net.width1},
              {"width2", c.net.width2},
              {"width3", c.net.width3},
              {"blocks", c.net.blocks},
              {"head_width", c.net.head_width},
              {"loc_bias_init", c.net.loc_bias_init},
              {"head_weight_scale", c.net.head_weight_scale}};
  return j;
}

/// Owns the whole training state: net, bank, optimizer, background source.
/// Initialization and data streams are namespaced children of the config
/// seed, so two sequential runs with one config are bit-identical.
template <typename T>
class Trainer {
 public:
  explicit Trainer(const TrainConfig& config)
      : cfg_(config),
        bank_([&] {
          Rng r = Rng::child(cfg_.seed, kBankStream, 0);
          return MarkerBank<T>(cfg_.marker_size, cfg_.classes, r);
        }()),
        net_([&] {
          NetConfig nc = cfg_.net;
          nc.num_classes = cfg_.classes;
          Rng r = Rng::child(cfg_.seed, kNetStream, 0);
          return DetectorNet<T>(nc, r);
        }()),
        bgs_(BackgroundSet<T>::load(cfg_.background_dir, cfg_.img_size,
                                    /*procedural_fallback=*/true, cfg_.texture)) {
    bank_.params.learning_rate_scale = T(cfg_.gen_lr_scale);
    adam_.lr = T(cfg_.lr);
    adam_.weight_decay = T(cfg_.weight_decay);
    params_ = net_.params();
    params_.push_back({"bank.w", bank_.params.weights, bank_.params.learning_rate_scale});
    if (!cfg_.resume.empty()) load(cfg_.resume);
  }

  std::uint64_t step() const { return step_; }
  const TrainConfig& config() const { return cfg_; }
  DetectorNet<T>& net() { return net_; }
  MarkerBank<T>& bank() { return bank_; }
  const BackgroundSet<T>& backgrounds() const { return bgs_; }

  SceneConfig scene_config() const {
    SceneConfig sc;
    sc.img_size = cfg_.img_size;
    sc.marker_size = cfg_.marker_size;
    sc.num_classes = cfg_.classes;
    sc.stride = cfg_.stride;
    sc.warp = cfg_.warp;
    sc.aug = cfg_.aug;
    return sc;
  }

  /// One optimization step; batch index = current step (0-based).
  LossReport train_step() {
    Batch<T> batch = make_batch(bank_, bgs_, cfg_.seed, step_, cfg_.batch,
                                scene_config(), /*train_mode=*/true);
    Tensor<T> out = net_.forward(batch.images, /*training=*/true);
    LossReport report;
    Tensor<T> total =
        compute_loss(out, batch.targets, cfg_.marker_size, cfg_.loss, &report);
    backward(total);
    adam_step(adam_, params_);
    ++step_;
    return report;
  }

  /// Runs until cfg.steps, appending one JSON line per step to the log and
  /// checkpointing every checkpoint_every steps plus at the end.
  void run(std::ostream& log,
           const std::function<void(std::uint64_t, const LossReport&)>& progress = {}) {
    while (step_ < std::uint64_t(cfg_.steps)) {
      const LossReport r = train_step();
      nlohmann::json line = {{"step", step_},
                             {"l_loc", r.l_loc},
                             {"l_class", r.l_class},
                             {"l_proj", r.l_proj},
                             {"total", r.total}};
      log << line.dump() << "\n";
      if (progress) progress(step_, r);
      if (cfg_.checkpoint_every > 0 && step_ % std::uint64_t(cfg_.checkpoint_every) == 0 &&
          step_ < std::uint64_t(cfg_.steps))
        save(checkpoint_dir());
    }
    log.flush();
    save(checkpoint_dir());
  }

  std::string checkpoint_dir() const {
    return (std::filesystem::path(cfg_.out_dir) / "checkpoint").string();
  }

  /// Checkpoint = net state + bank + Adam moments, keyed by stable names.
  void save(const std::string& dir) {
    auto tensors = net_.state_tensors();
    tensors.push_back({"bank.w", &bank_.params.weights});
    std::vector<Tensor<T>> moment_holders;
    moment_holders.reserve(params_.size() * 2);
    for (auto& p : params_) {
      auto mi = adam_.first_moment.find(p.name);
      auto vi = adam_.second_moment.find(p.name);
      if (mi == adam_.first_moment.end() || vi == adam_.second_moment.end())
        continue;  // pre-first-step save: moments not yet allocated
      moment_holders.push_back(Tensor<T>({int(mi->second.size())}, mi->second));
      tensors.push_back({"adam.m." + p.name, &moment_holders.back()});
      moment_holders.push_back(Tensor<T>({int(vi->second.size())}, vi->second));
      tensors.push_back({"adam.v." + p.name, &moment_holders.back()});
    }
    save_checkpoint(dir, tensors, step_, train_config_to_json(cfg_));
  }

  void load(const std::string& dir) {
    CheckpointData data = load_checkpoint(dir);
    auto tensors = net_.state_tensors();
    tensors.push_back({"bank.w", &bank_.params.weights});
    load_into(data, tensors);
    for (auto& p : params_) {
      auto mi = data.tensors.find("adam.m." + p.name);
      auto vi = data.tensors.find("adam.v." + p.name);
      if (mi == data.tensors.end() || vi == data.tensors.end()) continue;
      auto& m = adam_.first_moment[p.name];
      auto& v = adam_.second_moment[p.name];
      m.assign(mi->second.second.begin(), mi->second.second.end());
      v.assign(vi->second.second.begin(), vi->second.second.end());
    }
    step_ = data.step_count;
    adam_.step_count = long(step_);
  }

  static constexpr std::uint64_t kBankStream = 0x74662062616e6bull;  // bank init
  static constexpr std::uint64_t kNetStream = 0x7466206e657477ull;   // net init

 private:
  TrainConfig cfg_;
  MarkerBank<T> bank_;
  DetectorNet<T> net_;
  BackgroundSet<T> bgs_;
  AdamState<T> adam_;
  std::vector<NamedParam<T>> params_;
  std::uint64_t step_ = 0;
};

}  // namespace tagforge
