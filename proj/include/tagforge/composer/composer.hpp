#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tagforge/augment/augment.hpp"
#include "tagforge/core/ops.hpp"
#include "tagforge/core/rng.hpp"
#include "tagforge/generator/marker_bank.hpp"
#include "tagforge/geometry/quad.hpp"
#include "tagforge/geometry/transform.hpp"
#include "tagforge/geometry/warp.hpp"
#include "tagforge/io/image_io.hpp"

namespace tagforge {

/// Procedural value-noise texture parameters. Defaults give full-range
/// 4-octave noise; configs may soften the range or drop octaves.
struct TextureConfig {
  int octaves = 4;
  double lo = 0.0, hi = 1.0;  // output = lo + (hi-lo) * noise
};

/// Multi-octave value noise, channels independent. Octave o uses a lattice of
/// (4*2^o + 1)^2 uniforms, bilinearly upsampled; amplitudes halve per octave.
template <typename T>
Tensor<T> procedural_texture(Rng& rng, int img_size, const TextureConfig& tc = {}) {
  check_config(tc.octaves >= 1, "procedural_texture: need at least one octave");
  Tensor<T> out({img_size, img_size, 3});
  T* po = out.data();
  std::vector<double> lattice;
  for (int c = 0; c < 3; ++c) {
    double amp = 1.0, total_amp = 0.0;
    std::vector<double> acc(std::size_t(img_size) * img_size, 0.0);
    for (int o = 0; o < tc.octaves; ++o) {
      const int n = 4 << o;
      lattice.resize(std::size_t(n + 1) * (n + 1));
      for (double& v : lattice) v = rng.uniform();
      for (int y = 0; y < img_size; ++y) {
        const double fy = double(y) * n / img_size;
        const int y0 = int(fy);
        const double wy = fy - y0;
        for (int x = 0; x < img_size; ++x) {
          const double fx = double(x) * n / img_size;
          const int x0 = int(fx);
          const double wx = fx - x0;
          const double* row = lattice.data() + std::size_t(y0) * (n + 1) + x0;
          const double top = row[0] * (1 - wx) + row[1] * wx;
          const double bot = row[n + 1] * (1 - wx) + row[n + 2] * wx;
          acc[std::size_t(y) * img_size + x] += amp * (top * (1 - wy) + bot * wy);
        }
      }
      total_amp += amp;
      amp *= 0.5;
    }
    for (int y = 0; y < img_size; ++y)
      for (int x = 0; x < img_size; ++x)
        po[idx3(y, x, c, img_size, 3)] =
            T(tc.lo + (tc.hi - tc.lo) *
                          (acc[std::size_t(y) * img_size + x] / total_amp));
  }
  return out;
}

/// Background source: a directory of images resized to img_size, or (when the
/// directory is empty/absent and the fallback is enabled) fresh procedural
/// textures per request.
template <typename T>
class BackgroundSet {
 public:
  static BackgroundSet load(const std::string& dir, int img_size,
                            bool procedural_fallback, const TextureConfig& tc = {}) {
    namespace fs = std::filesystem;
    BackgroundSet set;
    set.img_size_ = img_size;
    set.texture_ = tc;
    if (!dir.empty() && fs::is_directory(dir)) {
      std::vector<std::string> paths;
      for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file()) paths.push_back(e.path().string());
      std::sort(paths.begin(), paths.end());
      for (const auto& p : paths) {
        try {
          Tensor<T> img = load_image<T>(p);
          set.images_.push_back(resize_bilinear(img, img_size, img_size));
        } catch (const IoError&) {
          // skip undecodable files; the emptiness check below still applies
        }
      }
    }
    check_config(!set.images_.empty() || procedural_fallback,
                 "backgrounds: no decodable images and procedural fallback disabled");
    return set;
  }

  bool procedural() const { return images_.empty(); }
  std::size_t count() const { return images_.size(); }
  int img_size() const { return img_size_; }

  Tensor<T> sample(Rng& rng) const {
    if (procedural()) return procedural_texture<T>(rng, img_size_, texture_);
    return images_[std::size_t(rng.uniform_int(int(images_.size())))];
  }

 private:
  std::vector<Tensor<T>> images_;
  int img_size_ = 0;
  TextureConfig texture_;
};

/// out = bg * (1 - m) + warp(marker, T), where m is the warped all-ones
/// footprint (fractional coverage at edges). Only the marker term carries
/// gradients; bg and m are constants of the scene.
template <typename T>
Tensor<T> superimpose(const Tensor<T>& bg, const Tensor<T>& marker,
                      const ProjectiveTransform& t) {
  check(bg.rank() == 3 && bg.dim(2) == 3, "superimpose: background must be {H,W,3}");
  check(bg.dim(0) == bg.dim(1), "superimpose: background must be square");
  check(marker.rank() == 3 && marker.dim(2) == 1,
        "superimpose: marker must be {S,S,1}");
  const int img = bg.dim(0), S = marker.dim(0);

  Tensor<T> ones({S, S, 1});
  for (std::size_t i = 0; i < ones.size(); ++i) ones.data()[i] = T(1);
  Tensor<T> coverage = warp_image(ones, t, img);

  Tensor<T> base({img, img, 3});
  const T* pb = bg.data();
  const T* pm = coverage.data();
  T* po = base.data();
  for (int y = 0; y < img; ++y)
    for (int x = 0; x < img; ++x) {
      const T keep = T(1) - pm[idx3(y, x, 0, img, 1)];
      for (int c = 0; c < 3; ++c)
        po[idx3(y, x, c, img, 3)] = pb[idx3(y, x, c, img, 3)] * keep;
    }

  Tensor<T> warped = replicate_channels(warp_image(marker, t, img), 3);
  return add(base, warped);
}

/// The loc template: {S,S,1} image of e^(-r / (S/2)), r the distance to the
/// marker center. At the paper's S=128 this is e^(-r/64).
template <typename T>
Tensor<T> exponential_image(int S) {
  Tensor<T> img({S, S, 1});
  T* p = img.data();
  const double half = S / 2.0;
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double r = std::hypot(x - half, y - half);
      p[idx3(y, x, 0, S, 1)] = T(std::exp(-r / half));
    }
  return img;
}

/// Ground truth on the G x G output grid. Cell (i,j) corresponds to image
/// pixel (stride*i, stride*j); maps are built by warping marker-space
/// templates with D*T, D = diag(1/stride, 1/stride, 1).
template <typename T>
struct TargetEncoding {
  Tensor<T> loc;           // {G,G} in [0,1]
  Tensor<T> class_onehot;  // {G,G,C}, rows one-hot on mask
  Tensor<T> proj;          // {G,G,6} = (p1,p2,p4,p5,p7,p8) on mask
  Tensor<T> mask;          // {G,G} in {0,1}
  int num_pix = 0;
  double center_x = 0, center_y = 0;  // true marker center, grid units
};

/// Returns nullopt when the warped footprint covers no grid cell (caller
/// resamples the transform).
template <typename T>
std::optional<TargetEncoding<T>> encode_targets(const ProjectiveTransform& t,
                                                int class_id, int num_classes,
                                                int marker_size, int img_size,
                                                int stride) {
  check_config(img_size % stride == 0, "encode_targets: img_size not divisible by stride");
  const int S = marker_size, G = img_size / stride;
  check(class_id >= 0 && class_id < num_classes, "encode_targets: class_id out of range");

  Mat3 d = Mat3::identity();
  d.m[0] = 1.0 / stride;
  d.m[4] = 1.0 / stride;
  const Mat3 grid_map = d * t.mat;

  Tensor<T> exp_img = exponential_image<T>(S);
  Tensor<T> loc_g = warp_image(exp_img, grid_map, G);
  Tensor<T> ones({S, S, 1});
  for (std::size_t i = 0; i < ones.size(); ++i) ones.data()[i] = T(1);
  Tensor<T> cov = warp_image(ones, grid_map, G);

  TargetEncoding<T> enc;
  enc.loc = Tensor<T>({G, G});
  enc.mask = Tensor<T>({G, G});
  enc.class_onehot = Tensor<T>({G, G, num_classes});
  enc.proj = Tensor<T>({G, G, 6});
  for (int j = 0; j < G; ++j)
    for (int i = 0; i < G; ++i) {
      const std::size_t cell = std::size_t(j) * G + i;
      enc.loc.data()[cell] = loc_g.data()[idx3(j, i, 0, G, 1)];
      if (cov.data()[idx3(j, i, 0, G, 1)] > T(0.5)) {
        enc.mask.data()[cell] = T(1);
        ++enc.num_pix;
        enc.class_onehot.data()[cell * num_classes + class_id] = T(1);
        for (int k = 0; k < 6; ++k)
          enc.proj.data()[cell * 6 + k] = T(t.pose[k]);
      }
    }
  if (enc.num_pix == 0) return std::nullopt;

  auto [cx, cy] = [&] {
    const Mat3& m = grid_map;
    const double hx = S / 2.0, hy = S / 2.0;
    const double w = m.m[6] * hx + m.m[7] * hy + m.m[8];
    return std::pair<double, double>{(m.m[0] * hx + m.m[1] * hy + m.m[2]) / w,
                                     (m.m[3] * hx + m.m[4] * hy + m.m[5]) / w};
  }();
  enc.center_x = cx;
  enc.center_y = cy;
  return enc;
}

/// One composed training/evaluation scene.
template <typename T>
struct Scene {
  Tensor<T> image;  // {img,img,3}, tracked back to the bank in train mode
  ProjectiveTransform transform;
  int class_id = 0;
  AugmentationSample aug;
};

struct SceneConfig {
  int img_size = 160;
  int marker_size = 32;
  int num_classes = 6;
  int stride = 8;
  int max_attempts = 100;
  WarpRanges warp;
  AugmentRanges aug;
};

/// Samples one scene from an item-owned RNG stream. Draw order is pinned:
/// class, transform, marker contrast, background, augmentation, noise.
/// Returns nullopt only if every attempt produced an empty target footprint.
template <typename T>
std::optional<std::pair<Scene<T>, TargetEncoding<T>>> make_scene(
    const MarkerBank<T>& bank, const BackgroundSet<T>& bgs, Rng& rng,
    const SceneConfig& cfg, bool train_mode) {
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    Scene<T> scene;
    scene.class_id = rng.uniform_int(cfg.num_classes);
    scene.transform = sample_accepted_transform(rng, cfg.img_size, cfg.marker_size,
                                                cfg.max_attempts, cfg.warp)
                          .second;
    auto target = encode_targets<T>(scene.transform, scene.class_id,
                                    cfg.num_classes, cfg.marker_size,
                                    cfg.img_size, cfg.stride);
    if (!target) continue;
    Tensor<T> marker =
        generate_marker(bank, scene.class_id, train_mode, rng, cfg.aug);
    Tensor<T> composed = superimpose(bgs.sample(rng), marker, scene.transform);
    scene.aug = sample_augmentation(rng, cfg.aug);
    scene.image = apply_augmentation(composed, scene.aug, rng);
    return std::make_pair(std::move(scene), std::move(*target));
  }
  return std::nullopt;
}

template <typename T>
struct Batch {
  Tensor<T> images;  // {N, img, img, 3}
  std::vector<TargetEncoding<T>> targets;
  std::vector<Scene<T>> scenes;
};

/// Deterministic batch construction: item k of batch b draws from the stream
/// child(seed, b, k) regardless of worker count or timing.
template <typename T>
Batch<T> make_batch(const MarkerBank<T>& bank, const BackgroundSet<T>& bgs,
                    std::uint64_t seed, std::uint64_t batch_index, int batch_size,
                    const SceneConfig& cfg, bool train_mode = true) {
  check_config(batch_size >= 1, "make_batch: batch_size must be positive");
  Batch<T> batch;
  std::vector<Tensor<T>> images;
  for (int k = 0; k < batch_size; ++k) {
    Rng rng = Rng::child(seed, batch_index, std::uint64_t(k));
    auto item = make_scene(bank, bgs, rng, cfg, train_mode);
    check(item.has_value(), "make_batch: scene sampling exhausted retries");
    images.push_back(item->first.image);
    batch.scenes.push_back(std::move(item->first));
    batch.targets.push_back(std::move(item->second));
  }
  batch.images = stack_batch(images);
  return batch;
}

/// Scene serialization: PNG plus a JSON sidecar (same stem, .json) holding
/// {class_id, corners, transform, augmentation}. This is the dataset format
/// the evaluation harness consumes.
template <typename T>
void write_scene(const std::string& png_path, const Scene<T>& scene,
                 int marker_size) {
  save_image(png_path, scene.image);
  const Quad corners = transform_corners<Quad>(scene.transform, marker_size);
  nlohmann::json j;
  j["class_id"] = scene.class_id;
  j["corners"] = {corners.p[0].x, corners.p[0].y, corners.p[1].x, corners.p[1].y,
                  corners.p[2].x, corners.p[2].y, corners.p[3].x, corners.p[3].y};
  j["transform"] = {scene.transform.mat.m[0], scene.transform.mat.m[1],
                    scene.transform.mat.m[2], scene.transform.mat.m[3],
                    scene.transform.mat.m[4], scene.transform.mat.m[5],
                    scene.transform.mat.m[6], scene.transform.mat.m[7]};
  j["augmentation"] = {{"d", scene.aug.d},         {"l", scene.aug.l},
                       {"wb", {scene.aug.wb[0], scene.aug.wb[1], scene.aug.wb[2]}},
                       {"white", scene.aug.white}, {"black", scene.aug.black},
                       {"noise", scene.aug.noise}};
  std::filesystem::path sidecar(png_path);
  sidecar.replace_extension(".json");
  std::ofstream out(sidecar);
  if (!out) throw IoError("write_scene: cannot write " + sidecar.string());
  out << std::setw(2) << j << "\n";
}

}  // namespace tagforge
