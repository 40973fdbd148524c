#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tagforge/composer/composer.hpp"
#include "tagforge/core/ops.hpp"
#include "tagforge/core/rng.hpp"
#include "tagforge/generator/marker_bank.hpp"
#include "tagforge/io/image_io.hpp"

using namespace tagforge;

namespace {

void fill_uniform(Tensor<double>& t, Rng& rng, double lo, double hi) {
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
}

template <typename Build>
double max_grad_rel_err(std::vector<Tensor<double>*> ins, Build build,
                        double h = 1e-5) {
  for (auto* t : ins) t->set_requires_grad();
  Tensor<double> loss = build();
  REQUIRE(loss.size() == 1);
  for (auto* t : ins) t->zero_grad();
  backward(loss);
  std::vector<std::vector<double>> grads;
  for (auto* t : ins) grads.push_back(t->grad());

  double worst = 0.0;
  for (std::size_t ti = 0; ti < ins.size(); ++ti) {
    Tensor<double>* t = ins[ti];
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double orig = t->data()[i];
      t->data()[i] = orig + h;
      const double fp = build().value();
      t->data()[i] = orig - h;
      const double fm = build().value();
      t->data()[i] = orig;
      const double fd = (fp - fm) / (2 * h);
      const double g = grads[ti][i];
      const double denom = std::max({std::abs(fd), std::abs(g), 1e-4});
      worst = std::max(worst, std::abs(fd - g) / denom);
    }
  }
  return worst;
}

SceneConfig desk_config() {
  SceneConfig cfg;
  cfg.img_size = 160;
  cfg.marker_size = 32;
  cfg.num_classes = 6;
  cfg.stride = 8;
  return cfg;
}

}  // namespace

TEST_CASE("procedural textures are bounded, centered, and deterministic") {
  Rng rng(80);
  for (int i = 0; i < 10; ++i) {
    Tensor<double> tex = procedural_texture<double>(rng, 64);
    REQUIRE(tex.dim(0) == 64);
    REQUIRE(tex.dim(2) == 3);
    double mean = 0.0;
    for (std::size_t k = 0; k < tex.size(); ++k) {
      REQUIRE(tex.data()[k] >= 0.0);
      REQUIRE(tex.data()[k] <= 1.0);
      mean += tex.data()[k];
    }
    mean /= double(tex.size());
    REQUIRE(mean > 0.2);
    REQUIRE(mean < 0.8);
  }

  const TextureConfig soft{2, 0.35, 0.65};
  Tensor<double> tex = procedural_texture<double>(rng, 48, soft);
  for (std::size_t k = 0; k < tex.size(); ++k) {
    REQUIRE(tex.data()[k] >= 0.35);
    REQUIRE(tex.data()[k] <= 0.65);
  }

  Rng a = Rng::child(7, 1, 2), b = Rng::child(7, 1, 2);
  Tensor<double> ta = procedural_texture<double>(a, 32);
  Tensor<double> tb = procedural_texture<double>(b, 32);
  for (std::size_t k = 0; k < ta.size(); ++k)
    REQUIRE(ta.data()[k] == tb.data()[k]);

  Rng c(81);
  REQUIRE_THROWS_AS(procedural_texture<double>(c, 32, TextureConfig{0, 0.0, 1.0}),
                    ConfigError);
}

TEST_CASE("background set resizes files, skips junk, and falls back to noise") {
  namespace fs = std::filesystem;
  const std::string dir = fs::temp_directory_path() / "tagforge_bg_test";
  fs::remove_all(dir);
  fs::create_directories(dir);

  Rng rng(82);
  Tensor<double> small({8, 10, 3});
  fill_uniform(small, rng, 0.0, 1.0);
  save_image(dir + "/one.png", small);
  std::ofstream(dir + "/junk.txt") << "not an image\n";

  auto set = BackgroundSet<double>::load(dir, 64, /*procedural_fallback=*/false);
  REQUIRE(set.count() == 1);
  REQUIRE(!set.procedural());
  Tensor<double> bg = set.sample(rng);
  REQUIRE(bg.dim(0) == 64);
  REQUIRE(bg.dim(1) == 64);
  REQUIRE(bg.dim(2) == 3);
  for (std::size_t i = 0; i < bg.size(); ++i) {
    REQUIRE(bg.data()[i] >= 0.0);
    REQUIRE(bg.data()[i] <= 1.0);
  }

  // Grayscale sources replicate to three channels on load.
  Tensor<double> gray({6, 6, 1});
  fill_uniform(gray, rng, 0.0, 1.0);
  save_image(dir + "/gray.png", gray);
  auto set2 = BackgroundSet<double>::load(dir, 32, false);
  REQUIRE(set2.count() == 2);

  fs::remove_all(dir);
  auto fallback = BackgroundSet<double>::load(dir, 40, /*procedural_fallback=*/true);
  REQUIRE(fallback.procedural());
  Tensor<double> tex = fallback.sample(rng);
  REQUIRE(tex.dim(0) == 40);
  REQUIRE_THROWS_AS(BackgroundSet<double>::load(dir, 40, false), ConfigError);
}

TEST_CASE("superimpose keeps background outside and marker inside the footprint") {
  const int img = 32, S = 8;
  Tensor<double> bg({img, img, 3});
  for (std::size_t i = 0; i < bg.size(); ++i) bg.data()[i] = 0.3;
  Tensor<double> marker({S, S, 1});
  for (std::size_t i = 0; i < marker.size(); ++i) marker.data()[i] = 0.3;

  WarpParams p;
  p.t_x = 16;
  p.t_y = 16;
  const ProjectiveTransform t = compose_transform(p, double(S));
  Tensor<double> out = superimpose(bg, marker, t);

  // Integer-aligned footprint spans [12,20); interior pixels read the marker,
  // everything else is exactly the background.
  for (int y = 0; y < img; ++y)
    for (int x = 0; x < img; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = out.data()[idx3(y, x, c, img, 3)];
        if (x >= 12 && x < 20 && y >= 12 && y < 20)
          REQUIRE(v == Catch::Approx(0.3).margin(1e-12));
        else if (x < 11 || x >= 21 || y < 11 || y >= 21)
          REQUIRE(v == 0.3);
      }

  Tensor<double> tall({16, 12, 3});
  REQUIRE_THROWS_AS(superimpose(tall, marker, t), ContractViolation);
  Tensor<double> rgb_marker({S, S, 3});
  REQUIRE_THROWS_AS(superimpose(bg, rgb_marker, t), ContractViolation);
}

TEST_CASE("superimpose gradient w.r.t. the marker matches finite differences") {
  Rng rng(83);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> bg({24, 24, 3});
    fill_uniform(bg, rng, 0.0, 1.0);
    Tensor<double> marker({8, 8, 1});
    fill_uniform(marker, rng, 0.1, 0.9);
    auto [params, t] =
        sample_accepted_transform(rng, 24, 8.0, 10000, {0.8, 2.0, 0.4, 0.002});
    const double err = max_grad_rel_err({&marker}, [&] {
      return sum_all(sigmoid(superimpose(bg, marker, t)));
    });
    REQUIRE(err < 1e-5);
  }
}

TEST_CASE("exponential template peaks at 1 and hits 1/e at half size") {
  Tensor<double> e128 = exponential_image<double>(128);
  REQUIRE(e128.data()[idx3(64, 64, 0, 128, 1)] == 1.0);
  REQUIRE(e128.data()[idx3(64, 0, 0, 128, 1)] ==
          Catch::Approx(std::exp(-1.0)).margin(1e-12));

  // The decay radius scales with S: the same relative profile at desk size.
  Tensor<double> e32 = exponential_image<double>(32);
  REQUIRE(e32.data()[idx3(16, 16, 0, 32, 1)] == 1.0);
  REQUIRE(e32.data()[idx3(16, 0, 0, 32, 1)] ==
          Catch::Approx(std::exp(-1.0)).margin(1e-12));
  for (std::size_t i = 0; i < e32.size(); ++i) {
    REQUIRE(e32.data()[i] > 0.0);
    REQUIRE(e32.data()[i] <= 1.0);
  }
}

TEST_CASE("target encoding is consistent across loc, mask, class, and proj") {
  // Centered integer-aligned placement: footprint [64,96) -> grid [8,12).
  WarpParams p;
  p.t_x = 80;
  p.t_y = 80;
  const ProjectiveTransform t = compose_transform(p, 32.0);
  auto enc = encode_targets<double>(t, 3, 6, 32, 160, 8);
  REQUIRE(enc.has_value());
  REQUIRE(enc->num_pix == 16);
  REQUIRE(enc->center_x == Catch::Approx(10.0).margin(1e-9));
  REQUIRE(enc->center_y == Catch::Approx(10.0).margin(1e-9));

  const int G = 20;
  int argmax = 0;
  for (int k = 0; k < G * G; ++k)
    if (enc->loc.data()[k] > enc->loc.data()[argmax]) argmax = k;
  REQUIRE(argmax == 10 * G + 10);
  REQUIRE(enc->loc.data()[argmax] == Catch::Approx(1.0).margin(1e-9));

  for (int j = 0; j < G; ++j)
    for (int i = 0; i < G; ++i) {
      const std::size_t cell = std::size_t(j) * G + i;
      const bool inside = i >= 8 && i < 12 && j >= 8 && j < 12;
      REQUIRE(enc->mask.data()[cell] == (inside ? 1.0 : 0.0));
    }

  Rng rng(84);
  for (int trial = 0; trial < 50; ++trial) {
    const int cls = rng.uniform_int(6);
    auto [wp, tr] = sample_accepted_transform(rng, 160, 32.0, 10000);
    auto e = encode_targets<double>(tr, cls, 6, 32, 160, 8);
    if (!e) continue;
    int count = 0;
    for (int cell = 0; cell < G * G; ++cell) {
      const double m = e->mask.data()[cell];
      REQUIRE((m == 0.0 || m == 1.0));
      count += m == 1.0;
      REQUIRE(e->loc.data()[cell] >= 0.0);
      REQUIRE(e->loc.data()[cell] <= 1.0 + 1e-12);
      for (int c = 0; c < 6; ++c) {
        const double oh = e->class_onehot.data()[std::size_t(cell) * 6 + c];
        REQUIRE(oh == (m == 1.0 && c == cls ? 1.0 : 0.0));
      }
      for (int k = 0; k < 6; ++k) {
        const double pv = e->proj.data()[std::size_t(cell) * 6 + k];
        if (m == 1.0)
          REQUIRE(pv == tr.pose[std::size_t(k)]);
        else
          REQUIRE(pv == 0.0);
      }
    }
    REQUIRE(count == e->num_pix);
    REQUIRE(e->num_pix >= 1);
  }

  // A marker far smaller than one grid cell covers nothing.
  WarpParams tiny;
  tiny.t_x = 13.0;
  tiny.t_y = 13.0;
  tiny.s_x = 0.1;
  tiny.s_y = 0.1;
  auto none = encode_targets<double>(compose_transform(tiny, 32.0), 0, 6, 32, 160, 8);
  REQUIRE(!none.has_value());

  REQUIRE_THROWS_AS(encode_targets<double>(t, 0, 6, 32, 150, 8), ConfigError);
}

TEST_CASE("batches are deterministic in seed and carry gradients to the bank") {
  Rng rng(85);
  MarkerBank<double> bank(32, 6, rng);
  auto bgs = BackgroundSet<double>::load("", 160, true, TextureConfig{2, 0.35, 0.65});
  SceneConfig cfg = desk_config();
  cfg.aug.blur_max = 3.0;
  cfg.aug.noise = 0.1;

  Batch<double> a = make_batch(bank, bgs, 99, 0, 8, cfg);
  REQUIRE(a.images.rank() == 4);
  REQUIRE(a.images.dim(0) == 8);
  REQUIRE(a.images.dim(1) == 160);
  REQUIRE(a.images.dim(3) == 3);
  REQUIRE(a.targets.size() == 8);
  REQUIRE(a.scenes.size() == 8);
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    REQUIRE(a.images.data()[i] >= 0.0);
    REQUIRE(a.images.data()[i] <= 1.0);
  }
  for (const auto& tgt : a.targets) REQUIRE(tgt.num_pix >= 1);

  // Independent draws: no two scenes share a footprint.
  for (int i = 0; i < 8; ++i)
    for (int j = i + 1; j < 8; ++j) {
      const auto& ti = a.scenes[std::size_t(i)].transform.mat.m;
      const auto& tj = a.scenes[std::size_t(j)].transform.mat.m;
      bool same = true;
      for (int k = 0; k < 9; ++k) same = same && ti[std::size_t(k)] == tj[std::size_t(k)];
      REQUIRE(!same);
    }

  Batch<double> b = make_batch(bank, bgs, 99, 0, 8, cfg);
  for (std::size_t i = 0; i < a.images.size(); ++i)
    REQUIRE(a.images.data()[i] == b.images.data()[i]);
  for (int k = 0; k < 8; ++k)
    REQUIRE(a.scenes[std::size_t(k)].class_id == b.scenes[std::size_t(k)].class_id);

  Batch<double> c = make_batch(bank, bgs, 99, 1, 8, cfg);
  bool differs = false;
  for (std::size_t i = 0; i < a.images.size() && !differs; ++i)
    differs = a.images.data()[i] != c.images.data()[i];
  REQUIRE(differs);

  // Loss on the composed batch reaches the bank, and only the scenes' class
  // slices receive gradient.
  bank.params.weights.zero_grad();
  Tensor<double> loss = sum_all(a.images);
  backward(loss);
  std::vector<bool> used(6, false);
  for (const auto& s : a.scenes) used[std::size_t(s.class_id)] = true;
  const auto& g = bank.params.weights.grad();
  std::vector<double> per_class(6, 0.0);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int cidx = 0; cidx < 6; ++cidx)
        per_class[std::size_t(cidx)] += std::abs(g[idx3(y, x, cidx, 32, 6)]);
  for (int cidx = 0; cidx < 6; ++cidx) {
    if (used[std::size_t(cidx)])
      REQUIRE(per_class[std::size_t(cidx)] > 0.0);
    else
      REQUIRE(per_class[std::size_t(cidx)] == 0.0);
  }
}

TEST_CASE("scene files carry the png and a faithful sidecar") {
  namespace fs = std::filesystem;
  Rng rng(86);
  MarkerBank<double> bank(32, 6, rng);
  auto bgs = BackgroundSet<double>::load("", 160, true);
  SceneConfig cfg = desk_config();
  Rng item = Rng::child(5, 0, 0);
  auto made = make_scene(bank, bgs, item, cfg, /*train_mode=*/false);
  REQUIRE(made.has_value());

  const std::string dir = fs::temp_directory_path() / "tagforge_scene_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string png = dir + "/scene_00000.png";
  write_scene(png, made->first, cfg.marker_size);

  Tensor<double> img = load_image<double>(png);
  REQUIRE(img.dim(0) == 160);
  REQUIRE(img.dim(1) == 160);

  std::ifstream jf(dir + "/scene_00000.json");
  REQUIRE(jf.good());
  nlohmann::json j;
  jf >> j;
  REQUIRE(j["class_id"].get<int>() == made->first.class_id);

  const Quad want = transform_corners<Quad>(made->first.transform, cfg.marker_size);
  const auto corners = j["corners"].get<std::vector<double>>();
  REQUIRE(corners.size() == 8);
  for (int k = 0; k < 4; ++k) {
    REQUIRE(corners[std::size_t(2 * k)] == Catch::Approx(want.p[std::size_t(k)].x).margin(1e-9));
    REQUIRE(corners[std::size_t(2 * k + 1)] == Catch::Approx(want.p[std::size_t(k)].y).margin(1e-9));
  }
  const auto tv = j["transform"].get<std::vector<double>>();
  REQUIRE(tv.size() == 8);
  for (int k = 0; k < 8; ++k)
    REQUIRE(tv[std::size_t(k)] == made->first.transform.mat.m[std::size_t(k)]);
  REQUIRE(j["augmentation"]["l"].get<double>() == made->first.aug.l);
  REQUIRE(j["augmentation"]["noise"].get<double>() == made->first.aug.noise);
  fs::remove_all(dir);
}
