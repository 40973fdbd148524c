#pragma once

#include <filesystem>
#include <string>

#include "tagforge/augment/augment.hpp"
#include "tagforge/core/ops.hpp"
#include "tagforge/core/rng.hpp"
#include "tagforge/core/tensor.hpp"
#include "tagforge/io/image_io.hpp"

namespace tagforge {

/// The learnable marker bank: an S x S x C kernel whose class-indexed slices,
/// after an optional contrast draw and a sigmoid, are the marker images.
/// No bias; weights start i.i.d. Gaussian(0, 1) and train at 1000x the base
/// learning rate.
template <typename T>
struct MarkerBank {
  LayerParams<T> params;
  int marker_size = 0;
  int num_classes = 0;

  MarkerBank() = default;

  MarkerBank(int S, int C, Rng& rng) : marker_size(S), num_classes(C) {
    check_config(S > 0 && C > 0, "marker bank: S and C must be positive");
    params.weights = Tensor<T>({S, S, C});
    T* w = params.weights.data();
    for (std::size_t i = 0; i < params.weights.size(); ++i)
      w[i] = T(rng.gaussian());
    params.weights.set_requires_grad();
    params.bias_trainable = false;  // bias fixed at zero
    params.learning_rate_scale = T(1000);
  }
};

/// Slice selection via transposed convolution with a one-hot class vector,
/// then (training only) a fresh contrast draw from the configured ranges,
/// then sigmoid. Output is {S,S,1} with values strictly inside (0,1).
template <typename T>
Tensor<T> generate_marker(const MarkerBank<T>& bank, int class_id, bool train_mode,
                          Rng& rng, const AugmentRanges& ranges = {}) {
  check(class_id >= 0 && class_id < bank.num_classes,
        "generate_marker: class_id out of range");
  Tensor<T> one_hot({1, 1, bank.num_classes});
  one_hot.data()[class_id] = T(1);
  Tensor<T> slice = transposed_conv2d(one_hot, bank.params);
  if (train_mode) {
    double white, black;
    for (int attempt = 0;; ++attempt) {
      white = rng.uniform_open(ranges.white_lo, ranges.white_hi);
      black = rng.uniform_open(ranges.black_lo, ranges.black_hi);
      if (white != black) break;
      check(attempt < 64, "generate_marker: cannot draw W != B");
    }
    slice = contrast(slice, white, black);
  }
  return sigmoid(slice);
}

/// Writes one 8-bit grayscale `marker_<id>.png` per class (inference-mode
/// generation, i.e. plain sigmoid of the kernel) plus a `markers_all.png`
/// contact sheet, one row of markers separated by 2px white gutters.
template <typename T>
void export_markers(const MarkerBank<T>& bank, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir))
    throw IoError("export_markers: cannot create directory " + out_dir);

  const int S = bank.marker_size, C = bank.num_classes, gutter = 2;
  Tensor<T> sheet({S, C * S + (C - 1) * gutter, 1});
  T* psheet = sheet.data();
  for (std::size_t i = 0; i < sheet.size(); ++i) psheet[i] = T(1);

  Rng unused(0);
  for (int c = 0; c < C; ++c) {
    Tensor<T> marker = generate_marker(bank, c, /*train_mode=*/false, unused);
    save_image(out_dir + "/marker_" + std::to_string(c) + ".png", marker);
    const T* pm = marker.data();
    const int x0 = c * (S + gutter);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x)
        psheet[idx3(y, x0 + x, 0, sheet.dim(1), 1)] = pm[idx3(y, x, 0, S, 1)];
  }
  save_image(out_dir + "/markers_all.png", sheet);
}

}  // namespace tagforge
