#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "tagforge/core/error.hpp"
#include "tagforge/core/tensor.hpp"

namespace tagforge {

/// Decodes any OpenCV-readable image to {H,W,3} RGB in [0,1]. Grayscale
/// sources are replicated to three channels.
template <typename T>
Tensor<T> load_image(const std::string& path) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot read image: " + path);
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  Tensor<T> out({rgb.rows, rgb.cols, 3});
  T* po = out.data();
  for (int y = 0; y < rgb.rows; ++y) {
    const uchar* row = rgb.ptr<uchar>(y);
    for (int x = 0; x < rgb.cols * 3; ++x)
      po[std::size_t(y) * rgb.cols * 3 + x] = T(row[x]) / T(255);
  }
  return out;
}

/// Writes {H,W,1} as 8-bit grayscale or {H,W,3} as 8-bit RGB. Values are
/// clamped to [0,1] and rounded; PNG output carries no timestamps, so equal
/// tensors produce byte-identical files.
template <typename T>
void save_image(const std::string& path, const Tensor<T>& img) {
  check(img.rank() == 3 && (img.dim(2) == 1 || img.dim(2) == 3),
        "save_image: image must be {H,W,1} or {H,W,3}");
  const int H = img.dim(0), W = img.dim(1), C = img.dim(2);
  cv::Mat out(H, W, C == 1 ? CV_8UC1 : CV_8UC3);
  const T* pi = img.data();
  for (int y = 0; y < H; ++y) {
    uchar* row = out.ptr<uchar>(y);
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        const double v = std::clamp(double(pi[idx3(y, x, c, W, C)]), 0.0, 1.0);
        // OpenCV stores BGR; flip RGB channel order on the way out.
        row[x * C + (C == 3 ? 2 - c : 0)] = uchar(std::lround(v * 255.0));
      }
  }
  if (!cv::imwrite(path, out)) throw IoError("cannot write image: " + path);
}

/// Bilinear resize of an {H,W,C} tensor (background preparation only; not on
/// any gradient path).
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& img, int out_h, int out_w) {
  check(img.rank() == 3, "resize_bilinear: image must be {H,W,C}");
  const int H = img.dim(0), W = img.dim(1), C = img.dim(2);
  check(C == 1 || C == 3, "resize_bilinear: 1 or 3 channels");
  if (H == out_h && W == out_w) return img;
  cv::Mat src(H, W, C == 1 ? CV_32FC1 : CV_32FC3);
  const T* pi = img.data();
  for (int y = 0; y < H; ++y) {
    float* row = src.ptr<float>(y);
    for (int x = 0; x < W * C; ++x)
      row[x] = float(pi[std::size_t(y) * W * C + x]);
  }
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(out_w, out_h), 0, 0, cv::INTER_LINEAR);
  Tensor<T> out({out_h, out_w, C});
  T* po = out.data();
  for (int y = 0; y < out_h; ++y) {
    const float* row = dst.ptr<float>(y);
    for (int x = 0; x < out_w * C; ++x)
      po[std::size_t(y) * out_w * C + x] = T(row[x]);
  }
  return out;
}

}  // namespace tagforge
