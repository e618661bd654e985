#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "neuro3d/tensor.hpp"

namespace neuro3d {

// RGB image, values in [0,1], row-major [H x W x 3].
struct Image {
  int height = 0, width = 0;
  std::vector<double> pixels;  // h*w*3

  Image() = default;
  Image(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0.0) {}

  double& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  double at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  void fill(double r, double g, double b);
  bool in_unit_range(double tol = 1e-9) const;
  void clamp01();

  // [3 x H x W] tensor layout used by the conv nets.
  Tensor to_chw() const;
  static Image from_chw(const Tensor& t);
};

// Single-channel integer label map, row-major [H x W].
struct LabelMap {
  int height = 0, width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(int h, int w) : height(h), width(w), labels(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
};

// Minimal PNG codec (8-bit RGB / gray, non-interlaced) over zlib. Output is
// byte-stable for a fixed zlib version, which the determinism tests rely on.
void write_png_rgb(const std::string& path, const Image& img);
Image read_png_rgb(const std::string& path);
void write_png_gray(const std::string& path, const LabelMap& map);
LabelMap read_png_gray(const std::string& path);

// Per-channel histogram with `bins` uniform buckets over [0,1], normalized to
// sum 1 per channel; distance is the mean over channels of the L1 gap.
std::vector<double> color_histogram(const Image& img, int bins);
double histogram_l1(const std::vector<double>& a, const std::vector<double>& b);

double psnr(const Image& a, const Image& b);

}  // namespace neuro3d
