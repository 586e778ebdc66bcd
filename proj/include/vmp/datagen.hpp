#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vmp/rng.hpp"
#include "vmp/tensor.hpp"

namespace vmp {

struct LabeledSample {
  Tensor image;                    // H x W x C_in, values in [0, 1]
  std::vector<std::uint8_t> mask;  // H * W labels in [0, classes)
};

struct Dataset {
  std::size_t h = 0, w = 0, c_in = 1, classes = 2;
  std::vector<LabeledSample> samples;

  std::size_t size() const { return samples.size(); }
};

// Synthetic shape-segmentation task: filled ellipses/rectangles on a textured
// background, one intensity band per class. The mask is the exact
// rasterization of the shapes.
struct ShapeTaskConfig {
  std::size_t canvas = 64;
  std::size_t classes = 2;        // 2 or 3
  std::size_t shapes_per_image = 2;
  // Per-class [lo, hi] intensity band; index 0 is the background.
  std::vector<std::pair<double, double>> intensity_bands = {
      {0.05, 0.20}, {0.60, 0.90}, {0.30, 0.50}};
  double texture_sigma = 0.03;    // background/foreground texture noise
  std::uint64_t seed = 0;
  std::size_t count = 100;
};

Dataset generate(const ShapeTaskConfig& cfg);

// Binary "VMPD" container: magic, u32-LE sample count, then per sample
// {u32 H, W, C_in, C; image as little-endian f32; mask as u8}.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

enum class PgmNormalization { fixed_range, per_image };

// Binary PGM (P5, maxval 255). fixed_range maps [0, v_max] linearly;
// per_image uses the map's own maximum (an all-zero map stays all zero).
// Quantization is round-half-up.
void export_pgm(const Tensor& map, const std::string& path,
                PgmNormalization norm, double v_max = 1.0);

}  // namespace vmp
