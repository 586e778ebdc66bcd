#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vmp {

// Dense row-major tensor of 64-bit floats. Rank is at most 4; segmentation
// feature maps use the H x W x C convention throughout.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0);

  std::size_t numel() const { return data.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const { return shape.size(); }

  // H x W x C accessors.
  double& at(std::size_t h, std::size_t w, std::size_t c) {
    return data[(h * shape[1] + w) * shape[2] + c];
  }
  double at(std::size_t h, std::size_t w, std::size_t c) const {
    return data[(h * shape[1] + w) * shape[2] + c];
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  // Throws vmp::DataError if any entry is NaN/Inf.
  void check_finite(const std::string& context) const;
};

// Geometry / input-shape violations (kernel larger than input, mismatched
// lengths, bad configs).
struct GeometryError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Bad numeric content: NaN/Inf at a module boundary, negative variances,
// malformed files.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// im2col-style patch matrix. Row j holds the vectorized receptive field of
// output position j (row-major scan over output positions; within a row the
// scan is row-major over (dy, dx) with channels fastest). The index map
// records, per cell, the flat index into the source tensor, or kSentinel
// for zero-padding positions. Variance gathers and adjoint scatters reuse
// the same map.
struct PatchMatrix {
  static constexpr std::ptrdiff_t kSentinel = -1;

  std::size_t rows = 0;   // J = out_h * out_w
  std::size_t cols = 0;   // L = kh * kw * channels
  std::size_t out_h = 0;
  std::size_t out_w = 0;
  std::vector<std::size_t> src_shape;      // H, W, C of the source
  std::vector<std::ptrdiff_t> index;       // rows * cols
  Tensor data;                             // rows x cols gathered values

  double& at(std::size_t r, std::size_t c) { return data.data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data.data[r * cols + c]; }
};

// Extracts kh x kw receptive fields from an H x W x C tensor with the given
// stride and symmetric zero padding.
PatchMatrix extract_patches(const Tensor& src, int kh, int kw, int stride,
                            int zero_pad);

// Gathers values from a tensor of the same shape as the original source,
// using an existing patch geometry (sentinels read as `fill`).
Tensor gather_patches(const PatchMatrix& geom, const Tensor& src,
                      double fill = 0.0);

// Adjoint of the gather: scatter-adds a J x L gradient back into a tensor
// shaped like the source. Sentinel cells are dropped.
void scatter_add_patches(const PatchMatrix& geom, const Tensor& grad_jl,
                         Tensor& dst);

// Inner product of each patch row with v; sentinel cells contribute zero.
std::vector<double> matvec(const PatchMatrix& patches,
                           std::span<const double> v);

}  // namespace vmp
