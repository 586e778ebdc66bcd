#include "vmp/tensor.hpp"

#include <cmath>
#include <numeric>

namespace vmp {

Tensor::Tensor(std::vector<std::size_t> s, double fill) : shape(std::move(s)) {
  std::size_t n = 1;
  for (std::size_t e : shape) {
    if (e == 0) throw GeometryError("tensor extent must be positive");
    n *= e;
  }
  data.assign(n, fill);
}

void Tensor::check_finite(const std::string& context) const {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw DataError("non-finite value in " + context);
    }
  }
}

PatchMatrix extract_patches(const Tensor& src, int kh, int kw, int stride,
                            int zero_pad) {
  if (src.rank() != 3) throw GeometryError("extract_patches expects H x W x C");
  if (kh < 1 || kw < 1) throw GeometryError("kernel extents must be positive");
  if (stride < 1) throw GeometryError("stride must be >= 1");
  if (zero_pad < 0) throw GeometryError("padding must be >= 0");
  src.check_finite("extract_patches input");

  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(src.dim(0));
  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(src.dim(1));
  const std::ptrdiff_t c = static_cast<std::ptrdiff_t>(src.dim(2));
  const std::ptrdiff_t p = zero_pad;
  if (kh > h + 2 * p || kw > w + 2 * p) {
    throw GeometryError("kernel exceeds padded input extent");
  }
  const std::size_t out_h = static_cast<std::size_t>((h + 2 * p - kh) / stride + 1);
  const std::size_t out_w = static_cast<std::size_t>((w + 2 * p - kw) / stride + 1);

  PatchMatrix pm;
  pm.out_h = out_h;
  pm.out_w = out_w;
  pm.rows = out_h * out_w;
  pm.cols = static_cast<std::size_t>(kh) * kw * c;
  pm.src_shape = src.shape;
  pm.index.assign(pm.rows * pm.cols, PatchMatrix::kSentinel);
  pm.data = Tensor({pm.rows, pm.cols});

  std::size_t row = 0;
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    for (std::size_t ox = 0; ox < out_w; ++ox, ++row) {
      const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(oy) * stride - p;
      const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(ox) * stride - p;
      std::size_t col = 0;
      for (int dy = 0; dy < kh; ++dy) {
        for (int dx = 0; dx < kw; ++dx) {
          const std::ptrdiff_t y = y0 + dy;
          const std::ptrdiff_t x = x0 + dx;
          const bool inside = y >= 0 && y < h && x >= 0 && x < w;
          for (std::ptrdiff_t ch = 0; ch < c; ++ch, ++col) {
            if (inside) {
              const std::ptrdiff_t flat = (y * w + x) * c + ch;
              pm.index[row * pm.cols + col] = flat;
              pm.data.data[row * pm.cols + col] = src.data[flat];
            }
          }
        }
      }
    }
  }
  return pm;
}

Tensor gather_patches(const PatchMatrix& geom, const Tensor& src, double fill) {
  if (src.shape != geom.src_shape) {
    throw GeometryError("gather_patches: source shape differs from geometry");
  }
  Tensor out({geom.rows, geom.cols});
  const std::size_t n = geom.rows * geom.cols;
  for (std::size_t i = 0; i < n; ++i) {
    const std::ptrdiff_t idx = geom.index[i];
    out.data[i] = (idx == PatchMatrix::kSentinel) ? fill : src.data[idx];
  }
  return out;
}

void scatter_add_patches(const PatchMatrix& geom, const Tensor& grad_jl,
                         Tensor& dst) {
  if (grad_jl.numel() != geom.rows * geom.cols) {
    throw GeometryError("scatter_add_patches: gradient size mismatch");
  }
  if (dst.shape != geom.src_shape) {
    throw GeometryError("scatter_add_patches: destination shape mismatch");
  }
  const std::size_t n = geom.rows * geom.cols;
  for (std::size_t i = 0; i < n; ++i) {
    const std::ptrdiff_t idx = geom.index[i];
    if (idx != PatchMatrix::kSentinel) dst.data[idx] += grad_jl.data[i];
  }
}

std::vector<double> matvec(const PatchMatrix& patches,
                           std::span<const double> v) {
  if (v.size() != patches.cols) {
    throw GeometryError("matvec: vector length does not match patch width");
  }
  std::vector<double> out(patches.rows, 0.0);
  for (std::size_t r = 0; r < patches.rows; ++r) {
    double acc = 0.0;
    const double* row = patches.data.data.data() + r * patches.cols;
    for (std::size_t cidx = 0; cidx < patches.cols; ++cidx) {
      acc += row[cidx] * v[cidx];
    }
    out[r] = acc;
  }
  return out;
}

}  // namespace vmp
