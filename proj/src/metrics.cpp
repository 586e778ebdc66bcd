#include "vmp/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace vmp {

double dice(const std::vector<std::uint8_t>& pred,
            const std::vector<std::uint8_t>& truth,
            const std::vector<std::uint8_t>& label_set) {
  if (pred.size() != truth.size()) {
    throw GeometryError("dice: prediction/truth size mismatch");
  }
  auto in_set = [&](std::uint8_t v) {
    return std::find(label_set.begin(), label_set.end(), v) != label_set.end();
  };
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool pa = in_set(pred[i]);
    const bool pb = in_set(truth[i]);
    a += pa;
    b += pb;
    both += pa && pb;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

double avg_predictive_variance(const SegmentationOutput& output,
                               const std::vector<std::uint8_t>& region) {
  const Tensor& u = output.uncertainty;
  const std::size_t npix = u.dim(0) * u.dim(1);
  const std::size_t c = u.dim(2);
  if (!region.empty() && region.size() != npix) {
    throw GeometryError("avg_predictive_variance: region size mismatch");
  }
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t px = 0; px < npix; ++px) {
    if (!region.empty() && region[px] == 0) continue;
    for (std::size_t i = 0; i < c; ++i) total += u.data[px * c + i];
    n += c;
  }
  if (n == 0) throw DataError("avg_predictive_variance: empty region");
  return total / static_cast<double>(n);
}

double measured_snr(const Tensor& clean, const Tensor& perturbed) {
  if (!clean.same_shape(perturbed)) {
    throw GeometryError("measured_snr: shape mismatch");
  }
  double sig = 0.0, noise = 0.0;
  for (std::size_t i = 0; i < clean.numel(); ++i) {
    const double d = perturbed.data[i] - clean.data[i];
    sig += clean.data[i] * clean.data[i];
    noise += d * d;
  }
  if (noise == 0.0) return 300.0;
  return std::min(300.0, 10.0 * std::log10(sig / noise));
}

}  // namespace vmp
