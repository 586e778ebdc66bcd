#include "vmp/robustness.hpp"

#include <algorithm>
#include <cmath>

#include "vmp/elbo.hpp"
#include "vmp/metrics.hpp"
#include "vmp/rng.hpp"

namespace vmp {

namespace {

double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }
double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

}  // namespace

Tensor add_gaussian_noise(const Tensor& image, double snr_db,
                          const std::vector<std::uint8_t>& region,
                          std::uint64_t seed, double* achieved_snr_db) {
  image.check_finite("add_gaussian_noise input");
  const std::size_t npix = image.dim(0) * image.dim(1);
  const std::size_t c = image.rank() >= 3 ? image.dim(2) : 1;
  if (!region.empty() && region.size() != npix) {
    throw GeometryError("add_gaussian_noise: region size mismatch");
  }
  snr_db = std::min(snr_db, 120.0);

  double power = 0.0;
  std::size_t n = 0;
  for (std::size_t px = 0; px < npix; ++px) {
    if (!region.empty() && region[px] == 0) continue;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double v = image.data[px * c + ch];
      power += v * v;
    }
    n += c;
  }
  if (n == 0 || power == 0.0) {
    throw DataError("add_gaussian_noise: signal region is all-zero, SNR undefined");
  }
  power /= static_cast<double>(n);
  const double sigma = std::sqrt(power / std::pow(10.0, snr_db / 10.0));

  Rng rng(seed);
  Tensor out = image;
  for (std::size_t px = 0; px < npix; ++px) {
    if (!region.empty() && region[px] == 0) continue;
    for (std::size_t ch = 0; ch < c; ++ch) {
      out.data[px * c + ch] += sigma * rng.normal();
    }
  }
  if (achieved_snr_db != nullptr) *achieved_snr_db = measured_snr(image, out);
  return out;
}

Tensor input_loss_gradient(const VariationalModel& model, const Tensor& image,
                           const std::vector<std::uint8_t>& labels,
                           const std::vector<double>& pixel_weight) {
  const std::size_t h = image.dim(0), w = image.dim(1);
  const std::size_t classes = model.cfg.num_classes;
  if (!pixel_weight.empty() && pixel_weight.size() != h * w) {
    throw GeometryError("input_loss_gradient: weight size mismatch");
  }
  ForwardTape tape;
  forward(model, image, &tape);

  // Plug-in cross-entropy: L = -sum_px w_px log(mu_{y_px} + eps).
  constexpr double eps = 1e-12;
  Tensor g_prob(tape.softmax.prob_mean.shape, 0.0);
  for (std::size_t px = 0; px < h * w; ++px) {
    const double wgt = pixel_weight.empty() ? 1.0 : pixel_weight[px];
    if (wgt == 0.0) continue;
    if (labels[px] >= classes) {
      throw DataError("input_loss_gradient: label out of range");
    }
    const std::size_t i = px * classes + labels[px];
    g_prob.data[i] = -wgt / (tape.softmax.prob_mean.data[i] + eps);
  }

  Gradients grads = Gradients::zeros_like(model);
  Tensor g_image;
  backward(model, tape, g_prob, Tensor(), grads, &g_image);
  return g_image;
}

Tensor fgsm(const VariationalModel& model, const Tensor& image,
            const std::vector<std::uint8_t>& mask, double epsilon) {
  if (epsilon < 0.0) throw GeometryError("fgsm: epsilon must be >= 0");
  const Tensor grad = input_loss_gradient(model, image, mask);
  Tensor out = image;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    // fl(x + eps) - x can exceed eps by one ulp; walk back so the output
    // respects the epsilon ball exactly.
    double v = clamp01(image.data[i] + epsilon * sign0(grad.data[i]));
    while (v - image.data[i] > epsilon) v = std::nextafter(v, image.data[i]);
    while (image.data[i] - v > epsilon) v = std::nextafter(v, image.data[i]);
    out.data[i] = v;
  }
  return out;
}

Tensor pgd_targeted(const VariationalModel& model, const Tensor& image,
                    const std::vector<std::uint8_t>& mask,
                    const AttackConfig& cfg) {
  if (cfg.epsilon < 0.0) throw GeometryError("pgd: epsilon must be >= 0");
  if (cfg.steps < 1) throw GeometryError("pgd: steps must be >= 1");
  if (cfg.source_label < 0 || cfg.target_label < 0 ||
      cfg.source_label == cfg.target_label ||
      static_cast<std::size_t>(cfg.source_label) >= model.cfg.num_classes ||
      static_cast<std::size_t>(cfg.target_label) >= model.cfg.num_classes) {
    throw GeometryError("pgd: need distinct valid source/target labels");
  }
  const std::size_t npix = image.dim(0) * image.dim(1);
  if (mask.size() != npix) throw GeometryError("pgd: mask size mismatch");

  std::vector<double> weight(npix, 0.0);
  std::vector<std::uint8_t> target(npix, 0);
  bool any = false;
  for (std::size_t px = 0; px < npix; ++px) {
    if (mask[px] == static_cast<std::uint8_t>(cfg.source_label)) {
      weight[px] = 1.0;
      any = true;
    }
    target[px] = static_cast<std::uint8_t>(cfg.target_label);
  }
  if (!any) return image;  // nothing to flip

  const double step =
      cfg.step_size > 0.0 ? cfg.step_size : cfg.epsilon / 4.0;
  Tensor x = image;
  for (std::size_t it = 0; it < cfg.steps; ++it) {
    const Tensor grad = input_loss_gradient(model, x, target, weight);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      // Descend the targeted loss, project to the epsilon ball, clamp.
      // Projecting the delta (not the absolute value) keeps |x - image|
      // <= epsilon exactly in floating point.
      double d = x.data[i] - step * sign0(grad.data[i]) - image.data[i];
      d = std::min(cfg.epsilon, std::max(-cfg.epsilon, d));
      double v = clamp01(image.data[i] + d);
      // image + d can round one ulp past the ball; walk back to keep the
      // |x - image| <= epsilon guarantee exact in floating point.
      while (v - image.data[i] > cfg.epsilon) {
        v = std::nextafter(v, image.data[i]);
      }
      while (image.data[i] - v > cfg.epsilon) {
        v = std::nextafter(v, image.data[i]);
      }
      x.data[i] = v;
      if (std::abs(x.data[i] - image.data[i]) > cfg.epsilon) {
        throw DataError("pgd: iterate escaped the epsilon ball");
      }
    }
  }
  return x;
}

}  // namespace vmp
