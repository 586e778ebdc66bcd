#include "vmp/moments.hpp"

#include <cmath>

namespace vmp {

RandomTensor::RandomTensor(Tensor m, Tensor v)
    : mean(std::move(m)), var(std::move(v)) {
  if (!mean.same_shape(var)) {
    throw GeometryError("RandomTensor: mean/var shape mismatch");
  }
}

RandomTensor RandomTensor::deterministic(Tensor m) {
  Tensor v(m.shape, 0.0);
  return RandomTensor(std::move(m), std::move(v));
}

void RandomTensor::validate(const std::string& context) const {
  if (!mean.same_shape(var)) {
    throw GeometryError("RandomTensor shape mismatch in " + context);
  }
  mean.check_finite(context + " mean");
  var.check_finite(context + " var");
  for (double v : var.data) {
    if (v < 0.0) throw DataError("negative variance in " + context);
  }
}

double softplus(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

double softplus_inverse(double v) {
  if (v > 30.0) return v;
  return std::log(std::expm1(v));
}

double softplus_deriv(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<double> kernel_variance(const VariationalKernel& k) {
  std::vector<double> out(k.rho.size());
  for (std::size_t i = 0; i < k.rho.size(); ++i) out[i] = softplus(k.rho[i]);
  return out;
}

std::vector<double> sample_kernel(const VariationalKernel& k,
                                  std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> out(k.length());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = k.mean[i] + std::sqrt(softplus(k.rho[i])) * rng.normal();
  }
  return out;
}

double kernel_kl(const VariationalKernel& k, const PriorSpec& prior) {
  if (prior.prior_variance <= 0.0) {
    throw GeometryError("prior variance must be positive");
  }
  const double vp = prior.prior_variance;
  double kl = 0.0;
  for (std::size_t i = 0; i < k.length(); ++i) {
    const double s2 = softplus(k.rho[i]);
    const double m = k.mean[i];
    kl += 0.5 * (s2 / vp + m * m / vp - 1.0 - std::log(s2 / vp));
  }
  return kl;
}

void kernel_kl_grad(const VariationalKernel& k, const PriorSpec& prior,
                    std::vector<double>& d_mean, std::vector<double>& d_rho) {
  const double vp = prior.prior_variance;
  for (std::size_t i = 0; i < k.length(); ++i) {
    const double s2 = softplus(k.rho[i]);
    d_mean[i] += k.mean[i] / vp;
    // dKL/d sigma^2 = (1/vp - 1/sigma^2) / 2, chained through softplus.
    d_rho[i] += 0.5 * (1.0 / vp - 1.0 / s2) * softplus_deriv(k.rho[i]);
  }
}

}  // namespace vmp
