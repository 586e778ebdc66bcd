#pragma once

#include <cstdint>
#include <vector>

#include "vmp/rng.hpp"
#include "vmp/tensor.hpp"

namespace vmp {

// A feature map as a (mean, per-element variance) pair: the propagated
// random variable at every layer boundary. The variance tensor is the
// diagonal of the propagated covariance.
struct RandomTensor {
  Tensor mean;
  Tensor var;

  RandomTensor() = default;
  RandomTensor(Tensor m, Tensor v);

  static RandomTensor deterministic(Tensor m);

  // Throws on shape mismatch, negative variance, or non-finite entries.
  void validate(const std::string& context) const;
};

// Gaussian variational posterior for one convolution kernel: a mean vector
// and an unconstrained rho vector with variance = softplus(rho). The
// softplus map keeps the variance strictly positive without projections.
struct VariationalKernel {
  int kh = 1;
  int kw = 1;
  int in_channels = 1;
  std::vector<double> mean;
  std::vector<double> rho;

  std::size_t length() const { return mean.size(); }
};

struct PriorSpec {
  double prior_variance = 1.0;
};

double softplus(double x);
// rho such that softplus(rho) == v.
double softplus_inverse(double v);
// d softplus / d rho.
double softplus_deriv(double x);

// Per-element variance softplus(rho), strictly positive.
std::vector<double> kernel_variance(const VariationalKernel& k);

// Draws mean + sigma .* eps with eps standard normal from the counter-based
// generator; identical seed gives an identical sample.
std::vector<double> sample_kernel(const VariationalKernel& k,
                                  std::uint64_t seed);

// Closed-form KL( N(m, diag(sigma^2)) || N(0, v_p I) ).
double kernel_kl(const VariationalKernel& k, const PriorSpec& prior);

// Gradient of kernel_kl with respect to (mean, rho); accumulated into the
// provided vectors (which must match the kernel length).
void kernel_kl_grad(const VariationalKernel& k, const PriorSpec& prior,
                    std::vector<double>& d_mean, std::vector<double>& d_rho);

}  // namespace vmp
