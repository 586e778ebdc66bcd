#include "vmp/elbo.hpp"

#include <cmath>

namespace vmp {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;

void check_shapes(const SoftmaxMoments& output, const Tensor& onehot) {
  if (output.prob_mean.shape != onehot.shape) {
    throw GeometryError("expected_nll: label shape mismatch");
  }
}
}  // namespace

double expected_nll(const SoftmaxMoments& output, const Tensor& onehot,
                    const LossConfig& cfg) {
  check_shapes(output, onehot);
  const std::size_t c = output.prob_mean.dim(2);
  const std::size_t npix = output.prob_mean.dim(0) * output.prob_mean.dim(1);
  const double eps = cfg.var_floor;
  double total = 0.0;
  for (std::size_t px = 0; px < npix; ++px) {
    const double* mu = output.prob_mean.data.data() + px * c;
    const double* y = onehot.data.data() + px * c;
    if (cfg.likelihood_form == LikelihoodForm::gaussian_predictive) {
      const double* cov = output.cov.data.data() + px * c * c;
      for (std::size_t i = 0; i < c; ++i) {
        const double v = cov[i * c + i] + eps;
        const double r = y[i] - mu[i];
        total += r * r / (2.0 * v) + 0.5 * std::log(kTwoPi * v);
      }
    } else {
      for (std::size_t i = 0; i < c; ++i) {
        if (y[i] != 0.0) total -= y[i] * std::log(mu[i] + eps);
      }
    }
  }
  return total / static_cast<double>(npix);
}

double expected_nll_grad(const SoftmaxMoments& output, const Tensor& onehot,
                         const LossConfig& cfg, Tensor& g_prob, Tensor& g_cov) {
  check_shapes(output, onehot);
  const std::size_t c = output.prob_mean.dim(2);
  const std::size_t npix = output.prob_mean.dim(0) * output.prob_mean.dim(1);
  const double eps = cfg.var_floor;
  const double inv_n = 1.0 / static_cast<double>(npix);
  g_prob = Tensor(output.prob_mean.shape, 0.0);
  double total = 0.0;
  if (cfg.likelihood_form == LikelihoodForm::gaussian_predictive) {
    g_cov = Tensor(output.cov.shape, 0.0);
    for (std::size_t px = 0; px < npix; ++px) {
      const double* mu = output.prob_mean.data.data() + px * c;
      const double* y = onehot.data.data() + px * c;
      const double* cov = output.cov.data.data() + px * c * c;
      for (std::size_t i = 0; i < c; ++i) {
        const double v = cov[i * c + i] + eps;
        const double r = y[i] - mu[i];
        total += r * r / (2.0 * v) + 0.5 * std::log(kTwoPi * v);
        g_prob.data[px * c + i] = -r / v * inv_n;
        g_cov.data[px * c * c + i * c + i] =
            (-r * r / (2.0 * v * v) + 0.5 / v) * inv_n;
      }
    }
  } else {
    g_cov = Tensor();
    for (std::size_t px = 0; px < npix; ++px) {
      const double* mu = output.prob_mean.data.data() + px * c;
      const double* y = onehot.data.data() + px * c;
      for (std::size_t i = 0; i < c; ++i) {
        if (y[i] != 0.0) {
          total -= y[i] * std::log(mu[i] + eps);
          g_prob.data[px * c + i] = -y[i] / (mu[i] + eps) * inv_n;
        }
      }
    }
  }
  return total * inv_n;
}

Tensor one_hot(const std::vector<std::uint8_t>& mask, std::size_t h,
               std::size_t w, std::size_t classes) {
  if (mask.size() != h * w) throw GeometryError("one_hot: mask size mismatch");
  Tensor out({h, w, classes}, 0.0);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] >= classes) throw DataError("one_hot: label out of range");
    out.data[i * classes + mask[i]] = 1.0;
  }
  return out;
}

}  // namespace vmp
