#pragma once

#include "vmp/layers.hpp"
#include "vmp/tensor.hpp"

namespace vmp {

enum class LikelihoodForm { gaussian_predictive, plugin_crossentropy };

struct LossConfig {
  double kl_weight = 1.0;       // commonly 1 / N_train
  double var_floor = 1e-3;      // epsilon regularizing predictive variances
  LikelihoodForm likelihood_form = LikelihoodForm::gaussian_predictive;
};

// Expected negative log-likelihood of one-hot labels under the propagated
// predictive moments, averaged over pixels.
//   gaussian_predictive: sum_c [ (y_c - mu_c)^2 / (2 (v_c + eps))
//                              + 0.5 ln(2 pi (v_c + eps)) ]
//   plugin_crossentropy: -sum_c y_c ln(mu_c + eps)
double expected_nll(const SoftmaxMoments& output, const Tensor& onehot,
                    const LossConfig& cfg);

// Same value, also filling the gradients with respect to prob_mean and the
// per-pixel covariance (only diagonal entries receive gradient).
double expected_nll_grad(const SoftmaxMoments& output, const Tensor& onehot,
                         const LossConfig& cfg, Tensor& g_prob, Tensor& g_cov);

inline double elbo_loss(double nll, double kl_sum, const LossConfig& cfg) {
  if (kl_sum < 0.0) throw DataError("elbo_loss: negative KL sum");
  return nll + cfg.kl_weight * kl_sum;
}

// One-hot encoding of an integer mask (H x W values in [0, classes)).
Tensor one_hot(const std::vector<std::uint8_t>& mask, std::size_t h,
               std::size_t w, std::size_t classes);

}  // namespace vmp
