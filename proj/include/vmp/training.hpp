#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vmp/datagen.hpp"
#include "vmp/elbo.hpp"
#include "vmp/unet.hpp"

namespace vmp {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;  // Adam, beta = (0.9, 0.999), eps = 1e-8
  std::uint64_t seed = 0;
  LossConfig loss;
  PriorSpec prior;
  std::string checkpoint_path;  // written after the last epoch if non-empty
};

struct EpochStats {
  std::size_t epoch = 0;
  double elbo_loss = 0.0;  // mean over batches of nll + kl_weight * KL
  double nll = 0.0;        // mean over batches
  double kl = 0.0;         // KL sum at end of epoch
  double val_dice = 0.0;
};

// Adam on all (mean, rho) parameters. `val` may be null, in which case the
// validation Dice column is computed on the training set. Throws DataError
// naming the offending batch if the loss or a gradient turns non-finite.
std::vector<EpochStats> train(VariationalModel& model, const Dataset& data,
                              const Dataset* val, const TrainConfig& cfg);

void write_history_csv(const std::vector<EpochStats>& history,
                       const std::string& path);

// Mean foreground Dice (labels >= 1 as one group) over a dataset.
double dataset_dice(const VariationalModel& model, const Dataset& data);

struct GradCheckReport {
  double max_rel_err = 0.0;
  double mean_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t worst_layer = 0;
  bool pass = false;
};

// Central-difference verification of the ELBO gradient on one sample:
// `n_params` parameters sampled uniformly over the model, step h, pass iff
// max relative error <= tol with rel = |ga - gfd| / max(|ga|, |gfd|, 1e-8).
GradCheckReport grad_check(VariationalModel& model, const LabeledSample& sample,
                           std::size_t classes, const LossConfig& loss,
                           const PriorSpec& prior, double h, double tol,
                           std::size_t n_params, std::uint64_t seed);

}  // namespace vmp
