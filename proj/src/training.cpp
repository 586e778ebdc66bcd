#include "vmp/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "vmp/metrics.hpp"

namespace vmp {

namespace {

struct AdamState {
  std::vector<std::vector<double>> m_mean, v_mean, m_rho, v_rho;
  std::uint64_t t = 0;

  explicit AdamState(const VariationalModel& model) {
    m_mean.resize(model.layers.size());
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      const std::size_t n = model.layers[i].kernels.size() *
                            model.layers[i].kernels.front().length();
      m_mean[i].assign(n, 0.0);
    }
    v_mean = m_mean;
    m_rho = m_mean;
    v_rho = m_mean;
  }
};

void adam_step(VariationalModel& model, const Gradients& grads, AdamState& st,
               double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  st.t += 1;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    auto& layer = model.layers[li];
    const std::size_t len = layer.kernels.front().length();
    for (std::size_t k = 0; k < layer.kernels.size(); ++k) {
      auto& kernel = layer.kernels[k];
      for (std::size_t l = 0; l < len; ++l) {
        const std::size_t idx = k * len + l;
        {
          const double g = grads.d_mean[li][idx];
          double& m = st.m_mean[li][idx];
          double& v = st.v_mean[li][idx];
          m = b1 * m + (1.0 - b1) * g;
          v = b2 * v + (1.0 - b2) * g * g;
          kernel.mean[l] -= lr * (m / c1) / (std::sqrt(v / c2) + eps);
        }
        {
          const double g = grads.d_rho[li][idx];
          double& m = st.m_rho[li][idx];
          double& v = st.v_rho[li][idx];
          m = b1 * m + (1.0 - b1) * g;
          v = b2 * v + (1.0 - b2) * g * g;
          kernel.rho[l] -= lr * (m / c1) / (std::sqrt(v / c2) + eps);
        }
      }
    }
  }
}

// Sample loss + gradient accumulation (scaled by `scale`); returns the NLL.
double sample_grads(const VariationalModel& model, const LabeledSample& s,
                    std::size_t classes, const LossConfig& loss,
                    Gradients& grads, double scale) {
  ForwardTape tape;
  forward(model, s.image, &tape);
  const Tensor onehot =
      one_hot(s.mask, s.image.dim(0), s.image.dim(1), classes);
  Tensor g_prob, g_cov;
  const double nll = expected_nll_grad(tape.softmax, onehot, loss, g_prob, g_cov);
  if (scale != 1.0) {
    for (auto& v : g_prob.data) v *= scale;
    for (auto& v : g_cov.data) v *= scale;
  }
  backward(model, tape, g_prob, g_cov, grads);
  return nll;
}

}  // namespace

double dataset_dice(const VariationalModel& model, const Dataset& data) {
  if (data.samples.empty()) throw DataError("dataset_dice: empty dataset");
  std::vector<std::uint8_t> fg;
  for (std::uint8_t c = 1; c < data.classes; ++c) fg.push_back(c);
  double total = 0.0;
  for (const auto& s : data.samples) {
    const SegmentationOutput out = forward(model, s.image);
    total += dice(out.class_map, s.mask, fg);
  }
  return total / static_cast<double>(data.samples.size());
}

std::vector<EpochStats> train(VariationalModel& model, const Dataset& data,
                              const Dataset* val, const TrainConfig& cfg) {
  if (data.samples.empty()) throw DataError("train: empty dataset");
  if (cfg.batch_size < 1) throw GeometryError("train: batch_size must be >= 1");
  if (cfg.learning_rate < 0.0) {
    throw GeometryError("train: learning_rate must be >= 0");
  }
  for (const auto& s : data.samples) {
    for (std::uint8_t l : s.mask) {
      if (l >= model.cfg.num_classes) {
        throw DataError("train: mask label out of range");
      }
    }
  }

  AdamState adam(model);
  Rng root(cfg.seed);
  std::vector<std::size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<EpochStats> history;
  history.reserve(cfg.epochs);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = root.split(epoch);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);
    }

    double epoch_nll = 0.0, epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += cfg.batch_size, ++batches) {
      const std::size_t stop = std::min(start + cfg.batch_size, order.size());
      const double scale = 1.0 / static_cast<double>(stop - start);
      Gradients grads = Gradients::zeros_like(model);
      double batch_nll = 0.0;
      for (std::size_t i = start; i < stop; ++i) {
        batch_nll += scale * sample_grads(model, data.samples[order[i]],
                                          model.cfg.num_classes, cfg.loss,
                                          grads, scale);
      }
      model_kl_grad(model, cfg.prior, grads, cfg.loss.kl_weight);
      const double kl = model_kl(model, cfg.prior);
      const double loss = elbo_loss(batch_nll, kl, cfg.loss);
      if (!std::isfinite(loss) || !grads.all_finite()) {
        throw DataError("train: non-finite loss at epoch " +
                        std::to_string(epoch) + " batch " +
                        std::to_string(batches));
      }
      if (cfg.learning_rate > 0.0) {
        adam_step(model, grads, adam, cfg.learning_rate);
      }
      epoch_nll += batch_nll;
      epoch_loss += loss;
    }

    EpochStats st;
    st.epoch = epoch;
    st.nll = epoch_nll / static_cast<double>(batches);
    st.elbo_loss = epoch_loss / static_cast<double>(batches);
    st.kl = model_kl(model, cfg.prior);
    st.val_dice = dataset_dice(model, val ? *val : data);
    history.push_back(st);
  }

  if (!cfg.checkpoint_path.empty()) {
    save_checkpoint(model, cfg.checkpoint_path);
  }
  return history;
}

void write_history_csv(const std::vector<EpochStats>& history,
                       const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("write_history_csv: cannot open " + path);
  os << "epoch,elbo,nll,kl,val_dice\n";
  os.precision(12);
  for (const auto& st : history) {
    os << st.epoch << "," << st.elbo_loss << "," << st.nll << "," << st.kl
       << "," << st.val_dice << "\n";
  }
}

namespace {

double full_loss(const VariationalModel& model, const Tensor& image,
                 const Tensor& onehot, const LossConfig& loss,
                 const PriorSpec& prior) {
  ForwardTape tape;
  forward(model, image, &tape);
  const double nll = expected_nll(tape.softmax, onehot, loss);
  return elbo_loss(nll, model_kl(model, prior), loss);
}

}  // namespace

GradCheckReport grad_check(VariationalModel& model, const LabeledSample& sample,
                           std::size_t classes, const LossConfig& loss,
                           const PriorSpec& prior, double h, double tol,
                           std::size_t n_params, std::uint64_t seed) {
  const Tensor onehot =
      one_hot(sample.mask, sample.image.dim(0), sample.image.dim(1), classes);

  // Analytic gradient.
  Gradients grads = Gradients::zeros_like(model);
  {
    ForwardTape tape;
    forward(model, sample.image, &tape);
    Tensor g_prob, g_cov;
    expected_nll_grad(tape.softmax, onehot, loss, g_prob, g_cov);
    backward(model, tape, g_prob, g_cov, grads);
    model_kl_grad(model, prior, grads, loss.kl_weight);
  }

  Rng rng(seed);
  GradCheckReport report;
  double sum_rel = 0.0;
  for (std::size_t trial = 0; trial < n_params; ++trial) {
    const std::size_t li = rng.uniform_index(model.layers.size());
    auto& layer = model.layers[li];
    const std::size_t len = layer.kernels.front().length();
    const std::size_t k = rng.uniform_index(layer.kernels.size());
    const std::size_t l = rng.uniform_index(len);
    const bool is_mean = rng.uniform() < 0.5;

    double& param = is_mean ? layer.kernels[k].mean[l] : layer.kernels[k].rho[l];
    const double saved = param;
    param = saved + h;
    const double lp = full_loss(model, sample.image, onehot, loss, prior);
    param = saved - h;
    const double lm = full_loss(model, sample.image, onehot, loss, prior);
    param = saved;

    const double gfd = (lp - lm) / (2.0 * h);
    const double ga = is_mean ? grads.d_mean[li][k * len + l]
                              : grads.d_rho[li][k * len + l];
    const double rel =
        std::abs(ga - gfd) / std::max({std::abs(ga), std::abs(gfd), 1e-8});
    sum_rel += rel;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_layer = li;
    }
    ++report.checked;
  }
  report.mean_rel_err = sum_rel / static_cast<double>(std::max<std::size_t>(
                                      1, report.checked));
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace vmp
