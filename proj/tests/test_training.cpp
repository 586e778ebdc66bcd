#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "vmp/datagen.hpp"
#include "vmp/training.hpp"

using namespace vmp;

namespace {

NetworkConfig toy_config(ModelMode mode = ModelMode::vmp) {
  NetworkConfig cfg;
  cfg.input_h = cfg.input_w = 16;
  cfg.in_channels = 1;
  cfg.num_classes = 2;
  cfg.encoder_kernels = {3, 4};
  cfg.decoder_kernels = {3};
  cfg.mode = mode;
  return cfg;
}

Dataset toy_dataset(std::size_t count, std::uint64_t seed) {
  ShapeTaskConfig g;
  g.canvas = 32;
  g.count = count;
  g.seed = seed;
  Dataset big = generate(g);
  // Crop to 16x16 so the toy net stays fast.
  Dataset ds;
  ds.h = ds.w = 16;
  ds.c_in = 1;
  ds.classes = 2;
  for (const auto& s : big.samples) {
    LabeledSample t;
    t.image = Tensor({16, 16, 1});
    t.mask.resize(256);
    for (std::size_t y = 0; y < 16; ++y) {
      for (std::size_t x = 0; x < 16; ++x) {
        t.image.at(y, x, 0) = s.image.at(y, x, 0);
        t.mask[y * 16 + x] = s.mask[y * 32 + x];
      }
    }
    ds.samples.push_back(std::move(t));
  }
  return ds;
}

void inflate_params(VariationalModel& model, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& layer : model.layers) {
    for (auto& k : layer.kernels) {
      for (std::size_t l = 0; l < k.length(); ++l) {
        k.mean[l] = 0.3 * rng.normal();
        k.rho[l] = softplus_inverse(0.005 + 0.02 * rng.uniform());
      }
    }
  }
}

std::string file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("zero learning rate leaves parameters unchanged, history flat") {
  VariationalModel model = build(toy_config(), 1);
  const VariationalModel before = model;
  Dataset ds = toy_dataset(4, 2);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.learning_rate = 0.0;
  cfg.loss.kl_weight = 1e-3;
  const auto history = train(model, ds, nullptr, cfg);
  REQUIRE(history.size() == 3);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    for (std::size_t k = 0; k < model.layers[i].kernels.size(); ++k) {
      CHECK(model.layers[i].kernels[k].mean == before.layers[i].kernels[k].mean);
      CHECK(model.layers[i].kernels[k].rho == before.layers[i].kernels[k].rho);
    }
  }
  for (const auto& st : history) {
    CHECK(st.elbo_loss == doctest::Approx(history[0].elbo_loss));
    CHECK(st.kl == doctest::Approx(history[0].kl));
  }
}

TEST_CASE("one step on one sample matches a hand-rolled Adam reference") {
  VariationalModel model = build(toy_config(ModelMode::deterministic), 5);
  inflate_params(model, 6);
  VariationalModel reference = model;
  Dataset ds = toy_dataset(1, 7);

  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 1;
  cfg.learning_rate = 0.01;
  cfg.loss.likelihood_form = LikelihoodForm::plugin_crossentropy;
  cfg.loss.kl_weight = 0.0;
  train(model, ds, nullptr, cfg);

  // Reference: gradient via backward, then one textbook Adam update
  // (t=1: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)).
  Gradients grads = Gradients::zeros_like(reference);
  {
    ForwardTape tape;
    forward(reference, ds.samples[0].image, &tape);
    Tensor onehot = one_hot(ds.samples[0].mask, 16, 16, 2);
    Tensor g_prob, g_cov;
    expected_nll_grad(tape.softmax, onehot, cfg.loss, g_prob, g_cov);
    backward(reference, tape, g_prob, g_cov, grads);
  }
  constexpr double eps = 1e-8;
  for (std::size_t li = 0; li < reference.layers.size(); ++li) {
    auto& layer = reference.layers[li];
    const std::size_t len = layer.kernels.front().length();
    for (std::size_t k = 0; k < layer.kernels.size(); ++k) {
      for (std::size_t l = 0; l < len; ++l) {
        const double gm = grads.d_mean[li][k * len + l];
        const double gr = grads.d_rho[li][k * len + l];
        layer.kernels[k].mean[l] -=
            cfg.learning_rate * gm / (std::abs(gm) + eps);
        layer.kernels[k].rho[l] -=
            cfg.learning_rate * gr / (std::abs(gr) + eps);
      }
    }
  }
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    for (std::size_t k = 0; k < model.layers[li].kernels.size(); ++k) {
      for (std::size_t l = 0; l < model.layers[li].kernels[k].length(); ++l) {
        CHECK(model.layers[li].kernels[k].mean[l] ==
              doctest::Approx(reference.layers[li].kernels[k].mean[l])
                  .epsilon(1e-12));
        CHECK(model.layers[li].kernels[k].rho[l] ==
              doctest::Approx(reference.layers[li].kernels[k].rho[l])
                  .epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("training reduces the data term on the toy task") {
  VariationalModel model = build(toy_config(), 9);
  Dataset ds = toy_dataset(16, 10);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 4;
  cfg.loss.kl_weight = 1.0 / 16.0;
  const auto history = train(model, ds, nullptr, cfg);
  CHECK(history.back().nll < history.front().nll);
  CHECK(history.back().elbo_loss < history.front().elbo_loss);
  CHECK(history.back().val_dice >= history.front().val_dice);
}

TEST_CASE("same seed, single thread: byte-identical checkpoints") {
  Dataset ds = toy_dataset(6, 20);
  for (const std::string path :
       {std::string("/tmp/vmp_train_a.vmp"), std::string("/tmp/vmp_train_b.vmp")}) {
    VariationalModel model = build(toy_config(), 21);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 3;
    cfg.seed = 22;
    cfg.loss.kl_weight = 1e-2;
    cfg.checkpoint_path = path;
    train(model, ds, nullptr, cfg);
  }
  CHECK(file_bytes("/tmp/vmp_train_a.vmp") == file_bytes("/tmp/vmp_train_b.vmp"));
  std::remove("/tmp/vmp_train_a.vmp");
  std::remove("/tmp/vmp_train_b.vmp");
}

TEST_CASE("non-finite parameters abort training with a data error") {
  VariationalModel model = build(toy_config(), 23);
  model.layers[2].kernels[0].mean[0] = std::nan("");
  Dataset ds = toy_dataset(2, 24);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  CHECK_THROWS_AS(train(model, ds, nullptr, cfg), DataError);
}

TEST_CASE("history CSV has the documented columns") {
  std::vector<EpochStats> h(2);
  h[0] = {0, 1.5, 1.0, 100.0, 0.5};
  h[1] = {1, 1.2, 0.8, 90.0, 0.6};
  write_history_csv(h, "/tmp/vmp_hist.csv");
  std::ifstream is("/tmp/vmp_hist.csv");
  std::string line;
  std::getline(is, line);
  CHECK(line == "epoch,elbo,nll,kl,val_dice");
  std::getline(is, line);
  CHECK(line.substr(0, 2) == "0,");
  std::remove("/tmp/vmp_hist.csv");
}

TEST_CASE("grad_check: randomized VMP toy net passes at tol 1e-4") {
  VariationalModel model = build(toy_config(), 30);
  inflate_params(model, 31);
  Dataset ds = toy_dataset(1, 32);
  LossConfig loss;
  loss.kl_weight = 1e-2;
  PriorSpec prior;
  const auto report =
      grad_check(model, ds.samples[0], 2, loss, prior, 1e-5, 1e-4, 250, 33);
  CHECK(report.checked == 250);
  CHECK(report.pass);
  CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("grad_check: deterministic mode is a classic backprop check") {
  VariationalModel model = build(toy_config(ModelMode::deterministic), 34);
  inflate_params(model, 35);
  Dataset ds = toy_dataset(1, 36);
  LossConfig loss;
  loss.likelihood_form = LikelihoodForm::plugin_crossentropy;
  loss.kl_weight = 1e-2;
  PriorSpec prior;
  // h = 1e-4: central differences on a ~O(1) loss are truncation-limited
  // here; smaller h drives the quotient into double roundoff.
  const auto report =
      grad_check(model, ds.samples[0], 2, loss, prior, 1e-4, 1e-6, 200, 37);
  CHECK(report.pass);
}

TEST_CASE("grad_check failures are reported, not swallowed") {
  VariationalModel model = build(toy_config(), 38);
  inflate_params(model, 39);
  Dataset ds = toy_dataset(1, 40);
  LossConfig loss;
  PriorSpec prior;
  // An impossible tolerance must fail and name a worst layer.
  const auto report =
      grad_check(model, ds.samples[0], 2, loss, prior, 1e-5, 1e-16, 50, 41);
  CHECK_FALSE(report.pass);
  CHECK(report.max_rel_err > 1e-16);
  CHECK(report.worst_layer < model.layers.size());
}

TEST_CASE("train validates inputs") {
  VariationalModel model = build(toy_config(), 50);
  Dataset empty;
  TrainConfig cfg;
  CHECK_THROWS_AS(train(model, empty, nullptr, cfg), DataError);
  Dataset ds = toy_dataset(1, 51);
  ds.samples[0].mask[0] = 7;  // label out of range
  CHECK_THROWS_AS(train(model, ds, nullptr, cfg), DataError);
}
