// Command-line surface: dataset generation, training, evaluation, attacks,
// map export, and self-verification.

#include <CLI11.hpp>
#include <json.hpp>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "vmp/datagen.hpp"
#include "vmp/elbo.hpp"
#include "vmp/mc_oracle.hpp"
#include "vmp/metrics.hpp"
#include "vmp/moments.hpp"
#include "vmp/robustness.hpp"
#include "vmp/training.hpp"
#include "vmp/unet.hpp"

using nlohmann::json;

namespace {

json load_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw vmp::DataError("cannot open config " + path);
  return json::parse(is);
}

vmp::ShapeTaskConfig parse_gen_config(const json& j) {
  vmp::ShapeTaskConfig cfg;
  cfg.canvas = j.value("canvas", cfg.canvas);
  cfg.classes = j.value("classes", cfg.classes);
  cfg.shapes_per_image = j.value("shapes_per_image", cfg.shapes_per_image);
  cfg.texture_sigma = j.value("texture_sigma", cfg.texture_sigma);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.count = j.value("count", cfg.count);
  if (j.contains("intensity_bands")) {
    cfg.intensity_bands.clear();
    for (const auto& b : j.at("intensity_bands")) {
      cfg.intensity_bands.emplace_back(b.at(0).get<double>(),
                                       b.at(1).get<double>());
    }
  }
  return cfg;
}

vmp::NetworkConfig parse_net_config(const json& j, const vmp::Dataset& ds) {
  vmp::NetworkConfig cfg;
  cfg.input_h = ds.h;
  cfg.input_w = ds.w;
  cfg.in_channels = ds.c_in;
  cfg.num_classes = ds.classes;
  cfg.encoder_kernels =
      j.value("encoder_kernels", std::vector<std::size_t>{16, 32});
  cfg.decoder_kernels =
      j.value("decoder_kernels", std::vector<std::size_t>{16});
  cfg.kernel_size = j.value("kernel_size", cfg.kernel_size);
  cfg.sigma_pa = j.value("sigma_pa", cfg.sigma_pa);
  cfg.mode = j.value("mode", std::string("vmp")) == "deterministic"
                 ? vmp::ModelMode::deterministic
                 : vmp::ModelMode::vmp;
  return cfg;
}

vmp::TrainConfig parse_train_config(const json& j, std::size_t n_train) {
  vmp::TrainConfig cfg;
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.loss.kl_weight =
      j.value("kl_weight", 1.0 / static_cast<double>(std::max<std::size_t>(
                               1, n_train)));
  cfg.loss.var_floor = j.value("var_floor", cfg.loss.var_floor);
  cfg.loss.likelihood_form =
      j.value("likelihood", std::string("gaussian")) == "plugin"
          ? vmp::LikelihoodForm::plugin_crossentropy
          : vmp::LikelihoodForm::gaussian_predictive;
  cfg.prior.prior_variance = j.value("prior_variance", 1.0);
  return cfg;
}

std::vector<std::uint8_t> foreground_labels(std::size_t classes) {
  std::vector<std::uint8_t> fg;
  for (std::size_t c = 1; c < classes; ++c) {
    fg.push_back(static_cast<std::uint8_t>(c));
  }
  return fg;
}

// ---------------------------------------------------------------------------
// verify: MC-oracle spot checks + gradient check
// ---------------------------------------------------------------------------

vmp::VariationalKernel random_kernel(int kh, int kw, int c, vmp::Rng& rng) {
  vmp::VariationalKernel k;
  k.kh = kh;
  k.kw = kw;
  k.in_channels = c;
  const std::size_t len = static_cast<std::size_t>(kh) * kw * c;
  k.mean.resize(len);
  k.rho.resize(len);
  for (std::size_t i = 0; i < len; ++i) {
    k.mean[i] = rng.normal() * 0.5;
    k.rho[i] = vmp::softplus_inverse(0.01 + 0.05 * rng.uniform());
  }
  return k;
}

vmp::RandomTensor random_input(std::size_t h, std::size_t w, std::size_t c,
                               vmp::Rng& rng, double mean_scale = 1.0,
                               double var_lo = 0.01, double var_hi = 0.2) {
  vmp::Tensor m({h, w, c}), v({h, w, c});
  for (std::size_t i = 0; i < m.numel(); ++i) {
    m.data[i] = mean_scale * rng.normal();
    v.data[i] = var_lo + (var_hi - var_lo) * rng.uniform();
  }
  return {m, v};
}

std::vector<double> draw_kernel(const vmp::VariationalKernel& k,
                                vmp::Rng& rng) {
  std::vector<double> w(k.length());
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = k.mean[i] + std::sqrt(vmp::softplus(k.rho[i])) * rng.normal();
  }
  return w;
}

bool verify_suite(std::ostream& os) {
  bool all_pass = true;
  auto check = [&](const std::string& name, bool ok) {
    os << (ok ? "PASS " : "FAIL ") << name << "\n";
    all_pass = all_pass && ok;
  };
  const std::size_t n = 20000;
  vmp::Rng rng(7);

  {  // conv over a random input, joint weight/input sampling
    vmp::RandomTensor in = random_input(4, 4, 2, rng);
    vmp::VariationalKernel k = random_kernel(3, 3, 2, rng);
    vmp::PatchMatrix geom = vmp::extract_patches(in.mean, 3, 3, 1, 0);
    vmp::RandomTensor analytic = vmp::conv_random(geom, in, k);
    auto est = vmp::mc_layer_moments(
        in,
        [&](const vmp::Tensor& x, vmp::Rng& r) {
          const std::vector<double> w = draw_kernel(k, r);
          vmp::PatchMatrix p = vmp::extract_patches(x, 3, 3, 1, 0);
          const std::vector<double> y = vmp::matvec(p, w);
          vmp::Tensor out({p.out_h, p.out_w, 1});
          out.data = y;
          return out;
        },
        n, 11);
    check("conv_random exact_linear",
          vmp::compare_moments(analytic, est, vmp::ComparePolicy::exact_linear)
              .pass);
  }
  {  // up-sample (deterministic linear op on a random input)
    vmp::RandomTensor in = random_input(3, 3, 2, rng);
    vmp::RandomTensor analytic = vmp::upsample_moments(in);
    auto est = vmp::mc_layer_moments(
        in,
        [&](const vmp::Tensor& x, vmp::Rng&) {
          return vmp::upsample_moments(vmp::RandomTensor::deterministic(x))
              .mean;
        },
        n, 13);
    check("upsample exact_linear",
          vmp::compare_moments(analytic, est, vmp::ComparePolicy::exact_linear)
              .pass);
  }
  {  // pad (random border)
    const double sigma_pa = 0.05;
    vmp::RandomTensor in = random_input(3, 3, 1, rng);
    vmp::RandomTensor analytic = vmp::pad_moments(in, 1, sigma_pa);
    auto est = vmp::mc_layer_moments(
        in,
        [&](const vmp::Tensor& x, vmp::Rng& r) {
          vmp::Tensor out({x.dim(0) + 2, x.dim(1) + 2, x.dim(2)});
          for (auto& v : out.data) v = std::sqrt(sigma_pa) * r.normal();
          for (std::size_t y = 0; y < x.dim(0); ++y)
            for (std::size_t xx = 0; xx < x.dim(1); ++xx)
              for (std::size_t c = 0; c < x.dim(2); ++c)
                out.at(y + 1, xx + 1, c) = x.at(y, xx, c);
          return out;
        },
        n, 17);
    check("pad exact_linear",
          vmp::compare_moments(analytic, est, vmp::ComparePolicy::exact_linear)
              .pass);
  }
  {  // ReLU in the Taylor regime
    vmp::Tensor m({2, 2, 1}), v({2, 2, 1});
    for (std::size_t i = 0; i < 4; ++i) {
      m.data[i] = 2.0 + rng.uniform();
      v.data[i] = 0.05 + 0.05 * rng.uniform();
    }
    vmp::RandomTensor in(m, v);
    vmp::RandomTensor analytic = vmp::relu_moments(in);
    auto est = vmp::mc_layer_moments(
        in,
        [](const vmp::Tensor& x, vmp::Rng&) {
          vmp::Tensor out = x;
          for (auto& val : out.data) val = std::max(0.0, val);
          return out;
        },
        100000, 19);
    check("relu taylor_regime",
          vmp::compare_moments(analytic, est, vmp::ComparePolicy::taylor_regime)
              .pass);
  }
  {  // gradient check on a toy net
    vmp::NetworkConfig cfg;
    cfg.input_h = cfg.input_w = 16;
    cfg.in_channels = 1;
    cfg.num_classes = 2;
    cfg.encoder_kernels = {3, 4};
    cfg.decoder_kernels = {3};
    vmp::VariationalModel model = vmp::build(cfg, 3);
    // Healthy parameter scales keep the finite-difference quotient well
    // above the double-precision roundoff floor.
    vmp::Rng prng(99);
    for (auto& layer : model.layers) {
      for (auto& k : layer.kernels) {
        for (std::size_t l = 0; l < k.length(); ++l) {
          k.mean[l] = 0.3 * prng.normal();
          k.rho[l] = vmp::softplus_inverse(0.005 + 0.02 * prng.uniform());
        }
      }
    }
    vmp::ShapeTaskConfig gen_cfg;
    gen_cfg.canvas = 32;
    gen_cfg.count = 1;
    gen_cfg.seed = 5;
    vmp::Dataset ds = vmp::generate(gen_cfg);
    vmp::LabeledSample s;
    s.image = vmp::Tensor({16, 16, 1});
    s.mask.resize(256);
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) {
        s.image.at(y, x, 0) = ds.samples[0].image.at(y, x, 0);
        s.mask[y * 16 + x] = ds.samples[0].mask[y * 32 + x];
      }
    vmp::LossConfig loss;
    loss.kl_weight = 1e-3;
    vmp::PriorSpec prior;
    auto report =
        vmp::grad_check(model, s, 2, loss, prior, 1e-5, 1e-4, 200, 23);
    check("grad_check toy net (max rel err " +
              std::to_string(report.max_rel_err) + ")",
          report.pass);
  }
  return all_pass;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Large tensor buffers churn through mmap/munmap otherwise, roughly
  // doubling training wall time in system calls.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Variational moment-propagation segmentation toolkit"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  std::string gen_config, gen_out;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("--config", gen_config, "JSON task config")->required();
  gen->add_option("--out", gen_out, "Output .vmpd path")->required();
  gen->add_option("--seed", gen_seed, "Override config seed");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  std::string tr_data, tr_config, tr_out, tr_history, tr_val;
  train_cmd->add_option("--data", tr_data)->required();
  train_cmd->add_option("--config", tr_config)->required();
  train_cmd->add_option("--out", tr_out)->required();
  train_cmd->add_option("--history", tr_history);
  train_cmd->add_option("--val", tr_val, "Optional validation .vmpd");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a model");
  std::string ev_model, ev_data, ev_report;
  eval_cmd->add_option("--model", ev_model)->required();
  eval_cmd->add_option("--data", ev_data)->required();
  eval_cmd->add_option("--report", ev_report)->required();

  // attack
  auto* attack_cmd = app.add_subcommand("attack", "Run a perturbation sweep");
  std::string at_model, at_data, at_kind, at_report;
  std::vector<double> at_snr, at_eps;
  int at_source = -1, at_target = -1;
  std::size_t at_steps = 20;
  std::uint64_t at_seed = 0;
  attack_cmd->add_option("--model", at_model)->required();
  attack_cmd->add_option("--data", at_data)->required();
  attack_cmd->add_option("--kind", at_kind)
      ->required()
      ->check(CLI::IsMember({"gaussian", "fgsm", "pgd"}));
  attack_cmd->add_option("--snr-db", at_snr, "SNR values (gaussian)");
  attack_cmd->add_option("--eps", at_eps, "Epsilon values (fgsm/pgd)");
  attack_cmd->add_option("--source", at_source, "PGD source label");
  attack_cmd->add_option("--target", at_target, "PGD target label");
  attack_cmd->add_option("--steps", at_steps, "PGD iterations");
  attack_cmd->add_option("--seed", at_seed);
  attack_cmd->add_option("--report", at_report)->required();

  // maps
  auto* maps_cmd = app.add_subcommand("maps", "Export segmentation + uncertainty maps");
  std::string mp_model, mp_data, mp_prefix;
  std::size_t mp_index = 0;
  maps_cmd->add_option("--model", mp_model)->required();
  maps_cmd->add_option("--data", mp_data)->required();
  maps_cmd->add_option("--index", mp_index)->required();
  maps_cmd->add_option("--out-prefix", mp_prefix)->required();

  // verify
  auto* verify_cmd = app.add_subcommand("verify", "Run self-verification");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }

  try {
    if (*gen) {
      vmp::ShapeTaskConfig cfg = parse_gen_config(load_json(gen_config));
      if (gen_seed) cfg.seed = *gen_seed;
      vmp::save_dataset(vmp::generate(cfg), gen_out);
      std::cout << "wrote " << gen_out << std::endl;
    } else if (*train_cmd) {
      const vmp::Dataset data = vmp::load_dataset(tr_data);
      const json j = load_json(tr_config);
      const vmp::NetworkConfig net_cfg = parse_net_config(j, data);
      vmp::TrainConfig cfg = parse_train_config(j, data.size());
      cfg.checkpoint_path = tr_out;
      vmp::VariationalModel model = vmp::build(net_cfg, cfg.seed);
      std::optional<vmp::Dataset> val;
      if (!tr_val.empty()) val = vmp::load_dataset(tr_val);
      const auto history =
          vmp::train(model, data, val ? &*val : nullptr, cfg);
      if (!tr_history.empty()) vmp::write_history_csv(history, tr_history);
      std::cout << "final val_dice " << history.back().val_dice << std::endl;
    } else if (*eval_cmd) {
      const vmp::VariationalModel model = vmp::load_checkpoint(ev_model);
      const vmp::Dataset data = vmp::load_dataset(ev_data);
      const auto fg = foreground_labels(data.classes);
      std::ofstream os(ev_report);
      if (!os) throw vmp::DataError("cannot open " + ev_report);
      os << "sample,dice,avg_predictive_variance\n";
      os.precision(12);
      double total = 0.0;
      for (std::size_t i = 0; i < data.size(); ++i) {
        const auto out = vmp::forward(model, data.samples[i].image);
        const double d = vmp::dice(out.class_map, data.samples[i].mask, fg);
        os << i << "," << d << "," << vmp::avg_predictive_variance(out) << "\n";
        total += d;
      }
      std::cout << "mean dice " << total / static_cast<double>(data.size())
                << std::endl;
    } else if (*attack_cmd) {
      const vmp::VariationalModel model = vmp::load_checkpoint(at_model);
      const vmp::Dataset data = vmp::load_dataset(at_data);
      const auto fg = foreground_labels(data.classes);
      const bool gaussian = at_kind == "gaussian";
      if (gaussian && at_snr.empty()) {
        std::cerr << "error: --kind gaussian requires --snr-db" << std::endl;
        return 1;
      }
      if (!gaussian && at_eps.empty()) {
        std::cerr << "error: --kind " << at_kind << " requires --eps"
                  << std::endl;
        return 1;
      }
      if (at_kind == "pgd" && (at_source < 0 || at_target < 0)) {
        std::cerr << "error: --kind pgd requires --source and --target"
                  << std::endl;
        return 1;
      }
      std::ofstream os(at_report);
      if (!os) throw vmp::DataError("cannot open " + at_report);
      os << "snr_or_eps,dice,avg_predictive_variance\n";
      os.precision(12);
      const std::vector<double>& sweep = gaussian ? at_snr : at_eps;
      for (double value : sweep) {
        double dsum = 0.0, vsum = 0.0;
        for (std::size_t i = 0; i < data.size(); ++i) {
          const auto& s = data.samples[i];
          vmp::Tensor adv;
          if (gaussian) {
            adv = vmp::add_gaussian_noise(s.image, value, {}, at_seed + i);
          } else if (at_kind == "fgsm") {
            adv = vmp::fgsm(model, s.image, s.mask, value);
          } else {
            vmp::AttackConfig acfg;
            acfg.kind = vmp::AttackKind::pgd;
            acfg.epsilon = value;
            acfg.steps = at_steps;
            acfg.source_label = at_source;
            acfg.target_label = at_target;
            adv = vmp::pgd_targeted(model, s.image, s.mask, acfg);
          }
          const auto out = vmp::forward(model, adv);
          dsum += vmp::dice(out.class_map, s.mask, fg);
          vsum += vmp::avg_predictive_variance(out);
        }
        const double nd = static_cast<double>(data.size());
        os << value << "," << dsum / nd << "," << vsum / nd << "\n";
      }
      std::cout << "wrote " << at_report << std::endl;
    } else if (*maps_cmd) {
      const vmp::VariationalModel model = vmp::load_checkpoint(mp_model);
      const vmp::Dataset data = vmp::load_dataset(mp_data);
      if (mp_index >= data.size()) {
        std::cerr << "error: --index out of range" << std::endl;
        return 1;
      }
      // One forward pass supplies both maps.
      const auto out = vmp::forward(model, data.samples[mp_index].image);
      const std::size_t h = data.h, w = data.w, c = data.classes;
      vmp::Tensor seg({h, w});
      vmp::Tensor unc({h, w});
      for (std::size_t px = 0; px < h * w; ++px) {
        seg.data[px] = static_cast<double>(out.class_map[px]);
        double u = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
          u += out.uncertainty.data[px * c + i];
        }
        unc.data[px] = u / static_cast<double>(c);
      }
      vmp::export_pgm(seg, mp_prefix + "_seg.pgm",
                      vmp::PgmNormalization::fixed_range,
                      static_cast<double>(c - 1));
      vmp::export_pgm(unc, mp_prefix + "_unc.pgm",
                      vmp::PgmNormalization::per_image);
      std::cout << "wrote " << mp_prefix << "_seg.pgm and " << mp_prefix
                << "_unc.pgm" << std::endl;
    } else if (*verify_cmd) {
      if (!verify_suite(std::cout)) {
        std::cerr << "verification failed" << std::endl;
        return 2;
      }
      std::cout << "all checks passed" << std::endl;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
