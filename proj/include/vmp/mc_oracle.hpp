#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vmp/moments.hpp"
#include "vmp/rng.hpp"
#include "vmp/tensor.hpp"

namespace vmp {

// Empirical output moments from joint sampling, with standard errors (the
// variance SE uses the fourth-central-moment formula).
struct McEstimate {
  Tensor mean, var;
  Tensor se_mean, se_var;
  std::size_t n_samples = 0;
};

// The op under test: maps one sampled input realization to the exact layer
// output. The Rng continues the per-sample stream, so the op can draw its
// own weight samples jointly with the input.
using LayerSampleFn = std::function<Tensor(const Tensor& x, Rng& rng)>;

// Draws n_samples realizations x ~ N(input.mean, diag(input.var))
// elementwise, applies `op` exactly, and accumulates unbiased mean/variance
// estimates per output element.
McEstimate mc_layer_moments(const RandomTensor& input, const LayerSampleFn& op,
                            std::size_t n_samples, std::uint64_t seed);

enum class ComparePolicy { exact_linear, taylor_regime };

struct ElementVerdict {
  std::size_t index = 0;
  double analytic_mean = 0, empirical_mean = 0, se_mean = 0;
  double analytic_var = 0, empirical_var = 0, se_var = 0;
  bool pass = true;
  bool skipped = false;
};

struct CompareReport {
  bool pass = true;
  std::size_t checked = 0, skipped = 0, failed = 0;
  std::vector<ElementVerdict> elements;
};

// exact_linear: pass iff |d mean| <= 3 SE and |d var| <= 4 SE elementwise.
// taylor_regime: elements with CoV = sqrt(var)/|mean| <= cov_max must agree
// within rel_tol relative error (mean and variance); others are skipped.
CompareReport compare_moments(const RandomTensor& analytic,
                              const McEstimate& empirical,
                              ComparePolicy policy, double rel_tol = 0.15,
                              double cov_max = 0.3);

// One CSV row per element: analytic, empirical, SE, verdict.
void write_compare_csv(const CompareReport& report, const std::string& path);

}  // namespace vmp
