#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vmp/layers.hpp"
#include "vmp/moments.hpp"

namespace vmp {

enum class ModelMode { vmp, deterministic };

struct NetworkConfig {
  std::size_t input_h = 64;
  std::size_t input_w = 64;
  std::size_t in_channels = 1;
  std::size_t num_classes = 2;
  std::vector<std::size_t> encoder_kernels;  // e.g. {16, 32, 64}
  std::vector<std::size_t> decoder_kernels;  // depth = encoder depth - 1
  int kernel_size = 3;
  double sigma_pa = 0.05;
  ModelMode mode = ModelMode::vmp;
};

// One convolution layer's parameters: out_ch independent variational kernels
// sharing a geometry.
struct ConvLayerParams {
  int kh = 3, kw = 3;
  int in_channels = 1, out_channels = 1;
  std::vector<VariationalKernel> kernels;
};

// Shape bookkeeping for one decoder block. Convolutions are un-padded, so
// the builder solves for the two pad widths (and a possible 1-pixel crop for
// parity) that make the skip concatenation legal and restore the input size
// at the network output.
struct DecoderPlan {
  std::size_t skip_block = 0;       // encoder block supplying the skip
  std::size_t upconv_out = 0;       // spatial size after up-convolution
  int pad_before_concat = 0;        // w1
  std::size_t concat_size = 0;      // common size of both branches at concat
  int pad_before_conv2 = 0;         // w2
  std::size_t out_size = 0;         // block output spatial size
};

struct VariationalModel {
  NetworkConfig cfg;
  // Declaration order: encoder blocks (2 convs each), then per decoder
  // block (upconv, conv1, conv2), then the final 1x1 conv. Checkpoints
  // serialize kernels in exactly this order.
  std::vector<ConvLayerParams> layers;
  std::vector<DecoderPlan> decoder_plan;
  std::vector<std::size_t> encoder_sizes;  // per block: pre-pool output size

  mutable std::uint64_t forward_calls = 0;

  std::size_t encoder_blocks() const { return cfg.encoder_kernels.size(); }
  std::size_t decoder_blocks() const { return cfg.decoder_kernels.size(); }
  std::size_t enc_conv(std::size_t block, std::size_t which) const {
    return 2 * block + which;
  }
  std::size_t dec_upconv(std::size_t block) const {
    return 2 * encoder_blocks() + 3 * block;
  }
  std::size_t dec_conv(std::size_t block, std::size_t which) const {
    return 2 * encoder_blocks() + 3 * block + 1 + which;
  }
  std::size_t final_conv() const {
    return 2 * encoder_blocks() + 3 * decoder_blocks();
  }
  std::size_t parameter_count() const;
};

struct SegmentationOutput {
  Tensor prob_mean;                  // H x W x C
  Tensor uncertainty;                // H x W x C (diagonal of per-pixel cov)
  std::vector<std::uint8_t> class_map;  // H*W argmax labels
  std::size_t ops_visited = 0;       // layer-list traversal instrumentation
};

// Per-call saved forward state for the backward pass.
struct ForwardTape {
  std::vector<ConvTape> conv;   // parallel to model.layers
  std::vector<ReluTape> relu;   // parallel to model.layers (3x3 convs only)
  std::vector<PoolTape> pool;   // per pooled encoder block
  SoftmaxMoments softmax;
  RandomTensor logits;
  std::size_t ops_visited = 0;
};

// Per-layer parameter gradients; entry k*L+l is kernel k, element l.
struct Gradients {
  std::vector<std::vector<double>> d_mean;
  std::vector<std::vector<double>> d_rho;

  static Gradients zeros_like(const VariationalModel& model);
  void add_scaled(const Gradients& other, double scale);
  bool all_finite() const;
};

VariationalModel build(const NetworkConfig& cfg, std::uint64_t seed);

// Single-pass moment propagation. With zero_variance all kernel and pad
// variances are forced to 0 (the deterministic collapse).
SegmentationOutput forward(const VariationalModel& model, const Tensor& image,
                           ForwardTape* tape = nullptr,
                           bool zero_variance = false);

// Independent mean-only path (no variance arithmetic anywhere); returns the
// class probabilities. Serves as the deterministic baseline.
Tensor deterministic_forward(const VariationalModel& model,
                             const Tensor& image);

// Reverse-mode pass through the moment graph. g_prob / g_cov are the loss
// gradients at the softmax output. If g_image is non-null it receives the
// gradient with respect to the input image (mean channel of the first
// convolution only).
void backward(const VariationalModel& model, const ForwardTape& tape,
              const Tensor& g_prob, const Tensor& g_cov, Gradients& grads,
              Tensor* g_image = nullptr, bool zero_variance = false);

// Sum of kernel KL terms over the whole model.
double model_kl(const VariationalModel& model, const PriorSpec& prior);
void model_kl_grad(const VariationalModel& model, const PriorSpec& prior,
                   Gradients& grads, double scale);

// Checkpoint: "VMP1" magic, u32-LE length-prefixed JSON header, then per
// kernel (declaration order) the mean and rho vectors as little-endian f64.
void save_checkpoint(const VariationalModel& model, const std::string& path);
VariationalModel load_checkpoint(const std::string& path);

}  // namespace vmp
