#pragma once

#include <cstdint>
#include <vector>

#include "vmp/moments.hpp"
#include "vmp/tensor.hpp"

namespace vmp {

// ---------------------------------------------------------------------------
// Forward moment propagation through every encoder/decoder operation, plus
// the hand-derived adjoint of each op. Means and diagonal variances are
// carried everywhere; the per-pixel class covariance after softmax is the
// one dense exception.
// ---------------------------------------------------------------------------

// Saved forward state for one convolution: patch geometry with the gathered
// input means, and the gathered input variances (all-zero for a
// deterministic first-layer input).
struct ConvTape {
  PatchMatrix geom;      // index map + gathered mean patches M (J x L)
  Tensor var_patches;    // S (J x L)
  bool input_deterministic = false;
};

// Multi-kernel convolution over a random input. Output is out_h x out_w x K.
//   mean_j = mu_b_j' m_k
//   var_j  = sum_l s_b[j,l] sigma2_k[l] + mu_b[j,l]^2 sigma2_k[l]
//          + m_k[l]^2 s_b[j,l]
// With a deterministic input (S = 0) this reduces to the first-layer rule
// var_j = sum_l x[j,l]^2 sigma2_k[l].
RandomTensor conv_moments(const RandomTensor& input,
                          const std::vector<VariationalKernel>& kernels,
                          int stride, int zero_pad, ConvTape* tape,
                          bool zero_variance = false);

// Adjoint of conv_moments. Accumulates parameter gradients (packed k*L + l)
// and, if g_input is non-null, the input mean/variance gradients.
// `image_gradient_mean_only` restricts the input gradient to the mean
// channel (used when differentiating with respect to the raw image).
void conv_backward(const ConvTape& tape,
                   const std::vector<VariationalKernel>& kernels,
                   const Tensor& g_mean_out, const Tensor& g_var_out,
                   std::vector<double>& d_kernel_mean,
                   std::vector<double>& d_kernel_rho, RandomTensor* g_input,
                   bool zero_variance = false,
                   bool image_gradient_mean_only = false);

// Spec-level single-kernel wrappers (used directly by tests and the oracle).
RandomTensor conv_first(const PatchMatrix& x, const VariationalKernel& k);
RandomTensor conv_random(const PatchMatrix& geom, const RandomTensor& input,
                         const VariationalKernel& k);

// First-order Taylor ReLU: mean = relu(mu), var = s * 1[mu > 0]. The
// subgradient convention at the kink is psi'(0) = 0.
struct ReluTape {
  std::vector<std::uint8_t> mask;
};
RandomTensor relu_moments(const RandomTensor& z, ReluTape* tape = nullptr);
void relu_backward(const ReluTape& tape, const Tensor& g_mean_out,
                   const Tensor& g_var_out, Tensor& g_mean_in,
                   Tensor& g_var_in);

// 2x2 stride-2 max-pool of the means with diagonal co-pool of the variances
// (gathered at the argmax of the mean). Ties break to the first row-major
// index. Odd extents are handled by clipping the window at the border.
struct PoolTape {
  std::vector<std::size_t> argmax;  // flat source index per output element
  std::vector<std::size_t> in_shape;
};
RandomTensor maxpool_moments(const RandomTensor& g, PoolTape* tape = nullptr);
void maxpool_backward(const PoolTape& tape, const Tensor& g_mean_out,
                      const Tensor& g_var_out, Tensor& g_mean_in,
                      Tensor& g_var_in);

// Factor-2 up-sampling: values land on even coordinates, zeros elsewhere
// (means [a,b] -> [a,0,b,0]); variances move to the same positions.
RandomTensor upsample_moments(const RandomTensor& g);
void upsample_backward(const Tensor& g_mean_out, const Tensor& g_var_out,
                       Tensor& g_mean_in, Tensor& g_var_in);

// Up-convolution: up-sample, then 2x2 convolution per conv_moments.
RandomTensor upconv_moments(const RandomTensor& g,
                            const std::vector<VariationalKernel>& kernels);

// Zero-pads the mean by `width`; padded variance entries take sigma_pa.
RandomTensor pad_moments(const RandomTensor& g, int width, double sigma_pa);
void pad_backward(int width, const Tensor& g_mean_out, const Tensor& g_var_out,
                  Tensor& g_mean_in, Tensor& g_var_in);

// Center crop (floor offsets) of both channels.
RandomTensor crop_to(const RandomTensor& g, std::size_t target_h,
                     std::size_t target_w);
void crop_backward(const std::vector<std::size_t>& src_shape,
                   const Tensor& g_mean_out, const Tensor& g_var_out,
                   Tensor& g_mean_in, Tensor& g_var_in);

// Channel-wise concatenation, decoder channels first.
RandomTensor concat_moments(const RandomTensor& dec, const RandomTensor& enc);
void concat_backward(std::size_t dec_channels, const Tensor& g_mean_out,
                     const Tensor& g_var_out, Tensor& g_mean_dec,
                     Tensor& g_var_dec, Tensor& g_mean_enc, Tensor& g_var_enc);

// Softmax moments per pixel: mu_Y = softmax(mu_F) and the full C x C
// covariance J diag(s_F) J' with J the softmax Jacobian at mu_F.
struct SoftmaxMoments {
  Tensor prob_mean;  // H x W x C
  Tensor cov;        // H x W x C x C
};
SoftmaxMoments softmax_moments(const RandomTensor& logits);
// g_cov may be empty (treated as zero).
void softmax_backward(const SoftmaxMoments& out, const RandomTensor& logits,
                      const Tensor& g_prob, const Tensor& g_cov,
                      Tensor& g_logit_mean, Tensor& g_logit_var);

}  // namespace vmp
