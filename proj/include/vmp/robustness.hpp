#pragma once

#include <cstdint>
#include <vector>

#include "vmp/tensor.hpp"
#include "vmp/unet.hpp"

namespace vmp {

enum class AttackKind { gaussian, fgsm, pgd };

struct AttackConfig {
  AttackKind kind = AttackKind::gaussian;
  double snr_db = 20.0;      // gaussian
  double epsilon = 0.03;     // fgsm / pgd (infinity-ball radius)
  std::size_t steps = 20;    // pgd
  double step_size = 0.0;    // pgd; 0 means epsilon / 4
  int source_label = -1;     // pgd
  int target_label = -1;     // pgd
  std::uint64_t seed = 0;    // gaussian
};

// Additive white Gaussian noise at the requested SNR (capped at 120 dB).
// Signal power is measured over the noised region (whole image when
// `region` is empty); noise lands only inside the region. Throws DataError
// when the region signal is identically zero. If `achieved_snr_db` is
// non-null it receives the measured post-hoc SNR.
Tensor add_gaussian_noise(const Tensor& image, double snr_db,
                          const std::vector<std::uint8_t>& region,
                          std::uint64_t seed,
                          double* achieved_snr_db = nullptr);

// Un-targeted fast gradient sign step on the plug-in cross-entropy of the
// true mask: x' = clamp(x + eps * sign(grad_x loss)), with sign(0) = 0.
Tensor fgsm(const VariationalModel& model, const Tensor& image,
            const std::vector<std::uint8_t>& mask, double epsilon);

// Targeted projected gradient descent: drives pixels whose mask label equals
// cfg.source_label toward cfg.target_label, each iterate projected onto the
// epsilon infinity-ball around the input and clamped to [0,1].
Tensor pgd_targeted(const VariationalModel& model, const Tensor& image,
                    const std::vector<std::uint8_t>& mask,
                    const AttackConfig& cfg);

// Gradient of the plug-in cross-entropy loss with respect to the image
// (mean channel of the first convolution). `target` is the per-pixel label
// tensor used in the loss; `pixel_weight` (optional, H*W) selects pixels.
Tensor input_loss_gradient(const VariationalModel& model, const Tensor& image,
                           const std::vector<std::uint8_t>& labels,
                           const std::vector<double>& pixel_weight = {});

}  // namespace vmp
