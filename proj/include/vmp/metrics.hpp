#pragma once

#include <cstdint>
#include <vector>

#include "vmp/tensor.hpp"
#include "vmp/unet.hpp"

namespace vmp {

// Dice similarity 2|A ∩ B| / (|A| + |B|) where A (resp. B) is the set of
// pixels whose pred (resp. truth) label lies in label_set. Both sets empty
// is defined as 1.0.
double dice(const std::vector<std::uint8_t>& pred,
            const std::vector<std::uint8_t>& truth,
            const std::vector<std::uint8_t>& label_set);

// Mean of the uncertainty tensor over all classes and, if `region` is
// non-empty, over the pixels where region != 0; otherwise the whole image.
double avg_predictive_variance(const SegmentationOutput& output,
                               const std::vector<std::uint8_t>& region = {});

// 10 log10( sum clean^2 / sum (perturbed - clean)^2 ), capped at 300 dB for
// identical inputs.
double measured_snr(const Tensor& clean, const Tensor& perturbed);

}  // namespace vmp
