#pragma once

#include <cstdint>

#include <torch/torch.h>

#include "hmdc/data.hpp"
#include "hmdc/rng.hpp"

namespace hmdc {

// One draw of the condensation-time transform: optional horizontal flip,
// then zero-pad by `pad` on every side and crop back at (offset_y, offset_x).
struct AugmentParams {
    bool flip = false;
    std::int64_t pad = 0;
    std::int64_t offset_y = 0;
    std::int64_t offset_x = 0;

    bool operator==(const AugmentParams&) const = default;
    bool is_identity() const { return !flip && offset_y == pad && offset_x == pad; }
};

struct PairedAugmentOptions {
    double flip_prob = 0.5;
    std::int64_t crop_pad = 2;
};

AugmentParams draw_augment_params(const PairedAugmentOptions& options, Rng& rng);

/// Applies one parameter set to every image of a [N,C,H,W] tensor.
/// Built from differentiable tensor ops.
torch::Tensor apply_augment(const torch::Tensor& images, const AugmentParams& params);

struct PairedAugmentation {
    ImageBatch real;
    ImageBatch synthetic;
    AugmentParams params;
};

/// Draws a single parameter set and applies it to both batches.
PairedAugmentation apply_paired_augmentation(const ImageBatch& real, const ImageBatch& synthetic,
                                             const PairedAugmentOptions& options, Rng& rng);

struct EvalAugmentOptions {
    bool flip = true;
    bool crop = true;
    bool cutout = true;
    std::int64_t crop_pad = 4;
    // side of the square cutout hole; 0 means H / 4
    std::int64_t cutout_size = 0;

    bool operator==(const EvalAugmentOptions&) const = default;
};

/// Training-time augmentation for evaluation runs; parameters are drawn per image.
torch::Tensor apply_eval_augmentation(const torch::Tensor& images, const EvalAugmentOptions& options, Rng& rng);

} // namespace hmdc
