#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace hmdc {

/// Running sum of each optimization target's largest absolute pixel gradient.
class GradientAccumulator {
public:
    GradientAccumulator(std::size_t targets, std::int64_t sample_every);

    std::size_t targets() const { return values_.size(); }
    std::int64_t sample_every() const { return sample_every_; }
    std::int64_t steps_seen() const { return steps_seen_; }
    std::int64_t records() const { return records_; }
    const std::vector<double>& values() const { return values_; }

    /// True on steps where steps_seen is a multiple of sample_every.
    bool due() const { return steps_seen_ % sample_every_ == 0; }
    void advance() { ++steps_seen_; }

    /// a_i += max|grad_i|. Expects exactly targets() gradients; returns the
    /// magnitudes that were added.
    std::vector<double> record_magnitudes(const std::vector<torch::Tensor>& per_loss_pixel_grads);
    std::vector<double> record_values(const std::vector<double>& magnitudes);

    /// Restores a saved state.
    void restore(std::vector<double> values, std::int64_t steps_seen, std::int64_t records);

private:
    std::vector<double> values_;
    std::int64_t sample_every_;
    std::int64_t steps_seen_ = 0;
    std::int64_t records_ = 0;
};

/// s_i = min(A) / a_i, or all ones while any slot is still zero.
std::vector<double> compute_scales(const GradientAccumulator& acc);
std::vector<double> compute_scales(const std::vector<double>& accumulated);

double max_abs(const torch::Tensor& t);

/// Divides each leading-axis slab by its l2 norm; slabs with norm < 1e-12 pass through.
torch::Tensor normalize_per_image_gradients(const torch::Tensor& grads);

} // namespace hmdc
