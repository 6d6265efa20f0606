#include "hmdc/gbm.hpp"

#include <algorithm>
#include <cmath>

#include "hmdc/errors.hpp"

namespace hmdc {

GradientAccumulator::GradientAccumulator(std::size_t targets, std::int64_t sample_every)
    : values_(targets, 0.0), sample_every_(sample_every) {
    if (targets == 0) throw ConfigError("gradient accumulator needs at least one target");
    if (sample_every < 1) throw ConfigError("sample_every must be at least 1");
}

std::vector<double> GradientAccumulator::record_magnitudes(const std::vector<torch::Tensor>& per_loss_pixel_grads) {
    if (per_loss_pixel_grads.size() != values_.size())
        throw ShapeError("record_magnitudes: expected " + std::to_string(values_.size()) + " gradients, got " +
                         std::to_string(per_loss_pixel_grads.size()));
    std::vector<double> magnitudes;
    magnitudes.reserve(values_.size());
    for (const auto& g : per_loss_pixel_grads) magnitudes.push_back(max_abs(g));
    return record_values(magnitudes);
}

std::vector<double> GradientAccumulator::record_values(const std::vector<double>& magnitudes) {
    if (magnitudes.size() != values_.size())
        throw ShapeError("record_values: expected " + std::to_string(values_.size()) + " magnitudes");
    for (std::size_t i = 0; i < values_.size(); ++i) {
        if (!std::isfinite(magnitudes[i]) || magnitudes[i] < 0.0)
            throw NonFiniteError("gradient magnitude of target " + std::to_string(i + 1) + " is not a finite non-negative value");
        values_[i] += magnitudes[i];
    }
    ++records_;
    return magnitudes;
}

void GradientAccumulator::restore(std::vector<double> values, std::int64_t steps_seen, std::int64_t records) {
    if (values.size() != values_.size()) throw ShapeError("restore: accumulator arity mismatch");
    values_ = std::move(values);
    steps_seen_ = steps_seen;
    records_ = records;
}

std::vector<double> compute_scales(const GradientAccumulator& acc) { return compute_scales(acc.values()); }

std::vector<double> compute_scales(const std::vector<double>& accumulated) {
    std::vector<double> scales(accumulated.size(), 1.0);
    if (accumulated.empty()) return scales;
    if (std::any_of(accumulated.begin(), accumulated.end(), [](double a) { return !(a > 0.0); })) return scales;
    const double lowest = *std::min_element(accumulated.begin(), accumulated.end());
    for (std::size_t i = 0; i < accumulated.size(); ++i) scales[i] = lowest / accumulated[i];
    return scales;
}

double max_abs(const torch::Tensor& t) {
    if (!t.defined() || t.numel() == 0) return 0.0;
    return t.detach().abs().max().item<double>();
}

torch::Tensor normalize_per_image_gradients(const torch::Tensor& grads) {
    if (grads.dim() == 0 || grads.size(0) == 0) return grads;
    auto flat = grads.reshape({grads.size(0), -1});
    auto norms = flat.norm(2, 1, true);
    auto divisor = torch::where(norms < 1e-12, torch::ones_like(norms), norms);
    return (flat / divisor).view(grads.sizes());
}

} // namespace hmdc
