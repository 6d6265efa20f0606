#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "hmdc/models.hpp"

namespace hmdc {

// Per-layer split of a feature stack. semantic[l] is [N, 1, d_l];
// spatial[l] is [N, h_l, w_l, d_l] with tokens laid out row-major.
struct DecomposedFeatures {
    std::vector<torch::Tensor> semantic;
    std::vector<torch::Tensor> spatial;

    std::size_t layer_count() const { return semantic.size(); }
};

/// CLS token becomes the semantic part; the remaining tokens form the grid.
DecomposedFeatures decompose_vit_features(const FeatureStack& stack);
/// Spatial mean of each map becomes the semantic part; the map itself is spatial.
DecomposedFeatures decompose_cnn_features(const FeatureStack& stack);
/// Dispatches on stack.layout.
DecomposedFeatures decompose_features(const FeatureStack& stack);

struct AlignmentTarget {
    std::int64_t grid_h = 0;
    std::int64_t grid_w = 0;
    std::int64_t dim = 0;

    bool operator==(const AlignmentTarget&) const = default;
    std::int64_t tokens() const { return grid_h * grid_w + 1; }
};

/// Smaller of the two models' feature dims; per axis, the smaller of the
/// two coarsest tap grids, floored at 2.
AlignmentTarget alignment_target(const std::vector<TapGeometry>& first, const std::vector<TapGeometry>& second);

/// Learnable state shared by both models' projections: one affine map per
/// tap (W: d x d_source, b: d) for each model, and the n x m layer-matching
/// matrix.
class AlignmentHead {
public:
    AlignmentHead() = default;
    AlignmentHead(const std::vector<TapGeometry>& first, const std::vector<TapGeometry>& second, std::uint64_t seed,
                  torch::Dtype dtype = torch::kFloat32);

    const AlignmentTarget& target() const { return target_; }
    std::int64_t layers(int model_index) const;

    /// model_index is 1 or 2.
    torch::Tensor& weight(int model_index, std::size_t layer);
    torch::Tensor& bias(int model_index, std::size_t layer);
    const torch::Tensor& weight(int model_index, std::size_t layer) const;
    const torch::Tensor& bias(int model_index, std::size_t layer) const;
    torch::Tensor& m_layer() { return m_layer_; }
    const torch::Tensor& m_layer() const { return m_layer_; }

    /// Model 1 (W, b per layer), then model 2, then M_layer.
    std::vector<torch::Tensor> parameters() const;
    /// Same order, keyed "affine.<model>.<layer>.W", "affine.<model>.<layer>.b", "m_layer".
    std::vector<std::pair<std::string, torch::Tensor>> named_parameters() const;

    void to(torch::Dtype dtype);

private:
    AlignmentTarget target_;
    std::array<std::vector<torch::Tensor>, 2> weights_;
    std::array<std::vector<torch::Tensor>, 2> biases_;
    torch::Tensor m_layer_;
};

/// Interpolates every layer's spatial grid to the target size, prepends the
/// semantic token and applies that layer's affine map. Returns
/// [N, h*w + 1, d, layer_count].
torch::Tensor align_features(const DecomposedFeatures& dec, const AlignmentHead& head, int model_index);

struct MatchedFeatures {
    torch::Tensor first;
    torch::Tensor second;
};

/// Row-stochastic weights [L, S] mapping S source layers onto L = min(n, m)
/// target layers: softmax(M_layer^T) rows when m > n, softmax(M_layer)
/// columns otherwise.
torch::Tensor layer_mixing_weights(const torch::Tensor& m_layer);

/// first: [..., n], second: [..., m]. The deeper stack is contracted onto the
/// shallower one's layer count.
MatchedFeatures match_layers(const torch::Tensor& first, const torch::Tensor& second, const torch::Tensor& m_layer);

torch::Tensor mutual_distillation_loss(const MatchedFeatures& matched);

/// decompose -> align -> match for a pair of feature stacks.
MatchedFeatures ssd_match(const FeatureStack& first, const FeatureStack& second, const AlignmentHead& head);

/// MSE over the SSD-matched features of the two models.
torch::Tensor md_loss(const FeatureStack& first, const FeatureStack& second, const AlignmentHead& head);

} // namespace hmdc
