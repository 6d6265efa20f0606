#include "hmdc/ssd.hpp"

#include <algorithm>
#include <cmath>

#include <ATen/CPUGeneratorImpl.h>

#include "hmdc/errors.hpp"

namespace hmdc {

namespace F = torch::nn::functional;

DecomposedFeatures decompose_vit_features(const FeatureStack& stack) {
    if (stack.layout != FeatureLayout::TokenGrid) throw ShapeError("decompose_vit_features: expected a token grid stack");
    if (stack.geometry.size() != stack.per_layer.size())
        throw ShapeError("decompose_vit_features: missing grid geometry");
    DecomposedFeatures dec;
    for (std::size_t l = 0; l < stack.per_layer.size(); ++l) {
        const auto& tokens = stack.per_layer[l];
        const auto& g = stack.geometry[l];
        if (tokens.dim() != 3 || tokens.size(1) != g.grid_h * g.grid_w + 1 || tokens.size(2) != g.dim)
            throw ShapeError("decompose_vit_features: layer " + std::to_string(l) + " has " +
                             std::to_string(tokens.dim() == 3 ? tokens.size(1) : -1) + " tokens, expected " +
                             std::to_string(g.grid_h) + "*" + std::to_string(g.grid_w) + "+1");
        const auto n = tokens.size(0);
        dec.semantic.push_back(tokens.narrow(1, 0, 1));
        dec.spatial.push_back(tokens.narrow(1, 1, g.grid_h * g.grid_w).reshape({n, g.grid_h, g.grid_w, g.dim}));
    }
    return dec;
}

DecomposedFeatures decompose_cnn_features(const FeatureStack& stack) {
    if (stack.layout != FeatureLayout::ChannelMap) throw ShapeError("decompose_cnn_features: expected a channel map stack");
    DecomposedFeatures dec;
    for (std::size_t l = 0; l < stack.per_layer.size(); ++l) {
        const auto& map = stack.per_layer[l];
        if (map.dim() != 4) throw ShapeError("decompose_cnn_features: layer " + std::to_string(l) + " is not [N,d,h,w]");
        dec.semantic.push_back(map.mean({2, 3}).unsqueeze(1));
        dec.spatial.push_back(map.permute({0, 2, 3, 1}));
    }
    return dec;
}

DecomposedFeatures decompose_features(const FeatureStack& stack) {
    return stack.layout == FeatureLayout::TokenGrid ? decompose_vit_features(stack) : decompose_cnn_features(stack);
}

AlignmentTarget alignment_target(const std::vector<TapGeometry>& first, const std::vector<TapGeometry>& second) {
    if (first.empty() || second.empty()) throw ShapeError("alignment_target: both models need at least one tap");
    auto coarsest = [](const std::vector<TapGeometry>& taps) {
        std::int64_t h = taps.front().grid_h, w = taps.front().grid_w;
        for (const auto& t : taps) {
            h = std::min(h, t.grid_h);
            w = std::min(w, t.grid_w);
        }
        return std::pair{h, w};
    };
    auto max_dim = [](const std::vector<TapGeometry>& taps) {
        std::int64_t d = 0;
        for (const auto& t : taps) d = std::max(d, t.dim);
        return d;
    };
    const auto [h1, w1] = coarsest(first);
    const auto [h2, w2] = coarsest(second);
    AlignmentTarget t;
    t.grid_h = std::max<std::int64_t>(2, std::min(h1, h2));
    t.grid_w = std::max<std::int64_t>(2, std::min(w1, w2));
    t.dim = std::min(max_dim(first), max_dim(second));
    return t;
}

AlignmentHead::AlignmentHead(const std::vector<TapGeometry>& first, const std::vector<TapGeometry>& second,
                             std::uint64_t seed, torch::Dtype dtype)
    : target_(alignment_target(first, second)) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    const auto opts = torch::TensorOptions().dtype(dtype);
    const std::array<const std::vector<TapGeometry>*, 2> taps{&first, &second};
    for (std::size_t model = 0; model < 2; ++model) {
        for (const auto& tap : *taps[model]) {
            const double scale = 1.0 / std::sqrt(static_cast<double>(tap.dim));
            auto w = torch::empty({target_.dim, tap.dim}, opts).uniform_(-scale, scale, gen);
            weights_[model].push_back(w.requires_grad_());
            biases_[model].push_back(torch::zeros({target_.dim}, opts).requires_grad_());
        }
    }
    m_layer_ = torch::zeros({static_cast<std::int64_t>(first.size()), static_cast<std::int64_t>(second.size())}, opts)
                   .requires_grad_();
}

std::int64_t AlignmentHead::layers(int model_index) const {
    return static_cast<std::int64_t>(weights_.at(static_cast<std::size_t>(model_index - 1)).size());
}

torch::Tensor& AlignmentHead::weight(int model_index, std::size_t layer) {
    return weights_.at(static_cast<std::size_t>(model_index - 1)).at(layer);
}
torch::Tensor& AlignmentHead::bias(int model_index, std::size_t layer) {
    return biases_.at(static_cast<std::size_t>(model_index - 1)).at(layer);
}
const torch::Tensor& AlignmentHead::weight(int model_index, std::size_t layer) const {
    return weights_.at(static_cast<std::size_t>(model_index - 1)).at(layer);
}
const torch::Tensor& AlignmentHead::bias(int model_index, std::size_t layer) const {
    return biases_.at(static_cast<std::size_t>(model_index - 1)).at(layer);
}

std::vector<torch::Tensor> AlignmentHead::parameters() const {
    std::vector<torch::Tensor> out;
    for (const auto& item : named_parameters()) out.push_back(item.second);
    return out;
}

std::vector<std::pair<std::string, torch::Tensor>> AlignmentHead::named_parameters() const {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (std::size_t model = 0; model < 2; ++model) {
        for (std::size_t l = 0; l < weights_[model].size(); ++l) {
            const auto prefix = "affine." + std::to_string(model + 1) + "." + std::to_string(l) + ".";
            out.emplace_back(prefix + "W", weights_[model][l]);
            out.emplace_back(prefix + "b", biases_[model][l]);
        }
    }
    if (m_layer_.defined()) out.emplace_back("m_layer", m_layer_);
    return out;
}

void AlignmentHead::to(torch::Dtype dtype) {
    auto convert = [dtype](torch::Tensor& t) { t = t.detach().to(dtype).requires_grad_(); };
    for (auto& group : weights_)
        for (auto& t : group) convert(t);
    for (auto& group : biases_)
        for (auto& t : group) convert(t);
    convert(m_layer_);
}

torch::Tensor align_features(const DecomposedFeatures& dec, const AlignmentHead& head, int model_index) {
    if (model_index != 1 && model_index != 2) throw ShapeError("align_features: model_index must be 1 or 2");
    const auto& target = head.target();
    if (static_cast<std::int64_t>(dec.layer_count()) != head.layers(model_index))
        throw ShapeError("align_features: head has " + std::to_string(head.layers(model_index)) +
                         " affine maps for model " + std::to_string(model_index) + " but the features have " +
                         std::to_string(dec.layer_count()) + " layers");
    std::vector<torch::Tensor> layers;
    for (std::size_t l = 0; l < dec.layer_count(); ++l) {
        const auto& w = head.weight(model_index, l);
        const auto& b = head.bias(model_index, l);
        const auto& spatial = dec.spatial[l];
        const auto source_dim = spatial.size(3);
        if (w.size(1) != source_dim || dec.semantic[l].size(2) != source_dim)
            throw ShapeError("align_features: affine map of layer " + std::to_string(l) + " expects dim " +
                             std::to_string(w.size(1)) + ", features have " + std::to_string(source_dim));
        auto grid = spatial.permute({0, 3, 1, 2});
        if (grid.size(2) != target.grid_h || grid.size(3) != target.grid_w) {
            grid = F::interpolate(grid, F::InterpolateFuncOptions()
                                            .size(std::vector<std::int64_t>{target.grid_h, target.grid_w})
                                            .mode(torch::kBilinear)
                                            .align_corners(false));
        }
        auto tokens = grid.flatten(2).transpose(1, 2);
        auto joined = torch::cat({dec.semantic[l], tokens}, 1);
        layers.push_back(torch::matmul(joined, w.t()) + b);
    }
    return torch::stack(layers, -1);
}

torch::Tensor layer_mixing_weights(const torch::Tensor& m_layer) {
    if (m_layer.dim() != 2) throw ShapeError("layer_mixing_weights: M_layer must be a matrix");
    const auto n = m_layer.size(0);
    const auto m = m_layer.size(1);
    if (m > n) return torch::softmax(m_layer, 1);  // [n, m]
    return torch::softmax(m_layer, 0).t();         // [m, n]
}

MatchedFeatures match_layers(const torch::Tensor& first, const torch::Tensor& second, const torch::Tensor& m_layer) {
    if (m_layer.dim() != 2 || first.size(-1) != m_layer.size(0) || second.size(-1) != m_layer.size(1))
        throw ShapeError("match_layers: M_layer must be (n, m) = (" + std::to_string(first.size(-1)) + ", " +
                         std::to_string(second.size(-1)) + ")");
    if (first.sizes().slice(0, first.dim() - 1) != second.sizes().slice(0, second.dim() - 1))
        throw ShapeError("match_layers: aligned features disagree outside the layer axis");
    const auto mixing = layer_mixing_weights(m_layer);
    if (m_layer.size(1) > m_layer.size(0)) return {first, torch::matmul(second, mixing.t())};
    return {torch::matmul(first, mixing.t()), second};
}

torch::Tensor mutual_distillation_loss(const MatchedFeatures& matched) {
    if (matched.first.sizes() != matched.second.sizes())
        throw ShapeError("mutual_distillation_loss: matched features differ in shape");
    return F::mse_loss(matched.first, matched.second);
}

MatchedFeatures ssd_match(const FeatureStack& first, const FeatureStack& second, const AlignmentHead& head) {
    auto aligned1 = align_features(decompose_features(first), head, 1);
    auto aligned2 = align_features(decompose_features(second), head, 2);
    return match_layers(aligned1, aligned2, head.m_layer());
}

torch::Tensor md_loss(const FeatureStack& first, const FeatureStack& second, const AlignmentHead& head) {
    return mutual_distillation_loss(ssd_match(first, second, head));
}

} // namespace hmdc
