#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "hmdc/data.hpp"

namespace hmdc {

enum class Arch { ConvNet, TinyVit };

std::string arch_name(Arch arch);
/// Throws ConfigError("unsupported model ...") for anything outside the zoo.
Arch parse_arch(const std::string& name);

struct ModelSpec {
    Arch arch = Arch::ConvNet;
    std::int64_t num_classes = 10;
    ImageShape image_shape{1, 28, 28};

    // convnet
    std::int64_t conv_width = 128;
    std::int64_t conv_depth = 3;

    // tinyvit
    std::int64_t patch = 4;
    std::int64_t dim = 64;
    std::int64_t vit_depth = 4;
    std::int64_t heads = 4;
    std::int64_t mlp_ratio = 4;

    void validate() const;
    static ModelSpec convnet(std::int64_t num_classes, ImageShape shape);
    static ModelSpec tinyvit(std::int64_t num_classes, ImageShape shape);
};

enum class FeatureLayout {
    TokenGrid,  // per layer [N, grid_h * grid_w + 1, d], CLS token first
    ChannelMap  // per layer [N, d, h, w]
};

/// Static description of one tap point.
struct TapGeometry {
    std::int64_t dim = 0;
    std::int64_t grid_h = 0;
    std::int64_t grid_w = 0;
};

struct FeatureStack {
    FeatureLayout layout = FeatureLayout::ChannelMap;
    std::vector<torch::Tensor> per_layer;
    std::vector<TapGeometry> geometry;

    std::size_t layer_count() const { return per_layer.size(); }
};

struct ForwardOutput {
    torch::Tensor logits;
    FeatureStack features;
};

/// A classifier that also exposes the output of every block.
class FeatureModel : public torch::nn::Module {
public:
    virtual ForwardOutput forward_with_features(const torch::Tensor& images) = 0;
    virtual const ModelSpec& spec() const = 0;
    virtual FeatureLayout layout() const = 0;
    virtual std::vector<TapGeometry> tap_geometry() const = 0;

    torch::Tensor forward(const torch::Tensor& images) { return forward_with_features(images).logits; }
    /// Parameters in registration order; the order is fixed for the model's lifetime.
    std::vector<torch::Tensor> ordered_parameters() const { return parameters(true); }
};

using ModelHandle = std::shared_ptr<FeatureModel>;

/// 3x3 conv -> instance norm -> ReLU -> 2x2 average pool, repeated `conv_depth`
/// times, then a linear head on the flattened map.
class ConvNet : public FeatureModel {
public:
    explicit ConvNet(ModelSpec spec);

    ForwardOutput forward_with_features(const torch::Tensor& images) override;
    const ModelSpec& spec() const override { return spec_; }
    FeatureLayout layout() const override { return FeatureLayout::ChannelMap; }
    std::vector<TapGeometry> tap_geometry() const override { return taps_; }

private:
    ModelSpec spec_;
    std::vector<torch::nn::Conv2d> convs_;
    std::vector<torch::nn::GroupNorm> norms_;
    torch::nn::Linear head_{nullptr};
    std::vector<TapGeometry> taps_;
};

/// Pre-norm vision transformer with a CLS token and learned position embeddings.
class TinyVit : public FeatureModel {
public:
    explicit TinyVit(ModelSpec spec);

    ForwardOutput forward_with_features(const torch::Tensor& images) override;
    const ModelSpec& spec() const override { return spec_; }
    FeatureLayout layout() const override { return FeatureLayout::TokenGrid; }
    std::vector<TapGeometry> tap_geometry() const override { return taps_; }

private:
    struct Block {
        torch::nn::LayerNorm norm1{nullptr};
        torch::nn::Linear qkv{nullptr};
        torch::nn::Linear proj{nullptr};
        torch::nn::LayerNorm norm2{nullptr};
        torch::nn::Linear fc1{nullptr};
        torch::nn::Linear fc2{nullptr};
    };

    torch::Tensor attention(Block& block, const torch::Tensor& x);

    ModelSpec spec_;
    torch::nn::Conv2d patch_embed_{nullptr};
    torch::Tensor cls_token_;
    torch::Tensor pos_embed_;
    std::vector<Block> blocks_;
    torch::nn::LayerNorm final_norm_{nullptr};
    torch::nn::Linear head_{nullptr};
    std::vector<TapGeometry> taps_;
};

/// Builds and initializes a model from `seed`. Same seed, same parameters.
ModelHandle build_model(const ModelSpec& spec, std::uint64_t seed);

/// Mean cross-entropy; throws ShapeError on a label outside [0, num_classes).
torch::Tensor classification_loss(const torch::Tensor& logits, const torch::Tensor& labels);

/// Deep copy of a model (same architecture, cloned parameter values).
ModelHandle clone_model(const ModelHandle& model);

} // namespace hmdc
