#include "hmdc/models.hpp"

#include <cmath>

#include <ATen/CPUGeneratorImpl.h>

#include "hmdc/errors.hpp"

namespace hmdc {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

std::string arch_name(Arch arch) { return arch == Arch::ConvNet ? "convnet" : "tinyvit"; }

Arch parse_arch(const std::string& name) {
    if (name == "convnet") return Arch::ConvNet;
    if (name == "tinyvit") return Arch::TinyVit;
    throw ConfigError("unsupported model '" + name + "' (expected convnet or tinyvit)");
}

void ModelSpec::validate() const {
    if (num_classes < 1) throw ConfigError("model num_classes must be positive");
    if (image_shape.channels < 1 || image_shape.height < 1 || image_shape.width < 1)
        throw ConfigError("model image shape must be positive");
    if (arch == Arch::ConvNet) {
        if (conv_depth < 1 || conv_width < 1) throw ConfigError("convnet depth and width must be at least 1");
        if ((image_shape.height >> conv_depth) < 1 || (image_shape.width >> conv_depth) < 1)
            throw ConfigError("convnet depth too large for the image size");
    } else {
        if (vit_depth < 1 || dim < 1 || heads < 1 || patch < 1 || mlp_ratio < 1)
            throw ConfigError("tinyvit depth, dim, heads, patch and mlp_ratio must be at least 1");
        if (image_shape.height % patch != 0 || image_shape.width % patch != 0)
            throw ConfigError("tinyvit patch " + std::to_string(patch) + " does not divide the image size " +
                              std::to_string(image_shape.height) + "x" + std::to_string(image_shape.width));
        if (dim % heads != 0) throw ConfigError("tinyvit dim must be divisible by heads");
    }
}

ModelSpec ModelSpec::convnet(std::int64_t num_classes, ImageShape shape) {
    ModelSpec s;
    s.arch = Arch::ConvNet;
    s.num_classes = num_classes;
    s.image_shape = shape;
    return s;
}

ModelSpec ModelSpec::tinyvit(std::int64_t num_classes, ImageShape shape) {
    ModelSpec s;
    s.arch = Arch::TinyVit;
    s.num_classes = num_classes;
    s.image_shape = shape;
    return s;
}

namespace {

void check_input(const torch::Tensor& images, const ModelSpec& spec) {
    if (images.dim() != 4 || images.size(1) != spec.image_shape.channels || images.size(2) != spec.image_shape.height ||
        images.size(3) != spec.image_shape.width) {
        throw ShapeError("model input " + c10::str(images.sizes()) + " does not match image shape " +
                         c10::str(c10::IntArrayRef(spec.image_shape.dims())));
    }
}

void init_fan_in_uniform(torch::Tensor& weight, torch::Tensor* bias, at::Generator& gen) {
    const auto fan_in = weight.numel() / weight.size(0);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    weight.uniform_(-bound, bound, gen);
    if (bias != nullptr && bias->defined()) bias->uniform_(-bound, bound, gen);
}

} // namespace

ConvNet::ConvNet(ModelSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    auto channels = spec_.image_shape.channels;
    auto h = spec_.image_shape.height;
    auto w = spec_.image_shape.width;
    for (std::int64_t i = 0; i < spec_.conv_depth; ++i) {
        const auto tag = std::to_string(i);
        convs_.push_back(register_module("conv" + tag, nn::Conv2d(nn::Conv2dOptions(channels, spec_.conv_width, 3).padding(1))));
        norms_.push_back(register_module("norm" + tag, nn::GroupNorm(nn::GroupNormOptions(spec_.conv_width, spec_.conv_width))));
        channels = spec_.conv_width;
        h /= 2;
        w /= 2;
        taps_.push_back({spec_.conv_width, h, w});
    }
    head_ = register_module("head", nn::Linear(channels * h * w, spec_.num_classes));
}

ForwardOutput ConvNet::forward_with_features(const torch::Tensor& images) {
    check_input(images, spec_);
    ForwardOutput out;
    out.features.layout = FeatureLayout::ChannelMap;
    out.features.geometry = taps_;
    auto x = images;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
        x = convs_[i]->forward(x);
        x = norms_[i]->forward(x);
        x = torch::relu(x);
        x = F::avg_pool2d(x, F::AvgPool2dFuncOptions(2));
        out.features.per_layer.push_back(x);
    }
    out.logits = head_->forward(x.flatten(1));
    return out;
}

TinyVit::TinyVit(ModelSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    const auto gh = spec_.image_shape.height / spec_.patch;
    const auto gw = spec_.image_shape.width / spec_.patch;
    patch_embed_ = register_module(
        "patch_embed", nn::Conv2d(nn::Conv2dOptions(spec_.image_shape.channels, spec_.dim, spec_.patch).stride(spec_.patch)));
    cls_token_ = register_parameter("cls_token", torch::zeros({1, 1, spec_.dim}));
    pos_embed_ = register_parameter("pos_embed", torch::zeros({1, gh * gw + 1, spec_.dim}));
    for (std::int64_t i = 0; i < spec_.vit_depth; ++i) {
        const auto tag = "block" + std::to_string(i) + "_";
        Block b;
        b.norm1 = register_module(tag + "norm1", nn::LayerNorm(nn::LayerNormOptions({spec_.dim})));
        b.qkv = register_module(tag + "qkv", nn::Linear(spec_.dim, 3 * spec_.dim));
        b.proj = register_module(tag + "proj", nn::Linear(spec_.dim, spec_.dim));
        b.norm2 = register_module(tag + "norm2", nn::LayerNorm(nn::LayerNormOptions({spec_.dim})));
        b.fc1 = register_module(tag + "fc1", nn::Linear(spec_.dim, spec_.mlp_ratio * spec_.dim));
        b.fc2 = register_module(tag + "fc2", nn::Linear(spec_.mlp_ratio * spec_.dim, spec_.dim));
        blocks_.push_back(b);
        taps_.push_back({spec_.dim, gh, gw});
    }
    final_norm_ = register_module("final_norm", nn::LayerNorm(nn::LayerNormOptions({spec_.dim})));
    head_ = register_module("head", nn::Linear(spec_.dim, spec_.num_classes));
}

torch::Tensor TinyVit::attention(Block& block, const torch::Tensor& x) {
    const auto n = x.size(0);
    const auto t = x.size(1);
    const auto head_dim = spec_.dim / spec_.heads;
    auto qkv = block.qkv->forward(x).view({n, t, 3, spec_.heads, head_dim}).permute({2, 0, 3, 1, 4});
    auto q = qkv[0];
    auto k = qkv[1];
    auto v = qkv[2];
    auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim));
    auto mixed = torch::matmul(torch::softmax(scores, -1), v);
    return block.proj->forward(mixed.transpose(1, 2).reshape({n, t, spec_.dim}));
}

ForwardOutput TinyVit::forward_with_features(const torch::Tensor& images) {
    check_input(images, spec_);
    ForwardOutput out;
    out.features.layout = FeatureLayout::TokenGrid;
    out.features.geometry = taps_;
    const auto n = images.size(0);
    auto tokens = patch_embed_->forward(images).flatten(2).transpose(1, 2);
    auto x = torch::cat({cls_token_.expand({n, 1, spec_.dim}), tokens}, 1) + pos_embed_;
    for (auto& b : blocks_) {
        x = x + attention(b, b.norm1->forward(x));
        x = x + b.fc2->forward(torch::gelu(b.fc1->forward(b.norm2->forward(x))));
        out.features.per_layer.push_back(x);
    }
    out.logits = head_->forward(final_norm_->forward(x.select(1, 0)));
    return out;
}

namespace {

void initialize(ConvNet& model, at::Generator& gen) {
    torch::NoGradGuard no_grad;
    for (auto& child : model.named_children()) {
        if (auto* conv = child.value()->as<nn::Conv2d>()) init_fan_in_uniform(conv->weight, &conv->bias, gen);
        else if (auto* lin = child.value()->as<nn::Linear>()) init_fan_in_uniform(lin->weight, &lin->bias, gen);
        else if (auto* norm = child.value()->as<nn::GroupNorm>()) {
            norm->weight.fill_(1.0);
            norm->bias.zero_();
        }
    }
}

void initialize(TinyVit& model, at::Generator& gen) {
    torch::NoGradGuard no_grad;
    for (auto& item : model.named_parameters(false)) item.value().normal_(0.0, 0.02, gen);
    for (auto& child : model.named_children()) {
        if (auto* conv = child.value()->as<nn::Conv2d>()) init_fan_in_uniform(conv->weight, &conv->bias, gen);
        else if (auto* lin = child.value()->as<nn::Linear>()) init_fan_in_uniform(lin->weight, &lin->bias, gen);
        else if (auto* norm = child.value()->as<nn::LayerNorm>()) {
            norm->weight.fill_(1.0);
            norm->bias.zero_();
        }
    }
}

} // namespace

ModelHandle build_model(const ModelSpec& spec, std::uint64_t seed) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    if (spec.arch == Arch::ConvNet) {
        auto model = std::make_shared<ConvNet>(spec);
        initialize(*model, gen);
        return model;
    }
    auto model = std::make_shared<TinyVit>(spec);
    initialize(*model, gen);
    return model;
}

torch::Tensor classification_loss(const torch::Tensor& logits, const torch::Tensor& labels) {
    if (logits.dim() != 2 || labels.dim() != 1 || logits.size(0) != labels.size(0))
        throw ShapeError("classification_loss: logits [N,K] and labels [N] required");
    if (labels.numel() > 0 &&
        (labels.min().item<std::int64_t>() < 0 || labels.max().item<std::int64_t>() >= logits.size(1)))
        throw ShapeError("classification_loss: label out of range");
    return F::cross_entropy(logits, labels);
}

ModelHandle clone_model(const ModelHandle& model) {
    auto copy = build_model(model->spec(), 0);
    torch::NoGradGuard no_grad;
    auto src = model->ordered_parameters();
    auto dst = copy->ordered_parameters();
    const auto dtype = src.empty() ? torch::kFloat32 : src.front().scalar_type();
    copy->to(dtype);
    dst = copy->ordered_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].copy_(src[i]);
    return copy;
}

} // namespace hmdc
