#include "doctest_torch.hpp"

#include <cmath>

#include "hmdc/errors.hpp"
#include "hmdc/models.hpp"
#include "test_support.hpp"

using namespace hmdc;
using hmdc::testing::central_difference;
using hmdc::testing::relative_error;

namespace {

bool same_parameters(const ModelHandle& a, const ModelHandle& b) {
    auto pa = a->ordered_parameters();
    auto pb = b->ordered_parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (!torch::equal(pa[i], pb[i])) return false;
    return true;
}

void zero_head(FeatureModel& model) {
    torch::NoGradGuard g;
    for (auto& kv : model.named_parameters(true))
        if (kv.key().rfind("head.", 0) == 0) kv.value().zero_();
}

} // namespace

TEST_CASE("tap counts follow the block count") {
    auto cnn = build_model(ModelSpec::convnet(10, {1, 28, 28}), 0);
    CHECK(cnn->tap_geometry().size() == 3);
    CHECK(cnn->forward_with_features(torch::zeros({2, 1, 28, 28})).features.layer_count() == 3);

    auto vit = build_model(ModelSpec::tinyvit(10, {1, 28, 28}), 0);
    CHECK(vit->tap_geometry().size() == 4);
    CHECK(vit->forward_with_features(torch::zeros({2, 1, 28, 28})).features.layer_count() == 4);
}

TEST_CASE("same seed gives identical parameters") {
    for (auto spec : {ModelSpec::convnet(10, {1, 28, 28}), ModelSpec::tinyvit(10, {3, 32, 32})}) {
        auto a = build_model(spec, 42);
        auto b = build_model(spec, 42);
        auto c = build_model(spec, 43);
        CHECK(same_parameters(a, b));
        CHECK_FALSE(same_parameters(a, c));
    }
}

TEST_CASE("feature stack shapes for 28 and 32 pixel inputs") {
    struct Case {
        ImageShape shape;
        std::vector<std::int64_t> cnn_sizes;
        std::int64_t vit_tokens;
    };
    for (const auto& c : {Case{{1, 28, 28}, {14, 7, 3}, 50}, Case{{3, 32, 32}, {16, 8, 4}, 65}}) {
        auto x = torch::randn({2, c.shape.channels, c.shape.height, c.shape.width});
        auto cnn = build_model(ModelSpec::convnet(10, c.shape), 1);
        auto out = cnn->forward_with_features(x);
        CHECK(out.logits.sizes() == torch::IntArrayRef({2, 10}));
        CHECK(out.features.layout == FeatureLayout::ChannelMap);
        for (std::size_t l = 0; l < 3; ++l) {
            const auto s = c.cnn_sizes[l];
            CHECK(out.features.per_layer[l].sizes() == torch::IntArrayRef({2, 128, s, s}));
            CHECK(out.features.geometry[l].grid_h == s);
            CHECK(out.features.geometry[l].dim == 128);
        }

        auto vit = build_model(ModelSpec::tinyvit(10, c.shape), 1);
        auto vout = vit->forward_with_features(x);
        CHECK(vout.logits.sizes() == torch::IntArrayRef({2, 10}));
        CHECK(vout.features.layout == FeatureLayout::TokenGrid);
        for (const auto& f : vout.features.per_layer) CHECK(f.sizes() == torch::IntArrayRef({2, c.vit_tokens, 64}));
        for (const auto& g : vit->tap_geometry()) CHECK(g.grid_h * g.grid_w + 1 == c.vit_tokens);
    }
}

TEST_CASE("zero input with a zeroed head gives equal logits") {
    for (auto spec : {ModelSpec::convnet(10, {1, 28, 28}), ModelSpec::tinyvit(10, {1, 28, 28})}) {
        auto m = build_model(spec, 3);
        zero_head(*m);
        auto logits = m->forward(torch::zeros({3, 1, 28, 28}));
        CHECK(torch::allclose(logits, torch::zeros_like(logits)));
    }
}

TEST_CASE("input shape mismatch is rejected") {
    auto m = build_model(ModelSpec::convnet(10, {1, 28, 28}), 0);
    CHECK_THROWS_AS(m->forward(torch::zeros({1, 3, 28, 28})), ShapeError);
    CHECK_THROWS_AS(m->forward(torch::zeros({1, 28, 28})), ShapeError);
}

TEST_CASE("indivisible patch size is rejected") {
    auto spec = ModelSpec::tinyvit(10, {1, 28, 28});
    spec.patch = 5;
    CHECK_THROWS_AS(build_model(spec, 0), ConfigError);
    CHECK_THROWS_AS(parse_arch("resnet50"), ConfigError);
}

TEST_CASE("classification loss") {
    SUBCASE("uniform logits") {
        auto loss = classification_loss(torch::zeros({5, 10}), torch::arange(5, torch::kLong));
        CHECK(loss.item<double>() == doctest::Approx(std::log(10.0)).epsilon(1e-6));
    }
    SUBCASE("margin limit") {
        double prev = 1e9;
        for (double margin : {1.0, 5.0, 20.0, 40.0}) {
            auto logits = torch::zeros({1, 10}, torch::kDouble);
            logits[0][3] = margin;
            const double v = classification_loss(logits, torch::tensor({3}, torch::kLong)).item<double>();
            CHECK(v < prev);
            prev = v;
        }
        CHECK(prev < 1e-12);
    }
    SUBCASE("softmax oracle") {
        auto gen = torch::make_generator<at::CPUGeneratorImpl>(7);
        auto logits = torch::randn({4, 6}, gen, torch::kDouble);
        auto labels = torch::tensor({0, 5, 2, 2}, torch::kLong);
        double expected = 0.0;
        for (int i = 0; i < 4; ++i) {
            double denom = 0.0;
            for (int j = 0; j < 6; ++j) denom += std::exp(logits[i][j].item<double>());
            expected -= std::log(std::exp(logits[i][labels[i].item<int64_t>()].item<double>()) / denom);
        }
        expected /= 4.0;
        CHECK(std::abs(classification_loss(logits, labels).item<double>() - expected) < 1e-6);
    }
    SUBCASE("label out of range") {
        CHECK_THROWS_AS(classification_loss(torch::zeros({2, 10}), torch::tensor({0, 10}, torch::kLong)), ShapeError);
        CHECK_THROWS_AS(classification_loss(torch::zeros({2, 10}), torch::tensor({-1, 0}, torch::kLong)), ShapeError);
    }
}

TEST_CASE("input gradient matches finite differences on a 2-class 4x4 toy") {
    const ImageShape shape{1, 4, 4};
    for (auto spec : {hmdc::testing::tiny_convnet(2, shape, 3, 2), hmdc::testing::tiny_vit(2, shape)}) {
        auto m = build_model(spec, 11);
        m->to(torch::kDouble);
        auto gen = torch::make_generator<at::CPUGeneratorImpl>(5);
        auto x = torch::randn({3, 1, 4, 4}, gen, torch::kDouble).requires_grad_(true);
        auto y = torch::tensor({0, 1, 1}, torch::kLong);
        auto g = torch::autograd::grad({classification_loss(m->forward(x), y)}, {x})[0];
        auto probe = x.detach().clone();
        auto f = [&] {
            torch::NoGradGuard ng;
            return classification_loss(m->forward(probe), y).item<double>();
        };
        for (std::int64_t idx : {0, 5, 17, 30, 47}) {
            const double fd = central_difference(probe, idx, 1e-6, f);
            CHECK(relative_error(g.view({-1})[idx].item<double>(), fd, 1e-6) <= 1e-3);
        }
    }
}

TEST_CASE("parameter enumeration order is stable") {
    auto m = build_model(ModelSpec::tinyvit(10, {1, 28, 28}), 0);
    auto names = [&] {
        std::vector<std::string> out;
        for (auto& kv : m->named_parameters(true)) out.push_back(kv.key());
        return out;
    };
    const auto before = names();
    const auto ptrs_before = m->ordered_parameters();
    auto x = torch::randn({2, 1, 28, 28});
    auto loss = classification_loss(m->forward(x), torch::tensor({1, 2}, torch::kLong));
    torch::autograd::grad({loss}, m->ordered_parameters());
    const auto ptrs_after = m->ordered_parameters();
    CHECK(names() == before);
    REQUIRE(ptrs_before.size() == ptrs_after.size());
    for (std::size_t i = 0; i < ptrs_before.size(); ++i) CHECK(ptrs_before[i].is_same(ptrs_after[i]));
}

TEST_CASE("clone copies values, not storage") {
    auto m = build_model(ModelSpec::convnet(10, {1, 28, 28}), 9);
    auto c = clone_model(m);
    CHECK(same_parameters(m, c));
    {
        torch::NoGradGuard g;
        c->ordered_parameters()[0].add_(1.0);
    }
    CHECK_FALSE(same_parameters(m, c));
}
