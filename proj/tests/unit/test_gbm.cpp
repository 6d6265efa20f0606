#include "doctest_torch.hpp"

#include <algorithm>
#include <random>

#include "hmdc/errors.hpp"
#include "hmdc/gbm.hpp"

using namespace hmdc;

TEST_CASE("compute_scales examples") {
    CHECK(compute_scales(std::vector<double>{1, 1, 1}) == std::vector<double>{1, 1, 1});
    CHECK(compute_scales(std::vector<double>{4, 2, 1}) == std::vector<double>{0.25, 0.5, 1.0});
    const auto s = compute_scales(std::vector<double>{1e3, 1, 1e-2});
    CHECK(s[0] == doctest::Approx(1e-5).epsilon(1e-15));
    CHECK(s[1] == doctest::Approx(1e-2).epsilon(1e-15));
    CHECK(s[2] == 1.0);
}

TEST_CASE("compute_scales bootstraps to ones") {
    CHECK(compute_scales(std::vector<double>{0, 0, 0}) == std::vector<double>{1, 1, 1});
    CHECK(compute_scales(std::vector<double>{3, 0, 1}) == std::vector<double>{1, 1, 1});
    GradientAccumulator acc(3, 10);
    CHECK(compute_scales(acc) == std::vector<double>{1, 1, 1});
}

TEST_CASE("scale properties over random accumulators") {
    std::mt19937_64 gen(123);
    std::uniform_real_distribution<double> exponent(-8.0, 8.0);
    std::uniform_real_distribution<double> factor(-6.0, 6.0);
    int argmatch = 0;
    double worst_ratio = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> a(3);
        for (auto& v : a) v = std::pow(10.0, exponent(gen));
        const auto s = compute_scales(a);
        const auto argmax_s = std::max_element(s.begin(), s.end()) - s.begin();
        const auto argmin_a = std::min_element(a.begin(), a.end()) - a.begin();
        if (argmax_s == argmin_a) ++argmatch;
        CHECK(s[static_cast<std::size_t>(argmin_a)] == 1.0);
        for (double v : s) CHECK((v > 0.0 && v <= 1.0));

        const double c = std::pow(10.0, factor(gen));
        std::vector<double> scaled(a);
        for (auto& v : scaled) v *= c;
        const auto t = compute_scales(scaled);
        for (std::size_t i = 0; i < 3; ++i) worst_ratio = std::max(worst_ratio, std::abs(t[i] - s[i]) / s[i]);
    }
    CHECK(argmatch == 1000);
    CHECK(worst_ratio <= 1e-12);
}

TEST_CASE("record_magnitudes") {
    GradientAccumulator acc(3, 10);
    SUBCASE("zero gradients leave the accumulator unchanged") {
        acc.record_magnitudes({torch::zeros({2, 3}), torch::zeros({4}), torch::zeros({1, 1, 2, 2})});
        CHECK(acc.values() == std::vector<double>{0, 0, 0});
        CHECK(acc.records() == 1);
    }
    SUBCASE("summation") {
        acc.restore({1.0, 1.0, 1.0}, 0, 1);
        acc.record_magnitudes({torch::tensor({0.5, -0.25}), torch::tensor({-0.5}), torch::tensor({0.0, 0.5})});
        CHECK(acc.values() == std::vector<double>{1.5, 1.5, 1.5});
    }
    SUBCASE("linear scan oracle") {
        auto gen = torch::make_generator<at::CPUGeneratorImpl>(3);
        std::vector<torch::Tensor> grads;
        for (int i = 0; i < 3; ++i) grads.push_back(torch::randn({5, 1, 6, 6}, gen, torch::kDouble));
        const auto got = acc.record_magnitudes(grads);
        for (int i = 0; i < 3; ++i) {
            double best = 0.0;
            auto flat = grads[i].contiguous();
            const double* p = flat.data_ptr<double>();
            for (std::int64_t j = 0; j < flat.numel(); ++j) best = std::max(best, std::abs(p[j]));
            CHECK(got[i] == best);
            CHECK(acc.values()[i] == best);
        }
    }
    SUBCASE("order independence across targets") {
        GradientAccumulator other(3, 10);
        auto a = torch::tensor({0.3, -2.0});
        auto b = torch::tensor({1.5});
        auto c = torch::tensor({-0.7, 0.1});
        acc.record_magnitudes({a, b, c});
        other.record_magnitudes({c, a, b});
        CHECK(acc.values()[0] == other.values()[1]);
        CHECK(acc.values()[1] == other.values()[2]);
        CHECK(acc.values()[2] == other.values()[0]);
    }
    SUBCASE("wrong arity") {
        CHECK_THROWS_AS(acc.record_magnitudes({torch::zeros({1}), torch::zeros({1})}), ShapeError);
    }
    SUBCASE("non-finite gradient") {
        CHECK_THROWS_AS(acc.record_magnitudes({torch::zeros({1}), torch::full({1}, NAN), torch::zeros({1})}),
                        NonFiniteError);
    }
}

TEST_CASE("sampling gate") {
    GradientAccumulator acc(2, 10);
    std::vector<std::int64_t> due_steps;
    for (int step = 0; step < 35; ++step) {
        if (acc.due()) due_steps.push_back(acc.steps_seen());
        acc.advance();
    }
    CHECK(due_steps == std::vector<std::int64_t>{0, 10, 20, 30});
    CHECK_THROWS_AS(GradientAccumulator(3, 0), ConfigError);
}

TEST_CASE("accumulator entries never decrease") {
    GradientAccumulator acc(3, 1);
    auto gen = torch::make_generator<at::CPUGeneratorImpl>(8);
    auto prev = acc.values();
    for (int i = 0; i < 20; ++i) {
        acc.record_magnitudes({torch::randn({3}, gen), torch::randn({3}, gen) * 1e-4, torch::zeros({3})});
        for (std::size_t k = 0; k < 3; ++k) CHECK(acc.values()[k] >= prev[k]);
        prev = acc.values();
    }
}

TEST_CASE("per-image normalization") {
    SUBCASE("single slab with norm 2") {
        auto g = torch::tensor({1.0, 1.0, 1.0, 1.0}, torch::kDouble).view({1, 1, 2, 2});
        auto n = normalize_per_image_gradients(g);
        CHECK(torch::equal(n, g * 0.5));
    }
    SUBCASE("zero slab passes through") {
        auto g = torch::zeros({2, 1, 3, 3}, torch::kDouble);
        g[1][0][0][0] = 3.0;
        auto n = normalize_per_image_gradients(g);
        CHECK(torch::equal(n[0], g[0]));
        CHECK(n[1][0][0][0].item<double>() == 1.0);
    }
    SUBCASE("slabs with norms 3 and 4") {
        auto g = torch::zeros({2, 1, 2, 2}, torch::kDouble);
        g[0][0][0][0] = 3.0;
        g[1][0][1][0] = -4.0;
        auto n = normalize_per_image_gradients(g);
        for (int i = 0; i < 2; ++i) {
            double sq = 0.0;
            auto a = n[i].contiguous();
            for (std::int64_t j = 0; j < a.numel(); ++j) sq += a.data_ptr<double>()[j] * a.data_ptr<double>()[j];
            CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-6);
        }
        CHECK(n[1][0][1][0].item<double>() == -1.0);
    }
    SUBCASE("random batch is unit norm per slab") {
        auto gen = torch::make_generator<at::CPUGeneratorImpl>(2);
        auto g = torch::randn({6, 3, 4, 4}, gen) * 1e-5;
        auto norms = normalize_per_image_gradients(g).flatten(1).norm(2, 1);
        CHECK(torch::allclose(norms, torch::ones({6}), 0.0, 1e-6));
    }
}
