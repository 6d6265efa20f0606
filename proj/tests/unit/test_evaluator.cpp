#include "doctest_torch.hpp"

#include <set>
#include <sstream>

#include "hmdc/errors.hpp"
#include "hmdc/evaluator.hpp"
#include "hmdc/rng.hpp"
#include "test_support.hpp"

using namespace hmdc;

namespace {

ImageCollection head_of(const ImageCollection& c, std::int64_t n) {
    return {c.spec(), c.images().narrow(0, 0, n), c.labels().narrow(0, 0, n)};
}

EvalConfig small_convnet(std::int64_t epochs) {
    auto cfg = EvalConfig::defaults(Arch::ConvNet, dataset_spec("mnist"));
    cfg.epochs = epochs;
    cfg.conv_width = 16;
    cfg.seeds = {0};
    cfg.eval_every = epochs;
    return cfg;
}

EvalReport fake_report(double mean, std::int64_t epochs = 300) {
    EvalReport r;
    r.arch = "convnet";
    r.mean = mean;
    r.accuracies = {mean};
    r.config = EvalConfig::defaults(Arch::ConvNet, dataset_spec("mnist"));
    r.config.epochs = epochs;
    return r;
}

} // namespace

TEST_CASE("evaluation defaults") {
    auto c = EvalConfig::defaults(Arch::ConvNet, dataset_spec("mnist"));
    CHECK(c.lr == 0.01);
    CHECK(c.epochs == 300);
    CHECK_FALSE(c.augment.flip);
    auto v = EvalConfig::defaults(Arch::TinyVit, dataset_spec("cifar10"));
    CHECK(v.lr == 0.001);
    CHECK(v.augment.flip);
    v.seeds.clear();
    CHECK_THROWS_AS(v.validate(), ConfigError);
    v = EvalConfig::defaults(Arch::TinyVit, dataset_spec("cifar10"));
    v.epochs = 0;
    CHECK_THROWS_AS(v.validate(), ConfigError);
}

TEST_CASE("untrained models sit at chance" * doctest::skip(!hmdc::testing::mnist_available())) {
    const auto& test = hmdc::testing::mnist(Split::Test);
    // one init can be lopsided; the mean over inits is what sits at chance
    const auto subset = head_of(test, 2000);
    for (auto spec : {ModelSpec::convnet(10, {1, 28, 28}), ModelSpec::tinyvit(10, {1, 28, 28})}) {
        double sum = 0.0;
        for (std::uint64_t seed = 0; seed < 8; ++seed) {
            auto m = build_model(spec, seed);
            sum += evaluate_accuracy(*m, subset.images(), subset.labels());
        }
        CHECK(std::abs(sum / 8.0 - 0.1) <= 0.05);
    }
}

TEST_CASE("accuracy is invariant to test order") {
    auto data = hmdc::testing::toy_collection(10, 30, {1, 28, 28}, 3);
    auto m = build_model(ModelSpec::convnet(10, {1, 28, 28}), 1);
    Rng rng(4);
    auto perm = torch::tensor(rng.sample_without_replacement(300, 300), torch::kLong);
    const double a = evaluate_accuracy(*m, data.images(), data.labels(), 64);
    const double b = evaluate_accuracy(*m, data.images().index_select(0, perm), data.labels().index_select(0, perm), 37);
    CHECK(a == b);
}

TEST_CASE("ConvNet memorizes 100 training images" * doctest::skip(!hmdc::testing::mnist_available())) {
    const auto& train = hmdc::testing::mnist(Split::Train);
    Rng rng(0);
    const auto batch = train.gather(select_per_class(train, 10, rng));
    auto cfg = small_convnet(300);
    cfg.conv_width = 32;
    cfg.augment = {};
    const auto run = train_on_dataset(batch.images, batch.labels, cfg, head_of(hmdc::testing::mnist(Split::Test), 500), 0);
    CHECK(run.final_train_accuracy == 1.0);
}

TEST_CASE("one epoch on the full MNIST train split beats chance" * doctest::skip(!hmdc::testing::mnist_available())) {
    const auto& train = hmdc::testing::mnist(Split::Train);
    auto cfg = small_convnet(1);
    cfg.conv_width = 8;
    const auto run = train_on_dataset(train.images(), train.labels(), cfg, head_of(hmdc::testing::mnist(Split::Test), 2000), 0);
    CHECK(run.best_test_accuracy > 0.2);
}

TEST_CASE("best accuracy is a running max over epochs") {
    auto train = hmdc::testing::toy_collection(3, 8, {1, 8, 8}, 1);
    auto test = hmdc::testing::toy_collection(3, 20, {1, 8, 8}, 2);
    auto cfg = EvalConfig::defaults(Arch::ConvNet, train.spec());
    cfg.conv_width = 4;
    cfg.eval_every = 1;
    cfg.epochs = 5;
    const auto short_run = train_on_dataset(train.images(), train.labels(), cfg, test, 3);
    cfg.epochs = 12;
    const auto long_run = train_on_dataset(train.images(), train.labels(), cfg, test, 3);
    CHECK(long_run.best_test_accuracy >= short_run.best_test_accuracy);
    REQUIRE(long_run.test_curve.size() == 12);
    for (std::size_t i = 0; i < 5; ++i) CHECK(long_run.test_curve[i] == short_run.test_curve[i]);
}

TEST_CASE("random baseline") {
    auto train = hmdc::testing::toy_collection(3, 10, {1, 8, 8}, 5);
    auto test = hmdc::testing::toy_collection(3, 10, {1, 8, 8}, 6);
    auto cfg = EvalConfig::defaults(Arch::ConvNet, train.spec());
    cfg.conv_width = 4;
    cfg.epochs = 3;
    cfg.seeds = {0, 1};
    SUBCASE("same seed, same selection and accuracies") {
        Rng a(9), b(9);
        CHECK(select_per_class(train, 4, a) == select_per_class(train, 4, b));
        auto r1 = random_baseline(train, 4, cfg, test, 9);
        auto r2 = random_baseline(train, 4, cfg, test, 9);
        CHECK(r1.accuracies == r2.accuracies);
        CHECK(r1.label == "random");
        for (double acc : r1.accuracies) CHECK((acc >= 0.0 && acc <= 1.0));
    }
    SUBCASE("ipc equal to the class size selects everything") {
        Rng rng(2);
        auto idx = select_per_class(train, 10, rng);
        CHECK(std::set<std::int64_t>(idx.begin(), idx.end()).size() == 30);
    }
}

TEST_CASE("compare_report") {
    auto same = compare_report(fake_report(0.8), fake_report(0.8));
    CHECK(same.delta == 0.0);
    CHECK_FALSE(same.condensed_wins);
    auto win = compare_report(fake_report(0.80), fake_report(0.75));
    CHECK(win.delta == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(win.condensed_wins);
    CHECK_THROWS_AS(compare_report(fake_report(0.8, 300), fake_report(0.7, 200)), ConfigError);
}

TEST_CASE("gradient trace export") {
    SUBCASE("empty stream") {
        std::istringstream in("");
        auto t = export_gradient_trace(in);
        CHECK(t.rows.empty());
        CHECK(t.warnings == 0);
        std::ostringstream out;
        write_trace_csv(t, out);
        CHECK(out.str() == std::string(kTraceHeader) + "\n");
    }
    SUBCASE("three rows pass through bit-equal") {
        std::ostringstream stream;
        const double g[3] = {1.2345678901234567e-7, 0.1 + 0.2, 3.0};
        for (int i = 0; i < 3; ++i) {
            nlohmann::json j{{"step", i}, {"iteration", 0}, {"class_id", i}, {"g1_max", g[i]}, {"g2_max", g[i] * 3},
                             {"g3_max", 0.0}, {"s1", 1.0 / 3.0}, {"s2", 1.0}, {"s3", g[i]}};
            stream << j.dump() << '\n';
        }
        std::istringstream in(stream.str());
        auto t = export_gradient_trace(in);
        REQUIRE(t.rows.size() == 3);
        CHECK(t.warnings == 0);
        for (int i = 0; i < 3; ++i) {
            CHECK(t.rows[i].step == i);
            CHECK(t.rows[i].g1_max == g[i]);
            CHECK(t.rows[i].g2_max == g[i] * 3);
            CHECK(t.rows[i].s1 == 1.0 / 3.0);
            CHECK(t.rows[i].s3 == g[i]);
        }
        // CSV values parse back to the same doubles
        std::ostringstream out;
        write_trace_csv(t, out);
        std::istringstream csv(out.str());
        std::string line;
        std::getline(csv, line);
        CHECK(line == kTraceHeader);
        std::getline(csv, line);
        std::getline(csv, line);
        const auto first = line.find(',');
        CHECK(std::stod(line.substr(first + 1, line.find(',', first + 1) - first - 1)) == g[1]);
    }
    SUBCASE("one malformed line of four") {
        std::istringstream in(
            "{\"step\":0,\"g1_max\":1,\"g2_max\":2,\"g3_max\":3,\"s1\":1,\"s2\":1,\"s3\":1}\n"
            "{\"step\":1,\"g1_max\":1,\n"
            "{\"step\":2,\"g1_max\":1,\"g2_max\":2,\"g3_max\":3,\"s1\":1,\"s2\":1,\"s3\":1}\n"
            "{\"step\":3,\"g1_max\":1,\"g2_max\":2,\"g3_max\":3,\"s1\":1,\"s2\":1,\"s3\":1}\n");
        auto t = export_gradient_trace(in);
        CHECK(t.rows.size() == 3);
        CHECK(t.warnings == 1);
        CHECK(t.rows[1].step == 2);
    }
}

TEST_CASE("report json") {
    auto r = fake_report(0.5);
    r.label = "hmdc";
    const auto j = r.to_json();
    CHECK(j.at("label") == "hmdc");
    CHECK(j.at("mean") == 0.5);
    CHECK(j.at("epochs") == 300);
    CHECK(j.at("seeds").size() == 3);
}
