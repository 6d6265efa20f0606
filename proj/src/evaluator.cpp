#include "hmdc/evaluator.hpp"

#include <chrono>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "hmdc/errors.hpp"
#include "hmdc/rng.hpp"

namespace hmdc {

void EvalConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (seeds.empty()) throw ConfigError("at least one evaluation seed is required");
    if (!(lr > 0.0)) throw ConfigError("evaluation lr must be positive");
    if (batch_size < 1 || eval_every < 1 || test_batch_size < 1)
        throw ConfigError("batch sizes and eval_every must be at least 1");
}

ModelSpec EvalConfig::model_spec(const DatasetSpec& data) const {
    ModelSpec spec;
    spec.arch = arch;
    spec.num_classes = data.num_classes;
    spec.image_shape = data.image_shape;
    if (conv_width > 0) spec.conv_width = conv_width;
    if (vit_dim > 0) spec.dim = vit_dim;
    if (vit_depth > 0) spec.vit_depth = vit_depth;
    return spec;
}

bool EvalConfig::same_protocol(const EvalConfig& o) const {
    return arch == o.arch && epochs == o.epochs && lr == o.lr && batch_size == o.batch_size && augment == o.augment &&
           seeds == o.seeds && eval_every == o.eval_every && conv_width == o.conv_width && vit_dim == o.vit_dim &&
           vit_depth == o.vit_depth;
}

EvalConfig EvalConfig::defaults(Arch arch, const DatasetSpec& data) {
    EvalConfig c;
    c.arch = arch;
    c.lr = arch == Arch::ConvNet ? 0.01 : 0.001;
    c.augment.flip = data.mirror_invariant;
    return c;
}

double evaluate_accuracy(FeatureModel& model, const torch::Tensor& images, const torch::Tensor& labels,
                         std::int64_t chunk) {
    torch::NoGradGuard no_grad;
    const auto n = images.size(0);
    if (n == 0) return 0.0;
    const auto dtype = model.ordered_parameters().front().scalar_type();
    std::int64_t correct = 0;
    for (std::int64_t start = 0; start < n; start += chunk) {
        const auto len = std::min(chunk, n - start);
        auto pred = model.forward(images.narrow(0, start, len).to(dtype)).argmax(1);
        correct += pred.eq(labels.narrow(0, start, len)).sum().item<std::int64_t>();
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

namespace {

std::unique_ptr<torch::optim::Optimizer> make_optimizer(Arch arch, FeatureModel& model, double lr) {
    if (arch == Arch::ConvNet)
        return std::make_unique<torch::optim::SGD>(model.parameters(),
                                                   torch::optim::SGDOptions(lr).momentum(0.9).weight_decay(5e-4));
    return std::make_unique<torch::optim::Adam>(model.parameters(), torch::optim::AdamOptions(lr));
}

} // namespace

TrainRun train_on_dataset(const torch::Tensor& images, const torch::Tensor& labels, const EvalConfig& config,
                          const ImageCollection& test, std::uint64_t seed) {
    config.validate();
    if (!images.defined() || images.size(0) == 0) throw ShapeError("train_on_dataset: empty training set");
    ImageBatch{images, labels}.validate(test.spec().num_classes);
    auto model = build_model(config.model_spec(test.spec()), seed);
    auto optimizer = make_optimizer(config.arch, *model, config.lr);
    Rng rng(seed ^ 0xD1B54A32D192ED03ULL);
    const auto n = images.size(0);
    const auto train_images = images.detach().to(torch::kFloat32);

    TrainRun run;
    for (std::int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
        model->train();
        const auto order = rng.sample_without_replacement(n, n);
        for (std::int64_t start = 0; start < n; start += config.batch_size) {
            const auto len = std::min(config.batch_size, n - start);
            std::vector<std::int64_t> idx(order.begin() + start, order.begin() + start + len);
            auto index = torch::tensor(idx, torch::kLong);
            auto x = apply_eval_augmentation(train_images.index_select(0, index), config.augment, rng);
            auto y = labels.index_select(0, index);
            auto loss = classification_loss(model->forward(x), y);
            if (!std::isfinite(loss.item<double>()))
                throw NonFiniteError("evaluation training loss at epoch " + std::to_string(epoch));
            optimizer->zero_grad();
            loss.backward();
            optimizer->step();
        }
        if (epoch % config.eval_every == 0 || epoch == config.epochs) {
            model->eval();
            const double acc = evaluate_accuracy(*model, test.images(), test.labels(), config.test_batch_size);
            run.test_curve.emplace_back(epoch, acc);
            run.best_test_accuracy = std::max(run.best_test_accuracy, acc);
        }
    }
    run.final_train_accuracy = evaluate_accuracy(*model, train_images, labels);
    return run;
}

nlohmann::json EvalReport::to_json() const {
    return {{"label", label},
            {"arch", arch},
            {"accuracies", accuracies},
            {"mean", mean},
            {"std", stddev},
            {"runtime_s", runtime_s},
            {"epochs", config.epochs},
            {"lr", config.lr},
            {"batch_size", config.batch_size},
            {"eval_every", config.eval_every},
            {"seeds", config.seeds},
            {"augment", {{"flip", config.augment.flip}, {"crop", config.augment.crop}, {"cutout", config.augment.cutout}}}};
}

EvalReport evaluate_images(const torch::Tensor& images, const torch::Tensor& labels, const EvalConfig& config,
                           const ImageCollection& test, const std::string& label) {
    config.validate();
    const auto start = std::chrono::steady_clock::now();
    EvalReport report;
    report.label = label;
    report.arch = arch_name(config.arch);
    report.config = config;
    for (auto seed : config.seeds)
        report.accuracies.push_back(train_on_dataset(images, labels, config, test, seed).best_test_accuracy);
    double sum = 0.0;
    for (double a : report.accuracies) sum += a;
    report.mean = sum / static_cast<double>(report.accuracies.size());
    double var = 0.0;
    for (double a : report.accuracies) var += (a - report.mean) * (a - report.mean);
    report.stddev = std::sqrt(var / static_cast<double>(report.accuracies.size()));
    report.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

EvalReport random_baseline(const ImageCollection& train, std::int64_t ipc, const EvalConfig& config,
                           const ImageCollection& test, std::uint64_t selection_seed) {
    Rng rng(selection_seed);
    const auto batch = train.gather(select_per_class(train, ipc, rng));
    return evaluate_images(batch.images, batch.labels, config, test, "random");
}

Comparison compare_report(const EvalReport& condensed, const EvalReport& baseline) {
    if (!condensed.config.same_protocol(baseline.config))
        throw ConfigError("compare_report: reports were produced under different evaluation configs");
    Comparison c;
    c.arch = condensed.arch;
    c.delta = condensed.mean - baseline.mean;
    c.condensed_wins = condensed.mean > baseline.mean;
    return c;
}

TraceTable export_gradient_trace(std::istream& metrics) {
    TraceTable table;
    std::string line;
    while (std::getline(metrics, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            TraceRow row;
            row.step = j.at("step").get<std::int64_t>();
            row.g1_max = j.at("g1_max").get<double>();
            row.g2_max = j.at("g2_max").get<double>();
            row.g3_max = j.at("g3_max").get<double>();
            row.s1 = j.at("s1").get<double>();
            row.s2 = j.at("s2").get<double>();
            row.s3 = j.at("s3").get<double>();
            table.rows.push_back(row);
        } catch (const nlohmann::json::exception&) {
            ++table.warnings;
        }
    }
    return table;
}

void write_trace_csv(const TraceTable& table, std::ostream& out) {
    out << kTraceHeader << '\n';
    std::ostringstream line;
    line.precision(17);
    for (const auto& r : table.rows) {
        line.str("");
        line << r.step << ',' << r.g1_max << ',' << r.g2_max << ',' << r.g3_max << ',' << r.s1 << ',' << r.s2 << ','
             << r.s3 << '\n';
        out << line.str();
    }
}

} // namespace hmdc
