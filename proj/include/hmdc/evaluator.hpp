#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include <torch/torch.h>

#include "hmdc/augment.hpp"
#include "hmdc/data.hpp"
#include "hmdc/models.hpp"

namespace hmdc {

struct EvalConfig {
    Arch arch = Arch::ConvNet;
    std::int64_t epochs = 300;
    double lr = 0.01;
    std::int64_t batch_size = 256;
    EvalAugmentOptions augment;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    // test accuracy is measured every `eval_every` epochs and after the last one
    std::int64_t eval_every = 50;
    std::int64_t test_batch_size = 1000;
    // architecture overrides; 0 keeps the zoo default
    std::int64_t conv_width = 0;
    std::int64_t vit_dim = 0;
    std::int64_t vit_depth = 0;

    void validate() const;
    ModelSpec model_spec(const DatasetSpec& data) const;
    bool same_protocol(const EvalConfig& other) const;
    /// Per-arch learning rate and dataset-dependent augmentation defaults.
    static EvalConfig defaults(Arch arch, const DatasetSpec& data);
};

struct TrainRun {
    double best_test_accuracy = 0.0;
    double final_train_accuracy = 0.0;
    // (epoch, test accuracy) at every measurement
    std::vector<std::pair<std::int64_t, double>> test_curve;
};

/// Fraction of correctly classified images, evaluated in fixed-size chunks.
double evaluate_accuracy(FeatureModel& model, const torch::Tensor& images, const torch::Tensor& labels,
                         std::int64_t chunk = 1000);

/// Trains a fresh model from `seed` on (images, labels) and returns the best
/// test accuracy seen.
TrainRun train_on_dataset(const torch::Tensor& images, const torch::Tensor& labels, const EvalConfig& config,
                          const ImageCollection& test, std::uint64_t seed);

struct EvalReport {
    std::string label;
    std::string arch;
    std::vector<double> accuracies;
    double mean = 0.0;
    double stddev = 0.0;
    double runtime_s = 0.0;
    EvalConfig config;

    nlohmann::json to_json() const;
};

/// One train_on_dataset run per configured seed.
EvalReport evaluate_images(const torch::Tensor& images, const torch::Tensor& labels, const EvalConfig& config,
                           const ImageCollection& test, const std::string& label);

/// ipc real images per class drawn with Rng(selection_seed), trained under
/// `config`. With the condensation seed this reproduces the synthetic
/// initialization exactly.
EvalReport random_baseline(const ImageCollection& train, std::int64_t ipc, const EvalConfig& config,
                           const ImageCollection& test, std::uint64_t selection_seed);

struct Comparison {
    std::string arch;
    double delta = 0.0;
    bool condensed_wins = false;
};

/// Throws ConfigError unless both reports were produced under the same protocol.
Comparison compare_report(const EvalReport& condensed, const EvalReport& baseline);

struct TraceRow {
    std::int64_t step = 0;
    double g1_max = 0.0, g2_max = 0.0, g3_max = 0.0;
    double s1 = 0.0, s2 = 0.0, s3 = 0.0;
};

struct TraceTable {
    std::vector<TraceRow> rows;
    std::int64_t warnings = 0;
};

/// Parses a JSONL metrics stream; malformed lines are skipped and counted.
TraceTable export_gradient_trace(std::istream& metrics);

inline constexpr const char* kTraceHeader = "step,g1_max,g2_max,g3_max,s1,s2,s3";

/// CSV with kTraceHeader; values printed with round-trip precision.
void write_trace_csv(const TraceTable& table, std::ostream& out);

} // namespace hmdc
