#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include <torch/torch.h>

#include "hmdc/augment.hpp"
#include "hmdc/data.hpp"
#include "hmdc/gbm.hpp"
#include "hmdc/models.hpp"
#include "hmdc/rng.hpp"
#include "hmdc/ssd.hpp"

namespace hmdc {

struct CondenseConfig {
    std::string dataset = "mnist";
    std::int64_t ipc = 1;
    std::int64_t iterations = 100;
    std::int64_t inner_loops = 100;
    std::int64_t batch_size = 128;
    double lr_model1 = 0.001;
    double lr_model2 = 0.001;
    double lr_alignment = 0.01;
    double lr_images = 0.01;
    double momentum_images = 0.5;
    bool enable_gbm = true;
    bool enable_md = true;
    std::int64_t sample_every = 10;
    std::uint64_t seed = 0;

    std::string model1 = "convnet";
    std::string model2 = "tinyvit";
    std::int64_t conv_width = 128;
    std::int64_t conv_depth = 3;
    std::int64_t vit_patch = 4;
    std::int64_t vit_dim = 64;
    std::int64_t vit_depth = 4;
    std::int64_t vit_heads = 4;

    // unset: 0.5 for mirror-invariant datasets, 0 otherwise
    std::optional<double> flip_prob;
    std::int64_t crop_pad = 2;
    std::optional<std::string> data_cache_dir;

    /// Throws ConfigError naming the offending field.
    void validate() const;
    ModelSpec model_spec(int index, const DatasetSpec& data) const;
    PairedAugmentOptions augment_options(const DatasetSpec& data) const;
};

/// L1, L2 (per-model gradient matching) and L3 (MD-gradient matching).
struct LossVector {
    torch::Tensor l1;
    torch::Tensor l2;
    torch::Tensor l3;

    std::array<double, 3> values() const;
};

struct CondenseState {
    CondenseConfig config;
    SyntheticSet synthetic;
    ModelHandle model1;
    ModelHandle model2;
    AlignmentHead head;
    GradientAccumulator accumulator{3, 10};
    torch::Tensor momentum;
    std::int64_t image_steps = 0;
    std::int64_t model_steps = 0;
    std::int64_t alignment_steps = 0;
    Rng rng;

    std::size_t active_targets() const { return config.enable_md ? 3 : 2; }
};

/// Builds the initial state: synthetic set copied from real images, fresh
/// models, alignment head and a zero accumulator. The synthetic selection
/// uses Rng(config.seed), so a random-real baseline drawn with the same seed
/// picks the same images.
CondenseState make_condense_state(const CondenseConfig& config, const ImageCollection& train);

/// Same, with explicit model specs (used for small test models).
CondenseState make_condense_state(const CondenseConfig& config, const ImageCollection& train, const ModelSpec& spec1,
                                  const ModelSpec& spec2);

/// Sum over parameter arrays of MSE(real gradient, synthetic gradient). The
/// real gradient is a constant; the synthetic one stays differentiable.
torch::Tensor gradient_match_loss(FeatureModel& model, const ImageBatch& real, const ImageBatch& synthetic);

/// Gradient matching on the MD loss over the union of both models' parameters.
torch::Tensor md_gradient_match_loss(const CondenseState& state, const ImageBatch& real, const ImageBatch& synthetic);

/// All three targets from one forward pass per model and batch. l3 is a zero
/// constant when MD is disabled.
LossVector compute_loss_vector(const CondenseState& state, const ImageBatch& real, const ImageBatch& synthetic);

/// s1*l1 + s2*l2 + s3*l3.
torch::Tensor total_image_loss(const LossVector& losses, const std::vector<double>& scales);

struct ImageStepReport {
    std::int64_t step = 0;
    std::int64_t class_id = 0;
    std::array<double, 3> losses{};
    std::array<double, 3> scales{1.0, 1.0, 1.0};
    std::array<double, 3> accumulator{};
    std::array<double, 3> grad_max{};
    bool recorded = false;
};

/// One synthetic-image update for a single class (models and head frozen).
ImageStepReport image_update_step(CondenseState& state, const ImageCollection& train, std::int64_t class_id);

/// Same, on caller-provided class batches (no sampling, augmentation optional).
ImageStepReport image_update_step(CondenseState& state, const ImageBatch& real, std::int64_t class_id,
                                  bool augment);

/// One SGD step per model on CE + L_MD over a real batch. Returns the
/// pre-step losses {ce1, ce2, md}.
std::array<double, 3> model_update_step(CondenseState& state, const ImageBatch& real);

/// One SGD step on the alignment head minimizing L_MD with the models frozen.
/// Returns the pre-step L_MD.
double alignment_update_step(CondenseState& state, const ImageBatch& real);

struct MetricsRecord {
    std::int64_t step = 0;
    std::int64_t iteration = 0;
    std::int64_t class_id = 0;
    std::array<double, 3> losses{};
    std::array<double, 3> scales{};
    std::array<double, 3> accumulator{};
    std::array<double, 3> grad_max{};
    double wallclock_s = 0.0;

    nlohmann::json to_json() const;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

struct CondenseResult {
    CondenseState state;
    double seconds = 0.0;
};

/// The full loop: per inner loop, image updates over every class (ascending),
/// then a model update, then an alignment update.
CondenseResult run_condensation(const CondenseConfig& config, const ImageCollection& train,
                                const MetricsSink& sink = {});
CondenseResult run_condensation(CondenseState state, const ImageCollection& train, const MetricsSink& sink = {});

} // namespace hmdc
