#include "hmdc/condenser.hpp"

#include <chrono>
#include <cmath>

#include "hmdc/errors.hpp"

namespace hmdc {

namespace {

using torch::autograd::grad;

// Gradients of `loss` for every tensor in `params`; parameters the loss does
// not reach get zeros.
std::vector<torch::Tensor> parameter_gradients(const torch::Tensor& loss, const std::vector<torch::Tensor>& params,
                                               bool create_graph, bool retain_graph) {
    auto grads = grad({loss}, params, {}, retain_graph, create_graph, /*allow_unused=*/true);
    for (std::size_t i = 0; i < grads.size(); ++i)
        if (!grads[i].defined()) grads[i] = torch::zeros_like(params[i]);
    return grads;
}

std::vector<torch::Tensor> detached(std::vector<torch::Tensor> tensors) {
    for (auto& t : tensors) t = t.detach();
    return tensors;
}

torch::Tensor gradient_distance(const std::vector<torch::Tensor>& real, const std::vector<torch::Tensor>& synthetic) {
    if (real.size() != synthetic.size())
        throw ShapeError("gradient matching: parameter enumeration mismatch (" + std::to_string(real.size()) + " vs " +
                         std::to_string(synthetic.size()) + ")");
    torch::Tensor total;
    for (std::size_t i = 0; i < real.size(); ++i) {
        if (real[i].sizes() != synthetic[i].sizes())
            throw ShapeError("gradient matching: parameter " + std::to_string(i) + " shape mismatch");
        auto term = (synthetic[i] - real[i]).pow(2).mean();
        total = total.defined() ? total + term : term;
    }
    return total;
}

std::vector<torch::Tensor> concat(std::vector<torch::Tensor> a, const std::vector<torch::Tensor>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

torch::Dtype model_dtype(const FeatureModel& model) {
    const auto params = model.ordered_parameters();
    return params.empty() ? torch::kFloat32 : params.front().scalar_type();
}

ImageBatch as_dtype(const ImageBatch& batch, torch::Dtype dtype) {
    return {batch.images.to(dtype), batch.labels};
}

void require_finite(double value, const std::string& what) {
    if (!std::isfinite(value)) throw NonFiniteError(what + " is not finite");
}

} // namespace

void CondenseConfig::validate() const {
    auto positive_int = [](std::int64_t v, const char* key) {
        if (v < 1) throw ConfigError(std::string(key) + " must be at least 1");
    };
    auto positive_real = [](double v, const char* key) {
        if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(key) + " must be a positive number");
    };
    dataset_spec(dataset);
    positive_int(ipc, "ipc");
    positive_int(iterations, "iterations");
    positive_int(inner_loops, "inner_loops");
    positive_int(batch_size, "batch_size");
    positive_int(sample_every, "sample_every");
    positive_real(lr_model1, "lr_model1");
    positive_real(lr_model2, "lr_model2");
    positive_real(lr_alignment, "lr_alignment");
    positive_real(lr_images, "lr_images");
    if (!(momentum_images >= 0.0 && momentum_images < 1.0)) throw ConfigError("momentum_images must lie in [0, 1)");
    if (flip_prob && !(*flip_prob >= 0.0 && *flip_prob <= 1.0)) throw ConfigError("flip_prob must lie in [0, 1]");
    if (crop_pad < 0) throw ConfigError("crop_pad must be non-negative");
    const auto data = dataset_spec(dataset);
    model_spec(1, data).validate();
    model_spec(2, data).validate();
}

ModelSpec CondenseConfig::model_spec(int index, const DatasetSpec& data) const {
    ModelSpec spec;
    spec.arch = parse_arch(index == 1 ? model1 : model2);
    spec.num_classes = data.num_classes;
    spec.image_shape = data.image_shape;
    spec.conv_width = conv_width;
    spec.conv_depth = conv_depth;
    spec.patch = vit_patch;
    spec.dim = vit_dim;
    spec.vit_depth = vit_depth;
    spec.heads = vit_heads;
    return spec;
}

PairedAugmentOptions CondenseConfig::augment_options(const DatasetSpec& data) const {
    PairedAugmentOptions opts;
    opts.flip_prob = flip_prob.value_or(data.mirror_invariant ? 0.5 : 0.0);
    opts.crop_pad = crop_pad;
    return opts;
}

std::array<double, 3> LossVector::values() const {
    auto value = [](const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; };
    return {value(l1), value(l2), value(l3)};
}

CondenseState make_condense_state(const CondenseConfig& config, const ImageCollection& train) {
    const auto& data = train.spec();
    return make_condense_state(config, train, config.model_spec(1, data), config.model_spec(2, data));
}

CondenseState make_condense_state(const CondenseConfig& config, const ImageCollection& train, const ModelSpec& spec1,
                                  const ModelSpec& spec2) {
    if (config.dataset != train.spec().name)
        throw ConfigError("config dataset '" + config.dataset + "' does not match the loaded '" + train.spec().name + "'");
    CondenseState state;
    state.config = config;
    Rng selection(config.seed);
    state.synthetic = init_synthetic_set(train, config.ipc, selection);
    Rng root(config.seed ^ 0x9E3779B97F4A7C15ULL);
    state.model1 = build_model(spec1, root.next_u64());
    state.model2 = build_model(spec2, root.next_u64());
    state.head = AlignmentHead(state.model1->tap_geometry(), state.model2->tap_geometry(), root.next_u64());
    state.accumulator = GradientAccumulator(state.active_targets(), config.sample_every);
    state.momentum = torch::zeros_like(state.synthetic.images);
    state.rng = root.split();
    return state;
}

torch::Tensor gradient_match_loss(FeatureModel& model, const ImageBatch& real, const ImageBatch& synthetic) {
    const auto params = model.ordered_parameters();
    const auto dtype = model_dtype(model);
    const auto r = as_dtype(real, dtype);
    const auto s = as_dtype(synthetic, dtype);
    auto real_grads = detached(
        parameter_gradients(classification_loss(model.forward(r.images), r.labels), params, false, false));
    auto synth_grads = parameter_gradients(classification_loss(model.forward(s.images), s.labels), params, true, true);
    return gradient_distance(real_grads, synth_grads);
}

torch::Tensor md_gradient_match_loss(const CondenseState& state, const ImageBatch& real, const ImageBatch& synthetic) {
    const auto params = concat(state.model1->ordered_parameters(), state.model2->ordered_parameters());
    const auto dtype = model_dtype(*state.model1);
    const auto r = as_dtype(real, dtype);
    const auto s = as_dtype(synthetic, dtype);
    auto real_md = md_loss(state.model1->forward_with_features(r.images).features,
                           state.model2->forward_with_features(r.images).features, state.head);
    auto real_grads = detached(parameter_gradients(real_md, params, false, false));
    auto synth_md = md_loss(state.model1->forward_with_features(s.images).features,
                            state.model2->forward_with_features(s.images).features, state.head);
    auto synth_grads = parameter_gradients(synth_md, params, true, true);
    return gradient_distance(real_grads, synth_grads);
}

LossVector compute_loss_vector(const CondenseState& state, const ImageBatch& real, const ImageBatch& synthetic) {
    auto& m1 = *state.model1;
    auto& m2 = *state.model2;
    const auto p1 = m1.ordered_parameters();
    const auto p2 = m2.ordered_parameters();
    const auto both = concat(p1, p2);
    const bool md = state.config.enable_md;
    const auto dtype = model_dtype(m1);
    const auto r = as_dtype(real, dtype);
    const auto s = as_dtype(synthetic, dtype);

    std::vector<torch::Tensor> g1_real, g2_real, gmd_real;
    {
        auto out1 = m1.forward_with_features(r.images);
        auto out2 = m2.forward_with_features(r.images);
        g1_real = detached(parameter_gradients(classification_loss(out1.logits, r.labels), p1, false, md));
        g2_real = detached(parameter_gradients(classification_loss(out2.logits, r.labels), p2, false, md));
        if (md) gmd_real = detached(parameter_gradients(md_loss(out1.features, out2.features, state.head), both, false, false));
    }

    auto out1 = m1.forward_with_features(s.images);
    auto out2 = m2.forward_with_features(s.images);
    LossVector lv;
    lv.l1 = gradient_distance(g1_real, parameter_gradients(classification_loss(out1.logits, s.labels), p1, true, true));
    lv.l2 = gradient_distance(g2_real, parameter_gradients(classification_loss(out2.logits, s.labels), p2, true, true));
    if (md) {
        auto synth_md = md_loss(out1.features, out2.features, state.head);
        lv.l3 = gradient_distance(gmd_real, parameter_gradients(synth_md, both, true, true));
    } else {
        lv.l3 = torch::zeros({}, lv.l1.options());
    }
    return lv;
}

torch::Tensor total_image_loss(const LossVector& losses, const std::vector<double>& scales) {
    if (scales.size() != 3) throw ShapeError("total_image_loss: expected three scales");
    return losses.l1 * scales[0] + losses.l2 * scales[1] + losses.l3 * scales[2];
}

namespace {

ImageStepReport update_class_images(CondenseState& state, const ImageBatch& real, std::int64_t class_id, bool augment) {
    const auto& cfg = state.config;
    const auto data = dataset_spec(cfg.dataset);
    auto pixels = state.synthetic.class_images(class_id).detach().clone().requires_grad_(true);
    ImageBatch synth{pixels, state.synthetic.class_labels(class_id)};

    ImageBatch real_in = real;
    ImageBatch synth_in = synth;
    if (augment) {
        auto paired = apply_paired_augmentation(real, synth, cfg.augment_options(data), state.rng);
        real_in = paired.real;
        synth_in = paired.synthetic;
    }

    const auto lv = compute_loss_vector(state, real_in, synth_in);
    ImageStepReport report;
    report.step = state.image_steps;
    report.class_id = class_id;
    report.losses = lv.values();
    static const char* names[] = {"l1 (model 1 gradient match)", "l2 (model 2 gradient match)",
                                  "l3 (mutual distillation gradient match)"};
    for (std::size_t i = 0; i < 3; ++i)
        require_finite(report.losses[i], std::string(names[i]) + " at image step " + std::to_string(state.image_steps) +
                                             ", class " + std::to_string(class_id));

    const auto k = state.active_targets();
    const std::array<torch::Tensor, 3> losses{lv.l1, lv.l2, lv.l3};
    std::vector<torch::Tensor> pixel_grads;
    for (std::size_t i = 0; i < k; ++i) {
        auto g = grad({losses[i]}, {pixels}, {}, /*retain_graph=*/i + 1 < k, false, /*allow_unused=*/true)[0];
        pixel_grads.push_back(g.defined() ? g : torch::zeros_like(pixels));
    }
    std::vector<double> magnitudes;
    for (const auto& g : pixel_grads) magnitudes.push_back(max_abs(g));
    for (std::size_t i = 0; i < k; ++i) {
        report.grad_max[i] = magnitudes[i];
        require_finite(magnitudes[i], std::string("pixel gradient of ") + names[i]);
    }

    if (state.accumulator.due()) {
        state.accumulator.record_values(magnitudes);
        report.recorded = true;
    }
    state.accumulator.advance();

    const auto scales = cfg.enable_gbm ? compute_scales(state.accumulator) : std::vector<double>(k, 1.0);
    for (std::size_t i = 0; i < k; ++i) {
        report.scales[i] = scales[i];
        report.accumulator[i] = state.accumulator.values()[i];
    }

    torch::NoGradGuard no_grad;
    auto total = torch::zeros_like(pixels);
    for (std::size_t i = 0; i < k; ++i) total.add_(pixel_grads[i], scales[i]);
    auto direction = normalize_per_image_gradients(total);
    auto velocity = state.momentum.narrow(0, class_id * state.synthetic.ipc, state.synthetic.ipc);
    velocity.mul_(cfg.momentum_images).add_(direction);
    state.synthetic.class_images(class_id).sub_(velocity * cfg.lr_images);
    ++state.image_steps;
    return report;
}

} // namespace

ImageStepReport image_update_step(CondenseState& state, const ImageCollection& train, std::int64_t class_id) {
    auto real = sample_real_batch(train, class_id, state.config.batch_size, state.rng);
    return update_class_images(state, real, class_id, true);
}

ImageStepReport image_update_step(CondenseState& state, const ImageBatch& real, std::int64_t class_id, bool augment) {
    return update_class_images(state, real, class_id, augment);
}

std::array<double, 3> model_update_step(CondenseState& state, const ImageBatch& real) {
    auto& m1 = *state.model1;
    auto& m2 = *state.model2;
    const auto p1 = m1.ordered_parameters();
    const auto p2 = m2.ordered_parameters();
    const auto r = as_dtype(real, model_dtype(m1));
    auto out1 = m1.forward_with_features(r.images);
    auto out2 = m2.forward_with_features(r.images);
    auto ce1 = classification_loss(out1.logits, r.labels);
    auto ce2 = classification_loss(out2.logits, r.labels);
    auto total = ce1 + ce2;
    torch::Tensor md;
    if (state.config.enable_md) {
        md = md_loss(out1.features, out2.features, state.head);
        total = total + md;
    }
    const std::array<double, 3> before{ce1.item<double>(), ce2.item<double>(), md.defined() ? md.item<double>() : 0.0};
    require_finite(before[0] + before[1] + before[2], "model update loss at model step " + std::to_string(state.model_steps));

    const auto grads = parameter_gradients(total, concat(p1, p2), false, false);
    torch::NoGradGuard no_grad;
    for (std::size_t i = 0; i < p1.size(); ++i) p1[i].sub_(grads[i] * state.config.lr_model1);
    for (std::size_t i = 0; i < p2.size(); ++i) p2[i].sub_(grads[p1.size() + i] * state.config.lr_model2);
    ++state.model_steps;
    return before;
}

double alignment_update_step(CondenseState& state, const ImageBatch& real) {
    const auto r = as_dtype(real, model_dtype(*state.model1));
    FeatureStack f1, f2;
    {
        torch::NoGradGuard frozen;
        f1 = state.model1->forward_with_features(r.images).features;
        f2 = state.model2->forward_with_features(r.images).features;
    }
    const auto params = state.head.parameters();
    auto loss = md_loss(f1, f2, state.head);
    const double before = loss.item<double>();
    require_finite(before, "alignment loss at alignment step " + std::to_string(state.alignment_steps));
    const auto grads = parameter_gradients(loss, params, false, false);
    torch::NoGradGuard no_grad;
    for (std::size_t i = 0; i < params.size(); ++i) params[i].sub_(grads[i] * state.config.lr_alignment);
    ++state.alignment_steps;
    return before;
}

nlohmann::json MetricsRecord::to_json() const {
    return {{"step", step},
            {"iteration", iteration},
            {"class_id", class_id},
            {"l1", losses[0]},
            {"l2", losses[1]},
            {"l3", losses[2]},
            {"s1", scales[0]},
            {"s2", scales[1]},
            {"s3", scales[2]},
            {"a1", accumulator[0]},
            {"a2", accumulator[1]},
            {"a3", accumulator[2]},
            {"g1_max", grad_max[0]},
            {"g2_max", grad_max[1]},
            {"g3_max", grad_max[2]},
            {"wallclock_s", wallclock_s}};
}

CondenseResult run_condensation(const CondenseConfig& config, const ImageCollection& train, const MetricsSink& sink) {
    config.validate();
    return run_condensation(make_condense_state(config, train), train, sink);
}

CondenseResult run_condensation(CondenseState state, const ImageCollection& train, const MetricsSink& sink) {
    const auto start = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
    const auto& cfg = state.config;
    for (std::int64_t iteration = 0; iteration < cfg.iterations; ++iteration) {
        for (std::int64_t loop = 0; loop < cfg.inner_loops; ++loop) {
            for (std::int64_t c = 0; c < state.synthetic.num_classes; ++c) {
                const auto report = image_update_step(state, train, c);
                if (sink) {
                    MetricsRecord rec;
                    rec.step = report.step;
                    rec.iteration = iteration;
                    rec.class_id = c;
                    rec.losses = report.losses;
                    rec.scales = report.scales;
                    rec.accumulator = report.accumulator;
                    rec.grad_max = report.grad_max;
                    rec.wallclock_s = elapsed();
                    sink(rec);
                }
            }
            const auto real = sample_uniform_batch(train, cfg.batch_size, state.rng);
            model_update_step(state, real);
            if (cfg.enable_md) alignment_update_step(state, real);
        }
    }
    return {std::move(state), elapsed()};
}

} // namespace hmdc
