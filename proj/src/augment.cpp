#include "hmdc/augment.hpp"

#include <algorithm>

#include "hmdc/errors.hpp"

namespace hmdc {

namespace F = torch::nn::functional;

AugmentParams draw_augment_params(const PairedAugmentOptions& options, Rng& rng) {
    AugmentParams p;
    p.flip = options.flip_prob > 0.0 && rng.bernoulli(options.flip_prob);
    p.pad = options.crop_pad;
    p.offset_y = options.crop_pad > 0 ? rng.uniform_index(2 * options.crop_pad + 1) : 0;
    p.offset_x = options.crop_pad > 0 ? rng.uniform_index(2 * options.crop_pad + 1) : 0;
    return p;
}

torch::Tensor apply_augment(const torch::Tensor& images, const AugmentParams& params) {
    if (images.dim() != 4) throw ShapeError("apply_augment: expected [N,C,H,W] images");
    auto out = images;
    if (params.flip) out = out.flip({3});
    if (params.pad > 0) {
        const auto h = out.size(2);
        const auto w = out.size(3);
        out = F::pad(out, F::PadFuncOptions({params.pad, params.pad, params.pad, params.pad}));
        out = out.narrow(2, params.offset_y, h).narrow(3, params.offset_x, w);
    }
    return out;
}

PairedAugmentation apply_paired_augmentation(const ImageBatch& real, const ImageBatch& synthetic,
                                             const PairedAugmentOptions& options, Rng& rng) {
    if (real.images.dim() != 4 || synthetic.images.dim() != 4 ||
        real.images.sizes().slice(1) != synthetic.images.sizes().slice(1)) {
        throw ShapeError("apply_paired_augmentation: real and synthetic batches differ in (C,H,W)");
    }
    const auto params = draw_augment_params(options, rng);
    return {{apply_augment(real.images, params), real.labels},
            {apply_augment(synthetic.images, params), synthetic.labels},
            params};
}

torch::Tensor apply_eval_augmentation(const torch::Tensor& images, const EvalAugmentOptions& options, Rng& rng) {
    if (images.dim() != 4) throw ShapeError("apply_eval_augmentation: expected [N,C,H,W] images");
    if (!options.flip && !options.crop && !options.cutout) return images;
    const auto n = images.size(0);
    const auto h = images.size(2);
    const auto w = images.size(3);
    const auto hole = options.cutout_size > 0 ? options.cutout_size : std::max<std::int64_t>(1, h / 4);
    std::vector<torch::Tensor> out;
    out.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        AugmentParams p;
        p.flip = options.flip && rng.bernoulli(0.5);
        if (options.crop && options.crop_pad > 0) {
            p.pad = options.crop_pad;
            p.offset_y = rng.uniform_index(2 * p.pad + 1);
            p.offset_x = rng.uniform_index(2 * p.pad + 1);
        }
        auto img = apply_augment(images.narrow(0, i, 1), p);
        if (options.cutout) {
            const auto cy = rng.uniform_index(h);
            const auto cx = rng.uniform_index(w);
            const auto y0 = std::max<std::int64_t>(0, cy - hole / 2);
            const auto x0 = std::max<std::int64_t>(0, cx - hole / 2);
            const auto y1 = std::min(h, cy - hole / 2 + hole);
            const auto x1 = std::min(w, cx - hole / 2 + hole);
            auto mask = torch::ones({1, 1, h, w}, img.options());
            mask.index_put_({torch::indexing::Slice(), torch::indexing::Slice(),
                             torch::indexing::Slice(y0, y1), torch::indexing::Slice(x0, x1)},
                            0.0);
            img = img * mask;
        }
        out.push_back(img);
    }
    return torch::cat(out, 0);
}

} // namespace hmdc
