#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "hmdc/rng.hpp"

namespace hmdc {

struct ImageShape {
    std::int64_t channels = 0;
    std::int64_t height = 0;
    std::int64_t width = 0;

    bool operator==(const ImageShape&) const = default;
    std::vector<std::int64_t> dims() const { return {channels, height, width}; }
};

struct DatasetSpec {
    std::string name;
    std::int64_t num_classes = 0;
    ImageShape image_shape;
    std::vector<double> mean;
    std::vector<double> std;
    // Horizontal mirroring preserves class identity (false for digits).
    bool mirror_invariant = false;

    void validate() const;
};

/// Built-in specs: "mnist", "cifar10". Unknown names throw IngestionError.
DatasetSpec dataset_spec(const std::string& name);

enum class Split { Train, Test };

/// Images [N, C, H, W] in normalized units plus integer labels [N].
struct ImageBatch {
    torch::Tensor images;
    torch::Tensor labels;

    std::int64_t size() const { return images.size(0); }
    /// Throws ShapeError unless the batch is well formed for num_classes.
    void validate(std::int64_t num_classes) const;
};

/// An in-memory dataset with a per-class index.
class ImageCollection {
public:
    ImageCollection() = default;
    /// images float [N,C,H,W] already normalized; labels int64 [N].
    ImageCollection(DatasetSpec spec, torch::Tensor images, torch::Tensor labels);

    const DatasetSpec& spec() const { return spec_; }
    std::int64_t size() const { return images_.size(0); }
    const torch::Tensor& images() const { return images_; }
    const torch::Tensor& labels() const { return labels_; }
    const std::vector<std::int64_t>& class_indices(std::int64_t class_id) const;

    ImageBatch gather(const std::vector<std::int64_t>& indices) const;

private:
    DatasetSpec spec_;
    torch::Tensor images_;
    torch::Tensor labels_;
    std::vector<std::vector<std::int64_t>> by_class_;
};

/// Cache directory resolution: HMDC_DATA_DIR wins over the configured value,
/// which wins over ~/.cache/hmdc.
std::filesystem::path resolve_data_dir(const std::optional<std::string>& configured = std::nullopt);

/// Reads MNIST (IDX files under <dir>/mnist) or CIFAR-10 (binary batches
/// under <dir>/cifar-10-batches-bin).
ImageCollection load_dataset(const DatasetSpec& spec, Split split, const std::filesystem::path& data_dir);

/// Class-conditional batch. Without replacement when the class is large
/// enough, uniformly with replacement otherwise.
ImageBatch sample_real_batch(const ImageCollection& collection, std::int64_t class_id,
                             std::int64_t batch_size, Rng& rng);

/// Uniform batch over the whole collection (without replacement).
ImageBatch sample_uniform_batch(const ImageCollection& collection, std::int64_t batch_size, Rng& rng);

/// The learnable condensed set. Labels are contiguous by class.
struct SyntheticSet {
    torch::Tensor images;
    torch::Tensor labels;
    std::int64_t ipc = 0;
    std::int64_t num_classes = 0;

    std::int64_t size() const { return images.size(0); }
    /// Row range [class_id * ipc, (class_id + 1) * ipc).
    torch::Tensor class_images(std::int64_t class_id) const;
    torch::Tensor class_labels(std::int64_t class_id) const;
};

/// Labels laid out as ipc copies of each class, ascending.
torch::Tensor synthetic_labels(std::int64_t num_classes, std::int64_t ipc);

SyntheticSet init_synthetic_set(const ImageCollection& collection, std::int64_t ipc, Rng& rng);

/// Indices chosen by init_synthetic_set for the same rng state; exposed so
/// the random-real baseline can reuse the selection.
std::vector<std::int64_t> select_per_class(const ImageCollection& collection, std::int64_t ipc, Rng& rng);

} // namespace hmdc
