#include "hmdc/data.hpp"

#include <cstdlib>
#include <fstream>
#include <iterator>

#include "hmdc/errors.hpp"

namespace hmdc {

namespace fs = std::filesystem;

void DatasetSpec::validate() const {
    if (num_classes <= 0) throw ConfigError("dataset " + name + ": num_classes must be positive");
    if (image_shape.channels <= 0 || image_shape.height <= 0 || image_shape.width <= 0)
        throw ConfigError("dataset " + name + ": image shape must be positive");
    if (mean.size() != static_cast<std::size_t>(image_shape.channels) || std.size() != mean.size())
        throw ConfigError("dataset " + name + ": normalization needs one mean/std per channel");
    for (double s : std)
        if (!(s > 0.0)) throw ConfigError("dataset " + name + ": normalization std must be positive");
}

DatasetSpec dataset_spec(const std::string& name) {
    if (name == "mnist") return {"mnist", 10, {1, 28, 28}, {0.1307}, {0.3081}, false};
    if (name == "cifar10")
        return {"cifar10", 10, {3, 32, 32}, {0.4914, 0.4822, 0.4465}, {0.2023, 0.1994, 0.2010}, true};
    throw IngestionError("unknown dataset '" + name + "'");
}

void ImageBatch::validate(std::int64_t num_classes) const {
    if (!images.defined() || !labels.defined()) throw ShapeError("image batch is empty");
    if (images.dim() != 4) throw ShapeError("image batch must be [N,C,H,W]");
    if (labels.dim() != 1 || labels.size(0) != images.size(0))
        throw ShapeError("image batch labels must be [N] matching the images");
    if (images.size(0) < 1) throw ShapeError("image batch must hold at least one image");
    if (labels.min().item<std::int64_t>() < 0 || labels.max().item<std::int64_t>() >= num_classes)
        throw ShapeError("image batch label out of range");
}

ImageCollection::ImageCollection(DatasetSpec spec, torch::Tensor images, torch::Tensor labels)
    : spec_(std::move(spec)), images_(std::move(images)), labels_(labels.to(torch::kLong).contiguous()) {
    ImageBatch{images_, labels_}.validate(spec_.num_classes);
    if (images_.sizes().slice(1) != c10::IntArrayRef(spec_.image_shape.dims()))
        throw ShapeError("collection images do not match the dataset image shape");
    by_class_.assign(static_cast<std::size_t>(spec_.num_classes), {});
    const auto* lab = labels_.data_ptr<std::int64_t>();
    for (std::int64_t i = 0; i < labels_.size(0); ++i) by_class_[static_cast<std::size_t>(lab[i])].push_back(i);
}

const std::vector<std::int64_t>& ImageCollection::class_indices(std::int64_t class_id) const {
    if (class_id < 0 || class_id >= spec_.num_classes)
        throw ShapeError("class id " + std::to_string(class_id) + " out of range");
    return by_class_[static_cast<std::size_t>(class_id)];
}

ImageBatch ImageCollection::gather(const std::vector<std::int64_t>& indices) const {
    auto idx = torch::tensor(indices, torch::kLong);
    return {images_.index_select(0, idx), labels_.index_select(0, idx)};
}

fs::path resolve_data_dir(const std::optional<std::string>& configured) {
    if (const char* env = std::getenv("HMDC_DATA_DIR"); env != nullptr && *env != '\0') return env;
    if (configured && !configured->empty()) return *configured;
    if (const char* home = std::getenv("HOME"); home != nullptr && *home != '\0')
        return fs::path(home) / ".cache" / "hmdc";
    return fs::path(".hmdc-data");
}

namespace {

std::vector<unsigned char> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot open dataset file " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t at) {
    return (std::uint32_t{buf[at]} << 24) | (std::uint32_t{buf[at + 1]} << 16) |
           (std::uint32_t{buf[at + 2]} << 8) | std::uint32_t{buf[at + 3]};
}

torch::Tensor normalize(torch::Tensor raw_u8, const DatasetSpec& spec) {
    auto x = raw_u8.to(torch::kFloat32).div_(255.0);
    auto mean = torch::tensor(spec.mean, torch::kFloat32).view({1, -1, 1, 1});
    auto std = torch::tensor(spec.std, torch::kFloat32).view({1, -1, 1, 1});
    return x.sub_(mean).div_(std).contiguous();
}

ImageCollection load_mnist(const DatasetSpec& spec, Split split, const fs::path& dir) {
    const std::string prefix = split == Split::Train ? "train" : "t10k";
    const auto image_path = dir / "mnist" / (prefix + "-images-idx3-ubyte");
    const auto label_path = dir / "mnist" / (prefix + "-labels-idx1-ubyte");
    const auto images = read_file(image_path);
    const auto labels = read_file(label_path);
    if (images.size() < 16 || read_be32(images, 0) != 0x803)
        throw IngestionError("corrupt MNIST image file " + image_path.string());
    if (labels.size() < 8 || read_be32(labels, 0) != 0x801)
        throw IngestionError("corrupt MNIST label file " + label_path.string());
    const auto n = static_cast<std::int64_t>(read_be32(images, 4));
    const auto rows = static_cast<std::int64_t>(read_be32(images, 8));
    const auto cols = static_cast<std::int64_t>(read_be32(images, 12));
    if (rows != 28 || cols != 28 || images.size() != static_cast<std::size_t>(16 + n * rows * cols))
        throw IngestionError("corrupt MNIST image file " + image_path.string());
    if (static_cast<std::int64_t>(read_be32(labels, 4)) != n || labels.size() != static_cast<std::size_t>(8 + n))
        throw IngestionError("corrupt MNIST label file " + label_path.string());

    auto raw = torch::from_blob(const_cast<unsigned char*>(images.data() + 16), {n, 1, rows, cols}, torch::kUInt8);
    auto lab = torch::from_blob(const_cast<unsigned char*>(labels.data() + 8), {n}, torch::kUInt8).to(torch::kLong);
    if (lab.max().item<std::int64_t>() >= spec.num_classes)
        throw IngestionError("corrupt MNIST label file " + label_path.string());
    return {spec, normalize(raw, spec), lab};
}

ImageCollection load_cifar10(const DatasetSpec& spec, Split split, const fs::path& dir) {
    constexpr std::int64_t record = 1 + 3 * 32 * 32;
    std::vector<std::string> files;
    if (split == Split::Train) {
        for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
    } else {
        files.push_back("test_batch.bin");
    }
    std::vector<torch::Tensor> image_parts;
    std::vector<torch::Tensor> label_parts;
    for (const auto& name : files) {
        const auto path = dir / "cifar-10-batches-bin" / name;
        const auto bytes = read_file(path);
        if (bytes.empty() || bytes.size() % record != 0) throw IngestionError("corrupt CIFAR-10 file " + path.string());
        const auto n = static_cast<std::int64_t>(bytes.size()) / record;
        auto all = torch::from_blob(const_cast<unsigned char*>(bytes.data()), {n, record}, torch::kUInt8).clone();
        auto lab = all.select(1, 0).to(torch::kLong);
        if (lab.max().item<std::int64_t>() >= spec.num_classes)
            throw IngestionError("corrupt CIFAR-10 file " + path.string());
        label_parts.push_back(lab);
        image_parts.push_back(all.narrow(1, 1, record - 1).reshape({n, 3, 32, 32}));
    }
    return {spec, normalize(torch::cat(image_parts), spec), torch::cat(label_parts)};
}

} // namespace

ImageCollection load_dataset(const DatasetSpec& spec, Split split, const fs::path& data_dir) {
    spec.validate();
    if (spec.name == "mnist") return load_mnist(spec, split, data_dir);
    if (spec.name == "cifar10") return load_cifar10(spec, split, data_dir);
    throw IngestionError("unknown dataset '" + spec.name + "'");
}

ImageBatch sample_real_batch(const ImageCollection& collection, std::int64_t class_id, std::int64_t batch_size,
                             Rng& rng) {
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    const auto& pool = collection.class_indices(class_id);
    const auto available = static_cast<std::int64_t>(pool.size());
    if (available == 0) throw IngestionError("class " + std::to_string(class_id) + " has no examples");
    std::vector<std::int64_t> picked;
    picked.reserve(static_cast<std::size_t>(batch_size));
    if (available >= batch_size) {
        for (auto i : rng.sample_without_replacement(available, batch_size)) picked.push_back(pool[static_cast<std::size_t>(i)]);
    } else {
        for (std::int64_t i = 0; i < batch_size; ++i) picked.push_back(pool[static_cast<std::size_t>(rng.uniform_index(available))]);
    }
    return collection.gather(picked);
}

ImageBatch sample_uniform_batch(const ImageCollection& collection, std::int64_t batch_size, Rng& rng) {
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    const auto n = collection.size();
    if (batch_size <= n) return collection.gather(rng.sample_without_replacement(n, batch_size));
    std::vector<std::int64_t> picked;
    for (std::int64_t i = 0; i < batch_size; ++i) picked.push_back(rng.uniform_index(n));
    return collection.gather(picked);
}

torch::Tensor SyntheticSet::class_images(std::int64_t class_id) const {
    return images.narrow(0, class_id * ipc, ipc);
}

torch::Tensor SyntheticSet::class_labels(std::int64_t class_id) const {
    return labels.narrow(0, class_id * ipc, ipc);
}

torch::Tensor synthetic_labels(std::int64_t num_classes, std::int64_t ipc) {
    return torch::arange(num_classes, torch::kLong).repeat_interleave(ipc);
}

std::vector<std::int64_t> select_per_class(const ImageCollection& collection, std::int64_t ipc, Rng& rng) {
    if (ipc < 1) throw ConfigError("ipc must be at least 1");
    std::vector<std::int64_t> picked;
    for (std::int64_t c = 0; c < collection.spec().num_classes; ++c) {
        const auto& pool = collection.class_indices(c);
        const auto available = static_cast<std::int64_t>(pool.size());
        if (available < ipc)
            throw ConfigError("ipc " + std::to_string(ipc) + " exceeds the " + std::to_string(available) +
                              " examples of class " + std::to_string(c));
        for (auto i : rng.sample_without_replacement(available, ipc)) picked.push_back(pool[static_cast<std::size_t>(i)]);
    }
    return picked;
}

SyntheticSet init_synthetic_set(const ImageCollection& collection, std::int64_t ipc, Rng& rng) {
    const auto picked = select_per_class(collection, ipc, rng);
    auto batch = collection.gather(picked);
    return {batch.images.contiguous(), batch.labels, ipc, collection.spec().num_classes};
}

} // namespace hmdc
