#include "hmdc/persistence.hpp"

#include <bit>
#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iterator>

#include "hmdc/errors.hpp"

namespace hmdc {

namespace fs = std::filesystem;

namespace {

template <typename T>
void write_le(std::ostream& out, const T* data, std::size_t count) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
    } else {
        for (std::size_t i = 0; i < count; ++i) {
            char bytes[sizeof(T)];
            std::memcpy(bytes, data + i, sizeof(T));
            for (std::size_t b = 0; b < sizeof(T); ++b) out.put(bytes[sizeof(T) - 1 - b]);
        }
    }
}

template <typename T>
void read_le(const std::vector<char>& raw, T* out, std::size_t count) {
    std::memcpy(out, raw.data(), count * sizeof(T));
    if constexpr (std::endian::native != std::endian::little) {
        for (std::size_t i = 0; i < count; ++i) {
            char bytes[sizeof(T)];
            std::memcpy(bytes, out + i, sizeof(T));
            for (std::size_t b = 0; b < sizeof(T) / 2; ++b) std::swap(bytes[b], bytes[sizeof(T) - 1 - b]);
            std::memcpy(out + i, bytes, sizeof(T));
        }
    }
}

std::vector<char> slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IntegrityError("missing file " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IntegrityError("missing file " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IntegrityError("cannot write " + path.string());
    out << text;
}

void write_floats(const fs::path& path, const torch::Tensor& t) {
    auto data = t.detach().to(torch::kFloat32).contiguous();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IntegrityError("cannot write " + path.string());
    write_le(out, data.data_ptr<float>(), static_cast<std::size_t>(data.numel()));
}

} // namespace

void save_artifact(const SyntheticSet& synthetic, const DatasetSpec& data, const nlohmann::json& extra,
                   const fs::path& dir) {
    if (!synthetic.images.defined() || synthetic.images.size(0) == 0)
        throw IntegrityError("refusing to save an empty synthetic set");
    if (synthetic.images.dim() != 4 || synthetic.labels.dim() != 1 ||
        synthetic.labels.size(0) != synthetic.images.size(0))
        throw IntegrityError("synthetic images and labels disagree in length");
    fs::create_directories(dir);
    write_floats(dir / "images.bin", synthetic.images);
    {
        auto labels = synthetic.labels.to(torch::kLong).contiguous();
        std::ofstream out(dir / "labels.bin", std::ios::binary | std::ios::trunc);
        write_le(out, labels.data_ptr<std::int64_t>(), static_cast<std::size_t>(labels.numel()));
    }
    nlohmann::json manifest = extra.is_object() ? extra : nlohmann::json::object();
    manifest["dataset"] = data.name;
    manifest["num_classes"] = synthetic.num_classes;
    manifest["ipc"] = synthetic.ipc;
    manifest["shape"] = synthetic.images.sizes().vec();
    manifest["normalization"] = {{"mean", data.mean}, {"std", data.std}};
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

CondensedArtifact load_artifact(const fs::path& dir) {
    CondensedArtifact art;
    art.manifest = read_json(dir / "manifest.json");
    std::vector<std::int64_t> shape;
    try {
        shape = art.manifest.at("shape").get<std::vector<std::int64_t>>();
        art.synthetic.ipc = art.manifest.at("ipc").get<std::int64_t>();
        art.synthetic.num_classes = art.manifest.at("num_classes").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("artifact manifest in " + dir.string() + " is incomplete: " + e.what());
    }
    if (shape.size() != 4 || shape[0] < 1) throw IntegrityError("artifact manifest shape must be [N,C,H,W] with N >= 1");
    const auto n = shape[0];
    const auto numel = n * shape[1] * shape[2] * shape[3];
    const auto images = slurp(dir / "images.bin");
    const auto labels = slurp(dir / "labels.bin");
    if (static_cast<std::int64_t>(images.size()) != numel * 4)
        throw IntegrityError("images.bin holds " + std::to_string(images.size()) + " bytes, manifest shape needs " +
                             std::to_string(numel * 4));
    if (static_cast<std::int64_t>(labels.size()) != n * 8)
        throw IntegrityError("labels.bin holds " + std::to_string(labels.size()) + " bytes, manifest shape needs " +
                             std::to_string(n * 8));
    if (art.synthetic.ipc * art.synthetic.num_classes != n)
        throw IntegrityError("manifest ipc x num_classes does not equal N");
    art.synthetic.images = torch::empty(shape, torch::kFloat32);
    read_le(images, art.synthetic.images.data_ptr<float>(), static_cast<std::size_t>(numel));
    art.synthetic.labels = torch::empty({n}, torch::kLong);
    read_le(labels, art.synthetic.labels.data_ptr<std::int64_t>(), static_cast<std::size_t>(n));
    return art;
}

void save_tensor_container(const fs::path& dir, const std::vector<std::pair<std::string, torch::Tensor>>& tensors,
                           const nlohmann::json& meta) {
    fs::create_directories(dir);
    std::ofstream out(dir / "tensors.bin", std::ios::binary | std::ios::trunc);
    if (!out) throw IntegrityError("cannot write " + (dir / "tensors.bin").string());
    nlohmann::json manifest = meta.is_object() ? meta : nlohmann::json::object();
    manifest["tensors"] = nlohmann::json::array();
    std::int64_t offset = 0;
    for (const auto& [name, tensor] : tensors) {
        auto data = tensor.detach().to(torch::kFloat32).contiguous();
        write_le(out, data.data_ptr<float>(), static_cast<std::size_t>(data.numel()));
        manifest["tensors"].push_back({{"name", name}, {"shape", data.sizes().vec()}, {"offset", offset}});
        offset += data.numel() * 4;
    }
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

TensorContainer load_tensor_container(const fs::path& dir) {
    TensorContainer c;
    c.meta = read_json(dir / "manifest.json");
    const auto raw = slurp(dir / "tensors.bin");
    try {
        for (const auto& entry : c.meta.at("tensors")) {
            const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
            const auto offset = entry.at("offset").get<std::int64_t>();
            auto t = torch::empty(shape, torch::kFloat32);
            const auto bytes = t.numel() * 4;
            if (offset < 0 || offset + bytes > static_cast<std::int64_t>(raw.size()))
                throw IntegrityError("tensor " + entry.at("name").get<std::string>() + " runs past tensors.bin");
            std::vector<char> slice(raw.begin() + offset, raw.begin() + offset + bytes);
            read_le(slice, t.data_ptr<float>(), static_cast<std::size_t>(t.numel()));
            c.tensors.emplace_back(entry.at("name").get<std::string>(), t);
        }
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("malformed tensor manifest in " + dir.string() + ": " + e.what());
    }
    return c;
}

nlohmann::json model_spec_to_json(const ModelSpec& s) {
    return {{"arch", arch_name(s.arch)},
            {"num_classes", s.num_classes},
            {"image_shape", s.image_shape.dims()},
            {"conv_width", s.conv_width},
            {"conv_depth", s.conv_depth},
            {"patch", s.patch},
            {"dim", s.dim},
            {"vit_depth", s.vit_depth},
            {"heads", s.heads},
            {"mlp_ratio", s.mlp_ratio}};
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
    try {
        ModelSpec s;
        s.arch = parse_arch(j.at("arch").get<std::string>());
        s.num_classes = j.at("num_classes").get<std::int64_t>();
        const auto shape = j.at("image_shape").get<std::vector<std::int64_t>>();
        if (shape.size() != 3) throw IntegrityError("model image_shape must have three entries");
        s.image_shape = {shape[0], shape[1], shape[2]};
        s.conv_width = j.at("conv_width").get<std::int64_t>();
        s.conv_depth = j.at("conv_depth").get<std::int64_t>();
        s.patch = j.at("patch").get<std::int64_t>();
        s.dim = j.at("dim").get<std::int64_t>();
        s.vit_depth = j.at("vit_depth").get<std::int64_t>();
        s.heads = j.at("heads").get<std::int64_t>();
        s.mlp_ratio = j.at("mlp_ratio").get<std::int64_t>();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("malformed model spec: ") + e.what());
    }
}

void save_checkpoint(const CondenseState& state, const fs::path& dir) {
    for (int i = 1; i <= 2; ++i) {
        const auto& model = i == 1 ? state.model1 : state.model2;
        std::vector<std::pair<std::string, torch::Tensor>> named;
        for (const auto& item : model->named_parameters(true)) named.emplace_back(item.key(), item.value());
        nlohmann::json meta = model_spec_to_json(model->spec());
        save_tensor_container(dir / ("model" + std::to_string(i)), named, meta);
    }
    const auto& t = state.head.target();
    save_tensor_container(dir / "alignment", state.head.named_parameters(),
                          {{"target", {{"grid_h", t.grid_h}, {"grid_w", t.grid_w}, {"dim", t.dim}}}});
}

ModelHandle load_model_checkpoint(const fs::path& dir) {
    auto container = load_tensor_container(dir);
    auto model = build_model(model_spec_from_json(container.meta), 0);
    auto params = model->named_parameters(true);
    if (params.size() != container.tensors.size()) throw IntegrityError("checkpoint parameter count mismatch in " + dir.string());
    torch::NoGradGuard no_grad;
    for (const auto& [name, tensor] : container.tensors) {
        auto* target = params.find(name);
        if (target == nullptr || target->sizes() != tensor.sizes())
            throw IntegrityError("checkpoint tensor " + name + " does not fit the model");
        target->copy_(tensor);
    }
    return model;
}

void load_alignment_checkpoint(AlignmentHead& head, const fs::path& dir) {
    auto container = load_tensor_container(dir);
    auto named = head.named_parameters();
    if (named.size() != container.tensors.size()) throw IntegrityError("alignment checkpoint tensor count mismatch");
    torch::NoGradGuard no_grad;
    for (std::size_t i = 0; i < named.size(); ++i) {
        if (named[i].first != container.tensors[i].first || named[i].second.sizes() != container.tensors[i].second.sizes())
            throw IntegrityError("alignment checkpoint tensor " + container.tensors[i].first + " does not fit the head");
        named[i].second.copy_(container.tensors[i].second);
    }
}

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

} // namespace hmdc
