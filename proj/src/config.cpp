#include <fstream>
#include <set>

#include "hmdc/errors.hpp"
#include "hmdc/persistence.hpp"

namespace hmdc {

namespace {

template <typename T>
T field(const nlohmann::json& j, const std::string& key) {
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config key '" + key + "' has the wrong type");
    }
}

} // namespace

CondenseConfig parse_condense_config(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    static const std::set<std::string> known{
        "dataset",  "ipc",        "iterations",   "inner_loops", "batch_size", "lr_model1",  "lr_model2",
        "lr_alignment", "lr_images", "momentum_images", "enable_gbm", "enable_md", "sample_every", "seed",
        "model1",   "model2",     "conv_width",   "conv_depth",  "vit_patch",  "vit_dim",    "vit_depth",
        "vit_heads", "flip_prob", "crop_pad",     "data"};
    for (const auto& item : j.items())
        if (!known.contains(item.key())) throw ConfigError("unknown config key '" + item.key() + "'");

    CondenseConfig c;
    if (j.contains("dataset")) c.dataset = field<std::string>(j, "dataset");
    if (j.contains("ipc")) c.ipc = field<std::int64_t>(j, "ipc");
    if (j.contains("iterations")) c.iterations = field<std::int64_t>(j, "iterations");
    if (j.contains("inner_loops")) c.inner_loops = field<std::int64_t>(j, "inner_loops");
    if (j.contains("batch_size")) c.batch_size = field<std::int64_t>(j, "batch_size");
    if (j.contains("lr_model1")) c.lr_model1 = field<double>(j, "lr_model1");
    if (j.contains("lr_model2")) c.lr_model2 = field<double>(j, "lr_model2");
    if (j.contains("lr_alignment")) c.lr_alignment = field<double>(j, "lr_alignment");
    if (j.contains("lr_images")) c.lr_images = field<double>(j, "lr_images");
    if (j.contains("momentum_images")) c.momentum_images = field<double>(j, "momentum_images");
    if (j.contains("enable_gbm")) c.enable_gbm = field<bool>(j, "enable_gbm");
    if (j.contains("enable_md")) c.enable_md = field<bool>(j, "enable_md");
    if (j.contains("sample_every")) c.sample_every = field<std::int64_t>(j, "sample_every");
    if (j.contains("seed")) c.seed = field<std::uint64_t>(j, "seed");
    if (j.contains("model1")) c.model1 = field<std::string>(j, "model1");
    if (j.contains("model2")) c.model2 = field<std::string>(j, "model2");
    if (j.contains("conv_width")) c.conv_width = field<std::int64_t>(j, "conv_width");
    if (j.contains("conv_depth")) c.conv_depth = field<std::int64_t>(j, "conv_depth");
    if (j.contains("vit_patch")) c.vit_patch = field<std::int64_t>(j, "vit_patch");
    if (j.contains("vit_dim")) c.vit_dim = field<std::int64_t>(j, "vit_dim");
    if (j.contains("vit_depth")) c.vit_depth = field<std::int64_t>(j, "vit_depth");
    if (j.contains("vit_heads")) c.vit_heads = field<std::int64_t>(j, "vit_heads");
    if (j.contains("flip_prob")) c.flip_prob = field<double>(j, "flip_prob");
    if (j.contains("crop_pad")) c.crop_pad = field<std::int64_t>(j, "crop_pad");
    if (j.contains("data")) {
        const auto& data = j.at("data");
        if (!data.is_object()) throw ConfigError("config key 'data' must be an object");
        for (const auto& item : data.items())
            if (item.key() != "cache_dir") throw ConfigError("unknown config key 'data." + item.key() + "'");
        if (data.contains("cache_dir")) c.data_cache_dir = field<std::string>(data, "cache_dir");
    }
    c.validate();
    return c;
}

CondenseConfig load_condense_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_condense_config(j);
}

nlohmann::json condense_config_to_json(const CondenseConfig& c) {
    const auto data = dataset_spec(c.dataset);
    nlohmann::json j{{"dataset", c.dataset},
                     {"ipc", c.ipc},
                     {"iterations", c.iterations},
                     {"inner_loops", c.inner_loops},
                     {"batch_size", c.batch_size},
                     {"lr_model1", c.lr_model1},
                     {"lr_model2", c.lr_model2},
                     {"lr_alignment", c.lr_alignment},
                     {"lr_images", c.lr_images},
                     {"momentum_images", c.momentum_images},
                     {"enable_gbm", c.enable_gbm},
                     {"enable_md", c.enable_md},
                     {"sample_every", c.sample_every},
                     {"seed", c.seed},
                     {"model1", c.model1},
                     {"model2", c.model2},
                     {"conv_width", c.conv_width},
                     {"conv_depth", c.conv_depth},
                     {"vit_patch", c.vit_patch},
                     {"vit_dim", c.vit_dim},
                     {"vit_depth", c.vit_depth},
                     {"vit_heads", c.vit_heads},
                     {"flip_prob", c.augment_options(data).flip_prob},
                     {"crop_pad", c.crop_pad},
                     {"data", {{"cache_dir", resolve_data_dir(c.data_cache_dir).string()}}}};
    return j;
}

} // namespace hmdc
