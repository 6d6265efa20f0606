#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include <torch/torch.h>

#include "hmdc/condenser.hpp"
#include "hmdc/data.hpp"
#include "hmdc/models.hpp"

namespace hmdc {

inline constexpr const char* kVersion = "hmdc 0.1.0";

// images.bin: float32 little-endian, row-major [N,C,H,W]
// labels.bin: int64 little-endian [N]
// manifest.json: dataset, ipc, num_classes, shape, normalization, plus
// whatever the caller adds (config echo, seed, version, timestamp).
struct CondensedArtifact {
    SyntheticSet synthetic;
    nlohmann::json manifest;
};

/// Throws IntegrityError for an empty set; creates `dir` if needed.
void save_artifact(const SyntheticSet& synthetic, const DatasetSpec& data, const nlohmann::json& extra,
                   const std::filesystem::path& dir);

/// Validates binary lengths against the manifest shape (IntegrityError).
CondensedArtifact load_artifact(const std::filesystem::path& dir);

// Tensor container: <dir>/tensors.bin (float32 LE, concatenated) and
// <dir>/manifest.json listing {name, shape, offset} per tensor.
void save_tensor_container(const std::filesystem::path& dir,
                           const std::vector<std::pair<std::string, torch::Tensor>>& tensors,
                           const nlohmann::json& meta);

struct TensorContainer {
    std::vector<std::pair<std::string, torch::Tensor>> tensors;
    nlohmann::json meta;
};

TensorContainer load_tensor_container(const std::filesystem::path& dir);

nlohmann::json model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

/// Writes <dir>/model1, <dir>/model2 and <dir>/alignment containers.
void save_checkpoint(const CondenseState& state, const std::filesystem::path& dir);
ModelHandle load_model_checkpoint(const std::filesystem::path& dir);
/// Restores the head's tensors in place; names must match exactly.
void load_alignment_checkpoint(AlignmentHead& head, const std::filesystem::path& dir);

/// Strict: any key outside the known set throws ConfigError naming it.
CondenseConfig parse_condense_config(const nlohmann::json& j);
CondenseConfig load_condense_config(const std::filesystem::path& path);
/// Fully defaulted echo (flip_prob resolved against the dataset).
nlohmann::json condense_config_to_json(const CondenseConfig& config);

std::string utc_timestamp();

} // namespace hmdc
