#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "droppatch/finetune.hpp"
#include "droppatch/model.hpp"
#include "droppatch/pretrain.hpp"

namespace droppatch::ckpt {

using Json = nlohmann::ordered_json;

// A checkpoint at base path P is three files:
//   P.manifest.json  ordered [{name, shape}] list
//   P.bin            every parameter, in manifest order, as little-endian f64
//   P.config.json    architecture plus whatever run config the caller attaches

struct ManifestEntry {
  std::string name;
  nd::Shape shape;
  bool operator==(const ManifestEntry&) const = default;
};

std::vector<ManifestEntry> manifest_of(std::span<const model::NamedTensor> params);

void save_parameters(std::span<const model::NamedTensor> params, const std::filesystem::path& base);

/// Validates the stored manifest against `params` (order included) and
/// overwrites their values in place.
void load_parameters(std::span<const model::NamedTensor> params, const std::filesystem::path& base);

std::filesystem::path manifest_path(const std::filesystem::path& base);
std::filesystem::path payload_path(const std::filesystem::path& base);
std::filesystem::path config_path(const std::filesystem::path& base);

void save_encoder(const model::PatchTransformer& model, const std::filesystem::path& base,
                  const Json& run_config = Json::object());
model::PatchTransformer load_encoder(const std::filesystem::path& base);

void save_forecaster(const model::ForecastModel& model, const std::filesystem::path& base,
                     const Json& run_config = Json::object());
model::ForecastModel load_forecaster(const std::filesystem::path& base);

/// The `config.json` sidecar of a checkpoint.
Json read_config(const std::filesystem::path& base);

// ---------------------------------------------------------------- config JSON
// Readers reject unknown keys and missing keys keep their defaults.

Json to_json(const model::ModelConfig& cfg);
model::ModelConfig model_config_from_json(const Json& j);

Json to_json(const pretrain::PretrainConfig& cfg);
pretrain::PretrainConfig pretrain_config_from_json(const Json& j);

Json to_json(const finetune::FinetuneConfig& cfg);
finetune::FinetuneConfig finetune_config_from_json(const Json& j);

/// Throws ConfigError naming the first key of `j` outside `allowed`.
void reject_unknown_keys(const Json& j, std::span<const std::string> allowed, const std::string& where);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace droppatch::ckpt
