#include "droppatch/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "droppatch/error.hpp"

namespace droppatch::ckpt {

namespace fs = std::filesystem;

namespace {

constexpr const char* kFormat = "droppatch-f64le";

fs::path with_suffix(const fs::path& base, const char* suffix) {
  return fs::path(base.string() + suffix);
}

std::string describe(const ManifestEntry& e) { return e.name + " " + nd::shape_str(e.shape); }

Json manifest_json(const std::vector<ManifestEntry>& entries) {
  Json list = Json::array();
  for (const auto& e : entries) list.push_back({{"name", e.name}, {"shape", e.shape}});
  return {{"format", kFormat}, {"entries", list}};
}

std::vector<ManifestEntry> parse_manifest(const Json& j, const fs::path& path) {
  try {
    if (j.at("format").get<std::string>() != kFormat) {
      throw DataError(path.string() + ": unsupported checkpoint format");
    }
    std::vector<ManifestEntry> out;
    for (const auto& e : j.at("entries")) {
      out.push_back({e.at("name").get<std::string>(), e.at("shape").get<nd::Shape>()});
    }
    return out;
  } catch (const Json::exception& e) {
    throw DataError(path.string() + ": malformed manifest (" + e.what() + ")");
  }
}

Json parse_json(const std::string& text, const fs::path& path) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw DataError(path.string() + ": invalid JSON (" + e.what() + ")");
  }
}

template <typename T>
void read_field(const Json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path manifest_path(const fs::path& base) { return with_suffix(base, ".manifest.json"); }
fs::path payload_path(const fs::path& base) { return with_suffix(base, ".bin"); }
fs::path config_path(const fs::path& base) { return with_suffix(base, ".config.json"); }

std::vector<ManifestEntry> manifest_of(std::span<const model::NamedTensor> params) {
  std::vector<ManifestEntry> out;
  for (const auto& p : params) out.push_back({p.name, p.tensor.shape()});
  return out;
}

void save_parameters(std::span<const model::NamedTensor> params, const fs::path& base) {
  write_text(manifest_path(base), manifest_json(manifest_of(params)).dump(2) + "\n");
  std::string blob;
  for (const auto& p : params) {
    for (double v : p.tensor.data()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
  }
  write_text(payload_path(base), blob);
}

void load_parameters(std::span<const model::NamedTensor> params, const fs::path& base) {
  const fs::path mpath = manifest_path(base);
  const auto stored = parse_manifest(parse_json(read_text(mpath), mpath), mpath);
  const auto expected = manifest_of(params);
  const std::size_t common = std::min(stored.size(), expected.size());
  for (std::size_t i = 0; i < common; ++i) {
    if (!(stored[i] == expected[i])) {
      throw DimensionError("checkpoint entry " + std::to_string(i) + " is " + describe(stored[i]) +
                           " but the model expects " + describe(expected[i]));
    }
  }
  if (stored.size() != expected.size()) {
    throw DimensionError("checkpoint has " + std::to_string(stored.size()) +
                         " entries but the model expects " + std::to_string(expected.size()) +
                         (stored.size() > expected.size() ? "; first extra: " + describe(stored[common])
                                                          : "; first missing: " + describe(expected[common])));
  }
  std::size_t total = 0;
  for (const auto& e : expected) total += nd::numel_of(e.shape);
  const std::string blob = read_text(payload_path(base));
  if (blob.size() != total * 8) {
    throw DataError(payload_path(base).string() + ": payload has " + std::to_string(blob.size()) +
                    " bytes, expected " + std::to_string(total * 8));
  }
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  std::size_t offset = 0;
  for (const auto& p : params) {
    nd::Tensor target = p.tensor;
    for (double& v : target.mutable_data()) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[offset + b]) << (8 * b);
      v = std::bit_cast<double>(bits);
      offset += 8;
    }
  }
}

Json read_config(const fs::path& base) {
  const fs::path p = config_path(base);
  return parse_json(read_text(p), p);
}

void save_encoder(const model::PatchTransformer& model, const fs::path& base, const Json& run_config) {
  const auto params = model.parameters();
  save_parameters(params, base);
  Json cfg = {{"kind", "encoder"}, {"model", to_json(model.config())}, {"run", run_config}};
  write_text(config_path(base), cfg.dump(2) + "\n");
}

model::PatchTransformer load_encoder(const fs::path& base) {
  const Json cfg = read_config(base);
  if (cfg.value("kind", "") != "encoder" && cfg.value("kind", "") != "forecaster") {
    throw DataError(config_path(base).string() + ": not a model checkpoint");
  }
  if (!cfg.contains("model")) throw DataError(config_path(base).string() + ": missing model section");
  if (cfg.value("kind", "") == "encoder") {
    model::PatchTransformer m(model_config_from_json(cfg.at("model")), 0);
    load_parameters(m.parameters(), base);
    return m;
  }
  // Encoder part of a forecaster checkpoint: load the full model, keep the encoder.
  return load_forecaster(base).encoder();
}

void save_forecaster(const model::ForecastModel& model, const fs::path& base, const Json& run_config) {
  save_parameters(model.parameters(), base);
  Json cfg = {{"kind", "forecaster"},
              {"model", to_json(model.encoder().config())},
              {"forecast", {{"n_patches", model.n_patches()}, {"horizon", model.horizon()}}},
              {"run", run_config}};
  write_text(config_path(base), cfg.dump(2) + "\n");
}

model::ForecastModel load_forecaster(const fs::path& base) {
  const Json cfg = read_config(base);
  if (cfg.value("kind", "") != "forecaster") {
    throw DataError(config_path(base).string() + ": not a forecaster checkpoint");
  }
  try {
    model::PatchTransformer enc(model_config_from_json(cfg.at("model")), 0);
    const auto& f = cfg.at("forecast");
    model::ForecastModel m(std::move(enc), f.at("n_patches").get<std::size_t>(),
                           f.at("horizon").get<std::size_t>(), std::uint64_t{0});
    load_parameters(m.parameters(), base);
    return m;
  } catch (const Json::exception& e) {
    throw DataError(config_path(base).string() + ": malformed config (" + e.what() + ")");
  }
}

// ---------------------------------------------------------------- config JSON

void reject_unknown_keys(const Json& j, std::span<const std::string> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      std::string valid;
      for (const auto& a : allowed) valid += (valid.empty() ? "" : ", ") + a;
      throw ConfigError("unknown key '" + key + "' in " + where + " (valid: " + valid + ")");
    }
  }
}

Json to_json(const model::ModelConfig& c) {
  return {{"n_layers", c.n_layers},     {"n_heads", c.n_heads},
          {"d_model", c.d_model},       {"d_ff", c.d_ff},
          {"patch_len", c.patch_len},   {"max_patches", c.max_patches},
          {"pe_kind", model::to_string(c.pe_kind)},
          {"dropout", c.dropout},       {"norm_eps", c.norm_eps}};
}

model::ModelConfig model_config_from_json(const Json& j) {
  static const std::vector<std::string> keys = {"n_layers",    "n_heads", "d_model",
                                                "d_ff",        "patch_len", "max_patches",
                                                "pe_kind",     "dropout", "norm_eps"};
  reject_unknown_keys(j, keys, "model config");
  model::ModelConfig c;
  read_field(j, "n_layers", c.n_layers);
  read_field(j, "n_heads", c.n_heads);
  read_field(j, "d_model", c.d_model);
  read_field(j, "d_ff", c.d_ff);
  read_field(j, "patch_len", c.patch_len);
  read_field(j, "max_patches", c.max_patches);
  std::string pe = model::to_string(c.pe_kind);
  read_field(j, "pe_kind", pe);
  c.pe_kind = model::pe_kind_from_string(pe);
  read_field(j, "dropout", c.dropout);
  read_field(j, "norm_eps", c.norm_eps);
  c.validate();
  return c;
}

Json to_json(const pretrain::PretrainConfig& c) {
  return {{"drop_ratio", c.drop_ratio}, {"mask_ratio", c.mask_ratio}, {"epochs", c.epochs},
          {"lr", c.lr},                 {"batch_size", c.batch_size}, {"seed", c.seed},
          {"instance_norm", c.instance_norm}};
}

pretrain::PretrainConfig pretrain_config_from_json(const Json& j) {
  static const std::vector<std::string> keys = {"drop_ratio", "mask_ratio", "epochs",       "lr",
                                                "batch_size", "seed",       "instance_norm"};
  reject_unknown_keys(j, keys, "pretrain config");
  pretrain::PretrainConfig c;
  read_field(j, "drop_ratio", c.drop_ratio);
  read_field(j, "mask_ratio", c.mask_ratio);
  read_field(j, "epochs", c.epochs);
  read_field(j, "lr", c.lr);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "seed", c.seed);
  read_field(j, "instance_norm", c.instance_norm);
  c.validate();
  return c;
}

Json to_json(const finetune::FinetuneConfig& c) {
  return {{"horizon", c.horizon}, {"lookback", c.lookback},     {"epochs", c.epochs},
          {"lr", c.lr},           {"batch_size", c.batch_size}, {"head_only", c.head_only},
          {"seed", c.seed},       {"instance_norm", c.instance_norm}};
}

finetune::FinetuneConfig finetune_config_from_json(const Json& j) {
  static const std::vector<std::string> keys = {"horizon",    "lookback",  "epochs", "lr",
                                                "batch_size", "head_only", "seed", "instance_norm"};
  reject_unknown_keys(j, keys, "finetune config");
  finetune::FinetuneConfig c;
  read_field(j, "horizon", c.horizon);
  read_field(j, "lookback", c.lookback);
  read_field(j, "epochs", c.epochs);
  read_field(j, "lr", c.lr);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "head_only", c.head_only);
  read_field(j, "seed", c.seed);
  read_field(j, "instance_norm", c.instance_norm);
  c.validate();
  return c;
}

}  // namespace droppatch::ckpt
