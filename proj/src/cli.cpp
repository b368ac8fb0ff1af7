#include "droppatch/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "droppatch/checkpoint.hpp"
#include "droppatch/data.hpp"
#include "droppatch/diagnostics.hpp"
#include "droppatch/directional.hpp"
#include "droppatch/error.hpp"
#include "droppatch/finetune.hpp"
#include "droppatch/patching.hpp"
#include "droppatch/pretrain.hpp"
#include "droppatch/ranktheory.hpp"

namespace droppatch::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------- run directory

class RunDir {
 public:
  RunDir(fs::path dir, std::string command) : dir_(std::move(dir)), command_(std::move(command)) {
    fs::create_directories(dir_);
  }

  const fs::path& path() const { return dir_; }
  fs::path file(const std::string& name) const { return dir_ / name; }

  void write(const std::string& name, const std::string& text) { ckpt::write_text(file(name), text); }

  void finish(const Json& resolved) {
    write("config.json", resolved.dump(2) + "\n");
    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir_)) {
      if (!e.is_regular_file()) continue;
      const std::string rel = fs::relative(e.path(), dir_).generic_string();
      if (rel != "manifest.json") files.push_back(rel);
    }
    std::sort(files.begin(), files.end());
    Json list = Json::array();
    for (const auto& f : files) {
      list.push_back({{"path", f}, {"bytes", fs::file_size(file(f))}});
    }
    write("manifest.json", Json{{"command", command_}, {"files", list}}.dump(2) + "\n");
  }

 private:
  fs::path dir_;
  std::string command_;
};

fs::path default_out(const std::string& command) {
  const char* root = std::getenv(kOutputRootEnv);
  return fs::path(root && *root ? root : "runs") / command;
}

// ---------------------------------------------------------------- config files

// Options that must end up with a value once the config file is merged in;
// CLI11's own required() would fire before the file is read.
std::vector<CLI::Option*> g_required;

CLI::Option* required(CLI::Option* opt) {
  g_required.push_back(opt);
  return opt;
}

void check_required(const CLI::App* app) {
  const auto own = app->get_options();
  for (const CLI::Option* opt : g_required) {
    if (std::find(own.begin(), own.end(), opt) != own.end() && opt->count() == 0) {
      throw ConfigError(opt->get_name() + " is required");
    }
  }
}

std::string key_of(const CLI::Option* opt) {
  std::string k = opt->get_lnames().empty() ? opt->get_name() : opt->get_lnames().front();
  std::replace(k.begin(), k.end(), '-', '_');
  return k;
}

bool is_meta(const CLI::Option* opt) {
  const std::string k = key_of(opt);
  return k == "help" || k == "config";
}

std::vector<std::string> json_to_inputs(const Json& v, const std::string& key) {
  auto scalar = [&](const Json& x) -> std::string {
    if (x.is_string()) return x.get<std::string>();
    if (x.is_boolean()) return x.get<bool>() ? "true" : "false";
    if (x.is_number_integer() || x.is_number_unsigned()) return x.dump();
    if (x.is_number_float()) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", x.get<double>());
      return buf;
    }
    throw ConfigError("config key '" + key + "' has an unsupported value type");
  };
  std::vector<std::string> out;
  if (v.is_array()) {
    for (const auto& x : v) out.push_back(scalar(x));
  } else {
    out.push_back(scalar(v));
  }
  return out;
}

/// Fills options absent from the command line with values from a JSON object
/// whose keys are option names with '-' spelled '_'. Unknown keys are errors.
void apply_config(CLI::App* app, const fs::path& path) {
  Json j;
  try {
    j = Json::parse(ckpt::read_text(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON (" + e.what() + ")");
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  if (!j.is_object()) throw ConfigError(path.string() + ": config must be a JSON object");
  std::map<std::string, CLI::Option*> by_key;
  for (CLI::Option* opt : app->get_options()) {
    if (!is_meta(opt) && !opt->get_lnames().empty()) by_key[key_of(opt)] = opt;
  }
  for (const auto& [key, value] : j.items()) {
    auto it = by_key.find(key);
    if (it == by_key.end()) {
      throw ConfigError(path.string() + ": unknown key '" + key + "' for '" + app->get_name() + "'");
    }
    CLI::Option* opt = it->second;
    if (opt->count() > 0) continue;  // command line wins
    if (value.is_null()) continue;
    for (const auto& s : json_to_inputs(value, key)) opt->add_result(s);
    try {
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw ConfigError(path.string() + ": bad value for '" + key + "' (" + e.what() + ")");
    }
  }
}

Json typed_value(const CLI::Option* opt, const std::string& s) {
  const std::string type = opt->get_type_name();
  if (opt->get_type_size() == 0 || type.empty()) return s == "true" || s == "1";
  if (type.find("FLOAT") != std::string::npos) return std::stod(s);
  if (type.find("UINT") != std::string::npos) return static_cast<std::uint64_t>(std::stoull(s));
  if (type.find("INT") != std::string::npos) return static_cast<std::int64_t>(std::stoll(s));
  return s;
}

/// Every option's effective value, keyed like a config file.
Json resolved_config(const CLI::App* app) {
  Json j = Json::object();
  for (const CLI::Option* opt : app->get_options()) {
    if (is_meta(opt) || opt->get_lnames().empty()) continue;
    std::vector<std::string> values = opt->results();
    if (values.empty()) {
      const std::string d = opt->get_default_str();
      if (d.empty()) {
        if (opt->get_type_size() == 0) j[key_of(opt)] = false;
        else j[key_of(opt)] = nullptr;
        continue;
      }
      values = {d};
      if (d.front() == '[' && d.back() == ']') {
        values.clear();
        std::string inner = d.substr(1, d.size() - 2);
        std::stringstream ss(inner);
        std::string item;
        while (std::getline(ss, item, ',')) values.push_back(item);
      }
    }
    try {
      if (opt->get_expected_max() > 1) {
        Json arr = Json::array();
        for (const auto& v : values) arr.push_back(typed_value(opt, v));
        j[key_of(opt)] = arr;
      } else {
        j[key_of(opt)] = typed_value(opt, values.back());
      }
    } catch (const std::exception&) {
      j[key_of(opt)] = values.back();
    }
  }
  return j;
}

// ---------------------------------------------------------------- shared data prep

struct DataOptions {
  std::string path;
  std::string split = "ratio";
  std::string timestamp = "auto";
};

void add_data_options(CLI::App* app, DataOptions& d, bool required = true) {
  auto* o = app->add_option("--data", d.path, "CSV file (rows = time steps, columns = channels)");
  if (required) cli::required(o);
  app->add_option("--split", d.split, "'ratio' (70/10/20) or a benchmark preset name")
      ->capture_default_str();
  app->add_option("--timestamp", d.timestamp, "first-column handling: auto, drop, keep")
      ->check(CLI::IsMember({"auto", "drop", "keep"}))
      ->capture_default_str();
}

struct Prepared {
  data::Splits splits;  // standardized with train statistics
  data::ChannelStats stats;
};

Prepared prepare(const DataOptions& d) {
  data::CsvOptions csv;
  csv.timestamp = d.timestamp == "drop"   ? data::TimestampColumn::kDrop
                  : d.timestamp == "keep" ? data::TimestampColumn::kKeep
                                          : data::TimestampColumn::kAuto;
  data::SeriesFrame frame = data::load_csv(d.path, csv);
  data::SplitSpec spec;
  if (d.split == "ratio") {
    spec = data::SplitSpec::from_ratios(frame.steps());
  } else {
    auto preset = data::split_preset(d.split);
    if (!preset) {
      std::string names;
      for (const auto& n : data::split_preset_names()) names += (names.empty() ? "" : ", ") + n;
      throw ConfigError("unknown split '" + d.split + "' (valid: ratio, " + names + ")");
    }
    spec = *preset;
  }
  data::Splits raw = data::split(frame, spec);
  const data::SeriesFrame others[] = {raw.val, raw.test};
  data::Standardized st = data::standardize(raw.train, others);
  Prepared p;
  p.splits = {st.frames[0], st.frames[1], st.frames[2]};
  p.stats = st.stats;
  if (p.stats.any_degenerate()) {
    std::cerr << "warning: constant channel in the training split; its scale was set to 1\n";
  }
  return p;
}

std::vector<patch::PatchSet> patch_sets(const data::SeriesFrame& frame, std::size_t lookback,
                                        std::size_t stride, std::size_t patch_len, std::size_t limit) {
  data::WindowSet ws = data::window(frame, {lookback, 0, stride});
  std::vector<patch::PatchSet> out;
  const std::size_t n = limit > 0 ? std::min(limit, ws.samples.size()) : ws.samples.size();
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(patch::patchify(ws.samples[i].input, {patch_len}));
  return out;
}

// ---------------------------------------------------------------- model options

struct ModelOptions {
  std::string preset = "base";
  std::size_t layers = 0, heads = 0, d_model = 0, d_ff = 0;
  std::size_t patch_len = 12;
  std::string pe = "learned";
  double dropout = 0.0;
};

void add_model_options(CLI::App* app, ModelOptions& m) {
  app->add_option("--model", m.preset, "architecture preset: base, small, large")
      ->check(CLI::IsMember(model::ModelConfig::preset_names()))
      ->capture_default_str();
  app->add_option("--layers", m.layers, "override encoder layers (0 = preset)")->capture_default_str();
  app->add_option("--heads", m.heads, "override attention heads (0 = preset)")->capture_default_str();
  app->add_option("--d-model", m.d_model, "override model width (0 = preset)")->capture_default_str();
  app->add_option("--d-ff", m.d_ff, "override feed-forward width (0 = preset)")->capture_default_str();
  app->add_option("--patch-len", m.patch_len, "patch length")->capture_default_str();
  app->add_option("--pe", m.pe, "positional encoding: learned, sinusoidal")
      ->check(CLI::IsMember({"learned", "sinusoidal"}))
      ->capture_default_str();
  app->add_option("--dropout", m.dropout, "dropout inside the encoder")->capture_default_str();
}

model::ModelConfig model_config(const ModelOptions& m, std::size_t lookback) {
  model::ModelConfig c = model::ModelConfig::preset(m.preset);
  if (m.layers) c.n_layers = m.layers;
  if (m.heads) c.n_heads = m.heads;
  if (m.d_model) c.d_model = m.d_model;
  if (m.d_ff) c.d_ff = m.d_ff;
  c.patch_len = m.patch_len;
  c.pe_kind = model::pe_kind_from_string(m.pe);
  c.dropout = m.dropout;
  if (m.patch_len == 0) throw ConfigError("patch length must be >= 1");
  c.max_patches = lookback / m.patch_len;
  if (c.max_patches == 0) {
    throw ConfigError("lookback " + std::to_string(lookback) + " is shorter than one patch");
  }
  c.validate();
  return c;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// ---------------------------------------------------------------- commands

struct Common {
  std::string out;
  std::string config;
  std::uint64_t seed = 2024;
  std::size_t threads = 1;
};

void add_common(CLI::App* app, Common& c, bool seed = true) {
  app->add_option("--out", c.out, "run directory (default: $" + std::string(kOutputRootEnv) +
                                      "/<command>, or runs/<command>)");
  app->add_option("--config", c.config, "JSON file of option values; flags override it");
  if (seed) app->add_option("--seed", c.seed, "random seed")->capture_default_str();
}

fs::path run_path(const Common& c, const std::string& command) {
  return c.out.empty() ? default_out(command) : fs::path(c.out);
}

struct SynthOptions {
  Common common;
  std::string kind;
  std::size_t length = 20000;
  std::size_t channels = 3;
  data::SynthParams params;
};

void cmd_synth(CLI::App* app, SynthOptions& o) {
  data::SeriesFrame f = data::synth_generate(o.kind, o.length, o.channels, o.common.seed, o.params);
  RunDir run(run_path(o.common, "synth"), "synth");
  run.write("data.csv", data::to_csv(f));
  run.finish(resolved_config(app));
  std::cout << "wrote " << run.file("data.csv").string() << " (" << o.length << " x " << o.channels
            << ")\n";
}

struct PretrainOptions {
  Common common;
  DataOptions data;
  ModelOptions model;
  std::size_t lookback = 512;
  std::size_t stride = 1;
  std::size_t max_samples = 0;
  std::size_t max_val_samples = 0;
  pretrain::PretrainConfig cfg;
};

void cmd_pretrain(CLI::App* app, PretrainOptions& o) {
  o.cfg.seed = o.common.seed;
  o.cfg.validate();
  const model::ModelConfig mcfg = model_config(o.model, o.lookback);
  const std::size_t p = mcfg.max_patches;
  const std::size_t n_drop = pretrain::drop_count(p, o.cfg.drop_ratio);
  if (p < 2 || p - n_drop < 2) {
    throw ConfigError("drop ratio " + fmt(o.cfg.drop_ratio) + " keeps " + std::to_string(p - n_drop) +
                      " of " + std::to_string(p) + " patches; at least 2 are required");
  }
  Prepared data = prepare(o.data);
  auto train = patch_sets(data.splits.train, o.lookback, o.stride, mcfg.patch_len, o.max_samples);
  auto val = patch_sets(data.splits.val, o.lookback, o.stride, mcfg.patch_len, o.max_val_samples);
  if (train.empty()) {
    throw DataError("training split of " + std::to_string(data.splits.train.steps()) +
                    " steps yields no window of length " + std::to_string(o.lookback));
  }
  std::cerr << "pretrain: " << train.size() << " training and " << val.size() << " validation windows, "
            << p << " patches, " << (p - n_drop) << " kept\n";

  model::PatchTransformer m(mcfg, derive_seed(o.common.seed, 1));
  pretrain::PretrainResult res = pretrain::pretrain_run(train, val, m, o.cfg);
  for (const auto& r : res.curve) {
    std::cerr << "epoch " << r.epoch << " train " << fmt(r.train_loss) << " val " << fmt(r.val_loss)
              << " (zero predictor " << fmt(r.val_zero_loss) << ") lr " << fmt(r.lr) << "\n";
  }
  RunDir run(run_path(o.common, "pretrain"), "pretrain");
  Json run_cfg = {{"pretrain", ckpt::to_json(o.cfg)}, {"lookback", o.lookback}};
  ckpt::save_encoder(m, run.file("encoder"), run_cfg);
  run.write("loss_curve.csv", pretrain::loss_curve_csv(res));
  run.finish(resolved_config(app));
}

enum class FtMode { kFull, kFewShot, kColdStart };

struct FinetuneOptions {
  Common common;
  DataOptions data;
  std::string checkpoint;
  std::vector<std::size_t> horizons = {96, 192, 336, 720};
  std::size_t lookback = 0;
  std::size_t epochs = 1;
  double lr = 1e-4;
  std::size_t batch_size = 32;
  bool head_only = false;
  std::size_t stride = 1;
  std::size_t eval_stride = 1;
  long long n = 100;
  bool destandardize = false;
  bool instance_norm = false;
};

void cmd_finetune(CLI::App* app, FinetuneOptions& o, FtMode mode) {
  const model::PatchTransformer encoder = ckpt::load_encoder(o.checkpoint);
  const auto& mcfg = encoder.config();
  const std::size_t lookback = o.lookback ? o.lookback : mcfg.max_patches * mcfg.patch_len;
  if (o.horizons.empty()) throw ConfigError("at least one horizon is required");
  Prepared data = prepare(o.data);
  const char* name = mode == FtMode::kFull ? "finetune" : mode == FtMode::kFewShot ? "fewshot" : "coldstart";
  RunDir run(run_path(o.common, name), name);

  std::string loss_csv = "horizon,epoch,loss\n";
  std::vector<model::ForecastModel> models;
  for (std::size_t h : o.horizons) {
    finetune::FinetuneConfig cfg;
    cfg.horizon = h;
    cfg.lookback = lookback;
    cfg.epochs = o.epochs;
    cfg.lr = o.lr;
    cfg.batch_size = o.batch_size;
    cfg.head_only = o.head_only;
    cfg.instance_norm = o.instance_norm;
    cfg.seed = derive_seed(o.common.seed, h);
    cfg.validate();
    model::ForecastModel fm = mode == FtMode::kColdStart
                                  ? finetune::cold_start_adapt(encoder, lookback, h, derive_seed(o.common.seed, 2, h))
                                  : finetune::make_forecaster(encoder, lookback, h, derive_seed(o.common.seed, 2, h));
    data::WindowSet ws = data::window(data.splits.train, {lookback, h, o.stride});
    if (mode == FtMode::kFewShot) ws = finetune::few_shot_subset(ws, o.n);
    if (ws.samples.empty()) {
      throw DataError("training split is too short for lookback " + std::to_string(lookback) +
                      " + horizon " + std::to_string(h));
    }
    std::cerr << name << ": horizon " << h << ", " << fm.n_patches() << " patches, "
              << ws.samples.size() << " training samples\n";
    finetune::FinetuneResult res = finetune::finetune_run(fm, ws.samples, cfg);
    for (std::size_t e = 0; e < res.epoch_loss.size(); ++e) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g\n", h, e + 1, res.epoch_loss[e]);
      loss_csv += buf;
    }
    Json run_cfg = {{"finetune", ckpt::to_json(cfg)}, {"training_samples", ws.samples.size()}};
    ckpt::save_forecaster(fm, run.file("forecaster_h" + std::to_string(h)), run_cfg);
    models.push_back(std::move(fm));
  }
  run.write("finetune_loss.csv", loss_csv);

  std::vector<const model::ForecastModel*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  finetune::EvalOptions eo;
  eo.threads = o.common.threads;
  eo.destandardize = o.destandardize ? &data.stats : nullptr;
  eo.instance_norm = o.instance_norm;
  finetune::EvalReport rep = finetune::evaluate(ptrs, data.splits.test, o.eval_stride, eo);
  run.write("eval.csv", rep.to_csv());
  std::cout << rep.to_csv();
  run.finish(resolved_config(app));
}

struct EvalCmdOptions {
  Common common;
  DataOptions data;
  std::vector<std::string> checkpoints;
  std::size_t stride = 1;
  bool destandardize = false;
};

void cmd_eval(CLI::App* app, EvalCmdOptions& o) {
  std::vector<model::ForecastModel> models;
  std::optional<bool> instance_norm;
  for (const auto& c : o.checkpoints) {
    models.push_back(ckpt::load_forecaster(c));
    const Json run_cfg = ckpt::read_config(c).value("run", Json::object());
    const bool in = run_cfg.contains("finetune") && run_cfg["finetune"].value("instance_norm", false);
    if (instance_norm && *instance_norm != in) {
      throw ConfigError("checkpoints disagree on instance normalization; evaluate them separately");
    }
    instance_norm = in;
  }
  Prepared data = prepare(o.data);
  std::vector<const model::ForecastModel*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  finetune::EvalOptions eo;
  eo.threads = o.common.threads;
  eo.destandardize = o.destandardize ? &data.stats : nullptr;
  eo.instance_norm = instance_norm.value_or(false);
  finetune::EvalReport rep = finetune::evaluate(ptrs, data.splits.test, o.stride, eo);
  RunDir run(run_path(o.common, "eval"), "eval");
  run.write("eval.csv", rep.to_csv());
  run.finish(resolved_config(app));
  std::cout << rep.to_csv();
}

struct DiagnoseOptions {
  Common common;
  std::vector<std::string> checkpoints;
  std::string probe;
  std::string timestamp = "auto";
  std::size_t lookback = 0;
  std::size_t stride = 1;
  std::size_t max_samples = 256;
  // directional comparison
  bool compare = false;
  DataOptions data;
  ModelOptions model;
  std::vector<std::uint64_t> compare_seeds = {1, 2, 3};
  std::size_t epochs = 5;
  double drop_ratio = 0.6;
  double mask_ratio = 0.4;
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::size_t train_samples = 0;
};

std::vector<patch::PatchSet> probe_sets(const data::SeriesFrame& raw, std::size_t lookback,
                                        std::size_t stride, std::size_t patch_len, std::size_t limit) {
  const data::Standardized st = data::standardize(raw);
  auto sets = patch_sets(st.frames[0], lookback, stride, patch_len, limit);
  if (sets.empty()) {
    throw DataError("probe series of " + std::to_string(raw.steps()) +
                    " steps yields no window of length " + std::to_string(lookback));
  }
  return sets;
}

void cmd_diagnose(CLI::App* app, DiagnoseOptions& o) {
  RunDir run(run_path(o.common, "diagnose"), "diagnose");
  if (o.compare) {
    if (o.data.path.empty()) throw ConfigError("--compare needs --data");
    const std::size_t lookback = o.lookback ? o.lookback : 512;
    diag::DirectionalOptions d;
    d.model = model_config(o.model, lookback);
    d.pretrain.drop_ratio = o.drop_ratio;
    d.pretrain.mask_ratio = o.mask_ratio;
    d.pretrain.epochs = o.epochs;
    d.pretrain.lr = o.lr;
    d.pretrain.batch_size = o.batch_size;
    d.pretrain.validate();
    d.seeds = o.compare_seeds;
    Prepared data = prepare(o.data);
    auto train = patch_sets(data.splits.train, lookback, o.stride, d.model.patch_len, o.train_samples);
    auto val = patch_sets(data.splits.val, lookback, o.stride, d.model.patch_len, o.max_samples);
    auto probe = patch_sets(data.splits.test, lookback, o.stride, d.model.patch_len, o.max_samples);
    if (train.empty() || probe.empty()) throw DataError("data too short for lookback " + std::to_string(lookback));
    diag::DirectionalReport rep = diag::compare_drop_ratios(train, val, probe, d);
    run.write("directional_report.json", rep.to_json());
    std::cout << rep.to_json();
    run.finish(resolved_config(app));
    return;
  }
  if (o.checkpoints.empty()) throw ConfigError("diagnose needs --checkpoint (or --compare)");
  if (o.probe.empty()) throw ConfigError("diagnose needs --probe");
  data::CsvOptions csv;
  csv.timestamp = o.timestamp == "drop"   ? data::TimestampColumn::kDrop
                  : o.timestamp == "keep" ? data::TimestampColumn::kKeep
                                          : data::TimestampColumn::kAuto;
  const data::SeriesFrame raw = data::load_csv(o.probe, csv);

  std::vector<diag::ModelDiagnostics> results;
  for (std::size_t k = 0; k < o.checkpoints.size(); ++k) {
    const model::PatchTransformer m = ckpt::load_encoder(o.checkpoints[k]);
    const auto& cfg = m.config();
    const std::size_t lookback = o.lookback ? o.lookback : cfg.max_patches * cfg.patch_len;
    auto probe = probe_sets(raw, lookback, o.stride, cfg.patch_len, o.max_samples);
    results.push_back(diag::diagnose_model(m, probe));
    const std::string prefix = o.checkpoints.size() == 1 ? "" : "model" + std::to_string(k) + "_";
    const auto& r = results.back();
    run.write(prefix + "head_stats.csv", r.head_stats_csv());
    for (std::size_t l = 0; l < r.layers; ++l) {
      run.write(prefix + "head_kl_layer" + std::to_string(l) + ".csv", r.head_kl_csv(l));
    }
    run.write(prefix + "rank_trace.csv", r.rank_trace_csv());
    std::cout << o.checkpoints[k] << ": last-layer kl_to_uniform " << fmt(r.mean_kl_uniform(r.layers - 1))
              << "\n";
  }
  std::vector<std::pair<std::string, double>> cka;
  for (std::size_t a = 0; a < results.size(); ++a) {
    for (std::size_t b = a; b < results.size(); ++b) {
      if (results[a].last_layer.rows != results[b].last_layer.rows) continue;
      cka.emplace_back("model" + std::to_string(a) + "_model" + std::to_string(b),
                       diag::representation_cka(results[a], results[b]));
    }
  }
  run.write("cka.json", diag::cka_json(cka));
  run.finish(resolved_config(app));
}

struct RankOptions {
  Common common;
  // bound
  double c = 4.0, r0 = 0.4;
  std::size_t bound_layers = 5;
  // flatness
  std::size_t tokens = 100, kept = 40, seeds = 50;
  double eps = 1e-3;
  // trace
  rank::TraceExperiment trace;
  // witness
  std::size_t w_tokens = 8, w_dim = 4, w_seeds = 20;
  double value_scale = 1.0;
  std::optional<double> gamma, beta;
};

}  // namespace

// ---------------------------------------------------------------- entry point

int run(const std::vector<std::string>& args) {
  CLI::App app{"Masked time-series pre-training with patch dropping", "droppatch"};
  app.require_subcommand(1);
  app.fallthrough();
  g_required.clear();
  app.option_defaults()->always_capture_default();

  std::size_t threads = 1;
  app.add_option("--threads", threads, "worker threads for evaluation")->capture_default_str();

  SynthOptions synth;
  auto* s_synth = app.add_subcommand("synth", "generate a synthetic CSV dataset");
  add_common(s_synth, synth.common);
  required(s_synth->add_option("--kind", synth.kind, "sine-mix, trend+season, ar1, random-walk"));
  s_synth->add_option("--length", synth.length, "time steps")->capture_default_str();
  s_synth->add_option("--channels", synth.channels, "channels")->capture_default_str();
  s_synth->add_option("--period", synth.params.period)->capture_default_str();
  s_synth->add_option("--amplitude", synth.params.amplitude)->capture_default_str();
  s_synth->add_option("--noise", synth.params.noise)->capture_default_str();
  s_synth->add_option("--components", synth.params.components)->capture_default_str();
  s_synth->add_option("--trend", synth.params.trend)->capture_default_str();
  s_synth->add_option("--phi", synth.params.phi)->capture_default_str();
  s_synth->add_option("--sigma", synth.params.sigma)->capture_default_str();

  PretrainOptions pre;
  auto* s_pre = app.add_subcommand("pretrain", "pre-train an encoder by masked reconstruction with dropping");
  add_common(s_pre, pre.common);
  add_data_options(s_pre, pre.data);
  add_model_options(s_pre, pre.model);
  s_pre->add_option("--lookback", pre.lookback, "input length in steps")->capture_default_str();
  s_pre->add_option("--stride", pre.stride, "window stride")->capture_default_str();
  s_pre->add_option("--max-samples", pre.max_samples, "cap on training windows (0 = all)")->capture_default_str();
  s_pre->add_option("--max-val-samples", pre.max_val_samples, "cap on validation windows (0 = all)")
      ->capture_default_str();
  s_pre->add_option("--drop-ratio", pre.cfg.drop_ratio, "fraction of patches dropped")->capture_default_str();
  s_pre->add_option("--mask-ratio", pre.cfg.mask_ratio, "fraction of kept patches masked")->capture_default_str();
  s_pre->add_option("--epochs", pre.cfg.epochs)->capture_default_str();
  s_pre->add_option("--lr", pre.cfg.lr, "peak learning rate of the one-cycle schedule")->capture_default_str();
  s_pre->add_option("--batch-size", pre.cfg.batch_size)->capture_default_str();
  s_pre->add_flag("--instance-norm", pre.cfg.instance_norm, "normalize each window by its own mean and stddev");

  FinetuneOptions ft, fs_opts, cs;
  fs_opts.epochs = 10;
  cs.epochs = 10;
  cs.lookback = 96;
  auto add_ft = [&](CLI::App* sub, FinetuneOptions& o, FtMode mode) {
    add_common(sub, o.common);
    add_data_options(sub, o.data);
    required(sub->add_option("--checkpoint", o.checkpoint, "encoder checkpoint base path"));
    sub->add_option("--horizons", o.horizons, "forecast horizons")->delimiter(',')->capture_default_str();
    sub->add_option("--lookback", o.lookback, "fine-tuning lookback (0 = pre-training lookback)")
        ->capture_default_str();
    sub->add_option("--epochs", o.epochs)->capture_default_str();
    sub->add_option("--lr", o.lr)->capture_default_str();
    sub->add_option("--batch-size", o.batch_size)->capture_default_str();
    sub->add_flag("--head-only", o.head_only, "train only the forecast head");
    sub->add_option("--stride", o.stride, "training window stride")->capture_default_str();
    sub->add_option("--eval-stride", o.eval_stride, "test window stride")->capture_default_str();
    sub->add_flag("--destandardize", o.destandardize, "score on the original scale");
    sub->add_flag("--instance-norm", o.instance_norm, "normalize each input window by its own mean and stddev");
    if (mode == FtMode::kFewShot) {
      sub->add_option("--n", o.n, "number of headmost training windows")->capture_default_str();
    }
  };
  auto* s_ft = app.add_subcommand("finetune", "fine-tune and evaluate forecasters on the full lookback");
  add_ft(s_ft, ft, FtMode::kFull);
  auto* s_fs = app.add_subcommand("fewshot", "fine-tune on the first n training windows");
  add_ft(s_fs, fs_opts, FtMode::kFewShot);
  auto* s_cs = app.add_subcommand("coldstart", "fine-tune with a short lookback");
  add_ft(s_cs, cs, FtMode::kColdStart);

  EvalCmdOptions ev;
  auto* s_ev = app.add_subcommand("eval", "evaluate forecaster checkpoints on the test split");
  add_common(s_ev, ev.common, false);
  add_data_options(s_ev, ev.data);
  required(s_ev->add_option("--checkpoint", ev.checkpoints, "forecaster checkpoint base path(s)"));
  s_ev->add_option("--stride", ev.stride, "test window stride")->capture_default_str();
  s_ev->add_flag("--destandardize", ev.destandardize, "score on the original scale");

  DiagnoseOptions dg;
  auto* s_dg = app.add_subcommand("diagnose", "attention and representation diagnostics");
  add_common(s_dg, dg.common);
  s_dg->add_option("--checkpoint", dg.checkpoints, "encoder checkpoint base path(s)");
  s_dg->add_option("--probe", dg.probe, "probe CSV");
  s_dg->add_option("--probe-timestamp", dg.timestamp)->check(CLI::IsMember({"auto", "drop", "keep"}))
      ->capture_default_str();
  s_dg->add_option("--lookback", dg.lookback, "probe window length (0 = model lookback)")->capture_default_str();
  s_dg->add_option("--stride", dg.stride)->capture_default_str();
  s_dg->add_option("--max-samples", dg.max_samples, "probe windows used")->capture_default_str();
  s_dg->add_flag("--compare", dg.compare, "pre-train with and without dropping and compare attention");
  add_data_options(s_dg, dg.data, false);
  dg.model.preset = "small";
  add_model_options(s_dg, dg.model);
  s_dg->add_option("--compare-seeds", dg.compare_seeds)->delimiter(',')->capture_default_str();
  s_dg->add_option("--epochs", dg.epochs)->capture_default_str();
  s_dg->add_option("--drop-ratio", dg.drop_ratio)->capture_default_str();
  s_dg->add_option("--mask-ratio", dg.mask_ratio)->capture_default_str();
  s_dg->add_option("--lr", dg.lr)->capture_default_str();
  s_dg->add_option("--batch-size", dg.batch_size)->capture_default_str();
  s_dg->add_option("--train-samples", dg.train_samples, "cap on training windows (0 = all)")
      ->capture_default_str();

  RankOptions rk;
  auto* s_rk = app.add_subcommand("ranktheory", "rank-collapse theory experiments");
  s_rk->require_subcommand(1);
  auto* r_bound = s_rk->add_subcommand("bound", "induction bound sequence");
  add_common(r_bound, rk.common, false);
  r_bound->add_option("--C", rk.c, "contraction constant")->capture_default_str();
  r_bound->add_option("--r0", rk.r0, "initial residual norm")->capture_default_str();
  r_bound->add_option("--L", rk.bound_layers, "layers")->capture_default_str();
  auto* r_flat = s_rk->add_subcommand("flatness", "row-dropping perturbation experiment");
  add_common(r_flat, rk.common);
  r_flat->add_option("--L", rk.tokens, "tokens")->capture_default_str();
  r_flat->add_option("--Lp", rk.kept, "tokens kept")->capture_default_str();
  r_flat->add_option("--eps", rk.eps, "perturbation bound")->capture_default_str();
  r_flat->add_option("--seeds", rk.seeds)->capture_default_str();
  auto* r_trace = s_rk->add_subcommand("trace", "residual norms through pure self-attention stacks");
  add_common(r_trace, rk.common);
  r_trace->add_option("--n", rk.trace.tokens, "tokens")->capture_default_str();
  r_trace->add_option("--d", rk.trace.dim, "width")->capture_default_str();
  r_trace->add_option("--layers", rk.trace.layers)->capture_default_str();
  r_trace->add_option("--seeds", rk.trace.seeds)->capture_default_str();
  r_trace->add_option("--qk-std", rk.trace.qk_std)->capture_default_str();
  r_trace->add_option("--v-std", rk.trace.v_std)->capture_default_str();
  auto* r_wit = s_rk->add_subcommand("witness", "single-layer contraction ratios");
  add_common(r_wit, rk.common);
  r_wit->add_option("--n", rk.w_tokens)->capture_default_str();
  r_wit->add_option("--d", rk.w_dim)->capture_default_str();
  r_wit->add_option("--seeds", rk.w_seeds)->capture_default_str();
  r_wit->add_option("--value-scale", rk.value_scale)->capture_default_str();
  r_wit->add_option("--gamma", rk.gamma);
  r_wit->add_option("--beta", rk.beta);

  std::vector<std::string> rest(args.begin() + (args.empty() ? 0 : 1), args.end());
  std::reverse(rest.begin(), rest.end());
  try {
    app.parse(rest);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    CLI::App* leaf = sub->get_subcommands().empty() ? sub : sub->get_subcommands().front();
    if (auto* opt = leaf->get_option_no_throw("--config"); opt && opt->count() > 0) {
      apply_config(leaf, opt->as<std::string>());
    }
    check_required(leaf);
    const std::string name = sub->get_name();
    if (name == "synth") {
      cmd_synth(leaf, synth);
    } else if (name == "pretrain") {
      pre.common.threads = threads;
      cmd_pretrain(leaf, pre);
    } else if (name == "finetune" || name == "fewshot" || name == "coldstart") {
      FinetuneOptions& o = name == "finetune" ? ft : name == "fewshot" ? fs_opts : cs;
      o.common.threads = threads;
      cmd_finetune(leaf, o, name == "finetune" ? FtMode::kFull : name == "fewshot" ? FtMode::kFewShot
                                                                                   : FtMode::kColdStart);
    } else if (name == "eval") {
      ev.common.threads = threads;
      cmd_eval(leaf, ev);
    } else if (name == "diagnose") {
      cmd_diagnose(leaf, dg);
    } else if (name == "ranktheory") {
      const std::string what = leaf->get_name();
      RunDir run(run_path(rk.common, "ranktheory-" + what), "ranktheory " + what);
      std::string text;
      if (what == "bound") {
        text = rank::induction_json(rank::induction_bound(rk.c, rk.r0, rk.bound_layers));
        run.write("bound.json", text);
      } else if (what == "flatness") {
        text = rank::flatness_ratio_experiment({rk.tokens, rk.kept, rk.eps}, rk.seeds, rk.common.seed)
                   .to_json();
        run.write("flatness.json", text);
      } else if (what == "trace") {
        rk.trace.base_seed = rk.common.seed;
        rank::TraceReport rep = rank::san_trace_experiment(rk.trace);
        run.write("san_trace.csv", rep.to_csv());
        text = rep.to_json();
        run.write("trace.json", text);
      } else {
        if (rk.gamma.has_value() != rk.beta.has_value()) {
          throw ConfigError("--gamma and --beta must be given together");
        }
        text = rank::witness_experiment(rk.w_tokens, rk.w_dim, rk.w_seeds, rk.common.seed,
                                        rk.value_scale, rk.gamma, rk.beta)
                   .to_json();
        run.write("witness.json", text);
      }
      run.finish(resolved_config(leaf));
      std::cout << text;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const CLI::Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

int run(int argc, char** argv) { return run(std::vector<std::string>(argv, argv + argc)); }

}  // namespace droppatch::cli
