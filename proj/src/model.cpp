#include "droppatch/model.hpp"

#include <algorithm>
#include <cmath>

#include "droppatch/error.hpp"
#include "droppatch/ops.hpp"

namespace droppatch::model {

using nd::Shape;
using nd::Tensor;

std::string to_string(PeKind kind) {
  return kind == PeKind::kLearned ? "learned" : "sinusoidal";
}

PeKind pe_kind_from_string(const std::string& name) {
  if (name == "learned") return PeKind::kLearned;
  if (name == "sinusoidal") return PeKind::kSinusoidal;
  throw ConfigError("unknown positional encoding '" + name + "' (valid: learned, sinusoidal)");
}

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig cfg;
  if (name == "base") {
    cfg.n_layers = 3, cfg.n_heads = 16, cfg.d_model = 128, cfg.d_ff = 256;
  } else if (name == "small") {
    cfg.n_layers = 3, cfg.n_heads = 4, cfg.d_model = 16, cfg.d_ff = 128;
  } else if (name == "large") {
    cfg.n_layers = 4, cfg.n_heads = 16, cfg.d_model = 256, cfg.d_ff = 256;
  } else {
    throw ConfigError("unknown model preset '" + name + "' (valid: base, small, large)");
  }
  return cfg;
}

std::vector<std::string> ModelConfig::preset_names() { return {"base", "small", "large"}; }

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || patch_len == 0 ||
      max_patches == 0) {
    throw ConfigError("model extents must all be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
}

Linear Linear::init(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<double> w(in * out), b(out);
  for (double& v : w) v = uniform(rng, -bound, bound);
  for (double& v : b) v = uniform(rng, -bound, bound);
  return Linear{Tensor::from({in, out}, std::move(w), true), Tensor::from({out}, std::move(b), true)};
}

Tensor Linear::operator()(const Tensor& x) const { return nd::add(nd::matmul(x, weight), bias); }

Matrix AttentionRecord::head(std::size_t layer, std::size_t sample, std::size_t h) const {
  if (layer >= layers || sample >= batch || h >= heads) {
    throw DimensionError("attention record index out of range");
  }
  const std::size_t block = tokens * tokens;
  const std::size_t offset = ((layer * batch + sample) * heads + h) * block;
  return Matrix(tokens, tokens,
                std::vector<double>(weights.begin() + static_cast<long>(offset),
                                    weights.begin() + static_cast<long>(offset + block)));
}

Tensor sinusoidal_table(std::size_t rows, std::size_t d_model) {
  std::vector<double> v(rows * d_model);
  for (std::size_t pos = 0; pos < rows; ++pos) {
    for (std::size_t i = 0; i < d_model; ++i) {
      const double pair = static_cast<double>(i / 2 * 2);
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, pair / static_cast<double>(d_model));
      v[pos * d_model + i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from({rows, d_model}, std::move(v), false);
}

namespace {

Tensor clone(const Tensor& t) { return t.detach(t.requires_grad()); }

void clone_linear(Linear& l) {
  l.weight = clone(l.weight);
  l.bias = clone(l.bias);
}

std::vector<NamedTensor> linear_params(const std::string& prefix, const Linear& l) {
  return {{prefix + ".weight", l.weight}, {prefix + ".bias", l.bias}};
}

}  // namespace

PatchTransformer::PatchTransformer(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t d = cfg_.d_model;
  embed_ = Linear::init(cfg_.patch_len, d, rng);
  if (cfg_.pe_kind == PeKind::kLearned) {
    std::vector<double> pe(cfg_.max_patches * d);
    for (double& v : pe) v = uniform(rng, -0.02, 0.02);
    pos_table_ = Tensor::from({cfg_.max_patches, d}, std::move(pe), true);
  } else {
    pos_table_ = sinusoidal_table(cfg_.max_patches, d);
  }
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    EncoderLayer layer;
    layer.query = Linear::init(d, d, rng);
    layer.key = Linear::init(d, d, rng);
    layer.value = Linear::init(d, d, rng);
    layer.output = Linear::init(d, d, rng);
    layer.norm1_gain = Tensor::full({d}, 1.0, true);
    layer.norm1_bias = Tensor::zeros({d}, true);
    layer.ffn_in = Linear::init(d, cfg_.d_ff, rng);
    layer.ffn_out = Linear::init(cfg_.d_ff, d, rng);
    layer.norm2_gain = Tensor::full({d}, 1.0, true);
    layer.norm2_bias = Tensor::zeros({d}, true);
    layers_.push_back(std::move(layer));
  }
  recon_ = Linear::init(d, cfg_.patch_len, rng);
}

PatchTransformer::PatchTransformer(const PatchTransformer& other)
    : cfg_(other.cfg_),
      embed_(other.embed_),
      pos_table_(other.pos_table_),
      layers_(other.layers_),
      recon_(other.recon_) {
  clone_linear(embed_);
  pos_table_ = clone(pos_table_);
  for (auto& layer : layers_) {
    for (Linear* l : {&layer.query, &layer.key, &layer.value, &layer.output, &layer.ffn_in,
                      &layer.ffn_out}) {
      clone_linear(*l);
    }
    for (Tensor* t : {&layer.norm1_gain, &layer.norm1_bias, &layer.norm2_gain, &layer.norm2_bias}) {
      *t = clone(*t);
    }
  }
  clone_linear(recon_);
}

PatchTransformer& PatchTransformer::operator=(const PatchTransformer& other) {
  if (this != &other) *this = PatchTransformer(other);
  return *this;
}

Tensor PatchTransformer::embed(const Tensor& patches, std::span<const double> keep) const {
  if (patches.dim() != 2 || patches.size(1) != cfg_.patch_len) {
    throw DimensionError("embed expects [N, " + std::to_string(cfg_.patch_len) + "] patches, got " +
                         nd::shape_str(patches.shape()));
  }
  Tensor e = embed_(patches);
  if (keep.empty()) return e;
  if (keep.size() != patches.size(0)) throw DimensionError("embed: keep mask length mismatch");
  return nd::mul(e, Tensor::from({keep.size(), 1}, std::vector<double>(keep.begin(), keep.end())));
}

Tensor PatchTransformer::positional_rows(std::span<const std::size_t> positions) const {
  for (std::size_t i = 1; i < positions.size(); ++i) {
    if (positions[i] <= positions[i - 1]) {
      throw ContractError("positional_rows: positions must be strictly increasing");
    }
  }
  return positional_rows_unchecked(positions);
}

Tensor PatchTransformer::positional_rows_unchecked(std::span<const std::size_t> positions) const {
  for (std::size_t p : positions) {
    if (p >= cfg_.max_patches) {
      throw DimensionError("patch position " + std::to_string(p) +
                           " exceeds positional capacity " + std::to_string(cfg_.max_patches));
    }
  }
  return nd::gather_rows(pos_table_, positions);
}

EncoderOutput PatchTransformer::encode(const Tensor& input, const CaptureOptions& capture,
                                       Rng* dropout_rng) const {
  if (input.dim() != 3 || input.size(2) != cfg_.d_model || input.size(1) == 0) {
    throw DimensionError("encode expects [B, n>=1, " + std::to_string(cfg_.d_model) + "], got " +
                         nd::shape_str(input.shape()));
  }
  const std::size_t batch = input.size(0);
  const std::size_t n = input.size(1);
  const std::size_t d = cfg_.d_model;
  const std::size_t heads = cfg_.n_heads;
  const std::size_t dh = cfg_.head_dim();
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double p_drop = dropout_rng ? cfg_.dropout : 0.0;

  EncoderOutput out;
  if (capture.attention) {
    out.attention = AttentionRecord{cfg_.n_layers, batch, heads, n, {}};
    out.attention.weights.reserve(cfg_.n_layers * batch * heads * n * n);
  }
  auto snapshot = [&](const Tensor& x) {
    std::vector<Matrix> per_sample;
    auto v = x.data();
    for (std::size_t b = 0; b < batch; ++b) {
      per_sample.emplace_back(n, d,
                              std::vector<double>(v.begin() + static_cast<long>(b * n * d),
                                                  v.begin() + static_cast<long>((b + 1) * n * d)));
    }
    out.layer_inputs.push_back(std::move(per_sample));
  };
  auto split_heads = [&](const Tensor& t) {
    return nd::permute(nd::reshape(t, {batch, n, heads, dh}), {0, 2, 1, 3});
  };

  nd::FlopScope dense("dense");
  Tensor x = input;
  for (const EncoderLayer& layer : layers_) {
    if (capture.layer_inputs) snapshot(x);
    Tensor q = split_heads(layer.query(x));
    Tensor k = split_heads(layer.key(x));
    Tensor v = split_heads(layer.value(x));
    Tensor ctx;
    {
      nd::FlopScope attention("attention");
      Tensor scores = nd::scale(nd::matmul(q, nd::transpose_last2(k)), score_scale);
      Tensor attn = nd::softmax_lastdim(scores);
      if (capture.attention) {
        out.attention.weights.insert(out.attention.weights.end(), attn.data().begin(),
                                     attn.data().end());
      }
      ctx = nd::matmul(attn, v);
    }
    Tensor merged = nd::reshape(nd::permute(ctx, {0, 2, 1, 3}), {batch, n, d});
    Tensor attn_out = layer.output(merged);
    if (p_drop > 0.0) attn_out = nd::dropout(attn_out, p_drop, *dropout_rng);
    x = nd::layer_norm(nd::add(x, attn_out), layer.norm1_gain, layer.norm1_bias, cfg_.norm_eps);

    Tensor ff = layer.ffn_out(nd::gelu(layer.ffn_in(x)));
    if (p_drop > 0.0) ff = nd::dropout(ff, p_drop, *dropout_rng);
    x = nd::layer_norm(nd::add(x, ff), layer.norm2_gain, layer.norm2_bias, cfg_.norm_eps);
  }
  if (capture.layer_inputs) snapshot(x);
  out.z = x;
  return out;
}

Tensor PatchTransformer::reconstruct(const Tensor& z) const { return recon_(z); }

Tensor PatchTransformer::full_input(std::span<const patch::PatchSet> batch) const {
  if (batch.empty()) throw DataError("full_input: empty batch");
  const std::size_t p = batch.front().count();
  std::vector<double> flat;
  std::vector<std::size_t> positions;
  flat.reserve(batch.size() * p * cfg_.patch_len);
  for (const auto& ps : batch) {
    if (ps.count() != p) throw DimensionError("full_input: patch counts differ within batch");
    if (ps.patch_len() != cfg_.patch_len) {
      throw DimensionError("full_input: patch length " + std::to_string(ps.patch_len()) +
                           " vs model " + std::to_string(cfg_.patch_len));
    }
    flat.insert(flat.end(), ps.patches.values.begin(), ps.patches.values.end());
    positions.insert(positions.end(), ps.original_positions.begin(), ps.original_positions.end());
  }
  Tensor patches = Tensor::from({batch.size() * p, cfg_.patch_len}, std::move(flat));
  Tensor e = nd::add(embed(patches), positional_rows_unchecked(positions));
  return nd::reshape(e, {batch.size(), p, cfg_.d_model});
}

std::vector<NamedTensor> PatchTransformer::parameters() const {
  std::vector<NamedTensor> out = linear_params("patch_embed", embed_);
  out.push_back({"pos_embed.table", pos_table_});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    const std::string p = "encoder." + std::to_string(l) + ".";
    auto append = [&](std::vector<NamedTensor> v) { out.insert(out.end(), v.begin(), v.end()); };
    append(linear_params(p + "attn.query", layer.query));
    append(linear_params(p + "attn.key", layer.key));
    append(linear_params(p + "attn.value", layer.value));
    append(linear_params(p + "attn.output", layer.output));
    out.push_back({p + "norm1.gain", layer.norm1_gain});
    out.push_back({p + "norm1.bias", layer.norm1_bias});
    append(linear_params(p + "ffn.in", layer.ffn_in));
    append(linear_params(p + "ffn.out", layer.ffn_out));
    out.push_back({p + "norm2.gain", layer.norm2_gain});
    out.push_back({p + "norm2.bias", layer.norm2_bias});
  }
  auto recon = linear_params("recon_head", recon_);
  out.insert(out.end(), recon.begin(), recon.end());
  return out;
}

std::vector<Tensor> PatchTransformer::trainable() const {
  std::vector<Tensor> out;
  for (auto& p : parameters()) {
    if (p.tensor.requires_grad()) out.push_back(p.tensor);
  }
  return out;
}

void zero_attention_projections(PatchTransformer& model) {
  for (auto& p : model.parameters()) {
    if (p.name.find(".attn.query.") != std::string::npos ||
        p.name.find(".attn.key.") != std::string::npos) {
      auto v = p.tensor.mutable_data();
      std::fill(v.begin(), v.end(), 0.0);
    }
  }
}

// ---------------------------------------------------------------- forecasting

Linear init_forecast_head(std::size_t n_patches, std::size_t d_model, std::size_t horizon,
                          std::uint64_t seed) {
  if (horizon == 0) throw ConfigError("forecast horizon must be >= 1");
  Rng rng(seed);
  return Linear::init(n_patches * d_model, horizon, rng);
}

ForecastModel::ForecastModel(PatchTransformer encoder, std::size_t n_patches, std::size_t horizon,
                             std::uint64_t head_seed)
    : ForecastModel(std::move(encoder), n_patches, horizon, Linear{}) {
  head_ = init_forecast_head(n_patches, encoder_.config().d_model, horizon, head_seed);
}

ForecastModel::ForecastModel(PatchTransformer encoder, std::size_t n_patches, std::size_t horizon,
                             Linear head)
    : encoder_(std::move(encoder)), n_patches_(n_patches), horizon_(horizon), head_(std::move(head)) {
  if (horizon_ == 0) throw ConfigError("forecast horizon must be >= 1");
  if (n_patches_ == 0 || n_patches_ > encoder_.config().max_patches) {
    throw ConfigError("forecast model needs 1.." + std::to_string(encoder_.config().max_patches) +
                      " patches, got " + std::to_string(n_patches_));
  }
  const std::size_t in = n_patches_ * encoder_.config().d_model;
  if (head_.weight.defined() &&
      (head_.weight.shape() != Shape{in, horizon_} || head_.bias.shape() != Shape{horizon_})) {
    throw DimensionError("forecast head " + nd::shape_str(head_.weight.shape()) + " does not match [" +
                         std::to_string(in) + "x" + std::to_string(horizon_) + "]");
  }
}

ForecastModel::ForecastModel(const ForecastModel& other)
    : encoder_(other.encoder_),
      n_patches_(other.n_patches_),
      horizon_(other.horizon_),
      head_(other.head_) {
  clone_linear(head_);
}

ForecastModel& ForecastModel::operator=(const ForecastModel& other) {
  if (this != &other) *this = ForecastModel(other);
  return *this;
}

Tensor ForecastModel::forecast_head(const Tensor& z) const {
  if (z.dim() != 3 || z.size(1) != n_patches_ || z.size(2) != encoder_.config().d_model) {
    throw DimensionError("forecast head expects the full sequence of " +
                         std::to_string(n_patches_) + " tokens, got " + nd::shape_str(z.shape()));
  }
  return head_(nd::reshape(z, {z.size(0), z.size(1) * z.size(2)}));
}

Tensor ForecastModel::forward(std::span<const std::vector<double>> windows) const {
  if (windows.empty()) throw DataError("forecast on an empty batch");
  const std::size_t lookback = this->lookback();
  patch::PatchConfig pcfg{encoder_.config().patch_len};
  std::vector<patch::PatchSet> sets;
  sets.reserve(windows.size());
  for (const auto& w : windows) {
    if (w.size() < lookback) {
      throw DataError("window of length " + std::to_string(w.size()) +
                      " shorter than model lookback " + std::to_string(lookback));
    }
    std::span<const double> recent(w.data() + (w.size() - lookback), lookback);
    sets.push_back(patch::patchify(recent, pcfg));
  }
  EncoderOutput enc = encoder_.encode(encoder_.full_input(sets));
  return forecast_head(enc.z);
}

std::vector<NamedTensor> ForecastModel::parameters() const {
  std::vector<NamedTensor> out = encoder_.parameters();
  auto head = linear_params("forecast_head", head_);
  out.insert(out.end(), head.begin(), head.end());
  return out;
}

std::vector<Tensor> ForecastModel::trainable(bool head_only) const {
  std::vector<Tensor> out;
  if (!head_only) out = encoder_.trainable();
  out.push_back(head_.weight);
  out.push_back(head_.bias);
  return out;
}

}  // namespace droppatch::model
