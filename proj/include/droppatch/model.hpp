#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "droppatch/matrix.hpp"
#include "droppatch/patching.hpp"
#include "droppatch/random.hpp"
#include "droppatch/tensor.hpp"

namespace droppatch::model {

enum class PeKind { kLearned, kSinusoidal };

std::string to_string(PeKind kind);
PeKind pe_kind_from_string(const std::string& name);

struct ModelConfig {
  std::size_t n_layers = 3;
  std::size_t n_heads = 4;
  std::size_t d_model = 16;
  std::size_t d_ff = 128;
  std::size_t patch_len = 12;
  std::size_t max_patches = 42;
  PeKind pe_kind = PeKind::kLearned;
  double dropout = 0.0;
  double norm_eps = 1e-5;

  /// "base" (3, 16, 128, 256), "small" (3, 4, 16, 128), "large" (4, 16, 256, 256)
  /// as (layers, heads, d_model, d_ff).
  static ModelConfig preset(const std::string& name);
  static std::vector<std::string> preset_names();

  std::size_t head_dim() const { return d_model / n_heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct NamedTensor {
  std::string name;
  nd::Tensor tensor;
};

/// Affine map over the last axis: x W + b.
struct Linear {
  nd::Tensor weight;  // [in, out]
  nd::Tensor bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, Rng& rng);
  nd::Tensor operator()(const nd::Tensor& x) const;
};

struct EncoderLayer {
  Linear query, key, value, output;
  nd::Tensor norm1_gain, norm1_bias;
  Linear ffn_in, ffn_out;
  nd::Tensor norm2_gain, norm2_bias;
};

/// Row-stochastic attention maps of one forward pass, laid out as
/// [layer][sample][head][query][key].
struct AttentionRecord {
  std::size_t layers = 0;
  std::size_t batch = 0;
  std::size_t heads = 0;
  std::size_t tokens = 0;
  std::vector<double> weights;

  Matrix head(std::size_t layer, std::size_t sample, std::size_t h) const;
};

struct CaptureOptions {
  bool attention = false;
  bool layer_inputs = false;
};

struct EncoderOutput {
  nd::Tensor z;  // [B, n, D]
  AttentionRecord attention;
  // layer_inputs[l][b] is the n x D input of layer l for sample b; the final
  // entry (index n_layers) holds the encoder output.
  std::vector<std::vector<Matrix>> layer_inputs;
};

/// Channel-independent patch Transformer with a linear reconstruction head.
/// Copies are deep: each copy owns its own parameter storage.
class PatchTransformer {
 public:
  PatchTransformer(ModelConfig cfg, std::uint64_t seed);
  PatchTransformer(const PatchTransformer& other);
  PatchTransformer& operator=(const PatchTransformer& other);
  PatchTransformer(PatchTransformer&&) noexcept = default;
  PatchTransformer& operator=(PatchTransformer&&) noexcept = default;

  const ModelConfig& config() const { return cfg_; }

  /// [N, L_P] -> [N, D]. Rows with keep[i] == 0 come out as exact zero
  /// vectors (bias included); an empty `keep` keeps every row.
  nd::Tensor embed(const nd::Tensor& patches, std::span<const double> keep = {}) const;

  /// Table rows at the given original patch indices (strictly increasing).
  nd::Tensor positional_rows(std::span<const std::size_t> positions) const;
  /// Same lookup for concatenated per-sample position lists; no ordering check.
  nd::Tensor positional_rows_unchecked(std::span<const std::size_t> positions) const;
  const nd::Tensor& positional_table() const { return pos_table_; }

  EncoderOutput encode(const nd::Tensor& input, const CaptureOptions& capture = {},
                       Rng* dropout_rng = nullptr) const;

  /// [..., D] -> [..., L_P].
  nd::Tensor reconstruct(const nd::Tensor& z) const;

  /// Unmasked, undropped encoder input for a batch: [B, P, D]. All patch sets
  /// must have the same patch count.
  nd::Tensor full_input(std::span<const patch::PatchSet> batch) const;

  /// Every parameter in checkpoint order (includes a fixed sinusoidal table).
  std::vector<NamedTensor> parameters() const;
  /// Parameters that receive gradient updates.
  std::vector<nd::Tensor> trainable() const;

 private:
  ModelConfig cfg_;
  Linear embed_;
  nd::Tensor pos_table_;
  std::vector<EncoderLayer> layers_;
  Linear recon_;
};

/// Builds the fixed sinusoidal table: even columns sin(pos / 10000^(2i/D)),
/// odd columns cos of the same angle.
nd::Tensor sinusoidal_table(std::size_t rows, std::size_t d_model);

/// Flatten-then-linear forecasting model on top of the encoder.
class ForecastModel {
 public:
  ForecastModel(PatchTransformer encoder, std::size_t n_patches, std::size_t horizon,
                std::uint64_t head_seed);
  ForecastModel(PatchTransformer encoder, std::size_t n_patches, std::size_t horizon, Linear head);
  ForecastModel(const ForecastModel& other);
  ForecastModel& operator=(const ForecastModel& other);
  ForecastModel(ForecastModel&&) noexcept = default;
  ForecastModel& operator=(ForecastModel&&) noexcept = default;

  const PatchTransformer& encoder() const { return encoder_; }
  PatchTransformer& encoder() { return encoder_; }
  std::size_t n_patches() const { return n_patches_; }
  std::size_t horizon() const { return horizon_; }
  std::size_t lookback() const { return n_patches_ * encoder_.config().patch_len; }
  const Linear& head() const { return head_; }

  /// Z [B, P, D] -> [B, H]. Throws when the token count differs from P.
  nd::Tensor forecast_head(const nd::Tensor& z) const;
  /// Windows of length >= lookback() -> [B, H] forecasts.
  nd::Tensor forward(std::span<const std::vector<double>> windows) const;

  std::vector<NamedTensor> parameters() const;
  std::vector<nd::Tensor> trainable(bool head_only = false) const;

 private:
  PatchTransformer encoder_;
  std::size_t n_patches_;
  std::size_t horizon_;
  Linear head_;
};

Linear init_forecast_head(std::size_t n_patches, std::size_t d_model, std::size_t horizon,
                          std::uint64_t seed);

/// Zeroes query and key projections so every attention row is uniform.
void zero_attention_projections(PatchTransformer& model);

}  // namespace droppatch::model
