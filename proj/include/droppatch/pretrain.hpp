#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "droppatch/model.hpp"
#include "droppatch/optim.hpp"
#include "droppatch/patching.hpp"
#include "droppatch/random.hpp"
#include "droppatch/tensor.hpp"

namespace droppatch::pretrain {

/// Partition of the patch indices 0..P-1 for one sample in one epoch.
struct DropMaskPlan {
  std::size_t patches = 0;
  std::vector<std::size_t> dropped;  // sorted
  std::vector<std::size_t> kept;     // sorted, original indices
  std::vector<std::size_t> masked;   // sorted, subset of kept
  std::vector<std::size_t> visible;  // kept minus masked, sorted
  double drop_ratio = 0.0;
  double mask_ratio = 0.0;
};

/// floor(r * P), with a 1e-9 guard so products like 0.29 * 100 land on 29.
std::size_t drop_count(std::size_t patches, double drop_ratio);
/// round(m * kept) clamped to [1, kept - 1].
std::size_t mask_count(std::size_t kept, double mask_ratio);

/// Uniform random plan: floor(rP) patches dropped, then round(m |kept|)
/// (clamped) of the remaining ones masked. Draws k values for k dropped and
/// then k values for k masked, so with r = 0 the masked set equals
/// sample_mask() under the same generator state.
DropMaskPlan sample_plan(std::size_t patches, double drop_ratio, double mask_ratio, Rng& rng);

/// Masked modeling without dropping: round(m P) (clamped) masked indices, sorted.
std::vector<std::size_t> sample_mask(std::size_t patches, double mask_ratio, Rng& rng);

/// Plan from explicit index sets; validates every invariant.
DropMaskPlan make_plan(std::size_t patches, std::vector<std::size_t> dropped,
                       std::vector<std::size_t> masked, double drop_ratio = 0.0,
                       double mask_ratio = 0.0);

void validate_plan(const DropMaskPlan& plan);

/// Encoder input for a batch of samples, each with its own plan.
struct AssembledBatch {
  std::size_t batch = 0;
  std::size_t tokens = 0;           // |kept| per sample (shared across the batch)
  nd::Tensor patches;               // [B*P, L_P] every ground-truth patch (leaf)
  nd::Tensor kept_patches;          // [B*n, L_P] kept patches in original order
  nd::Tensor embedded;              // [B*n, D]  masked rows are exact zeros
  nd::Tensor positional;            // [B*n, D]  table rows at original indices
  nd::Tensor input;                 // [B, n, D] embedded + positional
  std::vector<std::size_t> kept_positions;  // [B*n] original index of every token
  std::vector<std::size_t> masked_rows;     // token rows (into B*n) that are masked
};

struct AssembleOptions {
  bool patches_require_grad = false;
};

AssembledBatch assemble_input(std::span<const patch::PatchSet> samples,
                              std::span<const DropMaskPlan> plans,
                              const model::PatchTransformer& model,
                              const AssembleOptions& options = {});

/// Masked modeling input over all P tokens, built without any plan machinery:
/// embed every patch, zero the masked rows, add the positional prefix.
nd::Tensor masked_modeling_input(std::span<const patch::PatchSet> samples,
                                 std::span<const std::vector<std::size_t>> masked,
                                 const model::PatchTransformer& model);

/// Reconstruction loss over masked patches for the all-token input above.
nd::Tensor masked_modeling_loss(std::span<const patch::PatchSet> samples,
                                std::span<const std::vector<std::size_t>> masked,
                                const model::PatchTransformer& model);

struct LossOptions {
  bool patches_require_grad = false;
  // Added to the reconstruction before the loss; a [B*n, L_P] leaf lets tests
  // read the gradient with respect to the head output.
  std::optional<nd::Tensor> recon_offset;
  Rng* dropout_rng = nullptr;
};

struct LossResult {
  nd::Tensor loss;
  nd::Tensor reconstruction;  // [B*n, L_P]
  AssembledBatch assembled;
  std::vector<std::size_t> selector;  // flat indices into the reconstruction
  double zero_predictor_loss = 0.0;   // same selector, all-zero prediction
};

/// Masked-patch reconstruction loss; the mean is over masked patch elements.
LossResult reconstruction_loss(std::span<const patch::PatchSet> samples,
                               std::span<const DropMaskPlan> plans,
                               const model::PatchTransformer& model,
                               const LossOptions& options = {});

/// Masked-only selector over a [rows, patch_len] reconstruction.
std::vector<std::size_t> masked_selector(std::span<const std::size_t> masked_rows,
                                         std::size_t patch_len);

struct PretrainConfig {
  double drop_ratio = 0.6;
  double mask_ratio = 0.4;
  std::size_t epochs = 50;
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::uint64_t seed = 2024;
  bool instance_norm = false;

  void validate() const;
};

/// One optimizer update on a batch whose plans were sampled by the caller.
double pretrain_step(std::span<const patch::PatchSet> samples, std::span<const DropMaskPlan> plans,
                     const model::PatchTransformer& model, optim::Adam& optimizer, double lr,
                     Rng* dropout_rng = nullptr);

/// Plan seed for (run seed, epoch, sample index): independent of batching order.
std::uint64_t plan_seed(std::uint64_t run_seed, std::size_t epoch, std::size_t sample);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  double val_zero_loss = 0.0;  // loss of predicting 0 on the same val selectors
};

struct PretrainResult {
  std::vector<EpochRecord> curve;
  std::size_t steps = 0;
};

/// Pre-trains `model` in place on windows of the training split.
PretrainResult pretrain_run(std::span<const patch::PatchSet> train,
                            std::span<const patch::PatchSet> val, model::PatchTransformer& model,
                            const PretrainConfig& cfg);

/// Validation loss with plans drawn from a fixed evaluation seed.
std::pair<double, double> validation_loss(std::span<const patch::PatchSet> val,
                                          const model::PatchTransformer& model,
                                          const PretrainConfig& cfg);

std::string loss_curve_csv(const PretrainResult& result);

/// Analytic attention cost of one encoder pass for P tokens versus the
/// (1-r)P tokens that survive dropping.
struct AttentionFlops {
  std::size_t tokens_without = 0;
  std::size_t tokens_with = 0;
  std::uint64_t quadratic_without = 0;  // QK^T and AV products
  std::uint64_t quadratic_with = 0;
  std::uint64_t linear_without = 0;     // projections and FFN
  std::uint64_t linear_with = 0;
  double quadratic_ratio = 1.0;
  double total_ratio = 1.0;
};

AttentionFlops attention_flops(std::size_t patches, double drop_ratio,
                               const model::ModelConfig& cfg);

}  // namespace droppatch::pretrain
