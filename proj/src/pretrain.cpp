#include "droppatch/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "droppatch/data.hpp"
#include "droppatch/error.hpp"
#include "droppatch/ops.hpp"

namespace droppatch::pretrain {

using nd::Tensor;

namespace {

constexpr std::uint64_t kShuffleTag = 0x5348554646ULL;
constexpr std::uint64_t kDropoutTag = 0x44524f50ULL;
constexpr std::uint64_t kValTag = 0x56414cULL;

std::vector<std::size_t> iota_vec(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

void check_ratios(double r, double m) {
  if (!(r >= 0.0 && r < 1.0)) throw ConfigError("drop ratio must lie in [0, 1), got " + std::to_string(r));
  if (!(m > 0.0 && m < 1.0)) throw ConfigError("mask ratio must lie in (0, 1), got " + std::to_string(m));
}

Tensor stack_patches(std::span<const patch::PatchSet> samples, std::size_t patch_len,
                     bool requires_grad) {
  const std::size_t p = samples.front().count();
  std::vector<double> flat;
  flat.reserve(samples.size() * p * patch_len);
  for (const auto& ps : samples) {
    if (ps.count() != p) throw DimensionError("patch counts differ within batch");
    if (ps.patch_len() != patch_len) {
      throw DimensionError("patch length " + std::to_string(ps.patch_len()) + " vs model " +
                           std::to_string(patch_len));
    }
    flat.insert(flat.end(), ps.patches.values.begin(), ps.patches.values.end());
  }
  return Tensor::from({samples.size() * p, patch_len}, std::move(flat), requires_grad);
}

}  // namespace

std::size_t drop_count(std::size_t patches, double drop_ratio) {
  return static_cast<std::size_t>(std::floor(drop_ratio * static_cast<double>(patches) + 1e-9));
}

std::size_t mask_count(std::size_t kept, double mask_ratio) {
  if (kept < 2) throw ConfigError("need at least 2 kept patches, got " + std::to_string(kept));
  const auto n = static_cast<std::size_t>(std::llround(mask_ratio * static_cast<double>(kept)));
  return std::clamp<std::size_t>(n, 1, kept - 1);
}

void validate_plan(const DropMaskPlan& plan) {
  const std::size_t p = plan.patches;
  std::vector<int> seen(p, 0);
  auto check_sorted = [&](const std::vector<std::size_t>& v, const char* what) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i] >= p) throw ContractError(std::string(what) + " index out of range");
      if (i > 0 && v[i] <= v[i - 1]) throw ContractError(std::string(what) + " not strictly increasing");
    }
  };
  check_sorted(plan.dropped, "dropped");
  check_sorted(plan.kept, "kept");
  check_sorted(plan.masked, "masked");
  check_sorted(plan.visible, "visible");
  for (std::size_t i : plan.dropped) seen[i] += 1;
  for (std::size_t i : plan.kept) seen[i] += 2;
  for (std::size_t i = 0; i < p; ++i) {
    if (seen[i] != 1 && seen[i] != 2) {
      throw ContractError("patch " + std::to_string(i) + " must be either dropped or kept");
    }
  }
  if (plan.kept.size() < 2) throw ContractError("plan keeps fewer than 2 patches");
  if (plan.masked.empty() || plan.visible.empty()) {
    throw ContractError("plan needs at least one masked and one visible patch");
  }
  if (plan.masked.size() + plan.visible.size() != plan.kept.size()) {
    throw ContractError("masked and visible do not partition kept");
  }
  for (std::size_t i : plan.masked) {
    if (seen[i] != 2) throw ContractError("masked patch " + std::to_string(i) + " is not kept");
  }
  for (std::size_t i : plan.masked) seen[i] = 3;
  for (std::size_t i : plan.visible) {
    if (seen[i] != 2) throw ContractError("visible patch " + std::to_string(i) + " is masked or not kept");
  }
}

DropMaskPlan make_plan(std::size_t patches, std::vector<std::size_t> dropped,
                       std::vector<std::size_t> masked, double drop_ratio, double mask_ratio) {
  DropMaskPlan plan;
  plan.patches = patches;
  plan.drop_ratio = drop_ratio;
  plan.mask_ratio = mask_ratio;
  std::sort(dropped.begin(), dropped.end());
  std::sort(masked.begin(), masked.end());
  std::vector<char> is_dropped(patches, 0), is_masked(patches, 0);
  for (std::size_t i : dropped) {
    if (i >= patches) throw ContractError("dropped index " + std::to_string(i) + " out of range");
    is_dropped[i] = 1;
  }
  for (std::size_t i : masked) {
    if (i >= patches) throw ContractError("masked index " + std::to_string(i) + " out of range");
    is_masked[i] = 1;
  }
  for (std::size_t i = 0; i < patches; ++i) {
    if (is_dropped[i]) continue;
    plan.kept.push_back(i);
    if (!is_masked[i]) plan.visible.push_back(i);
  }
  plan.dropped = std::move(dropped);
  plan.masked = std::move(masked);
  validate_plan(plan);
  return plan;
}

DropMaskPlan sample_plan(std::size_t patches, double drop_ratio, double mask_ratio, Rng& rng) {
  check_ratios(drop_ratio, mask_ratio);
  if (patches < 2) throw ConfigError("need at least 2 patches, got " + std::to_string(patches));
  const std::size_t n_drop = drop_count(patches, drop_ratio);
  const std::size_t kept = patches - n_drop;
  if (kept < 2) {
    throw ConfigError("drop ratio " + std::to_string(drop_ratio) + " leaves " +
                      std::to_string(kept) + " of " + std::to_string(patches) +
                      " patches; at least 2 must be kept");
  }
  const std::size_t n_mask = mask_count(kept, mask_ratio);

  DropMaskPlan plan;
  plan.patches = patches;
  plan.drop_ratio = drop_ratio;
  plan.mask_ratio = mask_ratio;
  plan.dropped = sample_without_replacement(iota_vec(patches), n_drop, rng);
  std::sort(plan.dropped.begin(), plan.dropped.end());
  std::vector<char> flag(patches, 0);
  for (std::size_t i : plan.dropped) flag[i] = 1;
  for (std::size_t i = 0; i < patches; ++i) {
    if (!flag[i]) plan.kept.push_back(i);
  }
  plan.masked = sample_without_replacement(plan.kept, n_mask, rng);
  std::sort(plan.masked.begin(), plan.masked.end());
  for (std::size_t i : plan.masked) flag[i] = 2;
  for (std::size_t i : plan.kept) {
    if (flag[i] == 0) plan.visible.push_back(i);
  }
  return plan;
}

std::vector<std::size_t> sample_mask(std::size_t patches, double mask_ratio, Rng& rng) {
  check_ratios(0.0, mask_ratio);
  auto masked = sample_without_replacement(iota_vec(patches), mask_count(patches, mask_ratio), rng);
  std::sort(masked.begin(), masked.end());
  return masked;
}

AssembledBatch assemble_input(std::span<const patch::PatchSet> samples,
                              std::span<const DropMaskPlan> plans,
                              const model::PatchTransformer& model,
                              const AssembleOptions& options) {
  if (samples.empty()) throw DataError("assemble_input: empty batch");
  if (samples.size() != plans.size()) {
    throw ContractError("assemble_input: " + std::to_string(samples.size()) + " samples but " +
                        std::to_string(plans.size()) + " plans");
  }
  const auto& cfg = model.config();
  const std::size_t p = samples.front().count();
  const std::size_t n = plans.front().kept.size();

  AssembledBatch out;
  out.batch = samples.size();
  out.tokens = n;
  out.patches = stack_patches(samples, cfg.patch_len, options.patches_require_grad);

  std::vector<std::size_t> rows;
  std::vector<double> keep;
  rows.reserve(out.batch * n);
  keep.reserve(out.batch * n);
  out.kept_positions.reserve(out.batch * n);
  for (std::size_t b = 0; b < out.batch; ++b) {
    const DropMaskPlan& plan = plans[b];
    if (plan.patches != p) {
      throw ContractError("plan for " + std::to_string(plan.patches) + " patches applied to a sample with " +
                          std::to_string(p));
    }
    if (plan.kept.size() != n) throw ContractError("plans in one batch must keep the same number of patches");
    validate_plan(plan);
    std::size_t mi = 0;
    for (std::size_t k : plan.kept) {
      const bool masked = mi < plan.masked.size() && plan.masked[mi] == k;
      if (masked) {
        out.masked_rows.push_back(rows.size());
        ++mi;
      }
      rows.push_back(b * p + k);
      keep.push_back(masked ? 0.0 : 1.0);
      out.kept_positions.push_back(samples[b].original_positions[k]);
    }
  }
  out.kept_patches = nd::gather_rows(out.patches, rows);
  out.embedded = model.embed(out.kept_patches, keep);
  out.positional = model.positional_rows_unchecked(out.kept_positions);
  out.input = nd::reshape(nd::add(out.embedded, out.positional), {out.batch, n, cfg.d_model});
  return out;
}

Tensor masked_modeling_input(std::span<const patch::PatchSet> samples,
                             std::span<const std::vector<std::size_t>> masked,
                             const model::PatchTransformer& model) {
  if (samples.empty()) throw DataError("masked_modeling_input: empty batch");
  if (samples.size() != masked.size()) throw ContractError("one mask set per sample required");
  const auto& cfg = model.config();
  const std::size_t p = samples.front().count();
  Tensor patches = stack_patches(samples, cfg.patch_len, false);
  std::vector<double> keep(samples.size() * p, 1.0);
  std::vector<std::size_t> positions;
  for (std::size_t b = 0; b < samples.size(); ++b) {
    for (std::size_t i : masked[b]) {
      if (i >= p) throw ContractError("masked index out of range");
      keep[b * p + i] = 0.0;
    }
    positions.insert(positions.end(), samples[b].original_positions.begin(),
                     samples[b].original_positions.end());
  }
  Tensor e = nd::add(model.embed(patches, keep), model.positional_rows_unchecked(positions));
  return nd::reshape(e, {samples.size(), p, cfg.d_model});
}

Tensor masked_modeling_loss(std::span<const patch::PatchSet> samples,
                            std::span<const std::vector<std::size_t>> masked,
                            const model::PatchTransformer& model) {
  Tensor input = masked_modeling_input(samples, masked, model);
  const auto& cfg = model.config();
  const std::size_t p = samples.front().count();
  Tensor z = model.encode(input).z;
  Tensor recon = model.reconstruct(nd::reshape(z, {samples.size() * p, cfg.d_model}));
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < samples.size(); ++b) {
    for (std::size_t i : masked[b]) rows.push_back(b * p + i);
  }
  std::sort(rows.begin(), rows.end());
  Tensor target = stack_patches(samples, cfg.patch_len, false);
  return nd::mse(recon, target, masked_selector(rows, cfg.patch_len));
}

std::vector<std::size_t> masked_selector(std::span<const std::size_t> masked_rows,
                                         std::size_t patch_len) {
  std::vector<std::size_t> sel;
  sel.reserve(masked_rows.size() * patch_len);
  for (std::size_t r : masked_rows) {
    for (std::size_t j = 0; j < patch_len; ++j) sel.push_back(r * patch_len + j);
  }
  return sel;
}

LossResult reconstruction_loss(std::span<const patch::PatchSet> samples,
                               std::span<const DropMaskPlan> plans,
                               const model::PatchTransformer& model, const LossOptions& options) {
  LossResult out;
  out.assembled = assemble_input(samples, plans, model, {options.patches_require_grad});
  const auto& a = out.assembled;
  const auto& cfg = model.config();
  Tensor z = model.encode(a.input, {}, options.dropout_rng).z;
  out.reconstruction = model.reconstruct(nd::reshape(z, {a.batch * a.tokens, cfg.d_model}));
  Tensor pred = out.reconstruction;
  if (options.recon_offset) pred = nd::add(pred, *options.recon_offset);
  out.selector = masked_selector(a.masked_rows, cfg.patch_len);
  out.loss = nd::mse(pred, a.kept_patches, out.selector);
  double zero = 0.0;
  auto truth = a.kept_patches.data();
  for (std::size_t i : out.selector) zero += truth[i] * truth[i];
  out.zero_predictor_loss = zero / static_cast<double>(out.selector.size());
  return out;
}

void PretrainConfig::validate() const {
  check_ratios(drop_ratio, mask_ratio);
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
}

double pretrain_step(std::span<const patch::PatchSet> samples, std::span<const DropMaskPlan> plans,
                     const model::PatchTransformer& model, optim::Adam& optimizer, double lr,
                     Rng* dropout_rng) {
  LossOptions opts;
  opts.dropout_rng = dropout_rng;
  LossResult res = reconstruction_loss(samples, plans, model, opts);
  const double value = res.loss.item();
  if (!std::isfinite(value)) throw NumericError("non-finite pre-training loss");
  nd::backward(res.loss);
  optimizer.step(lr);
  return value;
}

std::uint64_t plan_seed(std::uint64_t run_seed, std::size_t epoch, std::size_t sample) {
  return derive_seed(run_seed, epoch, sample);
}

std::pair<double, double> validation_loss(std::span<const patch::PatchSet> val,
                                          const model::PatchTransformer& model,
                                          const PretrainConfig& cfg) {
  if (val.empty()) {
    return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  }
  nd::NoGradGuard no_grad;
  const std::size_t p = val.front().count();
  double loss = 0.0, zero = 0.0;
  std::size_t weight = 0;
  for (std::size_t start = 0; start < val.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(val.size(), start + cfg.batch_size);
    std::vector<DropMaskPlan> plans;
    for (std::size_t i = start; i < end; ++i) {
      Rng rng(derive_seed(cfg.seed, kValTag, i));
      plans.push_back(sample_plan(p, cfg.drop_ratio, cfg.mask_ratio, rng));
    }
    LossResult res = reconstruction_loss(val.subspan(start, end - start), plans, model);
    const std::size_t w = res.selector.size();
    loss += res.loss.item() * static_cast<double>(w);
    zero += res.zero_predictor_loss * static_cast<double>(w);
    weight += w;
  }
  return {loss / static_cast<double>(weight), zero / static_cast<double>(weight)};
}

namespace {

std::vector<patch::PatchSet> instance_normalized(std::span<const patch::PatchSet> sets) {
  std::vector<patch::PatchSet> out(sets.begin(), sets.end());
  for (auto& s : out) data::instance_normalize(s.patches.values);
  return out;
}

}  // namespace

PretrainResult pretrain_run(std::span<const patch::PatchSet> train,
                            std::span<const patch::PatchSet> val, model::PatchTransformer& model,
                            const PretrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw DataError("pre-training set is empty");
  std::vector<patch::PatchSet> train_norm, val_norm;
  if (cfg.instance_norm) {
    train_norm = instance_normalized(train);
    val_norm = instance_normalized(val);
    train = train_norm;
    val = val_norm;
  }
  const std::size_t p = train.front().count();
  const std::size_t batches = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  optim::OneCycle schedule;
  schedule.max_lr = cfg.lr;
  schedule.total_steps = std::max<std::size_t>(1, cfg.epochs * batches);
  optim::Adam adam(model.trainable());

  PretrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = iota_vec(train.size());
    Rng shuffle_rng(derive_seed(cfg.seed, kShuffleTag, epoch));
    shuffle(order, shuffle_rng);
    Rng dropout_rng(derive_seed(cfg.seed, kDropoutTag, epoch));

    double total = 0.0;
    double lr = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<patch::PatchSet> batch;
      std::vector<DropMaskPlan> plans;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(train[order[i]]);
        Rng rng(plan_seed(cfg.seed, epoch, order[i]));
        plans.push_back(sample_plan(p, cfg.drop_ratio, cfg.mask_ratio, rng));
      }
      lr = schedule.lr(step);
      const double loss = pretrain_step(batch, plans, model, adam, lr,
                                        model.config().dropout > 0.0 ? &dropout_rng : nullptr);
      total += loss * static_cast<double>(end - start);
      ++step;
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = total / static_cast<double>(train.size());
    std::tie(rec.val_loss, rec.val_zero_loss) = validation_loss(val, model, cfg);
    rec.lr = lr;
    result.curve.push_back(rec);
  }
  result.steps = step;
  return result;
}

std::string loss_curve_csv(const PretrainResult& result) {
  std::string out = "epoch,train_loss,val_loss,lr\n";
  char buf[128];
  for (const auto& r : result.curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_loss, r.lr);
    out += buf;
  }
  return out;
}

AttentionFlops attention_flops(std::size_t patches, double drop_ratio,
                               const model::ModelConfig& cfg) {
  auto quadratic = [&](std::uint64_t n) {
    return static_cast<std::uint64_t>(cfg.n_layers) * 4 * n * n * cfg.d_model;
  };
  auto linear = [&](std::uint64_t n) {
    const std::uint64_t d = cfg.d_model, ff = cfg.d_ff;
    const std::uint64_t per_layer = 4 * 2 * n * d * d + 2 * 2 * n * d * ff;
    return cfg.n_layers * per_layer + 2 * 2 * n * cfg.patch_len * d;
  };
  AttentionFlops f;
  f.tokens_without = patches;
  const std::size_t dropped = std::min(patches, drop_count(patches, drop_ratio));
  f.tokens_with = patches - dropped;
  f.quadratic_without = quadratic(f.tokens_without);
  f.quadratic_with = quadratic(f.tokens_with);
  f.linear_without = linear(f.tokens_without);
  f.linear_with = linear(f.tokens_with);
  if (f.quadratic_without > 0) {
    f.quadratic_ratio =
        static_cast<double>(f.quadratic_with) / static_cast<double>(f.quadratic_without);
    f.total_ratio = static_cast<double>(f.quadratic_with + f.linear_with) /
                    static_cast<double>(f.quadratic_without + f.linear_without);
  }
  return f;
}

}  // namespace droppatch::pretrain
