#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "droppatch/error.hpp"
#include "droppatch/grad_check.hpp"
#include "droppatch/ops.hpp"
#include "droppatch/pretrain.hpp"
#include "test_util.hpp"

using namespace droppatch;
using namespace droppatch::pretrain;
using nd::Tensor;

namespace {

model::ModelConfig toy(std::size_t max_patches) {
  model::ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.patch_len = 4;
  c.max_patches = max_patches;
  return c;
}

std::vector<patch::PatchSet> random_sets(std::size_t count, std::size_t p, std::size_t lp, Rng& rng) {
  std::vector<patch::PatchSet> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> w(p * lp);
    for (auto& v : w) v = standard_normal(rng);
    out.push_back(patch::patchify(w, {lp}));
  }
  return out;
}

std::vector<patch::PatchSet> sine_sets(std::size_t count, std::size_t p, std::size_t lp,
                                       std::size_t shift) {
  std::vector<patch::PatchSet> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> w(p * lp);
    for (std::size_t t = 0; t < w.size(); ++t) {
      w[t] = std::sin(2.0 * M_PI * static_cast<double>(t + i * shift) / 24.0);
    }
    out.push_back(patch::patchify(w, {lp}));
  }
  return out;
}

// Rounding oracle in integer arithmetic on ratios given in hundredths.
std::size_t expected_dropped(std::size_t p, int r_pct) { return (static_cast<std::size_t>(r_pct) * p) / 100; }
std::size_t expected_masked(std::size_t kept, int m_pct) {
  std::size_t m = (static_cast<std::size_t>(m_pct) * kept * 2 + 100) / 200;  // half up
  return std::clamp<std::size_t>(m, 1, kept - 1);
}

void set_bias_zero(const model::PatchTransformer& m, const std::string& name) {
  for (auto& p : m.parameters()) {
    if (p.name == name) {
      auto v = p.tensor.mutable_data();
      std::fill(v.begin(), v.end(), 0.0);
    }
  }
}

Tensor pos_table(const model::PatchTransformer& m) {
  for (auto& p : m.parameters()) {
    if (p.name == "pos_embed.table") return p.tensor;
  }
  return {};
}

}  // namespace

TEST(Plan, DefaultRatios) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed);
    auto plan = sample_plan(42, 0.6, 0.4, rng);
    ASSERT_EQ(plan.dropped.size(), 25u);
    ASSERT_EQ(plan.kept.size(), 17u);
    ASSERT_EQ(plan.masked.size(), 7u);
    ASSERT_EQ(plan.visible.size(), 10u);
  }
}

TEST(Plan, NoDropDegenerates) {
  Rng rng(1);
  auto plan = sample_plan(10, 0.0, 0.4, rng);
  EXPECT_EQ(plan.kept.size(), 10u);
  EXPECT_TRUE(plan.dropped.empty());
  EXPECT_EQ(plan.masked.size(), 4u);
}

TEST(Plan, InvalidRatios) {
  Rng rng(1);
  EXPECT_THROW(sample_plan(42, 0.99, 0.4, rng), ConfigError);
  EXPECT_THROW(sample_plan(42, 0.6, 0.0, rng), ConfigError);
  EXPECT_THROW(sample_plan(42, 0.6, 1.0, rng), ConfigError);
  EXPECT_THROW(sample_plan(42, 1.0, 0.4, rng), ConfigError);
  EXPECT_THROW(sample_plan(1, 0.0, 0.4, rng), ConfigError);
}

TEST(Plan, RoundingGuard) { EXPECT_EQ(drop_count(100, 0.29), 29u); }

TEST(Plan, PropertySweep) {
  const int r_grid[] = {0, 5, 10, 25, 33, 50, 60, 75, 90, 95};
  const int m_grid[] = {1, 10, 25, 40, 50, 75, 90, 99};
  std::size_t checked = 0;
  for (std::size_t p = 2; p <= 128; ++p) {
    for (int r : r_grid) {
      for (int m : m_grid) {
        Rng rng(derive_seed(p, r, m));
        const std::size_t nd_ = expected_dropped(p, r);
        if (p - nd_ < 2) {
          ASSERT_THROW(sample_plan(p, r / 100.0, m / 100.0, rng), ConfigError) << p << " " << r;
          continue;
        }
        auto plan = sample_plan(p, r / 100.0, m / 100.0, rng);
        ASSERT_NO_THROW(validate_plan(plan));
        ASSERT_EQ(plan.dropped.size(), nd_) << p << " " << r;
        ASSERT_EQ(plan.dropped.size() + plan.kept.size(), p);
        ASSERT_EQ(plan.masked.size(), expected_masked(plan.kept.size(), m)) << p << " " << r << " " << m;
        ASSERT_GE(plan.masked.size(), 1u);
        ASSERT_GE(plan.visible.size(), 1u);
        ASSERT_TRUE(std::includes(plan.kept.begin(), plan.kept.end(), plan.masked.begin(), plan.masked.end()));
        std::set<std::size_t> all(plan.dropped.begin(), plan.dropped.end());
        all.insert(plan.kept.begin(), plan.kept.end());
        ASSERT_EQ(all.size(), p);
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 8000u);
}

TEST(Plan, DropFrequencyIsUniform) {
  std::vector<std::size_t> hits(42, 0);
  const std::size_t trials = 10000;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(plan_seed(7, 0, t));
    for (std::size_t i : sample_plan(42, 0.6, 0.4, rng).dropped) ++hits[i];
  }
  for (std::size_t i = 0; i < 42; ++i) {
    EXPECT_NEAR(static_cast<double>(hits[i]) / trials, 25.0 / 42.0, 0.02) << "index " << i;
  }
}

TEST(Plan, FreshPerEpochAndSample) {
  Rng a(plan_seed(1, 0, 5)), b(plan_seed(1, 1, 5)), c(plan_seed(1, 0, 6));
  auto pa = sample_plan(42, 0.6, 0.4, a);
  auto pb = sample_plan(42, 0.6, 0.4, b);
  auto pc = sample_plan(42, 0.6, 0.4, c);
  EXPECT_NE(pa.dropped, pb.dropped);
  EXPECT_NE(pa.dropped, pc.dropped);
}

TEST(Plan, MakePlanValidates) {
  EXPECT_NO_THROW(make_plan(5, {1, 3}, {2}));
  EXPECT_THROW(make_plan(5, {1, 3}, {1}), ContractError);        // masked but dropped
  EXPECT_THROW(make_plan(5, {1, 3}, {0, 2, 4}), ContractError);  // nothing visible
  EXPECT_THROW(make_plan(5, {0, 1, 2, 3}, {4}), ContractError);  // one kept
  EXPECT_THROW(make_plan(5, {7}, {2}), ContractError);
}

TEST(Assemble, MaskedRowIsPositionalRow) {
  model::PatchTransformer m(toy(5), 3);
  set_bias_zero(m, "patch_embed.bias");
  Rng rng(2);
  auto sets = random_sets(1, 5, 4, rng);
  const DropMaskPlan plans[] = {make_plan(5, {1, 3}, {2})};
  auto a = assemble_input(sets, plans, m);
  EXPECT_EQ(a.tokens, 3u);
  Tensor table = pos_table(m);
  for (std::size_t j = 0; j < 8; ++j) {
    EXPECT_EQ(a.input.at(1 * 8 + j), table.at(2 * 8 + j));
    EXPECT_EQ(a.embedded.at(1 * 8 + j), 0.0);
  }
  EXPECT_EQ(a.kept_positions, (std::vector<std::size_t>{0, 2, 4}));
}

TEST(Assemble, DefaultTokenCount) {
  auto cfg = model::ModelConfig::preset("small");
  model::PatchTransformer m(cfg, 1);
  Rng rng(4);
  std::vector<double> w(512);
  for (auto& v : w) v = standard_normal(rng);
  const patch::PatchSet sets[] = {patch::patchify(w, {12})};
  const DropMaskPlan plans[] = {sample_plan(42, 0.6, 0.4, rng)};
  auto a = assemble_input(sets, plans, m);
  EXPECT_EQ(a.input.shape(), (nd::Shape{1, 17, cfg.d_model}));
}

TEST(Assemble, PositionalRowsFollowOriginalIndices) {
  model::PatchTransformer m(toy(42), 9);
  Tensor table = pos_table(m);
  Rng data_rng(3);
  auto sets = random_sets(4, 42, 4, data_rng);
  for (std::uint64_t trial = 0; trial < 1000; ++trial) {
    Rng rng(derive_seed(trial, 4));
    std::vector<DropMaskPlan> plans;
    for (int b = 0; b < 4; ++b) plans.push_back(sample_plan(42, 0.6, 0.4, rng));
    auto a = assemble_input(sets, plans, m);
    for (std::size_t b = 0; b < 4; ++b) {
      for (std::size_t t = 0; t < a.tokens; ++t) {
        const std::size_t row = b * a.tokens + t;
        const std::size_t orig = plans[b].kept[t];
        ASSERT_EQ(a.kept_positions[row], orig);
        for (std::size_t j = 0; j < 8; ++j) {
          ASSERT_EQ(a.positional.at(row * 8 + j), table.at(orig * 8 + j));
          ASSERT_EQ(a.input.at(row * 8 + j), a.embedded.at(row * 8 + j) + table.at(orig * 8 + j));
        }
      }
    }
  }
}

TEST(Assemble, NoDropMatchesPlainMaskedModeling) {
  model::PatchTransformer m(toy(10), 5);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng data_rng(seed);
    auto sets = random_sets(3, 10, 4, data_rng);
    std::vector<DropMaskPlan> plans;
    std::vector<std::vector<std::size_t>> masks;
    for (std::size_t b = 0; b < 3; ++b) {
      Rng a(plan_seed(seed, 0, b)), c(plan_seed(seed, 0, b));
      plans.push_back(sample_plan(10, 0.0, 0.4, a));
      masks.push_back(sample_mask(10, 0.4, c));
      ASSERT_EQ(plans.back().masked, masks.back());
    }
    auto assembled = assemble_input(sets, plans, m);
    Tensor plain = masked_modeling_input(sets, masks, m);
    ASSERT_EQ(assembled.input.shape(), plain.shape());
    for (std::size_t i = 0; i < plain.numel(); ++i) ASSERT_EQ(assembled.input.at(i), plain.at(i));
    const double l1 = reconstruction_loss(sets, plans, m).loss.item();
    const double l2 = masked_modeling_loss(sets, masks, m).item();
    EXPECT_NEAR(l1, l2, 1e-12);
  }
}

TEST(Loss, VisibleAndDroppedPositionsAreIsolated) {
  model::PatchTransformer m(toy(12), 4);
  Rng rng(8);
  auto sets = random_sets(2, 12, 4, rng);
  std::vector<DropMaskPlan> plans = {sample_plan(12, 0.5, 0.4, rng), sample_plan(12, 0.5, 0.4, rng)};
  const std::size_t rows = 2 * plans[0].kept.size();

  LossOptions opt;
  opt.patches_require_grad = true;
  opt.recon_offset = Tensor::zeros({rows, 4}, true);
  auto res = reconstruction_loss(sets, plans, m, opt);
  nd::backward(res.loss);

  std::set<std::size_t> masked(res.assembled.masked_rows.begin(), res.assembled.masked_rows.end());
  auto og = opt.recon_offset->grad();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < 4; ++j) {
      if (!masked.count(r)) ASSERT_EQ(og[r * 4 + j], 0.0) << "visible row " << r;
    }
  }
  // ground-truth patches: dropped rows receive exactly zero gradient
  auto pg = res.assembled.patches.grad();
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t d : plans[b].dropped) {
      for (std::size_t j = 0; j < 4; ++j) ASSERT_EQ(pg[(b * 12 + d) * 4 + j], 0.0);
    }
  }

  // perturbing the reconstruction at visible rows leaves the loss unchanged
  std::vector<double> off(rows * 4, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!masked.count(r)) {
      for (std::size_t j = 0; j < 4; ++j) off[r * 4 + j] = 3.7;
    }
  }
  LossOptions shifted;
  shifted.recon_offset = Tensor::from({rows, 4}, off);
  EXPECT_EQ(reconstruction_loss(sets, plans, m, shifted).loss.item(), res.loss.item());
}

TEST(Loss, PerfectReconstructionIsZero) {
  model::PatchTransformer m(toy(8), 2);
  Rng rng(5);
  auto sets = random_sets(2, 8, 4, rng);
  std::vector<DropMaskPlan> plans = {sample_plan(8, 0.25, 0.4, rng), sample_plan(8, 0.25, 0.4, rng)};
  auto base = reconstruction_loss(sets, plans, m);
  std::vector<double> off(base.reconstruction.numel());
  for (std::size_t i = 0; i < off.size(); ++i) {
    off[i] = base.assembled.kept_patches.at(i) - base.reconstruction.at(i);
  }
  LossOptions opt;
  opt.recon_offset = Tensor::from(base.reconstruction.shape(), off);
  EXPECT_LT(reconstruction_loss(sets, plans, m, opt).loss.item(), 1e-28);
}

TEST(Loss, ZeroPredictorIsMeanSquareOfMaskedTruth) {
  model::PatchTransformer m(toy(8), 2);
  Rng rng(6);
  auto sets = random_sets(1, 8, 4, rng);
  const DropMaskPlan plans[] = {make_plan(8, {0, 5}, {2, 7})};
  auto res = reconstruction_loss(sets, plans, m);
  double s = 0.0;
  for (std::size_t k : {2u, 7u}) {
    for (std::size_t j = 0; j < 4; ++j) s += sets[0].patches(k, j) * sets[0].patches(k, j);
  }
  EXPECT_NEAR(res.zero_predictor_loss, s / 8.0, 1e-14);
}

TEST(Loss, GradCheckFullPretrainLoss) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    model::PatchTransformer m(toy(10), seed);
    Rng rng(derive_seed(seed, 3));
    auto sets = random_sets(2, 10, 4, rng);
    std::vector<DropMaskPlan> plans = {sample_plan(10, 0.4, 0.4, rng), sample_plan(10, 0.4, 0.4, rng)};
    auto leaves = m.trainable();
    auto loss = [&]() { return reconstruction_loss(sets, plans, m).loss; };
    auto rep = nd::grad_check(loss, leaves, {}, 1e-6, 1e-4);
    EXPECT_TRUE(rep.passed) << rep.worst_input << " " << rep.max_error;
  }
}

TEST(Flops, AnalyticRatios) {
  auto cfg = model::ModelConfig::preset("base");
  auto f = attention_flops(42, 0.6, cfg);
  EXPECT_EQ(f.tokens_with, 17u);
  EXPECT_NEAR(f.quadratic_ratio, (17.0 / 42.0) * (17.0 / 42.0), 1e-15);
  EXPECT_EQ(attention_flops(42, 0.0, cfg).quadratic_ratio, 1.0);
  EXPECT_NEAR(attention_flops(100000, 0.5, cfg).quadratic_ratio, 0.25, 1e-9);
  EXPECT_LT(f.total_ratio, 1.0);
  EXPECT_GT(f.total_ratio, f.quadratic_ratio);
}

TEST(Flops, MeasuredMatchesAnalytic) {
  auto cfg = model::ModelConfig::preset("small");
  model::PatchTransformer m(cfg, 1);
  Rng rng(2);
  std::vector<double> w(512);
  for (auto& v : w) v = standard_normal(rng);
  const patch::PatchSet sets[] = {patch::patchify(w, {12})};
  auto measure = [&](double r) {
    Rng prng(3);
    const DropMaskPlan plans[] = {sample_plan(42, r, 0.4, prng)};
    nd::FlopCounter::reset();
    nd::NoGradGuard g;
    reconstruction_loss(sets, plans, m);
    return static_cast<double>(nd::FlopCounter::get("attention"));
  };
  const double ratio = measure(0.6) / measure(0.0);
  EXPECT_NEAR(ratio / attention_flops(42, 0.6, cfg).quadratic_ratio, 1.0, 0.01);
}

TEST(Training, OverfitsOneBatch) {
  auto cfg = model::ModelConfig::preset("small");
  cfg.max_patches = 8;
  model::PatchTransformer m(cfg, 11);
  auto sets = sine_sets(8, 8, 12, 5);
  Rng prng(1);
  std::vector<DropMaskPlan> plans;
  for (int i = 0; i < 8; ++i) plans.push_back(sample_plan(8, 0.25, 0.4, prng));
  optim::Adam adam(m.trainable());
  double loss = 0.0;
  for (int step = 0; step < 200; ++step) loss = pretrain_step(sets, plans, m, adam, 1e-3);
  EXPECT_LT(loss, 0.1);
}

TEST(Training, ZeroEpochsLeavesModelUntouched) {
  model::PatchTransformer m(toy(8), 3);
  model::PatchTransformer before = m;
  Rng rng(1);
  auto sets = random_sets(4, 8, 4, rng);
  PretrainConfig cfg;
  cfg.epochs = 0;
  cfg.drop_ratio = 0.25;
  auto res = pretrain_run(sets, sets, m, cfg);
  EXPECT_TRUE(res.curve.empty());
  auto a = m.parameters(), b = before.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(), b[i].tensor.data().begin()));
  }
}

TEST(Training, EmptyDatasetIsError) {
  model::PatchTransformer m(toy(8), 3);
  std::vector<patch::PatchSet> none;
  EXPECT_THROW(pretrain_run(none, none, m, PretrainConfig{}), DataError);
}

TEST(Training, BitIdenticalAcrossRuns) {
  Rng rng(2);
  auto train = random_sets(20, 8, 4, rng);
  auto val = random_sets(5, 8, 4, rng);
  PretrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 6;
  cfg.drop_ratio = 0.25;
  model::PatchTransformer a(toy(8), 4), b(toy(8), 4);
  auto ra = pretrain_run(train, val, a, cfg);
  auto rb = pretrain_run(train, val, b, cfg);
  EXPECT_EQ(loss_curve_csv(ra), loss_curve_csv(rb));
  EXPECT_EQ(ra.steps, 8u);
  EXPECT_EQ(loss_curve_csv(ra).substr(0, 29), "epoch,train_loss,val_loss,lr\n");
}

TEST(Training, ValidationBeatsZeroPredictor) {
  auto cfg = model::ModelConfig::preset("small");
  cfg.max_patches = 8;
  auto train = sine_sets(512, 8, 12, 3);
  auto val = sine_sets(32, 8, 12, 7);
  model::PatchTransformer m(cfg, 1);
  PretrainConfig pc;
  pc.epochs = 5;
  pc.batch_size = 32;
  pc.drop_ratio = 0.25;
  auto res = pretrain_run(train, val, m, pc);
  EXPECT_LT(res.curve.back().val_loss, res.curve.back().val_zero_loss);
}

TEST(Config, Defaults) {
  PretrainConfig c;
  EXPECT_EQ(c.drop_ratio, 0.6);
  EXPECT_EQ(c.mask_ratio, 0.4);
  EXPECT_EQ(c.epochs, 50u);
  EXPECT_EQ(c.lr, 1e-3);
}

TEST(Schedule, OneCycleShape) {
  optim::OneCycle s;
  s.max_lr = 1e-3;
  s.total_steps = 100;
  EXPECT_NEAR(s.lr(0), 1e-3 / 25.0, 1e-15);
  EXPECT_NEAR(s.lr(30), 1e-3, 1e-15);
  EXPECT_LT(s.lr(99), s.lr(50));
  EXPECT_GE(s.lr(99), 1e-3 / 25.0 - 1e-15);
  for (std::size_t i = 1; i <= 30; ++i) EXPECT_GE(s.lr(i), s.lr(i - 1));
  for (std::size_t i = 31; i < 100; ++i) EXPECT_LE(s.lr(i), s.lr(i - 1));
}

TEST(Optimizer, AdamFirstStepIsLrTimesSign) {
  Tensor x = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  optim::Adam adam({x});
  nd::backward(nd::sum(nd::mul(x, Tensor::from({3}, {2.0, -1.0, 0.0}))));
  adam.step(0.1);
  // bias-corrected first step moves each coordinate by lr * g / (|g| + eps)
  EXPECT_NEAR(x.at(0), 1.0 - 0.1 * 2.0 / (2.0 + 1e-8), 1e-15);
  EXPECT_NEAR(x.at(1), -2.0 + 0.1 * 1.0 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(x.at(2), 0.5);
}

TEST(Training, InstanceNormIgnoresPerWindowAffineShift) {
  Rng rng(3);
  auto train = random_sets(12, 8, 4, rng);
  auto val = random_sets(4, 8, 4, rng);
  auto shifted = [](std::vector<patch::PatchSet> s) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      for (double& v : s[i].patches.values) v = v * (2.0 + static_cast<double>(i)) - 7.0;
    }
    return s;
  };
  PretrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.drop_ratio = 0.25;
  cfg.instance_norm = true;
  model::PatchTransformer a(toy(8), 4), b(toy(8), 4);
  auto ra = pretrain_run(train, val, a, cfg);
  auto rb = pretrain_run(shifted(train), shifted(val), b, cfg);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_NEAR(ra.curve[e].train_loss, rb.curve[e].train_loss, 1e-9);
    EXPECT_NEAR(ra.curve[e].val_loss, rb.curve[e].val_loss, 1e-9);
  }
  cfg.instance_norm = false;
  model::PatchTransformer c(toy(8), 4);
  EXPECT_GT(std::abs(pretrain_run(shifted(train), shifted(val), c, cfg).curve[0].train_loss -
                     ra.curve[0].train_loss),
            1e-3);
}
