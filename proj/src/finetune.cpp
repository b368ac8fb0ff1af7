#include "droppatch/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <thread>

#include "droppatch/error.hpp"
#include "droppatch/ops.hpp"
#include "droppatch/optim.hpp"

namespace droppatch::finetune {

using nd::Tensor;

void FinetuneConfig::validate() const {
  if (horizon == 0) throw ConfigError("horizon must be >= 1");
  if (lookback == 0) throw ConfigError("lookback must be >= 1");
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
}

model::ForecastModel make_forecaster(const model::PatchTransformer& encoder, std::size_t lookback,
                                     std::size_t horizon, std::uint64_t head_seed) {
  const auto& cfg = encoder.config();
  if (lookback < cfg.patch_len) {
    throw ConfigError("lookback " + std::to_string(lookback) + " is shorter than the patch length " +
                      std::to_string(cfg.patch_len));
  }
  const std::size_t p = lookback / cfg.patch_len;
  if (p > cfg.max_patches) {
    throw ConfigError("lookback " + std::to_string(lookback) + " needs " + std::to_string(p) +
                      " patches but the positional table holds " + std::to_string(cfg.max_patches));
  }
  return model::ForecastModel(encoder, p, horizon, head_seed);
}

model::ForecastModel cold_start_adapt(const model::PatchTransformer& encoder, std::size_t lookback,
                                      std::size_t horizon, std::uint64_t head_seed) {
  return make_forecaster(encoder, lookback, horizon, head_seed);
}

data::WindowSet few_shot_subset(const data::WindowSet& train, long long n) {
  if (n <= 0) throw ConfigError("few-shot sample count must be >= 1, got " + std::to_string(n));
  const auto count = static_cast<std::size_t>(n);
  if (count > train.samples.size()) {
    throw DataError("few-shot count " + std::to_string(count) + " exceeds the " +
                    std::to_string(train.samples.size()) + " available windows");
  }
  data::WindowSet out;
  out.per_channel = train.per_channel;
  out.samples.assign(train.samples.begin(), train.samples.begin() + static_cast<long>(count));
  return out;
}

namespace {

Tensor targets_of(std::span<const data::WindowSample> batch, std::size_t horizon) {
  std::vector<double> v;
  v.reserve(batch.size() * horizon);
  for (const auto& s : batch) {
    if (s.target.size() != horizon) {
      throw DataError("window target length " + std::to_string(s.target.size()) +
                      " differs from horizon " + std::to_string(horizon));
    }
    v.insert(v.end(), s.target.begin(), s.target.end());
  }
  return Tensor::from({batch.size(), horizon}, std::move(v));
}

std::vector<std::vector<double>> inputs_of(std::span<const data::WindowSample> batch) {
  std::vector<std::vector<double>> in;
  in.reserve(batch.size());
  for (const auto& s : batch) in.push_back(s.input);
  return in;
}

Tensor predict(const model::ForecastModel& model, std::span<const data::WindowSample> batch,
               bool instance_norm) {
  auto in = inputs_of(batch);
  if (!instance_norm) return model.forward(in);
  const std::size_t h = model.horizon();
  std::vector<double> scale, shift;
  scale.reserve(batch.size() * h);
  shift.reserve(batch.size() * h);
  for (auto& w : in) {
    const data::InstanceStats st = data::instance_normalize(w);
    scale.insert(scale.end(), h, st.scale);
    shift.insert(shift.end(), h, st.mean);
  }
  Tensor pred = model.forward(in);
  return nd::add(nd::mul(pred, Tensor::from({batch.size(), h}, std::move(scale))),
                 Tensor::from({batch.size(), h}, std::move(shift)));
}

}  // namespace

FinetuneResult finetune_run(model::ForecastModel& model, std::span<const data::WindowSample> train,
                            const FinetuneConfig& cfg) {
  cfg.validate();
  if (cfg.horizon != model.horizon()) {
    throw ConfigError("config horizon " + std::to_string(cfg.horizon) + " vs model horizon " +
                      std::to_string(model.horizon()));
  }
  FinetuneResult result;
  if (cfg.epochs == 0) return result;
  if (train.empty()) throw DataError("fine-tuning set is empty");

  optim::Adam adam(model.trainable(cfg.head_only));
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, epoch));
    shuffle(order, rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<data::WindowSample> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(train[order[i]]);
      Tensor pred = predict(model, batch, cfg.instance_norm);
      Tensor loss = nd::mse(pred, targets_of(batch, model.horizon()));
      const double value = loss.item();
      if (!std::isfinite(value)) throw NumericError("non-finite fine-tuning loss");
      nd::backward(loss);
      adam.step(cfg.lr);
      total += value * static_cast<double>(end - start);
      ++result.steps;
    }
    result.epoch_loss.push_back(total / static_cast<double>(train.size()));
  }
  return result;
}

Metrics forecast_metrics(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) {
    throw DimensionError("prediction length " + std::to_string(pred.size()) + " vs target " +
                         std::to_string(target.size()));
  }
  if (pred.empty()) throw DataError("no values to score");
  Metrics m;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - target[i];
    m.mse += e * e;
    m.mae += std::abs(e);
  }
  m.mse /= static_cast<double>(pred.size());
  m.mae /= static_cast<double>(pred.size());
  return m;
}

Metrics evaluate_windows(const model::ForecastModel& model,
                         std::span<const data::WindowSample> windows, const EvalOptions& options) {
  if (windows.empty()) throw DataError("evaluation split is empty");
  const std::size_t h = model.horizon();
  const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
  const std::size_t n_batches = (windows.size() + batch - 1) / batch;
  // Per-batch partial sums, reduced in batch order afterwards.
  std::vector<double> sq(n_batches, 0.0), ab(n_batches, 0.0);

  auto run_batch = [&](std::size_t bi) {
    nd::NoGradGuard no_grad;
    const std::size_t start = bi * batch;
    const std::size_t end = std::min(windows.size(), start + batch);
    auto chunk = windows.subspan(start, end - start);
    Tensor pred = predict(model, chunk, options.instance_norm);
    Tensor truth = targets_of(chunk, h);
    auto p = pred.data();
    auto t = truth.data();
    double s = 0.0, a = 0.0;
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      double scale = 1.0, shift = 0.0;
      if (options.destandardize) {
        scale = options.destandardize->stddev.at(chunk[i].channel);
        shift = options.destandardize->mean.at(chunk[i].channel);
      }
      for (std::size_t j = 0; j < h; ++j) {
        const double e = (p[i * h + j] * scale + shift) - (t[i * h + j] * scale + shift);
        s += e * e;
        a += std::abs(e);
      }
    }
    sq[bi] = s;
    ab[bi] = a;
  };

  const std::size_t threads = std::clamp<std::size_t>(options.threads, 1, n_batches);
  if (threads == 1) {
    for (std::size_t bi = 0; bi < n_batches; ++bi) run_batch(bi);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t bi = w; bi < n_batches; bi += threads) run_batch(bi);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  const double count = static_cast<double>(windows.size() * h);
  Metrics m;
  for (std::size_t bi = 0; bi < n_batches; ++bi) {
    m.mse += sq[bi];
    m.mae += ab[bi];
  }
  m.mse /= count;
  m.mae /= count;
  return m;
}

EvalReport make_report(std::vector<EvalRow> rows) {
  EvalReport r;
  r.rows = std::move(rows);
  if (r.rows.empty()) return r;
  for (const auto& row : r.rows) {
    r.average.mse += row.mse;
    r.average.mae += row.mae;
  }
  r.average.mse /= static_cast<double>(r.rows.size());
  r.average.mae /= static_cast<double>(r.rows.size());
  return r;
}

EvalReport evaluate(std::span<const model::ForecastModel* const> models,
                    const data::SeriesFrame& test, std::size_t stride, const EvalOptions& options) {
  std::vector<EvalRow> rows;
  for (const model::ForecastModel* m : models) {
    data::WindowSet ws = data::window(test, {m->lookback(), m->horizon(), stride});
    if (ws.samples.empty()) {
      throw DataError("test split of " + std::to_string(test.steps()) + " steps is too short for lookback " +
                      std::to_string(m->lookback()) + " + horizon " + std::to_string(m->horizon()));
    }
    Metrics met = evaluate_windows(*m, ws.samples, options);
    rows.push_back({m->horizon(), met.mse, met.mae});
  }
  return make_report(std::move(rows));
}

std::string EvalReport::to_csv() const {
  std::string out = "horizon,mse,mae\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", r.horizon, r.mse, r.mae);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "avg,%.17g,%.17g\n", average.mse, average.mae);
  out += buf;
  return out;
}

Metrics repeat_last_baseline(std::span<const data::WindowSample> windows) {
  std::vector<double> pred, target;
  for (const auto& w : windows) {
    if (w.input.empty()) throw DataError("window with empty input");
    pred.insert(pred.end(), w.target.size(), w.input.back());
    target.insert(target.end(), w.target.begin(), w.target.end());
  }
  return forecast_metrics(pred, target);
}

}  // namespace droppatch::finetune
