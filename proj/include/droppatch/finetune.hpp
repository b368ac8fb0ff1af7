#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "droppatch/data.hpp"
#include "droppatch/model.hpp"

namespace droppatch::finetune {

struct FinetuneConfig {
  std::size_t horizon = 96;
  std::size_t lookback = 512;
  std::size_t epochs = 1;
  double lr = 1e-4;
  std::size_t batch_size = 32;
  bool head_only = false;
  std::uint64_t seed = 2024;
  // Normalize each input window by its own mean/stddev and map the forecast
  // back with the same stats.
  bool instance_norm = false;

  void validate() const;
};

/// Forecasting model over `lookback` steps: the encoder is copied as is, the
/// head is freshly initialized for floor(lookback / L_P) * D inputs.
model::ForecastModel make_forecaster(const model::PatchTransformer& encoder, std::size_t lookback,
                                     std::size_t horizon, std::uint64_t head_seed);

/// Short-lookback variant; uses the first floor(L_ft / L_P) positional rows.
model::ForecastModel cold_start_adapt(const model::PatchTransformer& encoder, std::size_t lookback,
                                      std::size_t horizon, std::uint64_t head_seed);

/// First n windows in time order.
data::WindowSet few_shot_subset(const data::WindowSet& train, long long n);

struct FinetuneResult {
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
};

/// MSE fine-tuning over the full patch sequence with Adam at a constant lr.
FinetuneResult finetune_run(model::ForecastModel& model, std::span<const data::WindowSample> train,
                            const FinetuneConfig& cfg);

struct Metrics {
  double mse = 0.0;
  double mae = 0.0;
};

Metrics forecast_metrics(std::span<const double> pred, std::span<const double> target);

struct EvalRow {
  std::size_t horizon = 0;
  double mse = 0.0;
  double mae = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  Metrics average;

  std::string to_csv() const;
};

struct EvalOptions {
  std::size_t batch_size = 256;
  std::size_t threads = 1;
  // When set, predictions and targets are mapped back to the original scale
  // of each window's channel before scoring.
  const data::ChannelStats* destandardize = nullptr;
  bool instance_norm = false;  // must match how the model was fine-tuned
};

/// Scores one model on windows whose target length equals the model horizon.
Metrics evaluate_windows(const model::ForecastModel& model,
                         std::span<const data::WindowSample> windows,
                         const EvalOptions& options = {});

/// One row per model, windowed from `test` at the model's own lookback and horizon.
EvalReport evaluate(std::span<const model::ForecastModel* const> models,
                    const data::SeriesFrame& test, std::size_t stride = 1,
                    const EvalOptions& options = {});

EvalReport make_report(std::vector<EvalRow> rows);

/// Baseline that repeats the last input value across the horizon.
Metrics repeat_last_baseline(std::span<const data::WindowSample> windows);

}  // namespace droppatch::finetune
