#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "droppatch/matrix.hpp"

namespace droppatch::data {

/// T x c block of observations; rows are time steps, columns channels.
struct SeriesFrame {
  Matrix values;
  std::vector<std::string> channel_names;
  std::string frequency_label;

  std::size_t steps() const { return values.rows; }
  std::size_t channels() const { return values.cols; }
  std::vector<double> channel(std::size_t c) const;
};

SeriesFrame make_frame(Matrix values, std::vector<std::string> names = {},
                       std::string frequency = {});

// ---------------------------------------------------------------- CSV

enum class TimestampColumn { kAuto, kDrop, kKeep };

struct CsvOptions {
  // kAuto drops the first column when its header reads like a time axis
  // ("date", "time", "timestamp", ...) or its first data cell is not a number.
  TimestampColumn timestamp = TimestampColumn::kAuto;
};

SeriesFrame load_csv(const std::filesystem::path& path, const CsvOptions& options = {});
SeriesFrame parse_csv(const std::string& text, const CsvOptions& options = {},
                      const std::string& source = "<memory>");
void write_csv(const SeriesFrame& frame, const std::filesystem::path& path);
std::string to_csv(const SeriesFrame& frame);

// ---------------------------------------------------------------- splits

/// Absolute boundaries: train = [0, train_end), val = [train_end, val_end),
/// test = [val_end, test_end).
struct SplitSpec {
  std::size_t train_end = 0;
  std::size_t val_end = 0;
  std::size_t test_end = 0;

  static SplitSpec from_sizes(std::size_t train, std::size_t val, std::size_t test);
  /// floor(T*train) for train, floor(T*test) for test, the remainder for val.
  static SplitSpec from_ratios(std::size_t steps, double train = 0.7, double test = 0.2);
};

/// Fixed (train, val, test) sizes of the standard long-horizon benchmarks.
std::optional<SplitSpec> split_preset(const std::string& name);
std::vector<std::string> split_preset_names();

struct Splits {
  SeriesFrame train;
  SeriesFrame val;
  SeriesFrame test;
};

Splits split(const SeriesFrame& frame, const SplitSpec& spec);

/// Concatenates frames along time (inverse of split).
SeriesFrame concat(std::span<const SeriesFrame> frames);

// ---------------------------------------------------------------- scaling

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;      // population; 1.0 where the channel is constant
  std::vector<bool> degenerate;    // true where the fallback std was applied

  bool any_degenerate() const;
};

ChannelStats fit_stats(const SeriesFrame& train);
SeriesFrame apply_stats(const SeriesFrame& frame, const ChannelStats& stats);
SeriesFrame invert_stats(const SeriesFrame& frame, const ChannelStats& stats);

struct Standardized {
  std::vector<SeriesFrame> frames;  // train first, then `others` in order
  ChannelStats stats;
};

/// Fits per-channel statistics on `train` only and applies them to every frame.
Standardized standardize(const SeriesFrame& train, std::span<const SeriesFrame> others = {});

/// Per-window normalization (off by default in the pipelines).
struct InstanceNorm {
  double mean = 0.0;
  double stddev = 1.0;
};
InstanceNorm instance_stats(std::span<const double> window, double eps = 1e-5);

// ---------------------------------------------------------------- windows

struct WindowSpec {
  std::size_t lookback = 512;
  std::size_t horizon = 0;
  std::size_t stride = 1;
};

/// One univariate training sample cut from a single channel.
struct WindowSample {
  std::size_t channel = 0;
  std::size_t start = 0;
  std::vector<double> input;   // lookback values
  std::vector<double> target;  // horizon values following the input
};

struct WindowSet {
  std::vector<WindowSample> samples;  // time-major: by start, then channel
  std::size_t per_channel = 0;
  bool too_short = false;             // T < L + H; samples is empty
};

/// floor((T - L - H) / stride) + 1 per channel, or 0 when T < L + H.
std::size_t window_count(std::size_t steps, const WindowSpec& spec);

WindowSet window(const SeriesFrame& frame, const WindowSpec& spec);

// Per-window (instance) normalization. Off by default everywhere; the
// dataset-level standardization above is the primary scheme.
struct InstanceStats {
  double mean = 0.0;
  double scale = 1.0;  // population stddev, or 1 for a constant window
};

/// Rescales `values` in place to zero mean and unit variance; returns the stats used.
InstanceStats instance_normalize(std::span<double> values);

// ---------------------------------------------------------------- synthetic

struct SynthParams {
  double period = 24.0;
  double amplitude = 1.0;
  double noise = 0.0;         // stddev of additive Gaussian noise
  std::size_t components = 2; // sine-mix: number of harmonics
  double trend = 0.001;       // trend+season: slope per step
  double phi = 0.5;           // ar1 coefficient
  double sigma = 1.0;         // ar1 / random-walk innovation stddev
};

/// Deterministic synthetic series, channel c (0-based), step t:
///   sine-mix      sum_k (A/(k+1)) sin(2 pi (k+1) t / (period (1 + c/4)) + c k pi/3) + noise
///   trend+season  trend*t + A sin(2 pi t / period + c pi/4) + noise
///   ar1           x_t = phi x_{t-1} + sigma e_t,  x_0 = sigma e_0
///   random-walk   x_t = x_{t-1} + sigma e_t,      x_0 = sigma e_0
SeriesFrame synth_generate(const std::string& kind, std::size_t length, std::size_t channels,
                           std::uint64_t seed, const SynthParams& params = {});

const std::vector<std::string>& synth_kinds();

}  // namespace droppatch::data
