#include "droppatch/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include "droppatch/error.hpp"
#include "droppatch/random.hpp"

namespace droppatch::data {

std::vector<double> SeriesFrame::channel(std::size_t c) const {
  std::vector<double> out(values.rows);
  for (std::size_t t = 0; t < values.rows; ++t) out[t] = values(t, c);
  return out;
}

SeriesFrame make_frame(Matrix values, std::vector<std::string> names, std::string frequency) {
  if (names.empty()) {
    for (std::size_t c = 0; c < values.cols; ++c) names.push_back("ch" + std::to_string(c));
  }
  if (names.size() != values.cols) {
    throw DataError("frame has " + std::to_string(values.cols) + " channels but " +
                    std::to_string(names.size()) + " names");
  }
  return SeriesFrame{std::move(values), std::move(names), std::move(frequency)};
}

// ---------------------------------------------------------------- CSV

namespace {

std::vector<std::string> split_cells(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string trim(std::string s) {
  auto not_space = [](unsigned char ch) { return !std::isspace(ch); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::optional<double> parse_number(const std::string& cell) {
  const std::string s = trim(cell);
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) return std::nullopt;
  return v;
}

bool looks_like_time_header(std::string cell) {
  cell = trim(cell);
  std::transform(cell.begin(), cell.end(), cell.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  static const char* kNames[] = {"date", "time", "timestamp", "datetime", "ds"};
  return std::any_of(std::begin(kNames), std::end(kNames),
                     [&](const char* n) { return cell == n; });
}

}  // namespace

SeriesFrame parse_csv(const std::string& text, const CsvOptions& options,
                      const std::string& source) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    rows.push_back(split_cells(line));
  }
  if (rows.empty()) throw DataError(source + ": missing header row");
  const std::vector<std::string>& header = rows.front();
  if (rows.size() < 2) throw DataError(source + ": no data rows");

  bool drop_first = false;
  switch (options.timestamp) {
    case TimestampColumn::kDrop: drop_first = true; break;
    case TimestampColumn::kKeep: drop_first = false; break;
    case TimestampColumn::kAuto:
      drop_first = looks_like_time_header(header[0]) || !parse_number(rows[1][0]).has_value();
      break;
  }
  const std::size_t first = drop_first ? 1 : 0;
  if (header.size() <= first) throw DataError(source + ": no value columns");
  const std::size_t channels = header.size() - first;

  Matrix values(rows.size() - 1, channels);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& cells = rows[r];
    if (cells.size() != header.size()) {
      throw DataError(source + ": row " + std::to_string(r + 1) + " has " +
                      std::to_string(cells.size()) + " cells, header has " +
                      std::to_string(header.size()));
    }
    for (std::size_t c = 0; c < channels; ++c) {
      const auto v = parse_number(cells[c + first]);
      if (!v || !std::isfinite(*v)) {
        throw DataError(source + ": row " + std::to_string(r + 1) + ", column " +
                        std::to_string(c + first + 1) + ": " +
                        (v ? "non-finite value '" : "unparsable value '") + trim(cells[c + first]) +
                        "'");
      }
      values(r - 1, c) = *v;
    }
  }
  std::vector<std::string> names;
  for (std::size_t c = first; c < header.size(); ++c) names.push_back(trim(header[c]));
  return make_frame(std::move(values), std::move(names));
}

SeriesFrame load_csv(const std::filesystem::path& path, const CsvOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  std::string text = buffer.str();
  if (text.size() >= 3 && text.compare(0, 3, "\xEF\xBB\xBF") == 0) text.erase(0, 3);
  return parse_csv(text, options, path.string());
}

std::string to_csv(const SeriesFrame& frame) {
  std::string out;
  for (std::size_t c = 0; c < frame.channels(); ++c) {
    if (c) out += ',';
    out += frame.channel_names[c];
  }
  out += '\n';
  char buf[32];
  for (std::size_t t = 0; t < frame.steps(); ++t) {
    for (std::size_t c = 0; c < frame.channels(); ++c) {
      if (c) out += ',';
      std::snprintf(buf, sizeof buf, "%.17g", frame.values(t, c));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

void write_csv(const SeriesFrame& frame, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_csv(frame);
}

// ---------------------------------------------------------------- splits

SplitSpec SplitSpec::from_sizes(std::size_t train, std::size_t val, std::size_t test) {
  return SplitSpec{train, train + val, train + val + test};
}

SplitSpec SplitSpec::from_ratios(std::size_t steps, double train, double test) {
  if (train < 0.0 || test < 0.0 || train + test > 1.0) {
    throw ConfigError("split ratios must be nonnegative and sum to at most 1");
  }
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(steps) * train));
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(steps) * test));
  return from_sizes(n_train, steps - n_train - n_test, n_test);
}

namespace {

const std::map<std::string, SplitSpec>& presets() {
  static const std::map<std::string, SplitSpec> table = {
      {"ett-hourly", SplitSpec::from_sizes(8545, 2881, 2881)},
      {"ett-minute", SplitSpec::from_sizes(34465, 11521, 11521)},
      {"weather", SplitSpec::from_sizes(36792, 5271, 10540)},
      {"ecl", SplitSpec::from_sizes(18317, 2633, 5261)},
      {"traffic", SplitSpec::from_sizes(12185, 1757, 3509)},
      {"exchange", SplitSpec::from_sizes(5120, 665, 1422)},
      {"pems03", SplitSpec::from_sizes(15617, 5135, 5135)},
      {"pems04", SplitSpec::from_sizes(10172, 3375, 281)},
      {"pems07", SplitSpec::from_sizes(16911, 5622, 468)},
      {"pems08", SplitSpec::from_sizes(10690, 3548, 265)},
  };
  return table;
}

SeriesFrame slice(const SeriesFrame& frame, std::size_t begin, std::size_t end) {
  Matrix values(end - begin, frame.channels());
  std::copy(frame.values.values.begin() + static_cast<long>(begin * frame.channels()),
            frame.values.values.begin() + static_cast<long>(end * frame.channels()),
            values.values.begin());
  return SeriesFrame{std::move(values), frame.channel_names, frame.frequency_label};
}

}  // namespace

std::optional<SplitSpec> split_preset(const std::string& name) {
  auto it = presets().find(name);
  if (it == presets().end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> split_preset_names() {
  std::vector<std::string> names;
  for (const auto& [k, _] : presets()) names.push_back(k);
  return names;
}

Splits split(const SeriesFrame& frame, const SplitSpec& spec) {
  if (spec.train_end > spec.val_end || spec.val_end > spec.test_end) {
    throw DataError("split boundaries must be nondecreasing, got (" +
                    std::to_string(spec.train_end) + ", " + std::to_string(spec.val_end) + ", " +
                    std::to_string(spec.test_end) + ")");
  }
  if (spec.test_end > frame.steps()) {
    throw DataError("split boundary " + std::to_string(spec.test_end) + " exceeds series length " +
                    std::to_string(frame.steps()));
  }
  return Splits{slice(frame, 0, spec.train_end), slice(frame, spec.train_end, spec.val_end),
                slice(frame, spec.val_end, spec.test_end)};
}

SeriesFrame concat(std::span<const SeriesFrame> frames) {
  if (frames.empty()) throw DataError("concat of no frames");
  const std::size_t channels = frames.front().channels();
  std::size_t steps = 0;
  for (const auto& f : frames) {
    if (f.channels() != channels) throw DataError("concat: channel count mismatch");
    steps += f.steps();
  }
  Matrix values(steps, channels);
  auto out = values.values.begin();
  for (const auto& f : frames) out = std::copy(f.values.values.begin(), f.values.values.end(), out);
  return SeriesFrame{std::move(values), frames.front().channel_names,
                     frames.front().frequency_label};
}

// ---------------------------------------------------------------- scaling

bool ChannelStats::any_degenerate() const {
  return std::any_of(degenerate.begin(), degenerate.end(), [](bool b) { return b; });
}

ChannelStats fit_stats(const SeriesFrame& train) {
  if (train.steps() == 0) throw DataError("cannot fit statistics on an empty training split");
  const std::size_t c = train.channels();
  ChannelStats stats{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0),
                     std::vector<bool>(c, false)};
  const double n = static_cast<double>(train.steps());
  for (std::size_t t = 0; t < train.steps(); ++t) {
    for (std::size_t j = 0; j < c; ++j) stats.mean[j] += train.values(t, j);
  }
  for (double& m : stats.mean) m /= n;
  for (std::size_t t = 0; t < train.steps(); ++t) {
    for (std::size_t j = 0; j < c; ++j) {
      const double d = train.values(t, j) - stats.mean[j];
      stats.stddev[j] += d * d;
    }
  }
  for (std::size_t j = 0; j < c; ++j) {
    stats.stddev[j] = std::sqrt(stats.stddev[j] / n);
    if (!(stats.stddev[j] > 0.0)) {
      stats.stddev[j] = 1.0;
      stats.degenerate[j] = true;
    }
  }
  return stats;
}

SeriesFrame apply_stats(const SeriesFrame& frame, const ChannelStats& stats) {
  if (stats.mean.size() != frame.channels()) throw DataError("statistics/channel count mismatch");
  SeriesFrame out = frame;
  for (std::size_t t = 0; t < frame.steps(); ++t) {
    for (std::size_t j = 0; j < frame.channels(); ++j) {
      out.values(t, j) = (frame.values(t, j) - stats.mean[j]) / stats.stddev[j];
    }
  }
  return out;
}

SeriesFrame invert_stats(const SeriesFrame& frame, const ChannelStats& stats) {
  if (stats.mean.size() != frame.channels()) throw DataError("statistics/channel count mismatch");
  SeriesFrame out = frame;
  for (std::size_t t = 0; t < frame.steps(); ++t) {
    for (std::size_t j = 0; j < frame.channels(); ++j) {
      out.values(t, j) = frame.values(t, j) * stats.stddev[j] + stats.mean[j];
    }
  }
  return out;
}

Standardized standardize(const SeriesFrame& train, std::span<const SeriesFrame> others) {
  Standardized result;
  result.stats = fit_stats(train);
  result.frames.push_back(apply_stats(train, result.stats));
  for (const auto& f : others) result.frames.push_back(apply_stats(f, result.stats));
  return result;
}

InstanceNorm instance_stats(std::span<const double> window, double eps) {
  InstanceNorm s;
  if (window.empty()) return s;
  for (double v : window) s.mean += v;
  s.mean /= static_cast<double>(window.size());
  double var = 0.0;
  for (double v : window) var += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(window.size()) + eps);
  return s;
}

// ---------------------------------------------------------------- windows

std::size_t window_count(std::size_t steps, const WindowSpec& spec) {
  if (spec.stride == 0) throw ConfigError("window stride must be >= 1");
  const std::size_t need = spec.lookback + spec.horizon;
  if (steps < need) return 0;
  return (steps - need) / spec.stride + 1;
}

InstanceStats instance_normalize(std::span<double> values) {
  InstanceStats st;
  if (values.empty()) return st;
  const double n = static_cast<double>(values.size());
  st.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double var = 0.0;
  for (double v : values) var += (v - st.mean) * (v - st.mean);
  const double sd = std::sqrt(var / n);
  st.scale = sd > 1e-12 ? sd : 1.0;
  for (double& v : values) v = (v - st.mean) / st.scale;
  return st;
}

WindowSet window(const SeriesFrame& frame, const WindowSpec& spec) {
  if (spec.lookback == 0) throw ConfigError("window lookback must be >= 1");
  WindowSet set;
  set.per_channel = window_count(frame.steps(), spec);
  set.too_short = set.per_channel == 0;
  set.samples.reserve(set.per_channel * frame.channels());
  for (std::size_t w = 0; w < set.per_channel; ++w) {
    const std::size_t start = w * spec.stride;
    for (std::size_t c = 0; c < frame.channels(); ++c) {
      WindowSample s;
      s.channel = c;
      s.start = start;
      s.input.resize(spec.lookback);
      s.target.resize(spec.horizon);
      for (std::size_t i = 0; i < spec.lookback; ++i) s.input[i] = frame.values(start + i, c);
      for (std::size_t i = 0; i < spec.horizon; ++i) {
        s.target[i] = frame.values(start + spec.lookback + i, c);
      }
      set.samples.push_back(std::move(s));
    }
  }
  return set;
}

// ---------------------------------------------------------------- synthetic

const std::vector<std::string>& synth_kinds() {
  static const std::vector<std::string> kinds = {"sine-mix", "trend+season", "ar1", "random-walk"};
  return kinds;
}

SeriesFrame synth_generate(const std::string& kind, std::size_t length, std::size_t channels,
                           std::uint64_t seed, const SynthParams& p) {
  const auto& kinds = synth_kinds();
  if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end()) {
    std::string valid;
    for (const auto& k : kinds) valid += (valid.empty() ? "" : ", ") + k;
    throw ConfigError("unknown synthetic kind '" + kind + "' (valid: " + valid + ")");
  }
  if (length == 0 || channels == 0) throw ConfigError("synthetic length and channels must be >= 1");
  if (!(p.period > 0.0)) throw ConfigError("synthetic period must be > 0");

  Matrix values(length, channels);
  for (std::size_t c = 0; c < channels; ++c) {
    Rng rng(derive_seed(seed, c));
    const double cd = static_cast<double>(c);
    double prev = 0.0;
    for (std::size_t t = 0; t < length; ++t) {
      const double td = static_cast<double>(t);
      double v = 0.0;
      if (kind == "sine-mix") {
        const double base = p.period * (1.0 + cd / 4.0);
        for (std::size_t k = 0; k < p.components; ++k) {
          const double kd = static_cast<double>(k);
          v += p.amplitude / (kd + 1.0) *
               std::sin(2.0 * M_PI * (kd + 1.0) * td / base + cd * kd * M_PI / 3.0);
        }
        if (p.noise > 0.0) v += p.noise * standard_normal(rng);
      } else if (kind == "trend+season") {
        v = p.trend * td + p.amplitude * std::sin(2.0 * M_PI * td / p.period + cd * M_PI / 4.0);
        if (p.noise > 0.0) v += p.noise * standard_normal(rng);
      } else if (kind == "ar1") {
        v = (t == 0 ? 0.0 : p.phi * prev) + p.sigma * standard_normal(rng);
      } else {  // random-walk
        v = (t == 0 ? 0.0 : prev) + p.sigma * standard_normal(rng);
      }
      prev = v;
      values(t, c) = v;
    }
  }
  return make_frame(std::move(values), {}, "synthetic:" + kind);
}

}  // namespace droppatch::data
