#include "droppatch/ranktheory.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "json.hpp"

#include "droppatch/error.hpp"

namespace droppatch::rank {

Matrix residual(const Matrix& x) {
  Matrix out(x.rows, x.cols);
  if (x.rows == 0) return out;
  const double n = static_cast<double>(x.rows);
  for (std::size_t c = 0; c < x.cols; ++c) {
    // Anchored mean: identical rows give an exactly zero residual.
    const double anchor = x(0, c);
    double dev = 0.0;
    for (std::size_t r = 0; r < x.rows; ++r) dev += x(r, c) - anchor;
    const double mean = anchor + dev / n;
    for (std::size_t r = 0; r < x.rows; ++r) out(r, c) = x(r, c) - mean;
  }
  return out;
}

double norm_1inf(const Matrix& a) {
  double max_col = 0.0, max_row = 0.0;
  std::vector<double> col(a.cols, 0.0);
  for (std::size_t r = 0; r < a.rows; ++r) {
    double row = 0.0;
    for (std::size_t c = 0; c < a.cols; ++c) {
      const double v = std::abs(a(r, c));
      row += v;
      col[c] += v;
    }
    max_row = std::max(max_row, row);
  }
  for (double v : col) max_col = std::max(max_col, v);
  return std::sqrt(max_col * max_row);
}

SanWeights random_san_weights(std::size_t d, double qk_std, double v_std, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  SanWeights w;
  w.wq = Matrix::gaussian(d, d, qk_std * s, rng);
  w.wk = Matrix::gaussian(d, d, qk_std * s, rng);
  w.wv = Matrix::gaussian(d, d, v_std * s, rng);
  return w;
}

namespace {

Matrix add_bias(Matrix m, const std::vector<double>& b) {
  if (b.empty()) return m;
  if (b.size() != m.cols) throw DimensionError("SAN bias length mismatch");
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) m(r, c) += b[c];
  }
  return m;
}

double row_gap(std::span<const double> row) {
  auto [lo, hi] = std::minmax_element(row.begin(), row.end());
  return *hi - *lo;
}

}  // namespace

SanOutput san_layer(const Matrix& x, const SanWeights& w) {
  if (w.wq.rows != x.cols || w.wk.rows != x.cols || w.wv.rows != x.cols ||
      w.wq.cols != w.wk.cols) {
    throw DimensionError("SAN weights do not match input width " + std::to_string(x.cols));
  }
  Matrix q = add_bias(x * w.wq, w.bq);
  Matrix k = add_bias(x * w.wk, w.bk);
  const double scale = 1.0 / std::sqrt(static_cast<double>(w.wq.cols));
  SanOutput out;
  out.attention = softmax_rows(scale * (q * k.transpose()));
  out.y = out.attention * (x * w.wv);
  return out;
}

std::string RankTrace::to_csv() const {
  std::string out = "layer,r\n";
  char buf[64];
  for (std::size_t l = 0; l < r.size(); ++l) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", l, r[l]);
    out += buf;
  }
  return out;
}

RankTrace san_stack_trace(const Matrix& x0, std::span<const SanWeights> weights, std::size_t layers) {
  if (weights.empty()) throw ConfigError("san_stack_trace needs at least one weight set");
  if (weights.size() != 1 && weights.size() != layers) {
    throw ConfigError("expected 1 or " + std::to_string(layers) + " weight sets, got " +
                      std::to_string(weights.size()));
  }
  RankTrace trace;
  Matrix x = x0;
  trace.r.push_back(norm_1inf(residual(x)));
  for (std::size_t l = 0; l < layers; ++l) {
    x = san_layer(x, weights[weights.size() == 1 ? 0 : l]).y;
    trace.r.push_back(norm_1inf(residual(x)));
  }
  return trace;
}

RankTrace rank_trace_of(std::span<const Matrix> representations) {
  RankTrace trace;
  for (const Matrix& m : representations) trace.r.push_back(norm_1inf(residual(m)));
  return trace;
}

InductionBound induction_bound(double c, double r0, std::size_t layers) {
  if (!(c > 0.0) || !std::isfinite(c)) throw ConfigError("induction bound needs C > 0");
  if (!(r0 >= 0.0) || !std::isfinite(r0)) throw ConfigError("induction bound needs r0 >= 0");
  InductionBound b;
  b.c = c;
  b.r0 = r0;
  b.convergent = r0 < std::pow(c, -0.5);
  const double log_c = std::log(c);
  const double log_r0 = std::log(r0);  // -inf for r0 == 0
  for (std::size_t l = 1; l <= layers; ++l) {
    const double p = std::pow(3.0, static_cast<double>(l));
    const double ec = (p - 1.0) / 2.0;
    const double c_term = log_c == 0.0 ? 0.0 : ec * log_c;
    const double log_b = r0 == 0.0 ? -std::numeric_limits<double>::infinity() : c_term + p * log_r0;
    double direct = std::pow(c, ec) * std::pow(r0, p);
    const bool usable = std::isfinite(direct) && (direct > std::numeric_limits<double>::min() || r0 == 0.0);
    b.log_bounds.push_back(log_b);
    b.bounds.push_back(usable ? direct : std::exp(log_b));
  }
  return b;
}

double gamma_lower_bound(const Matrix& a) {
  const std::size_t n = a.rows, m = a.cols;
  double max_gap = 0.0, sum_gap = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = row_gap(a.row(i));
    max_gap = std::max(max_gap, g);
    sum_gap += g;
  }
  double col = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t k = j + 1; k < m; ++k) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += std::abs(a(i, j) - a(i, k));
      col = std::max(col, s);
    }
  }
  if (col == 0.0) return 0.0;
  return std::sqrt(max_gap * sum_gap) / col;
}

ContractionWitness contraction_witness(const Matrix& x, const SanWeights& w,
                                       std::optional<double> gamma, std::optional<double> beta) {
  SanOutput s = san_layer(x, w);
  ContractionWitness out;
  out.lhs = norm_1inf(residual(s.y));
  const double r = norm_1inf(residual(x));
  out.cube = r * r * r;
  out.ratio = out.cube > 0.0 ? out.lhs / out.cube : 0.0;
  out.gamma_min = gamma_lower_bound(s.attention);
  if (gamma && beta) {
    out.c = 4.0 * *gamma * *beta / std::sqrt(static_cast<double>(x.cols));
    out.gamma_admissible = *gamma >= out.gamma_min;
    out.holds = out.lhs <= *out.c * out.cube;
  }
  return out;
}

Perturbation sample_perturbation(const PerturbationSpec& spec, Rng& rng) {
  const std::size_t n = spec.tokens;
  Perturbation p;
  p.mu.resize(n);
  for (double& v : p.mu) v = standard_normal(rng);
  p.delta = Matrix(n, n);
  for (double& v : p.delta.values) v = uniform(rng, -spec.eps, spec.eps);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = p.delta.values.data() + i * n;
    for (int iter = 0; iter < 1000; ++iter) {
      const double mean = std::accumulate(row, row + n, 0.0) / static_cast<double>(n);
      bool inside = true;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] -= mean;
        if (std::abs(row[j]) > spec.eps) inside = false;
      }
      if (inside) break;
      for (std::size_t j = 0; j < n; ++j) row[j] = std::clamp(row[j], -spec.eps, spec.eps);
    }
  }
  return p;
}

FlatnessSeed flatness_trial(const PerturbationSpec& spec, std::uint64_t seed) {
  const std::size_t n = spec.tokens, k = spec.kept;
  Rng rng(seed);
  Perturbation pert = sample_perturbation(spec, rng);
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  std::vector<std::size_t> keep = sample_without_replacement(pool, k, rng);
  std::sort(keep.begin(), keep.end());

  Matrix s(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) s(i, j) = pert.mu[i] + pert.delta(i, j);
  }
  Matrix sk(k, k);
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) sk(a, b) = s(keep[a], keep[b]);
  }
  const Matrix attn = softmax_rows(s);
  const Matrix attn_k = softmax_rows(sk);

  FlatnessSeed out;
  out.seed = seed;
  double sum_before = 0.0, sum_after = 0.0, ratio_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum_before += row_gap(attn.row(i));
  double lead = 0.0;
  for (std::size_t a = 0; a < k; ++a) {
    const double g_after = row_gap(attn_k.row(a));
    const double g_before = row_gap(attn.row(keep[a]));
    sum_after += g_after;
    ratio_sum += g_after / g_before;
    const double big_delta = row_gap(pert.delta.row(keep[a]));
    lead += (big_delta / static_cast<double>(k)) / (big_delta / static_cast<double>(n));
  }
  out.row_gap_ratio = ratio_sum / static_cast<double>(k);
  out.row_sum_ratio = sum_after / sum_before;
  out.leading_order_ratio = lead / static_cast<double>(k);

  double col_sum = 0.0, col_renorm_sum = 0.0, max_before = 0.0, max_after = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = a + 1; b < k; ++b) {
      const std::size_t j = keep[a], jj = keep[b];
      double all = 0.0, subset = 0.0, renorm = 0.0;
      for (std::size_t i = 0; i < n; ++i) all += std::abs(attn(i, j) - attn(i, jj));
      for (std::size_t c = 0; c < k; ++c) {
        subset += std::abs(attn(keep[c], j) - attn(keep[c], jj));
        renorm += std::abs(attn_k(c, a) - attn_k(c, b));
      }
      col_sum += subset / all;
      col_renorm_sum += renorm / all;
      max_after = std::max(max_after, renorm);
      ++pairs;
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t jj = j + 1; jj < n; ++jj) {
      double all = 0.0;
      for (std::size_t i = 0; i < n; ++i) all += std::abs(attn(i, j) - attn(i, jj));
      max_before = std::max(max_before, all);
    }
  }
  if (pairs > 0) {
    out.column_ratio = col_sum / static_cast<double>(pairs);
    out.column_ratio_renormalized = col_renorm_sum / static_cast<double>(pairs);
  }
  out.column_ratio_max = max_before > 0.0 ? max_after / max_before : 0.0;
  out.gamma_before = gamma_lower_bound(attn);
  out.gamma_after = gamma_lower_bound(attn_k);
  return out;
}

FlatnessReport flatness_ratio_experiment(const PerturbationSpec& spec, std::size_t n_seeds,
                                         std::uint64_t base_seed) {
  if (spec.kept > spec.tokens) {
    throw ConfigError("kept token count " + std::to_string(spec.kept) + " must not exceed " +
                      std::to_string(spec.tokens));
  }
  if (spec.kept < 2) throw ConfigError("need at least 2 kept tokens");
  if (!(spec.eps > 0.0)) throw ConfigError("perturbation bound must be positive");
  if (n_seeds == 0) throw ConfigError("need at least one seed");
  FlatnessReport rep;
  rep.spec = spec;
  rep.expected_row_ratio = static_cast<double>(spec.tokens) / static_cast<double>(spec.kept);
  rep.expected_column_ratio = static_cast<double>(spec.kept) / static_cast<double>(spec.tokens);
  rep.gamma_amplification = gamma_amplification(spec.tokens, spec.kept);
  for (std::size_t s = 0; s < n_seeds; ++s) {
    rep.seeds.push_back(flatness_trial(spec, derive_seed(base_seed, s)));
  }
  auto avg = [&](double FlatnessSeed::*field) {
    double t = 0.0;
    for (const auto& s : rep.seeds) t += s.*field;
    return t / static_cast<double>(rep.seeds.size());
  };
  rep.mean.row_gap_ratio = avg(&FlatnessSeed::row_gap_ratio);
  rep.mean.row_sum_ratio = avg(&FlatnessSeed::row_sum_ratio);
  rep.mean.column_ratio = avg(&FlatnessSeed::column_ratio);
  rep.mean.column_ratio_renormalized = avg(&FlatnessSeed::column_ratio_renormalized);
  rep.mean.column_ratio_max = avg(&FlatnessSeed::column_ratio_max);
  rep.mean.leading_order_ratio = avg(&FlatnessSeed::leading_order_ratio);
  rep.mean.gamma_before = avg(&FlatnessSeed::gamma_before);
  rep.mean.gamma_after = avg(&FlatnessSeed::gamma_after);
  return rep;
}

namespace {

nlohmann::json seed_json(const FlatnessSeed& s) {
  return {{"row_gap_ratio", s.row_gap_ratio},
          {"row_sum_ratio", s.row_sum_ratio},
          {"column_ratio", s.column_ratio},
          {"column_ratio_renormalized", s.column_ratio_renormalized},
          {"column_ratio_max", s.column_ratio_max},
          {"leading_order_ratio", s.leading_order_ratio},
          {"gamma_before", s.gamma_before},
          {"gamma_after", s.gamma_after}};
}

}  // namespace

std::string FlatnessReport::to_json() const {
  nlohmann::json j;
  j["parameters"] = {{"tokens", spec.tokens}, {"kept", spec.kept}, {"eps", spec.eps},
                     {"seeds", seeds.size()}};
  j["expected"] = {{"row_gap_ratio", expected_row_ratio},
                   {"row_sum_ratio", 1.0},
                   {"column_ratio", expected_column_ratio},
                   {"gamma_amplification", gamma_amplification}};
  nlohmann::json per = nlohmann::json::array();
  for (const auto& s : seeds) {
    auto e = seed_json(s);
    e["seed"] = s.seed;
    per.push_back(e);
  }
  j["per_seed"] = per;
  j["mean"] = seed_json(mean);
  return j.dump(2) + "\n";
}

double gamma_amplification(std::size_t tokens, std::size_t kept) {
  if (kept == 0 || kept > tokens) throw ConfigError("gamma amplification needs 0 < L' <= L");
  return std::pow(static_cast<double>(tokens) / static_cast<double>(kept), 1.5);
}

namespace {

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw DimensionError("spearman needs two equal-length series");
  auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace droppatch::rank

namespace droppatch::rank {

TraceReport san_trace_experiment(const TraceExperiment& spec) {
  if (spec.tokens < 2 || spec.dim == 0 || spec.layers == 0 || spec.seeds == 0) {
    throw ConfigError("trace experiment needs tokens >= 2 and positive dim, layers and seeds");
  }
  TraceReport rep;
  rep.spec = spec;
  std::vector<double> idx(spec.layers + 1);
  std::iota(idx.begin(), idx.end(), 0.0);
  for (std::size_t s = 0; s < spec.seeds; ++s) {
    Rng rng(derive_seed(spec.base_seed, s));
    Matrix x = Matrix::gaussian(spec.tokens, spec.dim, 1.0, rng);
    std::vector<SanWeights> w;
    for (std::size_t l = 0; l < spec.layers; ++l) {
      w.push_back(random_san_weights(spec.dim, spec.qk_std, spec.v_std, rng));
    }
    RankTrace t = san_stack_trace(x, w, spec.layers);
    std::size_t drops = 0;
    for (std::size_t l = 1; l < t.r.size(); ++l) drops += t.r[l] < t.r[l - 1] ? 1 : 0;
    rep.spearman.push_back(spearman(idx, t.r));
    rep.strict_drops.push_back(drops);
    rep.traces.push_back(std::move(t));
  }
  rep.mean_spearman =
      std::accumulate(rep.spearman.begin(), rep.spearman.end(), 0.0) / static_cast<double>(spec.seeds);
  rep.mean_trace.assign(spec.layers + 1, 0.0);
  for (const auto& t : rep.traces) {
    for (std::size_t l = 0; l <= spec.layers; ++l) rep.mean_trace[l] += t.r[l] / static_cast<double>(spec.seeds);
  }
  for (std::size_t l = 1; l <= spec.layers; ++l) {
    rep.mean_trace_drops += rep.mean_trace[l] < rep.mean_trace[l - 1] ? 1 : 0;
  }
  return rep;
}

std::string TraceReport::to_csv() const {
  std::string out = "seed,layer,r\n";
  char buf[96];
  for (std::size_t s = 0; s < traces.size(); ++s) {
    for (std::size_t l = 0; l < traces[s].r.size(); ++l) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g\n", s, l, traces[s].r[l]);
      out += buf;
    }
  }
  return out;
}

std::string TraceReport::to_json() const {
  nlohmann::ordered_json j;
  j["parameters"] = {{"tokens", spec.tokens},   {"dim", spec.dim},       {"layers", spec.layers},
                     {"seeds", spec.seeds},     {"base_seed", spec.base_seed},
                     {"qk_std", spec.qk_std},   {"v_std", spec.v_std}};
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (std::size_t s = 0; s < traces.size(); ++s) {
    per.push_back({{"seed", s}, {"r", traces[s].r}, {"spearman", spearman[s]},
                   {"strict_drops", strict_drops[s]}});
  }
  j["per_seed"] = per;
  j["mean_spearman"] = mean_spearman;
  j["mean_trace"] = mean_trace;
  j["mean_trace_strict_drops"] = mean_trace_drops;
  return j.dump(2) + "\n";
}

WitnessReport witness_experiment(std::size_t tokens, std::size_t dim, std::size_t seeds,
                                 std::uint64_t weight_seed, double value_scale,
                                 std::optional<double> gamma, std::optional<double> beta) {
  if (seeds == 0) throw ConfigError("witness experiment needs at least one seed");
  Rng wrng(weight_seed);
  SanWeights w = random_san_weights(dim, 1.0, 1.0, wrng);
  w.wv = value_scale * w.wv;
  WitnessReport rep;
  std::vector<double> ratios;
  for (std::size_t s = 0; s < seeds; ++s) {
    Rng rng(derive_seed(weight_seed, 1, s));
    Matrix x = Matrix::gaussian(tokens, dim, 1.0, rng);
    rep.witnesses.push_back(contraction_witness(x, w, gamma, beta));
    ratios.push_back(rep.witnesses.back().ratio);
  }
  const double n = static_cast<double>(seeds);
  rep.mean_ratio = std::accumulate(ratios.begin(), ratios.end(), 0.0) / n;
  double var = 0.0;
  for (double r : ratios) var += (r - rep.mean_ratio) * (r - rep.mean_ratio);
  rep.ratio_cv = rep.mean_ratio != 0.0 ? std::sqrt(var / n) / std::abs(rep.mean_ratio) : 0.0;
  return rep;
}

std::string WitnessReport::to_json() const {
  nlohmann::ordered_json j;
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (const auto& w : witnesses) {
    nlohmann::ordered_json e = {{"lhs", w.lhs}, {"cube", w.cube}, {"ratio", w.ratio},
                                {"gamma_min", w.gamma_min}};
    if (w.c) e["C"] = *w.c;
    if (w.gamma_admissible) e["gamma_admissible"] = *w.gamma_admissible;
    if (w.holds) e["holds"] = *w.holds;
    per.push_back(e);
  }
  j["per_seed"] = per;
  j["mean_ratio"] = mean_ratio;
  j["ratio_cv"] = ratio_cv;
  return j.dump(2) + "\n";
}

std::string induction_json(const InductionBound& b) {
  nlohmann::ordered_json j;
  j["C"] = b.c;
  j["r0"] = b.r0;
  j["threshold"] = std::pow(b.c, -0.5);
  j["convergent"] = b.convergent;
  j["bounds"] = b.bounds;
  nlohmann::ordered_json logs = nlohmann::ordered_json::array();
  for (double v : b.log_bounds) {
    if (std::isfinite(v)) logs.push_back(v);
    else logs.push_back(nullptr);
  }
  j["log_bounds"] = logs;
  return j.dump(2) + "\n";
}

}  // namespace droppatch::rank
