#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "droppatch/matrix.hpp"
#include "droppatch/random.hpp"

namespace droppatch::rank {

/// X minus the column-mean row: zero iff all rows are identical.
Matrix residual(const Matrix& x);

/// sqrt(max column abs sum * max row abs sum).
double norm_1inf(const Matrix& a);

/// Single-head self-attention map without residual, LN or FFN:
/// softmax((X Wq + bq)(X Wk + bk)^T / sqrt(d_k)) X Wv.
struct SanWeights {
  Matrix wq, wk, wv;
  std::vector<double> bq, bk;  // empty means zero

  std::size_t dim() const { return wq.rows; }
};

/// Gaussian weights: query/key entries with stddev qk_std / sqrt(d), value
/// entries with stddev v_std / sqrt(d).
SanWeights random_san_weights(std::size_t d, double qk_std, double v_std, Rng& rng);

struct SanOutput {
  Matrix attention;  // n x n
  Matrix y;          // n x d
};

SanOutput san_layer(const Matrix& x, const SanWeights& w);

struct RankTrace {
  std::vector<double> r;  // r[0] = input residual norm, r[l] after layer l

  std::size_t layers() const { return r.empty() ? 0 : r.size() - 1; }
  std::string to_csv() const;
};

/// Applies `layers` SAN layers; `weights` holds one shared entry or one per layer.
RankTrace san_stack_trace(const Matrix& x0, std::span<const SanWeights> weights, std::size_t layers);

/// Residual norms of an arbitrary sequence of representation matrices.
RankTrace rank_trace_of(std::span<const Matrix> representations);

struct InductionBound {
  double c = 0.0;
  double r0 = 0.0;
  std::vector<double> bounds;      // l = 1..L
  std::vector<double> log_bounds;  // natural log, may be -inf
  bool convergent = false;         // r0 < C^{-1/2}
};

/// r_l <= C^{(3^l - 1)/2} r0^{3^l}; evaluated in log space when the direct
/// product would overflow or underflow.
InductionBound induction_bound(double c, double r0, std::size_t layers);

/// sqrt(max_{i,j,j'} |A_ij - A_ij'| * sum_i max_{j,j'} |A_ij - A_ij'|)
///   / max_{j,j'} sum_i |A_ij - A_ij'|; 0 when the denominator vanishes.
double gamma_lower_bound(const Matrix& attention);

struct ContractionWitness {
  double lhs = 0.0;     // ||res(SAN(X))||
  double cube = 0.0;    // ||res(X)||^3
  double ratio = 0.0;   // lhs / cube, 0 when cube == 0
  double gamma_min = 0.0;
  std::optional<double> c;              // 4 gamma beta / sqrt(d) when supplied
  std::optional<bool> gamma_admissible;  // supplied gamma >= gamma_min
  std::optional<bool> holds;            // lhs <= c * cube
};

ContractionWitness contraction_witness(const Matrix& x, const SanWeights& w,
                                       std::optional<double> gamma = std::nullopt,
                                       std::optional<double> beta = std::nullopt);

struct PerturbationSpec {
  std::size_t tokens = 100;  // L
  std::size_t kept = 40;     // L'
  double eps = 1e-3;
};

struct Perturbation {
  std::vector<double> mu;  // L
  Matrix delta;            // L x L, zero row sums, |delta| <= eps
};

/// mu ~ N(0, 1); delta ~ U(-eps, eps) then alternately projected to zero row
/// sums and clipped until both constraints hold.
Perturbation sample_perturbation(const PerturbationSpec& spec, Rng& rng);

struct FlatnessSeed {
  std::uint64_t seed = 0;
  double row_gap_ratio = 0.0;          // mean_i gap'_i / gap_i
  double row_sum_ratio = 0.0;          // sum gap' / sum gap
  double column_ratio = 0.0;           // mean over kept column pairs, original A rows in I'
  double column_ratio_renormalized = 0.0;  // same pairs, rows of A'
  double column_ratio_max = 0.0;       // max-over-pairs form, rows of A'
  double leading_order_ratio = 0.0;    // Delta_i / L' over Delta_i / L
  double gamma_before = 0.0;
  double gamma_after = 0.0;
};

struct FlatnessReport {
  PerturbationSpec spec;
  std::vector<FlatnessSeed> seeds;
  FlatnessSeed mean;  // seed field unused
  double expected_row_ratio = 0.0;     // L / L'
  double expected_column_ratio = 0.0;  // L' / L
  double gamma_amplification = 0.0;    // (L / L')^{3/2}

  std::string to_json() const;
};

FlatnessSeed flatness_trial(const PerturbationSpec& spec, std::uint64_t seed);

/// Runs `n_seeds` trials with seeds derived from base_seed. L' > L is an error;
/// L' == L yields ratios of exactly 1.
FlatnessReport flatness_ratio_experiment(const PerturbationSpec& spec, std::size_t n_seeds,
                                         std::uint64_t base_seed = 0);

/// (L / L')^{3/2}.
double gamma_amplification(std::size_t tokens, std::size_t kept);

struct TraceExperiment {
  std::size_t tokens = 8;
  std::size_t dim = 4;
  std::size_t layers = 12;
  std::size_t seeds = 20;
  std::uint64_t base_seed = 0;
  double qk_std = 4.0;
  double v_std = 0.8;
};

struct TraceReport {
  TraceExperiment spec;
  std::vector<RankTrace> traces;
  std::vector<double> spearman;           // of r_l against l = 0..L, per seed
  std::vector<std::size_t> strict_drops;  // steps with r_l < r_{l-1}, per seed
  double mean_spearman = 0.0;
  std::vector<double> mean_trace;     // r_l averaged over seeds
  std::size_t mean_trace_drops = 0;   // strict decreases of mean_trace

  std::string to_csv() const;  // seed,layer,r
  std::string to_json() const;
};

/// Gaussian 8x4-style inputs pushed through stacks of independently drawn
/// SAN layers, one stack per seed.
TraceReport san_trace_experiment(const TraceExperiment& spec);

struct WitnessReport {
  std::vector<ContractionWitness> witnesses;
  double mean_ratio = 0.0;
  double ratio_cv = 0.0;  // stddev / mean of the ratio over seeds

  std::string to_json() const;
};

/// One witness per seed at fixed weights (drawn from `weight_seed`), inputs
/// redrawn per seed; value weights are scaled by `value_scale`.
WitnessReport witness_experiment(std::size_t tokens, std::size_t dim, std::size_t seeds,
                                 std::uint64_t weight_seed, double value_scale = 1.0,
                                 std::optional<double> gamma = std::nullopt,
                                 std::optional<double> beta = std::nullopt);

std::string induction_json(const InductionBound& bound);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace droppatch::rank
