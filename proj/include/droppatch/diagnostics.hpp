#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "droppatch/matrix.hpp"
#include "droppatch/model.hpp"
#include "droppatch/patching.hpp"

namespace droppatch::diag {

/// (1/n) sum_ij A_ij |i - j|; rows must sum to 1 within 1e-6.
double normalized_attention_distance(const Matrix& attention);

/// mean_i sum_j A_ij ln(n A_ij), with 0 ln 0 = 0.
double kl_to_uniform(const Matrix& attention);

/// sum_j p_j ln(max(p_j, eps) / max(q_j, eps)).
double kl_floored(std::span<const double> p, std::span<const double> q, double eps = 1e-12);

/// Entry (a, b): mean over rows of the symmetrized floored KL between heads a and b.
Matrix pairwise_head_kl(std::span<const Matrix> heads, double eps = 1e-12);

/// ||Xc^T Yc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) on column-centered inputs.
double linear_cka(const Matrix& x, const Matrix& y);

struct HeadStats {
  std::size_t layer = 0;
  std::size_t head = 0;
  double norm_distance = 0.0;
  double kl_uniform = 0.0;
};

struct ModelDiagnostics {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t tokens = 0;
  std::vector<HeadStats> head_stats;  // layer-major
  std::vector<Matrix> head_kl;        // one heads x heads matrix per layer
  Matrix last_layer;                  // encoder output, probe samples stacked by row
  std::vector<double> rank_trace;     // mean residual norm of each layer input, then the output

  double mean_kl_uniform(std::size_t layer) const;
  std::string head_stats_csv() const;
  std::string head_kl_csv(std::size_t layer) const;
  std::string rank_trace_csv() const;
};

struct DiagnoseOptions {
  std::size_t batch_size = 64;
};

/// Encodes every probe sample on its full, unmasked patch sequence and
/// averages the attention statistics over samples.
ModelDiagnostics diagnose_model(const model::PatchTransformer& model,
                                std::span<const patch::PatchSet> probe,
                                const DiagnoseOptions& options = {});

/// CKA of the last-layer representations of two models on the same probe set.
double representation_cka(const ModelDiagnostics& a, const ModelDiagnostics& b);

std::string cka_json(const std::vector<std::pair<std::string, double>>& entries);

/// Side-by-side last-layer KL-to-uniform of models pre-trained with and
/// without dropping, one entry per seed.
struct DirectionalEntry {
  std::uint64_t seed = 0;
  double kl_with_drop = 0.0;
  double kl_without_drop = 0.0;
};

struct DirectionalReport {
  double drop_ratio = 0.0;
  std::vector<DirectionalEntry> entries;

  std::size_t wins() const;  // seeds where the dropped model is sharper
  double mean_with() const;
  double mean_without() const;
  std::string to_json() const;
};

}  // namespace droppatch::diag
