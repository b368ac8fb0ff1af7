#include "droppatch/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "json.hpp"

#include "droppatch/error.hpp"
#include "droppatch/ranktheory.hpp"
#include "droppatch/tensor.hpp"

namespace droppatch::diag {

namespace {

void check_stochastic(const Matrix& a) {
  if (a.rows == 0 || a.cols == 0) throw DimensionError("attention matrix is empty");
  for (std::size_t i = 0; i < a.rows; ++i) {
    double s = 0.0;
    for (double v : a.row(i)) {
      if (v < 0.0 || !std::isfinite(v)) {
        throw NumericError("attention row " + std::to_string(i) + " has a negative or non-finite entry");
      }
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) {
      throw NumericError("attention row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
  }
}

Matrix center_columns(const Matrix& x) {
  Matrix c = x;
  for (std::size_t j = 0; j < x.cols; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) mean += x(i, j);
    mean /= static_cast<double>(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) c(i, j) -= mean;
  }
  return c;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

double normalized_attention_distance(const Matrix& a) {
  check_stochastic(a);
  double total = 0.0;
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < a.cols; ++j) {
      total += a(i, j) * std::abs(static_cast<double>(i) - static_cast<double>(j));
    }
  }
  return total / static_cast<double>(a.rows);
}

double kl_to_uniform(const Matrix& a) {
  check_stochastic(a);
  const double n = static_cast<double>(a.cols);
  double total = 0.0;
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (double v : a.row(i)) {
      if (v > 0.0) total += v * std::log(n * v);
    }
  }
  return std::max(0.0, total / static_cast<double>(a.rows));
}

double kl_floored(std::span<const double> p, std::span<const double> q, double eps) {
  if (p.size() != q.size()) throw DimensionError("KL between distributions of different length");
  double kl = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] > 0.0) kl += p[j] * std::log(std::max(p[j], eps) / std::max(q[j], eps));
  }
  return kl;
}

Matrix pairwise_head_kl(std::span<const Matrix> heads, double eps) {
  const std::size_t h = heads.size();
  Matrix out(h, h);
  if (h == 0) return out;
  for (const Matrix& m : heads) {
    if (m.rows != heads[0].rows || m.cols != heads[0].cols) {
      throw DimensionError("attention heads differ in shape");
    }
    check_stochastic(m);
  }
  for (std::size_t a = 0; a < h; ++a) {
    for (std::size_t b = a + 1; b < h; ++b) {
      double total = 0.0;
      for (std::size_t i = 0; i < heads[a].rows; ++i) {
        auto pa = heads[a].row(i), pb = heads[b].row(i);
        total += 0.5 * (kl_floored(pa, pb, eps) + kl_floored(pb, pa, eps));
      }
      out(a, b) = out(b, a) = std::max(0.0, total / static_cast<double>(heads[a].rows));
    }
  }
  return out;
}

double linear_cka(const Matrix& x, const Matrix& y) {
  if (x.rows != y.rows) {
    throw DimensionError("CKA inputs have " + std::to_string(x.rows) + " and " +
                         std::to_string(y.rows) + " rows");
  }
  if (x.rows < 2) throw DimensionError("CKA needs at least 2 rows");
  const Matrix xc = center_columns(x), yc = center_columns(y);
  const Matrix xt = xc.transpose(), yt = yc.transpose();
  const double nx = frobenius_norm(xt * xc);
  const double ny = frobenius_norm(yt * yc);
  if (nx == 0.0 || ny == 0.0) throw NumericError("CKA input has zero variance");
  const double cross = frobenius_norm(xt * yc);
  return cross * cross / (nx * ny);
}

double ModelDiagnostics::mean_kl_uniform(std::size_t layer) const {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : head_stats) {
    if (s.layer == layer) {
      total += s.kl_uniform;
      ++count;
    }
  }
  if (count == 0) throw DimensionError("no statistics for layer " + std::to_string(layer));
  return total / static_cast<double>(count);
}

std::string ModelDiagnostics::head_stats_csv() const {
  std::string out = "layer,head,norm_distance,kl_uniform\n";
  for (const auto& s : head_stats) {
    out += std::to_string(s.layer) + "," + std::to_string(s.head) + "," + fmt(s.norm_distance) +
           "," + fmt(s.kl_uniform) + "\n";
  }
  return out;
}

std::string ModelDiagnostics::head_kl_csv(std::size_t layer) const {
  const Matrix& m = head_kl.at(layer);
  std::string out = "head";
  for (std::size_t b = 0; b < m.cols; ++b) out += ",h" + std::to_string(b);
  out += "\n";
  for (std::size_t a = 0; a < m.rows; ++a) {
    out += "h" + std::to_string(a);
    for (std::size_t b = 0; b < m.cols; ++b) out += "," + fmt(m(a, b));
    out += "\n";
  }
  return out;
}

std::string ModelDiagnostics::rank_trace_csv() const {
  rank::RankTrace t{rank_trace};
  return t.to_csv();
}

ModelDiagnostics diagnose_model(const model::PatchTransformer& model,
                                std::span<const patch::PatchSet> probe,
                                const DiagnoseOptions& options) {
  if (probe.empty()) throw DataError("probe set is empty");
  const auto& cfg = model.config();
  ModelDiagnostics out;
  out.layers = cfg.n_layers;
  out.heads = cfg.n_heads;
  out.tokens = probe.front().count();
  const std::size_t n = out.tokens, d = cfg.d_model;
  for (std::size_t l = 0; l < out.layers; ++l) {
    for (std::size_t h = 0; h < out.heads; ++h) out.head_stats.push_back({l, h, 0.0, 0.0});
    out.head_kl.emplace_back(out.heads, out.heads);
  }
  out.last_layer = Matrix(probe.size() * n, d);
  out.rank_trace.assign(out.layers + 1, 0.0);

  nd::NoGradGuard no_grad;
  const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
  for (std::size_t start = 0; start < probe.size(); start += batch) {
    const std::size_t end = std::min(probe.size(), start + batch);
    auto chunk = probe.subspan(start, end - start);
    model::EncoderOutput enc = model.encode(model.full_input(chunk), {true, true});
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      for (std::size_t l = 0; l < out.layers; ++l) {
        std::vector<Matrix> heads;
        for (std::size_t h = 0; h < out.heads; ++h) {
          heads.push_back(enc.attention.head(l, b, h));
          auto& s = out.head_stats[l * out.heads + h];
          s.norm_distance += normalized_attention_distance(heads.back());
          s.kl_uniform += kl_to_uniform(heads.back());
        }
        Matrix kl = pairwise_head_kl(heads);
        for (std::size_t i = 0; i < kl.values.size(); ++i) out.head_kl[l].values[i] += kl.values[i];
      }
      for (std::size_t l = 0; l <= out.layers; ++l) {
        out.rank_trace[l] += rank::norm_1inf(rank::residual(enc.layer_inputs[l][b]));
      }
      const Matrix& z = enc.layer_inputs[out.layers][b];
      std::copy(z.values.begin(), z.values.end(),
                out.last_layer.values.begin() + static_cast<long>((start + b) * n * d));
    }
  }
  const double count = static_cast<double>(probe.size());
  for (auto& s : out.head_stats) {
    s.norm_distance /= count;
    s.kl_uniform /= count;
  }
  for (auto& m : out.head_kl) {
    for (double& v : m.values) v /= count;
  }
  for (double& v : out.rank_trace) v /= count;
  return out;
}

double representation_cka(const ModelDiagnostics& a, const ModelDiagnostics& b) {
  return linear_cka(a.last_layer, b.last_layer);
}

std::string cka_json(const std::vector<std::pair<std::string, double>>& entries) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [k, v] : entries) j[k] = v;
  return j.dump(2) + "\n";
}

std::size_t DirectionalReport::wins() const {
  return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [](const auto& e) {
    return e.kl_with_drop > e.kl_without_drop;
  }));
}

double DirectionalReport::mean_with() const {
  double t = 0.0;
  for (const auto& e : entries) t += e.kl_with_drop;
  return entries.empty() ? 0.0 : t / static_cast<double>(entries.size());
}

double DirectionalReport::mean_without() const {
  double t = 0.0;
  for (const auto& e : entries) t += e.kl_without_drop;
  return entries.empty() ? 0.0 : t / static_cast<double>(entries.size());
}

std::string DirectionalReport::to_json() const {
  nlohmann::ordered_json j;
  j["metric"] = "last_layer_kl_to_uniform";
  j["drop_ratio"] = drop_ratio;
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    per.push_back({{"seed", e.seed}, {"with_drop", e.kl_with_drop}, {"without_drop", e.kl_without_drop}});
  }
  j["per_seed"] = per;
  j["mean_with_drop"] = mean_with();
  j["mean_without_drop"] = mean_without();
  j["seeds_sharper_with_drop"] = wins();
  j["seeds"] = entries.size();
  j["majority_sharper_with_drop"] = 2 * wins() > entries.size();
  return j.dump(2) + "\n";
}

}  // namespace droppatch::diag
