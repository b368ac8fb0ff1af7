#include "droppatch/ops.hpp"

#include <algorithm>
#include <cmath>

#include "droppatch/error.hpp"

namespace droppatch::nd {

namespace {

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Flat input offsets for every output element of a broadcast.
std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    const std::size_t axis = i + (rank - in.size());
    stride[axis] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  const std::size_t n = numel_of(out);
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    index[flat] = offset;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++counter[axis];
      offset += stride[axis];
      if (counter[axis] < out[axis]) break;
      offset -= stride[axis] * counter[axis];
      counter[axis] = 0;
    }
  }
  return index;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<long>(small.size()));
}

enum class BinOp { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  const std::size_t n = numel_of(out_shape);
  auto av = a.data();
  auto bv = b.data();

  // Index maps; empty means "identity" (same shape) for the fast path.
  std::vector<std::size_t> ia, ib;
  const bool a_full = a.shape() == out_shape;
  const bool b_full = b.shape() == out_shape;
  const bool b_suffix = !b_full && a_full && is_suffix(b.shape(), out_shape);
  if (!a_full) ia = broadcast_index(a.shape(), out_shape);
  if (!b_full && !b_suffix) ib = broadcast_index(b.shape(), out_shape);
  const std::size_t nb = b.numel();

  auto a_at = [&](std::size_t i) { return a_full ? i : ia[i]; };
  auto b_at = [&](std::size_t i) { return b_full ? i : (b_suffix ? i % nb : ib[i]); };

  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[a_at(i)];
    const double y = bv[b_at(i)];
    switch (op) {
      case BinOp::kAdd: out[i] = x + y; break;
      case BinOp::kSub: out[i] = x - y; break;
      case BinOp::kMul: out[i] = x * y; break;
    }
  }

  return Tensor::make_result(
      out_shape, std::move(out), {a, b}, name,
      [a, b, op, n, a_full, b_full, b_suffix, nb, ia = std::move(ia),
       ib = std::move(ib)](const std::vector<double>& g) {
        auto a_at = [&](std::size_t i) { return a_full ? i : ia[i]; };
        auto b_at = [&](std::size_t i) { return b_full ? i : (b_suffix ? i % nb : ib[i]); };
        if (a.requires_grad()) {
          auto& ga = grad_buffer(a);
          auto bv = b.data();
          for (std::size_t i = 0; i < n; ++i) {
            ga[a_at(i)] += op == BinOp::kMul ? g[i] * bv[b_at(i)] : g[i];
          }
        }
        if (b.requires_grad()) {
          auto& gb = grad_buffer(b);
          auto av = a.data();
          for (std::size_t i = 0; i < n; ++i) {
            double v = g[i];
            if (op == BinOp::kSub) v = -v;
            if (op == BinOp::kMul) v *= av[a_at(i)];
            gb[b_at(i)] += v;
          }
        }
      });
}

// C[m x n] += A[m x k] * B[k x n]
void gemm_acc(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    const double* arow = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
    }
  }
}

// dA[m x k] += G[m x n] * B^T
void gemm_grad_a(const double* G, const double* B, double* dA, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* g = G + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = B + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += g[j] * brow[j];
      dA[i * k + p] += acc;
    }
  }
}

// dB[k x n] += A^T * G
void gemm_grad_b(const double* A, const double* G, double* dB, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* g = G + i * n;
    const double* arow = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* d = dB + p * n;
      for (std::size_t j = 0; j < n; ++j) d[j] += av * g[j];
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kMul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
  auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * factor;
  return Tensor::make_result(a.shape(), std::move(out), {a}, "scale",
                             [a, factor](const std::vector<double>& g) {
                               auto& ga = grad_buffer(a);
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
                             });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  auto mismatch = [&]() {
    return DimensionError("matmul: incompatible shapes " + shape_str(as) + " and " +
                          shape_str(bs));
  };
  if (as.size() < 2 || bs.size() < 2) throw mismatch();
  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as.back();
  if (bs[bs.size() - 2] != k) throw mismatch();
  const std::size_t n = bs.back();

  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);
  const std::size_t batch = numel_of(Shape(as.begin(), as.end() - 2));
  const bool shared_b = bs.size() == 2;
  if (!shared_b && !std::equal(as.begin(), as.end() - 2, bs.begin(), bs.end() - 2)) {
    throw mismatch();
  }

  std::vector<double> out(batch * m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  if (shared_b) {
    gemm_acc(A, B, out.data(), batch * m, k, n);
  } else {
    for (std::size_t t = 0; t < batch; ++t) {
      gemm_acc(A + t * m * k, B + t * k * n, out.data() + t * m * n, m, k, n);
    }
  }
  FlopCounter::add(2ULL * batch * m * k * n);

  return Tensor::make_result(
      std::move(out_shape), std::move(out), {a, b}, "matmul",
      [a, b, batch, m, k, n, shared_b](const std::vector<double>& g) {
        const double* A = a.data().data();
        const double* B = b.data().data();
        const double* G = g.data();
        if (a.requires_grad()) {
          double* dA = grad_buffer(a).data();
          if (shared_b) {
            gemm_grad_a(G, B, dA, batch * m, k, n);
          } else {
            for (std::size_t t = 0; t < batch; ++t) {
              gemm_grad_a(G + t * m * n, B + t * k * n, dA + t * m * k, m, k, n);
            }
          }
        }
        if (b.requires_grad()) {
          double* dB = grad_buffer(b).data();
          if (shared_b) {
            gemm_grad_b(A, G, dB, batch * m, k, n);
          } else {
            for (std::size_t t = 0; t < batch; ++t) {
              gemm_grad_b(A + t * m * k, G + t * m * n, dB + t * k * n, m, k, n);
            }
          }
        }
      });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const Shape& in = a.shape();
  const std::size_t rank = in.size();
  if (axes.size() != rank) {
    throw DimensionError("permute: " + std::to_string(axes.size()) + " axes for tensor " +
                         shape_str(in));
  }
  std::vector<bool> used(rank, false);
  for (std::size_t ax : axes) {
    if (ax >= rank || used[ax]) throw DimensionError("permute: invalid axis order");
    used[ax] = true;
  }
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out_shape(rank);
  std::vector<std::size_t> stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in[axes[i]];
    stride[i] = in_stride[axes[i]];
  }
  // source offset for every output element
  const std::size_t n = a.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    src[flat] = offset;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++counter[axis];
      offset += stride[axis];
      if (counter[axis] < out_shape[axis]) break;
      offset -= stride[axis] * counter[axis];
      counter[axis] = 0;
    }
  }
  auto av = a.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = av[src[i]];
  return Tensor::make_result(std::move(out_shape), std::move(out), {a}, "permute",
                             [a, src = std::move(src)](const std::vector<double>& g) {
                               auto& ga = grad_buffer(a);
                               for (std::size_t i = 0; i < g.size(); ++i) ga[src[i]] += g[i];
                             });
}

Tensor transpose_last2(const Tensor& a) {
  const std::size_t rank = a.dim();
  if (rank < 2) throw DimensionError("transpose_last2 needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> axes(rank);
  for (std::size_t i = 0; i < rank; ++i) axes[i] = i;
  std::swap(axes[rank - 1], axes[rank - 2]);
  return permute(a, axes);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {a}, "reshape",
                             [a](const std::vector<double>& g) {
                               auto& ga = grad_buffer(a);
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                             });
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.dim() == 0 || x.shape().back() == 0) {
    throw DimensionError("softmax_lastdim: empty last axis in " + shape_str(x.shape()));
  }
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.numel() / cols;
  auto xv = x.data();
  std::vector<double> y(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double* out = y.data() + r * cols;
    double mx = in[0];
    for (std::size_t j = 0; j < cols; ++j) {
      if (!std::isfinite(in[j])) throw NumericError("softmax_lastdim: non-finite input");
      mx = std::max(mx, in[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      out[j] = std::exp(in[j] - mx);
      z += out[j];
    }
    for (std::size_t j = 0; j < cols; ++j) out[j] /= z;
  }
  FlopCounter::add(3ULL * xv.size());
  auto ydata = y;
  return Tensor::make_result(
      x.shape(), std::move(y), {x}, "softmax",
      [x, rows, cols, ydata = std::move(ydata)](const std::vector<double>& g) {
        auto& gx = grad_buffer(x);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* yr = ydata.data() + r * cols;
          const double* gr = g.data() + r * cols;
          double dot = 0.0;
          for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
          for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += yr[j] * (gr[j] - dot);
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.dim() == 0 || x.shape().back() == 0) {
    throw DimensionError("layer_norm: zero-length normalized extent in " + shape_str(x.shape()));
  }
  const std::size_t cols = x.shape().back();
  if (gain.shape() != Shape{cols} || bias.shape() != Shape{cols}) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " do not match normalized extent " +
                         std::to_string(cols));
  }
  const std::size_t rows = x.numel() / cols;
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(rows);
  std::vector<double> y(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double mu = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mu += in[j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < cols; ++j) {
      const double h = (in[j] - mu) * is;
      xhat[r * cols + j] = h;
      y[r * cols + j] = gv[j] * h + bv[j];
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(y), {x, gain, bias}, "layer_norm",
      [x, gain, bias, rows, cols, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](const std::vector<double>& g) {
        auto gv = gain.data();
        if (gain.requires_grad() || bias.requires_grad()) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < cols; ++j) {
              const std::size_t i = r * cols + j;
              if (gain.requires_grad()) grad_buffer(gain)[j] += g[i] * xhat[i];
              if (bias.requires_grad()) grad_buffer(bias)[j] += g[i];
            }
          }
        }
        if (!x.requires_grad()) return;
        auto& gx = grad_buffer(x);
        const double inv_n = 1.0 / static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_d = 0.0;
          double mean_dx = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            const std::size_t i = r * cols + j;
            const double d = g[i] * gv[j];
            mean_d += d;
            mean_dx += d * xhat[i];
          }
          mean_d *= inv_n;
          mean_dx *= inv_n;
          for (std::size_t j = 0; j < cols; ++j) {
            const std::size_t i = r * cols + j;
            const double d = g[i] * gv[j];
            gx[i] += inv_std[r] * (d - mean_d - xhat[i] * mean_dx);
          }
        }
      });
}

Tensor gelu(const Tensor& x) {
  auto xv = x.data();
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    y[i] = xv[i] * 0.5 * (1.0 + std::erf(xv[i] * M_SQRT1_2));
  }
  return Tensor::make_result(x.shape(), std::move(y), {x}, "gelu",
                             [x](const std::vector<double>& g) {
                               auto& gx = grad_buffer(x);
                               auto xv = x.data();
                               const double inv_sqrt_2pi = 0.5 * M_2_SQRTPI * M_SQRT1_2;
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 const double v = xv[i];
                                 const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
                                 const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                                 gx[i] += g[i] * (cdf + v * pdf);
                               }
                             });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make_result({}, {s}, {x}, "sum", [x](const std::vector<double>& g) {
    auto& gx = grad_buffer(x);
    for (double& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mse(const Tensor& pred, const Tensor& target, std::span<const std::size_t> selector) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
  }
  if (selector.empty()) throw ContractError("mse: empty selector, loss undefined");
  const std::size_t n = pred.numel();
  for (std::size_t idx : selector) {
    if (idx >= n) {
      throw DimensionError("mse: selector index " + std::to_string(idx) + " out of range " +
                           std::to_string(n));
    }
  }
  auto pv = pred.data();
  auto tv = target.data();
  double acc = 0.0;
  for (std::size_t idx : selector) {
    const double d = pv[idx] - tv[idx];
    acc += d * d;
  }
  const double inv = 1.0 / static_cast<double>(selector.size());
  std::vector<std::size_t> sel(selector.begin(), selector.end());
  return Tensor::make_result({}, {acc * inv}, {pred, target}, "mse",
                             [pred, target, inv, sel = std::move(sel)](const std::vector<double>& g) {
                               auto pv = pred.data();
                               auto tv = target.data();
                               for (std::size_t idx : sel) {
                                 const double d = 2.0 * inv * g[0] * (pv[idx] - tv[idx]);
                                 if (pred.requires_grad()) grad_buffer(pred)[idx] += d;
                                 if (target.requires_grad()) grad_buffer(target)[idx] -= d;
                               }
                             });
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  std::vector<std::size_t> all(pred.numel());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return mse(pred, target, all);
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
  if (x.dim() != 2) throw DimensionError("gather_rows needs a 2-D tensor, got " + shape_str(x.shape()));
  const std::size_t rows = x.size(0);
  const std::size_t cols = x.size(1);
  auto xv = x.data();
  std::vector<double> out(indices.size() * cols);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows) {
      throw DimensionError("gather_rows: row " + std::to_string(indices[r]) + " out of range " +
                           std::to_string(rows));
    }
    std::copy_n(xv.data() + indices[r] * cols, cols, out.data() + r * cols);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return Tensor::make_result({indices.size(), cols}, std::move(out), {x}, "gather_rows",
                             [x, cols, idx = std::move(idx)](const std::vector<double>& g) {
                               auto& gx = grad_buffer(x);
                               for (std::size_t r = 0; r < idx.size(); ++r) {
                                 for (std::size_t c = 0; c < cols; ++c) {
                                   gx[idx[r] * cols + c] += g[r * cols + c];
                                 }
                               }
                             });
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  std::vector<double> keep(x.numel());
  const double s = 1.0 / (1.0 - p);
  for (double& k : keep) k = uniform01(rng) < p ? 0.0 : s;
  return mul(x, Tensor::from(x.shape(), std::move(keep)));
}

}  // namespace droppatch::nd
