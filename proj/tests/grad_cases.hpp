#pragma once

#include <functional>
#include <vector>

#include "droppatch/ops.hpp"
#include "test_util.hpp"

namespace testutil {

using droppatch::Rng;
using droppatch::nd::Tensor;
namespace nd = droppatch::nd;

using GradFn = std::function<Tensor(const Tensor&)>;

// One scalar function per differentiable op; `make` draws the fixed operands.
struct GradCase {
  const char* name;
  nd::Shape shape;
  std::function<GradFn(Rng&)> make;
};

inline std::vector<GradCase> grad_cases() {
  using F = GradFn;
  return {
      {"add_broadcast", {3, 4}, [](Rng& r) { Tensor b = random_tensor({4}, r, false);
         return F([b](const Tensor& x) { return nd::sum(nd::mul(nd::add(x, b), nd::add(x, b))); }); }},
      {"sub", {3, 4}, [](Rng& r) { Tensor b = random_tensor({3, 4}, r, false);
         return F([b](const Tensor& x) { return nd::sum(nd::mul(nd::sub(b, x), x)); }); }},
      {"mul", {2, 5}, [](Rng& r) { Tensor b = random_tensor({2, 5}, r, false);
         return F([b](const Tensor& x) { return nd::sum(nd::mul(nd::mul(x, b), x)); }); }},
      {"scale", {4}, [](Rng&) { return F([](const Tensor& x) { return nd::sum(nd::mul(nd::scale(x, -1.7), x)); }); }},
      {"matmul_shared", {2, 3, 4}, [](Rng& r) { Tensor b = random_tensor({4, 2}, r, false);
         return F([b](const Tensor& x) { auto y = nd::matmul(x, b); return nd::sum(nd::mul(y, y)); }); }},
      {"matmul_batched", {2, 3, 4}, [](Rng& r) { Tensor b = random_tensor({2, 4, 3}, r, false);
         return F([b](const Tensor& x) { auto y = nd::matmul(x, b); return nd::sum(nd::mul(y, y)); }); }},
      {"matmul_rhs", {4, 3}, [](Rng& r) { Tensor a = random_tensor({2, 5, 4}, r, false);
         return F([a](const Tensor& x) { auto y = nd::matmul(a, x); return nd::sum(nd::mul(y, y)); }); }},
      {"transpose", {3, 4}, [](Rng& r) { Tensor b = random_tensor({4, 3}, r, false);
         return F([b](const Tensor& x) { return nd::sum(nd::mul(nd::transpose_last2(x), b)); }); }},
      {"permute", {2, 3, 4}, [](Rng& r) { Tensor b = random_tensor({4, 2, 3}, r, false);
         return F([b](const Tensor& x) { return nd::sum(nd::mul(nd::permute(x, {2, 0, 1}), b)); }); }},
      {"reshape", {2, 6}, [](Rng& r) { Tensor b = random_tensor({3, 4}, r, false);
         return F([b](const Tensor& x) { auto y = nd::reshape(x, {3, 4}); return nd::sum(nd::mul(nd::mul(y, y), b)); }); }},
      {"softmax", {3, 5}, [](Rng& r) { Tensor b = random_tensor({3, 5}, r, false);
         return F([b](const Tensor& x) { return nd::sum(nd::mul(nd::softmax_lastdim(x), b)); }); }},
      {"layer_norm_x", {3, 6}, [](Rng& r) {
         Tensor g = random_tensor({6}, r, false), bb = random_tensor({6}, r, false),
                w = random_tensor({3, 6}, r, false);
         return F([=](const Tensor& x) { return nd::sum(nd::mul(nd::layer_norm(x, g, bb), w)); }); }},
      {"layer_norm_gain", {6}, [](Rng& r) {
         Tensor x = random_tensor({3, 6}, r, false), bb = random_tensor({6}, r, false),
                w = random_tensor({3, 6}, r, false);
         return F([=](const Tensor& g) { return nd::sum(nd::mul(nd::layer_norm(x, g, bb), w)); }); }},
      {"layer_norm_bias", {6}, [](Rng& r) {
         Tensor x = random_tensor({3, 6}, r, false), g = random_tensor({6}, r, false),
                w = random_tensor({3, 6}, r, false);
         return F([=](const Tensor& b) { return nd::sum(nd::mul(nd::layer_norm(x, g, b), w)); }); }},
      {"gelu", {10}, [](Rng&) { return F([](const Tensor& x) { auto y = nd::gelu(x); return nd::sum(nd::mul(y, y)); }); }},
      {"mean", {3, 3}, [](Rng&) { return F([](const Tensor& x) { return nd::mean(nd::mul(x, x)); }); }},
      {"mse_selector", {4, 3}, [](Rng& r) {
         Tensor t = random_tensor({4, 3}, r, false);
         std::vector<std::size_t> sel = {0, 4, 5, 11};
         return F([=](const Tensor& x) { return nd::mse(x, t, sel); }); }},
      {"mse_all", {4, 3}, [](Rng& r) { Tensor t = random_tensor({4, 3}, r, false);
         return F([=](const Tensor& x) { return nd::mse(x, t); }); }},
      {"gather_rows", {5, 3}, [](Rng& r) {
         Tensor w = random_tensor({4, 3}, r, false);
         std::vector<std::size_t> idx = {4, 0, 2, 0};
         return F([=](const Tensor& x) { return nd::sum(nd::mul(nd::gather_rows(x, idx), w)); }); }},
      {"dropout", {4, 4}, [](Rng& r) {
         const std::uint64_t s = r();
         return F([s](const Tensor& x) { Rng d(s); auto y = nd::dropout(x, 0.3, d); return nd::sum(nd::mul(y, y)); }); }},
      {"gelu_matmul", {2, 4}, [](Rng& r) { Tensor w = random_tensor({4, 3}, r, false);
         return F([w](const Tensor& x) { return nd::sum(nd::gelu(nd::matmul(x, w))); }); }},
  };
}

}  // namespace testutil
