#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "droppatch/tensor.hpp"

namespace droppatch::nd {

struct GradCheckReport {
  double max_error = 0.0;    // max over elements of |analytic - numeric| / max(1, |analytic|, |numeric|)
  std::size_t worst_index = 0;
  std::string worst_input;
  std::size_t checked = 0;
  bool passed = false;
};

/// Compares backward() against central differences for a scalar function of
/// one tensor. `x` must be a leaf; its values are restored afterwards.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                           double step = 1e-6, double tol = 1e-4);

/// Same check over several leaves that `loss` closes over (model parameters,
/// inputs, ...). Each call of `loss` must rebuild the graph from scratch.
GradCheckReport grad_check(const std::function<Tensor()>& loss, std::span<Tensor> leaves,
                           std::span<const std::string> names = {}, double step = 1e-6,
                           double tol = 1e-4);

}  // namespace droppatch::nd
