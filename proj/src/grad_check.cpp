#include "droppatch/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "droppatch/error.hpp"

namespace droppatch::nd {

GradCheckReport grad_check(const std::function<Tensor()>& loss, std::span<Tensor> leaves,
                           std::span<const std::string> names, double step, double tol) {
  for (Tensor& leaf : leaves) {
    if (!leaf.is_leaf() || !leaf.requires_grad()) {
      throw ContractError("grad_check: every probed tensor must be a requires_grad leaf");
    }
    leaf.clear_grad();
  }
  backward(loss());

  GradCheckReport report;
  for (std::size_t t = 0; t < leaves.size(); ++t) {
    Tensor& leaf = leaves[t];
    const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    auto values = leaf.mutable_data();
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = loss().item();
      values[i] = saved - step;
      const double down = loss().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      const double err = std::abs(analytic[i] - numeric) / denom;
      if (err > report.max_error || report.checked == 0) {
        report.max_error = err;
        report.worst_index = i;
        report.worst_input = t < names.size() ? names[t] : "input " + std::to_string(t);
      }
      ++report.checked;
    }
    leaf.clear_grad();
  }
  report.passed = report.max_error <= tol;
  return report;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double step,
                           double tol) {
  std::vector<Tensor> leaves{x};
  return grad_check([&] { return f(leaves[0]); }, leaves, {}, step, tol);
}

}  // namespace droppatch::nd
