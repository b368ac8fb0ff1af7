#pragma once

#include <cstddef>
#include <vector>

#include "droppatch/tensor.hpp"

namespace droppatch::optim {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction and no weight decay.
class Adam {
 public:
  explicit Adam(std::vector<nd::Tensor> params, AdamConfig cfg = {});

  /// Applies one update with `lr` using the current grads, then clears them.
  /// Parameters without a gradient are left untouched.
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  std::vector<nd::Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Single-cycle schedule: cosine warmup from max_lr/div_factor to max_lr over
/// the first pct_start of the steps, then cosine anneal to max_lr/final_div.
struct OneCycle {
  double max_lr = 1e-3;
  std::size_t total_steps = 1;
  double pct_start = 0.3;
  double div_factor = 25.0;
  double final_div = 25.0;

  double lr(std::size_t step) const;
};

}  // namespace droppatch::optim
