#include "droppatch/optim.hpp"

#include <algorithm>
#include <cmath>

namespace droppatch::optim {

Adam::Adam(std::vector<nd::Tensor> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    nd::Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
    }
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (auto& p : params_) p.clear_grad();
}

namespace {

double cos_anneal(double start, double end, double pct) {
  return end + (start - end) / 2.0 * (std::cos(M_PI * pct) + 1.0);
}

}  // namespace

double OneCycle::lr(std::size_t step) const {
  const double initial = max_lr / div_factor;
  const double final_lr = max_lr / final_div;
  if (total_steps <= 1) return max_lr;
  const double last = static_cast<double>(total_steps - 1);
  // the peak is reached after floor(pct_start * total) warm-up steps
  const double warm_end =
      std::clamp(std::floor(pct_start * static_cast<double>(total_steps) + 1e-9), 1.0, last);
  const double s = std::min(static_cast<double>(step), last);
  if (s <= warm_end) return cos_anneal(initial, max_lr, s / warm_end);
  const double span = last - warm_end;
  return cos_anneal(max_lr, final_lr, span > 0.0 ? (s - warm_end) / span : 1.0);
}

}  // namespace droppatch::optim
