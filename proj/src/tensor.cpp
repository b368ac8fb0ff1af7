#include "droppatch/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "droppatch/error.hpp"
#include "droppatch/random.hpp"

namespace droppatch {

double standard_normal(Rng& rng) {
  // Box-Muller; 1 - u keeps the log argument away from zero.
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::vector<std::size_t> sample_without_replacement(std::vector<std::size_t> pool, std::size_t k,
                                                    Rng& rng) {
  if (k > pool.size()) {
    throw ContractError("sample_without_replacement: k exceeds pool size");
  }
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + uniform_index(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

}  // namespace droppatch

namespace droppatch::nd {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::string g_flop_bucket = "other";
thread_local std::map<std::string, std::uint64_t> g_flops;

}  // namespace

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(numel_of(shape), value);
  return from(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel_of(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " needs " +
                         std::to_string(numel_of(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::size(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_ && node_->is_leaf; }
bool Tensor::has_grad() const { return node_ && node_->grad.has_value(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return *node_->grad;
}

void Tensor::zero_grad() {
  if (node_ && node_->grad) std::fill(node_->grad->begin(), node_->grad->end(), 0.0);
}

void Tensor::clear_grad() {
  if (node_) node_->grad.reset();
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw ContractError("use of undefined tensor");
  if (!node_->is_leaf) throw ContractError("mutable_data() on a non-leaf tensor");
  return node_->data;
}

Tensor Tensor::detach(bool requires_grad) const {
  return from(shape(), node_->data, requires_grad);
}

const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

Tensor Tensor::make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                           const char* op,
                           std::function<void(const std::vector<double>&)> backward_fn) {
  Tensor out = from(std::move(shape), std::move(data), false);
  out.node_->op = op;
  if (!g_grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->is_leaf = false;
  out.node_->parents.reserve(inputs.size());
  for (const Tensor& t : inputs) out.node_->parents.push_back(t.node_);
  out.node_->backward_fn = std::move(backward_fn);
  return out;
}

std::vector<double>& grad_buffer(const Tensor& t) {
  auto& node = *t.node();
  if (!node.grad) node.grad.emplace(node.data.size(), 0.0);
  return *node.grad;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward() on undefined tensor");
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  auto root = loss.node();
  if (root->backward_done) {
    throw ContractError("backward() already ran for this loss; the tape has been released");
  }
  if (!root->requires_grad) {
    throw ContractError("backward() on a loss that is not on the tape");
  }

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  // `order` owns its nodes: releasing a node's parents below must not free
  // the ones still waiting for their gradient.
  std::vector<std::shared_ptr<detail::Node>> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack{{root, 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      std::shared_ptr<detail::Node> parent = node->parents[next++];
      if (parent->requires_grad && seen.insert(parent.get()).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (const auto& node : order) {
    if (node->is_leaf && !node->grad) node->grad.emplace(node->data.size(), 0.0);
  }
  root->grad.emplace(1, 1.0);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = it->get();
    if (node->is_leaf) continue;
    if (node->grad && node->backward_fn) node->backward_fn(*node->grad);
    node->backward_fn = nullptr;
    node->parents.clear();
    if (node != root.get()) node->grad.reset();
  }
  root->backward_done = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void FlopCounter::add(std::uint64_t flops) { g_flops[g_flop_bucket] += flops; }
void FlopCounter::reset() { g_flops.clear(); }

std::uint64_t FlopCounter::get(const std::string& bucket) {
  auto it = g_flops.find(bucket);
  return it == g_flops.end() ? 0 : it->second;
}

std::uint64_t FlopCounter::total() {
  std::uint64_t sum = 0;
  for (const auto& [_, v] : g_flops) sum += v;
  return sum;
}

const std::map<std::string, std::uint64_t>& FlopCounter::buckets() { return g_flops; }

FlopScope::FlopScope(std::string bucket) : previous_(std::move(g_flop_bucket)) {
  g_flop_bucket = std::move(bucket);
}
FlopScope::~FlopScope() { g_flop_bucket = std::move(previous_); }

}  // namespace droppatch::nd
