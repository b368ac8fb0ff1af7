#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace droppatch::nd {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  bool is_leaf = true;
  bool backward_done = false;
  std::optional<std::vector<double>> grad;
  // Tape entry; both are released once backward() has run through this node.
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const std::vector<double>&)> backward_fn;
  const char* op = "leaf";
};

}  // namespace detail

/// Dense row-major tensor of doubles. The value is fixed at construction;
/// only the gradient buffer (and, for leaves, the storage an optimizer
/// updates in place) change afterwards.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;
  std::span<const double> data() const;
  double item() const;
  double at(std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();
  void clear_grad();

  /// Writable storage of a leaf tensor. Used by optimizers and by
  /// finite-difference probes; throws for tape intermediates.
  std::span<double> mutable_data();

  /// A new leaf holding a copy of this tensor's values.
  Tensor detach(bool requires_grad = false) const;

  const char* op_name() const;
  const std::shared_ptr<detail::Node>& node() const { return node_; }

  // Used by op implementations to attach a result to the tape.
  static Tensor make_result(Shape shape, std::vector<double> data,
                            std::vector<Tensor> inputs, const char* op,
                            std::function<void(const std::vector<double>&)> backward_fn);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Reverse sweep from a scalar loss. Populates grads of every requires_grad
/// leaf reachable from the loss (accumulating into existing buffers), then
/// drops the tape. Calling it twice on the same loss is an error.
void backward(const Tensor& loss);

/// Gradient buffer of `t`, zero-filled on first use. Only for op authors.
std::vector<double>& grad_buffer(const Tensor& t);

/// Suspends tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Thread-local floating point operation tally, bucketed by label. Matmuls
/// report 2*m*k*n into whatever bucket is active.
class FlopCounter {
 public:
  static void add(std::uint64_t flops);
  static void reset();
  static std::uint64_t get(const std::string& bucket);
  static std::uint64_t total();
  static const std::map<std::string, std::uint64_t>& buckets();
};

/// Routes FlopCounter::add into `bucket` while alive.
class FlopScope {
 public:
  explicit FlopScope(std::string bucket);
  ~FlopScope();
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  std::string previous_;
};

}  // namespace droppatch::nd
