#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace modeforge {

using Shape = std::vector<Eigen::Index>;

Eigen::Index shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Graph node. Values are stored row-major (last axis fastest).
struct Node {
  Shape shape;
  Eigen::ArrayXd value;
  Eigen::ArrayXd grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::uint64_t order = 0;  // creation sequence; parents always precede children
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty(); }
  /// Adds g into grad, allocating on first use.
  void accumulate(const Eigen::ArrayXd& g);
};

/// Shared handle to a graph node. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, Eigen::ArrayXd values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Eigen::Index dim(int axis) const;
  Eigen::Index numel() const { return node_->value.size(); }

  Eigen::ArrayXd& value() { return node_->value; }
  const Eigen::ArrayXd& value() const { return node_->value; }
  const Eigen::ArrayXd& grad() const { return node_->grad; }
  Eigen::ArrayXd& grad() { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.resize(0); }

  double item() const;
  double at(std::initializer_list<Eigen::Index> index) const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Creates the output node of an op. The node records its parents and backward
/// closure only when gradients are enabled and some parent needs a gradient.
Tensor make_result(const char* op, Shape shape, Eigen::ArrayXd value,
                   std::vector<Tensor> parents, std::function<void(Node&)> backward);

/// Nodes reachable from `root` that take part in backward, in reverse
/// execution order (root first).
std::vector<Node*> tape(const Tensor& root);

/// Reverse-mode pass from a scalar. Leaves accumulate into grad; gradients of
/// intermediate nodes are released afterwards.
void backward(const Tensor& loss);

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Throws std::domain_error if any value is NaN or infinite.
void check_finite(const Tensor& t, const char* where);

}  // namespace modeforge
