#include "modeforge/tensor.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_set>

namespace modeforge {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_sequence = 0;

std::shared_ptr<Node> new_node(Shape shape, Eigen::ArrayXd value) {
  if (value.size() != shape_numel(shape)) {
    throw std::invalid_argument("value count " + std::to_string(value.size()) +
                                " does not match shape " + shape_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->order = ++g_sequence;
  return node;
}

}  // namespace

Eigen::Index shape_numel(const Shape& shape) {
  Eigen::Index n = 1;
  for (Eigen::Index d : shape) {
    if (d < 1) throw std::invalid_argument("shape dimensions must be positive: " + shape_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

void Node::accumulate(const Eigen::ArrayXd& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const Eigen::Index n = shape_numel(shape);
  Tensor t(new_node(std::move(shape), Eigen::ArrayXd::Constant(n, value)));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::from(Shape shape, Eigen::ArrayXd values, bool requires_grad) {
  Tensor t(new_node(std::move(shape), std::move(values)));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return full({}, value, requires_grad);
}

Eigen::Index Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::out_of_range("axis out of range for " + shape_string(shape()));
  return node_->shape[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() needs a single-element tensor");
  return node_->value[0];
}

double Tensor::at(std::initializer_list<Eigen::Index> index) const {
  if (static_cast<int>(index.size()) != rank()) throw std::invalid_argument("index rank mismatch");
  Eigen::Index flat = 0;
  std::size_t a = 0;
  for (Eigen::Index i : index) {
    const Eigen::Index d = node_->shape[a++];
    if (i < 0 || i >= d) throw std::out_of_range("index out of range");
    flat = flat * d + i;
  }
  return node_->value[flat];
}

Tensor make_result(const char* op, Shape shape, Eigen::ArrayXd value, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward) {
  auto node = new_node(std::move(shape), std::move(value));
  node->op = op;
  if (!node->value.allFinite()) {
    throw std::domain_error(std::string("non-finite values produced by ") + op);
  }
  if (g_grad_enabled) {
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& p) { return p.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.node());
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

std::vector<Node*> tape(const Tensor& root) {
  std::vector<Node*> nodes;
  if (!root.defined() || !root.requires_grad()) return nodes;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.node().get()};
  seen.insert(stack.back());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(nodes.begin(), nodes.end(), [](const Node* a, const Node* b) { return a->order > b->order; });
  return nodes;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward needs a scalar loss");
  }
  if (!loss.requires_grad()) throw std::invalid_argument("loss does not depend on any parameter");
  const std::vector<Node*> order = tape(loss);
  for (Node* n : order) {
    if (!n->is_leaf()) n->grad.resize(0);
  }
  loss.node()->accumulate(Eigen::ArrayXd::Ones(1));
  for (Node* n : order) {
    if (n->is_leaf() || n->grad.size() == 0) continue;
    n->backward(*n);
    n->grad.resize(0);
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void check_finite(const Tensor& t, const char* where) {
  if (!t.value().allFinite()) throw std::domain_error(std::string("non-finite values in ") + where);
}

}  // namespace modeforge
