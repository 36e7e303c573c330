#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "ttrd3/tensor.hpp"

/// Minimal define-by-run reverse-mode differentiation over Tensor values.
///
/// Every op returns a Var whose node remembers its inputs and a closure that
/// pushes the node's gradient into the inputs' gradient buffers. Nodes whose
/// inputs need no gradient (or that are built under NoGradGuard) record
/// nothing, so inference does not retain the graph.
namespace ttrd3::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor::zeros_like(value);
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }
  [[nodiscard]] const Tensor& value() const { return node_->value; }
  [[nodiscard]] Tensor& mutable_value() { return node_->value; }
  [[nodiscard]] const Shape& shape() const { return node_->value.shape(); }
  [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Accumulated gradient; zeros when backward never reached this node.
  [[nodiscard]] const Tensor& grad() const { return node_->grad_buffer(); }
  void zero_grad();

  [[nodiscard]] const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Tensor t) { return Var(std::move(t), false); }
inline Var parameter(Tensor t) { return Var(std::move(t), true); }

/// Builds an op result. `backward` receives the result node; its grad holds
/// the upstream gradient and `inputs[i]->grad_buffer()` is where input
/// gradients accumulate.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

/// Runs reverse accumulation from a single-element root, seeding d(root)=1.
void backward(const Var& root);

[[nodiscard]] bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// True when input i of `self` wants a gradient.
inline bool wants_grad(const Node& self, std::size_t i) { return self.inputs[i] && self.inputs[i]->requires_grad; }

}  // namespace ttrd3::ag
