#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "adlab/tensor.hpp"

namespace adlab {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Tensor& grad() const;
  bool requires_grad() const;
  std::size_t id() const noexcept { return id_; }
  Tape& tape() const noexcept { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Linear record of operations for reverse-mode differentiation.
///
/// Leaf gradients accumulate across backward() calls until zero_grad();
/// interior gradients are reset at the start of every backward(). A tape
/// and the Vars on it belong to one thread.
class Tape {
 public:
  using Backprop = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an interior node. `fn` is dropped when no parent needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> parents, Backprop fn);

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape backwards.
  void backward(Var loss);
  void zero_grad();

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const;
  Tensor& grad_mut(std::size_t id);
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    mutable Tensor grad;
    bool requires_grad = false;
    bool is_leaf = true;
    Backprop backprop;
  };

  std::vector<Node> nodes_;
};

// Differentiable operations. All operands must live on the same tape.

Var matmul(Var a, Var b);
/// x[B x in] * W^T + bias, with W stored [out x in] and bias [out].
Var linear(Var x, Var weight, Var bias);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var relu(Var a);
Var softmax(Var logits);
Var log_softmax(Var logits);
/// Elementwise log(max(a, kProbFloor)); zero gradient below the floor.
Var log_clamped(Var a);
Var sum(Var a);
Var mean(Var a);
/// [B x C] -> [B x 1]
Var row_sum(Var a);
/// Multiplies each row of a[B x C] by the matching entry of v[B x 1].
Var mul_col(Var a, Var v);
/// [B x d], [B x d] -> [B x 1]
Var row_dot(Var a, Var b);
/// Per-row KL(p || softmax(logits)) with log(max(p, floor)) on the left. [B x 1]
Var kl_rows(Var p, Var logits);
/// Per-row -sum target * log_softmax(logits). [B x 1]
Var cross_entropy_rows(Var target, Var logits);
/// (1/B) sum_i w_i v_i for v[B x 1]; weights are constants.
Var weighted_mean(Var v, std::span<const double> weights);
/// Identity whose backward pass invokes `on_backward` once before passing the gradient through.
Var backward_hook(Var a, std::function<void()> on_backward);

}  // namespace adlab
