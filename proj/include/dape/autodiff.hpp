#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "dape/cost.hpp"
#include "dape/kernels.hpp"
#include "dape/tensor.hpp"

namespace dape {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode recording of primitive operations. One tape per forward pass;
/// not thread-safe. Also owns the CostMeter that forward ops report into.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable input; receives a gradient.
  Var leaf(Tensor value);
  /// Input that never receives a gradient.
  Var constant(Tensor value);
  /// Result of an op; differentiable iff any input is.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Tensor value, const std::vector<Var>& inputs, Backward backward);

  /// Accumulates d(root)/d(node) for every node; root must hold one element.
  void backward(Var root);

  /// Gradient of a node after backward(); zeros if it received none.
  Tensor grad(Var v) const;
  void accumulate(Var v, const Tensor& g);
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  CostMeter& cost() { return cost_; }
  const CostMeter& cost() const { return cost_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  std::deque<Node> nodes_;
  CostMeter cost_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

// Differentiable operations. Each forward pass reports its MACs to the tape's meter.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
Var mul(Var a, Var b);
/// Multiplies every element of `a` by the 1×1 value `s`.
Var mul_scalar(Var a, Var s);
/// Elementwise product with a constant (no gradient to `mask`).
Var mask_mul(Var a, const Tensor& mask);
/// a (m×n) plus a broadcast bias row (1×n or n).
Var add_row(Var a, Var bias);
Var relu(Var a);
Var exp(Var a);
Var row_softmax(Var a);
/// Softmax of scores + log(mask) per row; rows whose mask is all zero give zeros.
Var masked_row_softmax(Var scores, const Tensor& mask);
Var log_softmax(Var a);
Var group_mean(Var x, const IndexGroups& groups);
Var gather_rows(Var x, const std::vector<std::size_t>& rows);
/// Copy of `base` whose rows `rows[i]` are replaced by `values.row(i)`.
Var scatter_rows(Var base, const std::vector<std::size_t>& rows, Var values);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(Var x, std::size_t offset, std::size_t width);
Var concat_cols(const std::vector<Var>& parts);
/// Copies the 1×n row `x` into m rows.
Var broadcast_rows(Var x, std::size_t m);
Var reshape(Var x, Shape shape);
Var conv2d_local(Var x, std::size_t kernel_size, Var weights);
Var sum(Var x);
Var mean(Var x);
/// Column means: m×n -> 1×n.
Var mean_rows(Var x);
/// Divides each row by its L2 norm; zero rows stay zero.
Var l2_normalize_rows(Var x);
/// 1×k vector of the entries x(i, j) for each (i, j) in `at`.
Var pick(Var x, const std::vector<std::pair<std::size_t, std::size_t>>& at);

}  // namespace dape
