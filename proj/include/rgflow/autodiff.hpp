#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "rgflow/tensor.hpp"

// Tape-based reverse-mode differentiation over rank-2 tensors.
//
// A Var either lives on a Tape (it, or something it was computed from, was
// created with Tape::variable) or is a constant. Operations whose inputs are
// all constants produce constants and record nothing, so the same code path
// serves both training and plain evaluation.
namespace rgflow::ad {

class Tape;

struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows into it
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  Tape* tape = nullptr;
  std::size_t index = 0;  // execution order on the tape
  bool leaf = false;
};

class Var {
 public:
  Var() = default;
  static Var constant(Tensor value);

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->tape != nullptr; }
  bool valid() const { return node_ != nullptr; }
  Tape* tape() const { return node_ ? node_->tape : nullptr; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  friend class Tape;
  friend Var make_result(Tensor value, std::vector<Var> parents,
                         std::function<void(Node&)> backward);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable input. Rank-1 values are stored as a single row.
  Var variable(Tensor value);

  // Reverse sweep from a scalar output. Returns one gradient per input,
  // shaped like the input's value.
  std::vector<Tensor> gradient(const Var& output, std::span<const Var> inputs);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  friend Var make_result(Tensor value, std::vector<Var> parents,
                         std::function<void(Node&)> backward);
  std::vector<std::shared_ptr<Node>> nodes_;
};

// Builds an op result; records it if any parent is on a tape.
Var make_result(Tensor value, std::vector<Var> parents,
                std::function<void(Node&)> backward);

// Finite checks on every op result. On by default in debug builds.
void set_check_finite(bool on);
bool check_finite();

// Element-wise. Shapes must match, except that a 1x1 operand broadcasts.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var square(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);

Var matmul(const Var& a, const Var& b);     // a * b
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var transpose(const Var& a);
Var reshape(const Var& a, std::size_t rows, std::size_t cols);

// Row broadcasting: `r` is 1 x cols(a).
Var mul_row(const Var& a, const Var& r);
Var add_row(const Var& a, const Var& r);
Var broadcast_rows(const Var& r, std::size_t rows);
// Stacks `times` copies of `a` vertically.
Var tile_rows(const Var& a, std::size_t times);
// Repeats each row of `a` `times` times in place: row i lands in block i.
Var repeat_rows(const Var& a, std::size_t times);

Var sum(const Var& a);      // 1 x 1
Var mean(const Var& a);     // 1 x 1
Var row_sum(const Var& a);  // rows x 1
Var col(const Var& a, std::size_t j);
Var row(const Var& a, std::size_t i);
Var gather_cols(const Var& a, std::span<const std::size_t> idx);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);

// `t` stacks d blocks of `batch` rows, block j holding J e_j for each sample.
// stacked_trace returns sum_j t[j*batch + b, j]; stacked_sqnorm the squared
// Frobenius norm of each sample's J. Both are batch x 1.
Var stacked_trace(const Var& t, std::size_t batch);
Var stacked_sqnorm(const Var& t, std::size_t batch);

}  // namespace rgflow::ad
