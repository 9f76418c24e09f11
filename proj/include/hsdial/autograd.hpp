#pragma once

// Minimal reverse-mode autodiff over dense double matrices.
//
// A Tape records operations in creation order; backward() walks them in
// reverse. Parameters are long-lived leaf nodes owned by the model, their
// gradients accumulate across backward() calls until cleared by the optimizer.
// A tape constructed with record=false computes identical values without
// storing closures, which is what inference uses.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace hsdial::ag {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::function<void()> backward;

  void accumulate(const Matrix& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
  void zero_grad() { grad.resize(0, 0); }
};

using Var = std::shared_ptr<Node>;

/// Creates a trainable leaf.
Var parameter(Matrix value);

class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }

  Var constant(Matrix value) const;

  // Registers an op result. `bw` is only retained when recording and at least
  // one input needs a gradient.
  Var make(Matrix value, bool inputs_need_grad, std::function<void(Node&)> bw);

  /// Seeds a 1x1 root with 1 and propagates.
  void backward(const Var& root);
  void backward(const Var& root, const Matrix& seed);

 private:
  bool record_;
  std::vector<Var> nodes_;
};

bool needs_grad(const Var& v);

// -- ops ---------------------------------------------------------------------

Var matmul(Tape& t, const Var& a, const Var& b);
/// a * b^T
Var matmul_nt(Tape& t, const Var& a, const Var& b);
Var add(Tape& t, const Var& a, const Var& b);
/// Adds a 1xN row to every row of a.
Var add_row(Tape& t, const Var& a, const Var& row);
Var scale(Tape& t, const Var& a, double s);
Var gelu(Tape& t, const Var& a);
Var layer_norm(Tape& t, const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Gathers rows of `table` by index.
Var embed(Tape& t, const Var& table, std::span<const int> ids);
/// Row slice [begin, begin+count).
Var rows(Tape& t, const Var& a, std::size_t begin, std::size_t count);
/// Multi-head scaled dot-product attention; q: Tq x d, k,v: Tk x d.
Var attention(Tape& t, const Var& q, const Var& k, const Var& v, int heads, bool causal);
/// Per-row log-softmax evaluated at `targets[r]`; returns a Tx1 column.
Var log_softmax_pick(Tape& t, const Var& logits, std::span<const int> targets);
Var sum(Tape& t, const Var& a);

// -- non-differentiable helpers ---------------------------------------------

/// Row-wise softmax.
Matrix softmax_rows(const Matrix& logits);
/// Row-wise log-softmax.
Matrix log_softmax_rows(const Matrix& logits);

}  // namespace hsdial::ag
