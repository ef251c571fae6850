#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "uniref/common.hpp"

namespace uniref::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

/// Reverse-mode autodiff over dense matrices. Nodes are recorded in creation order, so
/// backward() is a single reverse sweep. Not thread-safe; use one tape per worker.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value);
  Var variable(Mat value);

  /// Record an op result. `backward` is dropped when no input requires a gradient.
  Var push(Mat value, bool requires_grad, Backward backward);

  const Mat& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  /// Seed d(root)/d(root) = 1 for a 1x1 root and propagate.
  void backward(Var root);

  /// Gradient of the last backward() root with respect to v; zeros if unreached.
  Mat grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;  // stable references across push
};

inline const Mat& Var::value() const { return tape->value(id); }

Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
/// x * w + broadcast row bias
Var linear(Var x, Var w, Var bias);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// Add a 1 x cols row to every row of a.
Var add_row(Var a, Var row);
Var gelu(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var softmax_rows(Var x);
/// Multi-head softmax attention without masking; q, k, v are n x (heads*dh).
Var attention(Var q, Var k, Var v, int heads);
Var top_rows(Var a, Eigen::Index n);
Var concat_rows(const std::vector<Var>& parts);
/// Rows of `table` selected by ids (embedding lookup).
Var gather_rows(Var table, const std::vector<int>& ids);
Var sum(Var a);
Var mean_square(Var a);
Var sum_square(Var a);

double gelu_value(double x);

}  // namespace uniref::ad
