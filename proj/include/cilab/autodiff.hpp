// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cilab/tensor.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <unordered_map>
#include <vector>

namespace cilab {

class Graph;

/// Handle to a value recorded on a Graph. Cheap to copy; valid while the
/// graph is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t size() const { return value().size(); }
  /// Value of a single-element tensor.
  double item() const;
  /// Gradient of the last backward pass w.r.t. this value. Zero-length if the
  /// value does not require a gradient.
  const Eigen::VectorXd& grad() const;
  bool requires_grad() const;

  Graph* graph() const { return graph_; }
  std::size_t id() const { return id_; }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Ops append nodes in execution order, so the node list is
/// topologically sorted by construction; backward walks it once in reverse.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Eigen::VectorXd& out_grad)>;

  struct Node {
    const char* op;
    std::vector<std::size_t> inputs;
    std::size_t output;
    BackwardFn backward;  // empty when no input needs a gradient
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf owned by the graph. Its gradient is readable through Var::grad().
  Var input(Tensor t);
  /// Leaf referring to an external tensor, e.g. a network parameter. When
  /// `t.requires_grad`, backward accumulates into `t.grad`. The tensor must
  /// outlive the graph and stay unmodified until backward has run.
  Var param(Tensor& t);
  /// Read-only leaf referring to an external tensor; never receives gradient.
  Var view(const Tensor& t);

  /// Populates gradients of every value reachable from `loss`. Single use.
  void backward(Var loss);

  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t value_count() const { return values_.size(); }

  /// Smallest distance of any recorded non-smooth op from its kink (ReLU input
  /// magnitude, gap between the two largest entries of a pooling window;
  /// windows tied at exactly zero are skipped).
  double kink_margin() const { return kink_margin_; }
  void note_kink(double margin) {
    if (margin < kink_margin_) kink_margin_ = margin;
  }

  // Op-author interface.
  const Tensor& value(std::size_t id) const { return *values_[id]; }
  bool needs_grad(std::size_t id) const { return needs_grad_[id]; }
  const Eigen::VectorXd& grad(std::size_t id) const { return grads_[id]; }
  /// Adds into the gradient buffer of `id`; no-op if it needs none.
  void accumulate(std::size_t id, const Eigen::Ref<const Eigen::VectorXd>& g);
  Var record(const char* op, Tensor out, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(const char* op, Tensor out, std::span<const Var> inputs, BackwardFn fn);
  void check_owned(const Var& v) const;

 private:
  Var add_leaf(const Tensor* ptr, bool needs_grad, Tensor* grad_sink);

  std::deque<Tensor> storage_;
  std::vector<const Tensor*> values_;
  std::vector<bool> needs_grad_;
  std::vector<Tensor*> grad_sinks_;
  std::vector<Eigen::VectorXd> grads_;
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> bound_;
  double kink_margin_ = std::numeric_limits<double>::infinity();
  bool backward_done_ = false;
};

// ---- ops -----------------------------------------------------------------

/// [m x k] * [k x n] -> [m x n].
Var matmul(Var a, Var b);
/// Zero-padded 3x3 cross-correlation, stride 1: x [c_in,h,w], kernels
/// [c_out,c_in,3,3], bias [c_out] -> [c_out,h,w].
Var conv2d(Var x, Var kernels, Var bias);
/// 2x2 max pool with stride 2 over [c,h,w]; ties route the gradient to the
/// first maximal element in row-major window order.
Var maxpool2d(Var x);
Var relu(Var x);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product.
Var mul(Var a, Var b);
Var mul_scalar(Var x, double s);
Var add_scalar(Var x, double s);
Var reduce_sum(Var x);
Var dot(Var a, Var b);
/// x / ||x||_2; throws DegenerateInputError when ||x|| <= 1e-12.
Var l2_normalize(Var x);
Var reshape(Var x, Shape shape);
/// Contiguous sub-range of the flattened tensor, returned as rank-1.
Var slice(Var x, std::size_t offset, std::size_t length);
/// Concatenates flattened inputs into one rank-1 tensor.
Var concat(std::span<const Var> parts);
/// -sum_j target_j * log softmax(z)_j for a rank-1 z.
Var soft_cross_entropy(Var z, const Eigen::VectorXd& target);
/// Copy of the value without a gradient path.
Var detach(Var x);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var x, double s) { return mul_scalar(x, s); }
inline Var operator*(double s, Var x) { return mul_scalar(x, s); }
inline Var operator+(Var x, double s) { return add_scalar(x, s); }
inline Var operator-(Var x) { return mul_scalar(x, -1.0); }

/// Numerically stable softmax of a rank-1 vector.
Eigen::VectorXd softmax(const Eigen::VectorXd& z);

inline constexpr double kNormEpsilon = 1e-12;

}  // namespace cilab
