// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

namespace cilab {

using Shape = std::vector<std::size_t>;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major float64 array with an optional gradient slot.
///
/// Invariants: numel(shape) == data.size(); grad, when set, has the same
/// length as data.
struct Tensor {
  Shape shape;
  Eigen::VectorXd data;
  std::optional<Eigen::VectorXd> grad;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, Eigen::VectorXd values, bool needs_grad = false);

  static Tensor zeros(Shape s, bool needs_grad = false);
  static Tensor filled(Shape s, double value, bool needs_grad = false);
  static Tensor of(Shape s, std::initializer_list<double> values, bool needs_grad = false);

  std::size_t size() const { return static_cast<std::size_t>(data.size()); }
  std::size_t rank() const { return shape.size(); }
  double operator[](std::size_t i) const { return data[static_cast<Eigen::Index>(i)]; }
  double& operator[](std::size_t i) { return data[static_cast<Eigen::Index>(i)]; }

  /// Adds `g` into the gradient slot, allocating it on first use.
  void accumulate_grad(const Eigen::Ref<const Eigen::VectorXd>& g);
  void zero_grad() { grad.reset(); }
};

}  // namespace cilab
