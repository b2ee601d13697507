// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cilab/tensor.hpp"

#include "cilab/error.hpp"

#include <sstream>

namespace cilab {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, Eigen::VectorXd values, bool needs_grad)
    : shape(std::move(s)), data(std::move(values)), requires_grad(needs_grad) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
  if (numel(shape) != size())
    throw DimensionError("shape " + to_string(shape) + " does not match " + std::to_string(size()) +
                         " values");
}

Tensor Tensor::zeros(Shape s, bool needs_grad) {
  auto n = static_cast<Eigen::Index>(numel(s));
  return Tensor(std::move(s), Eigen::VectorXd::Zero(n), needs_grad);
}

Tensor Tensor::filled(Shape s, double value, bool needs_grad) {
  auto n = static_cast<Eigen::Index>(numel(s));
  return Tensor(std::move(s), Eigen::VectorXd::Constant(n, value), needs_grad);
}

Tensor Tensor::of(Shape s, std::initializer_list<double> values, bool needs_grad) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double x : values) v[i++] = x;
  return Tensor(std::move(s), std::move(v), needs_grad);
}

void Tensor::accumulate_grad(const Eigen::Ref<const Eigen::VectorXd>& g) {
  if (g.size() != data.size()) throw DimensionError("gradient length mismatch");
  if (grad)
    *grad += g;
  else
    grad = g;
}

}  // namespace cilab
