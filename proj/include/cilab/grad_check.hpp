// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cilab/autodiff.hpp"

#include <functional>
#include <span>

namespace cilab {

struct GradCheckResult {
  double max_relative_error = 0.0;
  /// Kink margin of the unperturbed forward pass (see Graph::kink_margin).
  double kink_margin = 0.0;
};

/// |a - b| / max(1e-8, |a| + |b|)
double relative_error(double analytic, double numeric);

/// Compares reverse-mode gradients of scalar `f` at `x` with central
/// differences of step `h`, coordinate by coordinate.
GradCheckResult grad_check_detailed(const std::function<Var(Graph&, Var)>& f, const Tensor& x,
                                    double h = 1e-5);
double grad_check(const std::function<Var(Graph&, Var)>& f, const Tensor& x, double h = 1e-5);

/// Same check over externally owned tensors (e.g. network parameters). `f`
/// must bind them with Graph::param. Each tensor is perturbed in place and
/// restored bit-exactly afterwards.
GradCheckResult grad_check_detailed(std::span<Tensor* const> params, const std::function<Var(Graph&)>& f,
                                    double h = 1e-5);

}  // namespace cilab
