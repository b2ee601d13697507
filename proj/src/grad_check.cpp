// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cilab/grad_check.hpp"

#include "cilab/error.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace cilab {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

GradCheckResult grad_check_detailed(const std::function<Var(Graph&, Var)>& f, const Tensor& x, double h) {
  GradCheckResult result;
  Eigen::VectorXd analytic;
  {
    Graph g;
    Tensor xt(x.shape, x.data, true);
    Var xv = g.input(std::move(xt));
    Var y = f(g, xv);
    g.backward(y);
    analytic = xv.grad();
    result.kink_margin = g.kink_margin();
  }
  auto eval = [&](const Eigen::VectorXd& point) {
    Graph g;
    Var y = f(g, g.input(Tensor(x.shape, point)));
    return y.item();
  };
  Eigen::VectorXd point = x.data;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    const double orig = point[i];
    point[i] = orig + h;
    const double up = eval(point);
    point[i] = orig - h;
    const double down = eval(point);
    point[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    result.max_relative_error = std::max(result.max_relative_error, relative_error(analytic[i], numeric));
  }
  return result;
}

double grad_check(const std::function<Var(Graph&, Var)>& f, const Tensor& x, double h) {
  return grad_check_detailed(f, x, h).max_relative_error;
}

GradCheckResult grad_check_detailed(std::span<Tensor* const> params, const std::function<Var(Graph&)>& f,
                                    double h) {
  GradCheckResult result;
  std::vector<std::optional<Eigen::VectorXd>> saved_grads;
  for (auto* p : params) {
    if (!p->requires_grad) throw ContractError("grad_check over a tensor that does not require grad");
    saved_grads.push_back(std::move(p->grad));
    p->grad.reset();
  }
  {
    Graph g;
    Var y = f(g);
    g.backward(y);
    result.kink_margin = g.kink_margin();
  }
  std::vector<Eigen::VectorXd> analytic;
  for (auto* p : params) {
    analytic.push_back(p->grad ? *p->grad : Eigen::VectorXd::Zero(p->data.size()));
    p->grad.reset();
  }
  auto eval = [&] {
    Graph g;
    return f(g).item();
  };
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& data = params[k]->data;
    for (Eigen::Index i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double up = eval();
      data[i] = orig - h;
      const double down = eval();
      data[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      result.max_relative_error = std::max(result.max_relative_error, relative_error(analytic[k][i], numeric));
    }
    params[k]->grad = std::move(saved_grads[k]);
  }
  return result;
}

}  // namespace cilab
