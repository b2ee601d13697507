// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cilab/autodiff.hpp"

#include "cilab/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace cilab {

namespace {

using ConstRowMap = Eigen::Map<const RowMatrix>;
using RowMap = Eigen::Map<RowMatrix>;

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
}

void require_rank(const Var& v, std::size_t rank, const char* op) {
  if (v.shape().size() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(v.shape()));
}

}  // namespace

// ---- Var -----------------------------------------------------------------

const Tensor& Var::value() const {
  if (!graph_) throw ContractError("use of an unbound Var");
  return graph_->value(id_);
}

double Var::item() const {
  const auto& v = value();
  if (v.size() != 1) throw ContractError("item() on a tensor of shape " + to_string(v.shape));
  return v.data[0];
}

const Eigen::VectorXd& Var::grad() const {
  if (!graph_) throw ContractError("use of an unbound Var");
  return graph_->grad(id_);
}

bool Var::requires_grad() const { return graph_ && graph_->needs_grad(id_); }

// ---- Graph ---------------------------------------------------------------

Var Graph::add_leaf(const Tensor* ptr, bool needs_grad, Tensor* grad_sink) {
  values_.push_back(ptr);
  needs_grad_.push_back(needs_grad);
  grad_sinks_.push_back(grad_sink);
  grads_.emplace_back();
  return Var(this, values_.size() - 1);
}

Var Graph::input(Tensor t) {
  bool rg = t.requires_grad;
  storage_.push_back(std::move(t));
  return add_leaf(&storage_.back(), rg, nullptr);
}

Var Graph::param(Tensor& t) {
  if (auto it = bound_.find(&t); it != bound_.end()) return Var(this, it->second);
  Var v = add_leaf(&t, t.requires_grad, t.requires_grad ? &t : nullptr);
  bound_.emplace(&t, v.id());
  return v;
}

Var Graph::view(const Tensor& t) {
  if (auto it = bound_.find(&t); it != bound_.end()) return Var(this, it->second);
  Var v = add_leaf(&t, false, nullptr);
  bound_.emplace(&t, v.id());
  return v;
}

void Graph::check_owned(const Var& v) const {
  if (v.graph() != this) throw ContractError("Var belongs to a different graph");
}

void Graph::accumulate(std::size_t id, const Eigen::Ref<const Eigen::VectorXd>& g) {
  if (!needs_grad_[id]) return;
  grads_[id] += g;
}

Var Graph::record(const char* op, Tensor out, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(op, std::move(out), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Graph::record(const char* op, Tensor out, std::span<const Var> inputs, BackwardFn fn) {
  if (!out.data.allFinite())
    throw DegenerateInputError(std::string(op) + ": produced a non-finite value");
  Node node{op, {}, 0, {}};
  bool rg = false;
  node.inputs.reserve(inputs.size());
  for (const auto& v : inputs) {
    check_owned(v);
    node.inputs.push_back(v.id());
    rg = rg || needs_grad_[v.id()];
  }
  out.requires_grad = rg;
  out.grad.reset();
  storage_.push_back(std::move(out));
  Var result = add_leaf(&storage_.back(), rg, nullptr);
  node.output = result.id();
  if (rg) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return result;
}

void Graph::backward(Var loss) {
  check_owned(loss);
  if (loss.size() != 1)
    throw ContractError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  if (backward_done_) throw ContractError("backward already ran on this graph");
  backward_done_ = true;

  for (std::size_t i = 0; i < values_.size(); ++i)
    grads_[i] = needs_grad_[i] ? Eigen::VectorXd::Zero(values_[i]->data.size()) : Eigen::VectorXd();
  if (!needs_grad_[loss.id()]) return;
  grads_[loss.id()][0] = 1.0;

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->backward) continue;
    it->backward(*this, grads_[it->output]);
  }
  for (std::size_t i = 0; i < values_.size(); ++i)
    if (grad_sinks_[i]) grad_sinks_[i]->accumulate_grad(grads_[i]);
}

// ---- ops -----------------------------------------------------------------

Var matmul(Var a, Var b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw DimensionError("matmul: inner dimensions differ " + to_string(a.shape()) + " * " +
                         to_string(b.shape()));
  Tensor out = Tensor::zeros({m, n});
  ConstRowMap A(a.value().data.data(), idx(m), idx(k));
  ConstRowMap B(b.value().data.data(), idx(k), idx(n));
  RowMap(out.data.data(), idx(m), idx(n)).noalias() = A * B;
  auto ia = a.id(), ib = b.id();
  return a.graph()->record("matmul", std::move(out), {a, b},
                           [ia, ib, m, k, n](Graph& g, const Eigen::VectorXd& gout) {
                             ConstRowMap G(gout.data(), idx(m), idx(n));
                             ConstRowMap A(g.value(ia).data.data(), idx(m), idx(k));
                             ConstRowMap B(g.value(ib).data.data(), idx(k), idx(n));
                             if (g.needs_grad(ia)) {
                               RowMatrix dA = G * B.transpose();
                               g.accumulate(ia, Eigen::Map<const Eigen::VectorXd>(dA.data(), dA.size()));
                             }
                             if (g.needs_grad(ib)) {
                               RowMatrix dB = A.transpose() * G;
                               g.accumulate(ib, Eigen::Map<const Eigen::VectorXd>(dB.data(), dB.size()));
                             }
                           });
}

Var conv2d(Var x, Var kernels, Var bias) {
  require_rank(x, 3, "conv2d");
  require_rank(kernels, 4, "conv2d");
  require_rank(bias, 1, "conv2d");
  const auto cin = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const auto cout = kernels.shape()[0];
  if (kernels.shape()[1] != cin)
    throw DimensionError("conv2d: kernel expects " + std::to_string(kernels.shape()[1]) +
                         " input channels, input has " + std::to_string(cin));
  if (kernels.shape()[2] != 3 || kernels.shape()[3] != 3)
    throw DimensionError("conv2d: only 3x3 kernels are supported");
  if (bias.shape()[0] != cout) throw DimensionError("conv2d: bias length differs from output channels");
  if (h < 3 || w < 3) throw DimensionError("conv2d: spatial dims must be at least 3");

  const auto rows = cin * 9, hw = h * w;
  RowMatrix cols = RowMatrix::Zero(idx(rows), idx(hw));
  const auto& xd = x.value().data;
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const auto r = idx(c * 9 + ky * 3 + kx);
        for (std::size_t y = 0; y < h; ++y) {
          const auto sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const auto sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
            cols(r, idx(y * w + xx)) = xd[idx((c * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx))];
          }
        }
      }

  Tensor out = Tensor::zeros({cout, h, w});
  ConstRowMap K(kernels.value().data.data(), idx(cout), idx(rows));
  RowMap O(out.data.data(), idx(cout), idx(hw));
  O.noalias() = K * cols;
  O.colwise() += bias.value().data;

  auto ix = x.id(), ik = kernels.id(), ib = bias.id();
  return x.graph()->record(
      "conv2d", std::move(out), {x, kernels, bias},
      [ix, ik, ib, cols = std::move(cols), cin, cout, h, w](Graph& g, const Eigen::VectorXd& gout) {
        const auto rows = cin * 9, hw = h * w;
        ConstRowMap G(gout.data(), idx(cout), idx(hw));
        if (g.needs_grad(ik)) {
          RowMatrix dK = G * cols.transpose();
          g.accumulate(ik, Eigen::Map<const Eigen::VectorXd>(dK.data(), dK.size()));
        }
        if (g.needs_grad(ib)) g.accumulate(ib, G.rowwise().sum());
        if (g.needs_grad(ix)) {
          ConstRowMap K(g.value(ik).data.data(), idx(cout), idx(rows));
          RowMatrix dcols = K.transpose() * G;
          Eigen::VectorXd dx = Eigen::VectorXd::Zero(idx(cin * h * w));
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const auto r = idx(c * 9 + ky * 3 + kx);
                for (std::size_t y = 0; y < h; ++y) {
                  const auto sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
                  if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
                  for (std::size_t xx = 0; xx < w; ++xx) {
                    const auto sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
                    if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
                    dx[idx((c * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx))] +=
                        dcols(r, idx(y * w + xx));
                  }
                }
              }
          g.accumulate(ix, dx);
        }
      });
}

Var maxpool2d(Var x) {
  require_rank(x, 3, "maxpool2d");
  const auto c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (h < 2 || w < 2) throw DimensionError("maxpool2d: spatial dims must be at least 2");
  const auto oh = h / 2, ow = w / 2;
  Tensor out = Tensor::zeros({c, oh, ow});
  std::vector<std::size_t> argmax(c * oh * ow);
  const auto& xd = x.value().data;
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t cand[4] = {(ch * h + 2 * oy) * w + 2 * ox, (ch * h + 2 * oy) * w + 2 * ox + 1,
                                     (ch * h + 2 * oy + 1) * w + 2 * ox, (ch * h + 2 * oy + 1) * w + 2 * ox + 1};
        std::size_t best = cand[0];
        for (int i = 1; i < 4; ++i)
          if (xd[idx(cand[i])] > xd[idx(best)]) best = cand[i];
        double second = -std::numeric_limits<double>::infinity();
        for (auto ci : cand)
          if (ci != best) second = std::max(second, xd[idx(ci)]);
        // Exact zero ties are clamped ReLU outputs; relu already guards them.
        if (xd[idx(best)] != 0.0 || second != 0.0) margin = std::min(margin, xd[idx(best)] - second);
        const auto o = (ch * oh + oy) * ow + ox;
        argmax[o] = best;
        out.data[idx(o)] = xd[idx(best)];
      }
  x.graph()->note_kink(margin);
  auto ix = x.id();
  const auto n = x.size();
  return x.graph()->record("maxpool2d", std::move(out), {x},
                           [ix, n, argmax = std::move(argmax)](Graph& g, const Eigen::VectorXd& gout) {
                             Eigen::VectorXd dx = Eigen::VectorXd::Zero(idx(n));
                             for (std::size_t o = 0; o < argmax.size(); ++o) dx[idx(argmax[o])] += gout[idx(o)];
                             g.accumulate(ix, dx);
                           });
}

Var relu(Var x) {
  const auto& xd = x.value().data;
  Tensor out(x.shape(), xd.cwiseMax(0.0));
  if (xd.size() > 0) x.graph()->note_kink(xd.cwiseAbs().minCoeff());
  auto ix = x.id();
  return x.graph()->record("relu", std::move(out), {x}, [ix](Graph& g, const Eigen::VectorXd& gout) {
    const auto& xd = g.value(ix).data;
    g.accumulate(ix, (xd.array() > 0.0).select(gout, 0.0));
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  a.graph()->check_owned(b);
  Tensor out(a.shape(), a.value().data + b.value().data);
  auto ia = a.id(), ib = b.id();
  return a.graph()->record("add", std::move(out), {a, b}, [ia, ib](Graph& g, const Eigen::VectorXd& gout) {
    g.accumulate(ia, gout);
    g.accumulate(ib, gout);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  a.graph()->check_owned(b);
  Tensor out(a.shape(), a.value().data - b.value().data);
  auto ia = a.id(), ib = b.id();
  return a.graph()->record("sub", std::move(out), {a, b}, [ia, ib](Graph& g, const Eigen::VectorXd& gout) {
    g.accumulate(ia, gout);
    g.accumulate(ib, -gout);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  a.graph()->check_owned(b);
  Tensor out(a.shape(), a.value().data.cwiseProduct(b.value().data));
  auto ia = a.id(), ib = b.id();
  return a.graph()->record("mul", std::move(out), {a, b}, [ia, ib](Graph& g, const Eigen::VectorXd& gout) {
    if (g.needs_grad(ia)) g.accumulate(ia, gout.cwiseProduct(g.value(ib).data));
    if (g.needs_grad(ib)) g.accumulate(ib, gout.cwiseProduct(g.value(ia).data));
  });
}

Var mul_scalar(Var x, double s) {
  Tensor out(x.shape(), x.value().data * s);
  auto ix = x.id();
  return x.graph()->record("mul_scalar", std::move(out), {x},
                           [ix, s](Graph& g, const Eigen::VectorXd& gout) { g.accumulate(ix, gout * s); });
}

Var add_scalar(Var x, double s) {
  Tensor out(x.shape(), x.value().data.array() + s);
  auto ix = x.id();
  return x.graph()->record("add_scalar", std::move(out), {x},
                           [ix](Graph& g, const Eigen::VectorXd& gout) { g.accumulate(ix, gout); });
}

Var reduce_sum(Var x) {
  Tensor out = Tensor::of({1}, {x.value().data.sum()});
  auto ix = x.id();
  const auto n = x.size();
  return x.graph()->record("reduce_sum", std::move(out), {x}, [ix, n](Graph& g, const Eigen::VectorXd& gout) {
    g.accumulate(ix, Eigen::VectorXd::Constant(idx(n), gout[0]));
  });
}

Var dot(Var a, Var b) {
  require_rank(a, 1, "dot");
  require_same_shape(a, b, "dot");
  a.graph()->check_owned(b);
  Tensor out = Tensor::of({1}, {a.value().data.dot(b.value().data)});
  auto ia = a.id(), ib = b.id();
  return a.graph()->record("dot", std::move(out), {a, b}, [ia, ib](Graph& g, const Eigen::VectorXd& gout) {
    if (g.needs_grad(ia)) g.accumulate(ia, gout[0] * g.value(ib).data);
    if (g.needs_grad(ib)) g.accumulate(ib, gout[0] * g.value(ia).data);
  });
}

Var l2_normalize(Var x) {
  require_rank(x, 1, "l2_normalize");
  const double norm = x.value().data.norm();
  if (!(norm > kNormEpsilon))
    throw DegenerateInputError("l2_normalize: norm " + std::to_string(norm) + " is below 1e-12");
  Tensor out(x.shape(), x.value().data / norm);
  auto ix = x.id();
  Eigen::VectorXd y = out.data;
  return x.graph()->record("l2_normalize", std::move(out), {x},
                           [ix, y = std::move(y), norm](Graph& g, const Eigen::VectorXd& gout) {
                             g.accumulate(ix, (gout - y * y.dot(gout)) / norm);
                           });
}

Var reshape(Var x, Shape shape) {
  if (numel(shape) != x.size())
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  Tensor out(std::move(shape), x.value().data);
  auto ix = x.id();
  return x.graph()->record("reshape", std::move(out), {x},
                           [ix](Graph& g, const Eigen::VectorXd& gout) { g.accumulate(ix, gout); });
}

Var slice(Var x, std::size_t offset, std::size_t length) {
  if (length == 0 || offset + length > x.size())
    throw DimensionError("slice: range [" + std::to_string(offset) + ", " + std::to_string(offset + length) +
                         ") outside tensor of " + std::to_string(x.size()) + " values");
  Tensor out({length}, x.value().data.segment(idx(offset), idx(length)));
  auto ix = x.id();
  const auto n = x.size();
  return x.graph()->record("slice", std::move(out), {x},
                           [ix, n, offset, length](Graph& g, const Eigen::VectorXd& gout) {
                             Eigen::VectorXd dx = Eigen::VectorXd::Zero(idx(n));
                             dx.segment(idx(offset), idx(length)) = gout;
                             g.accumulate(ix, dx);
                           });
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  Graph* graph = parts.front().graph();
  std::size_t total = 0;
  for (const auto& p : parts) {
    graph->check_owned(p);
    total += p.size();
  }
  Eigen::VectorXd v(idx(total));
  std::vector<std::size_t> ids, sizes;
  std::size_t off = 0;
  for (const auto& p : parts) {
    v.segment(idx(off), idx(p.size())) = p.value().data;
    off += p.size();
    ids.push_back(p.id());
    sizes.push_back(p.size());
  }
  return graph->record("concat", Tensor({total}, std::move(v)), parts,
                       [ids = std::move(ids), sizes = std::move(sizes)](Graph& g, const Eigen::VectorXd& gout) {
                         std::size_t off = 0;
                         for (std::size_t i = 0; i < ids.size(); ++i) {
                           g.accumulate(ids[i], gout.segment(idx(off), idx(sizes[i])));
                           off += sizes[i];
                         }
                       });
}

Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
  Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

Var soft_cross_entropy(Var z, const Eigen::VectorXd& target) {
  require_rank(z, 1, "soft_cross_entropy");
  if (static_cast<std::size_t>(target.size()) != z.size())
    throw DimensionError("soft_cross_entropy: target length differs from logits");
  const auto& zd = z.value().data;
  const double zmax = zd.maxCoeff();
  const double lse = zmax + std::log((zd.array() - zmax).exp().sum());
  const double tsum = target.sum();
  Tensor out = Tensor::of({1}, {tsum * lse - target.dot(zd)});
  auto iz = z.id();
  return z.graph()->record("soft_cross_entropy", std::move(out), {z},
                           [iz, target, tsum](Graph& g, const Eigen::VectorXd& gout) {
                             g.accumulate(iz, gout[0] * (softmax(g.value(iz).data) * tsum - target));
                           });
}

Var detach(Var x) { return x.graph()->input(Tensor(x.shape(), x.value().data)); }

}  // namespace cilab
