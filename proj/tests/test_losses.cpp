// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cilab/error.hpp"
#include "cilab/losses.hpp"
#include "cilab/synth.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <cmath>

using namespace cilab;
using namespace cilab::testing;

namespace {

NetConfig small_config() {
  NetConfig c;
  c.height = 6;
  c.width = 6;
  c.conv_channels = {2};
  c.hidden_dims = {5};
  c.embed_dim = 4;
  return c;
}

std::vector<Sample> small_batch(std::mt19937_64& rng, std::size_t instances, std::size_t views) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < instances; ++i)
    for (std::size_t v = 0; v < views; ++v)
      out.push_back({random_tensor({1, 6, 6}, rng, 0.0, 1.0), i, v, out.size()});
  return out;
}

}  // namespace

TEST_CASE("triplet loss hand cases") {
  Graph g;
  Var a = g.input(Tensor::of({2}, {1, 0}));
  CHECK(triplet_loss(a, a, a, 1.0).item() == 1.0);
  CHECK(triplet_loss(a, a, a, 0.3).item() == 0.3);
  Var p = g.input(Tensor::of({2}, {0.8, 0.6}));
  Var n = g.input(Tensor::of({2}, {0, 1}));
  // |a-p|^2 = 0.4, |a-n|^2 = 2.
  CHECK(triplet_loss(a, p, n, 1.0).item() == doctest::Approx(0.0));
  CHECK(triplet_loss(a, n, p, 1.0).item() == doctest::Approx(2.6).epsilon(1e-14));
}

TEST_CASE("nce uniform logits give log(K+1)") {
  for (std::size_t k : {1u, 9u}) {
    Graph g;
    CHECK(std::abs(nce_loss(g.input(Tensor::filled({k + 1}, 0.37)), 1.0).item() - std::log(k + 1.0)) < 1e-12);
    Var e = g.input(Tensor::of({3}, {0.6, 0.0, 0.8}));
    std::vector<Var> negs(k, e);
    CHECK(std::abs(nce_loss(nce_logits(e, e, negs), 1.0).item() - std::log(k + 1.0)) < 1e-12);
  }
  Graph g;
  Var e = g.input(Tensor::of({2}, {1, 0}));
  CHECK_THROWS_AS(nce_logits(e, e, {}), ContractError);
  CHECK_THROWS_AS(nce_loss(g.input(Tensor::zeros({3})), 0.0), ContractError);
}

TEST_CASE("nce hand value and temperature") {
  Graph g;
  Var z = g.input(Tensor::of({3}, {2.0, 0.0, -1.0}));
  const double lse = std::log(std::exp(2.0) + 1.0 + std::exp(-1.0));
  CHECK(nce_loss(z, 1.0).item() == doctest::Approx(lse - 2.0).epsilon(1e-14));
  const double lse2 = std::log(std::exp(4.0) + 1.0 + std::exp(-2.0));
  CHECK(nce_loss(z, 0.5).item() == doctest::Approx(lse2 - 4.0).epsilon(1e-14));
}

TEST_CASE("nce gradient w.r.t. logits is softmax minus one-hot") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    Var z = g.input(random_tensor({10}, rng, -3.0, 3.0));
    Tensor zt(z.shape(), z.value().data, true);
    Var zz = g.input(zt);
    g.backward(nce_loss(zz, 1.0));
    Eigen::VectorXd expect = softmax(zt.data);
    expect[0] -= 1.0;
    CHECK((zz.grad() - expect).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(zz.grad().cwiseAbs().maxCoeff() <= 1.0);
  }
}

TEST_CASE("lfl regularizer") {
  Graph g;
  Var e = g.input(Tensor::of({3}, {0.6, 0.0, 0.8}, true));
  CHECK(lfl_regularizer(e, e).item() == 0.0);
  Var old = g.input(Tensor::of({3}, {0.0, 1.0, 0.0}, true));
  Var r = lfl_regularizer(old, e);
  CHECK(r.item() == doctest::Approx(2.0).epsilon(1e-15));
  g.backward(r);
  CHECK((e.grad() - 2.0 * Eigen::Vector3d(0.6, -1.0, 0.8)).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(old.grad().isZero());
}

TEST_CASE("lwf distillation") {
  Graph g;
  Eigen::Vector2d z(1.0, -1.0);
  Var zo = g.input(Tensor({2}, z));
  Var zn = g.input(Tensor({2}, z, true));
  const double T = 2.0;
  const Eigen::VectorXd p = softmax(z / T);
  const double entropy = -(p.array() * p.array().log()).sum();
  Var d = lwf_distillation(zo, zn, T);
  CHECK(d.item() == doctest::Approx(T * T * entropy).epsilon(1e-14));
  g.backward(d);
  CHECK(zn.grad().cwiseAbs().maxCoeff() < 1e-15);
  CHECK(zo.grad().size() == 0);

  Graph g2;
  Var a = g2.input(Tensor::of({2}, {0, 0}));
  Var b = g2.input(Tensor::of({3}, {0, 0, 0}));
  CHECK_THROWS_AS(lwf_distillation(a, b, 2.0), DimensionError);
  CHECK_THROWS_AS(lwf_distillation(a, a, 0.0), ContractError);
}

TEST_CASE("loss gradients at random non-kink points") {
  std::mt19937_64 rng(3);
  auto unit3 = [&] {
    Tensor t = Tensor::zeros({12});
    for (int i = 0; i < 3; ++i) t.data.segment(4 * i, 4) = random_unit(4, rng);
    return t;
  };
  auto triplet = [](Graph&, Var x) {
    return triplet_loss(slice(x, 0, 4), slice(x, 4, 4), slice(x, 8, 4), 1.0);
  };
  CHECK(grad_sweep(triplet, unit3, 50).max_error < 1e-5);

  auto nce = [](Graph&, Var x) {
    std::vector<Var> negs;
    for (std::size_t i = 0; i < 9; ++i) negs.push_back(l2_normalize(slice(x, 8 + 4 * i, 4)));
    return nce_loss(nce_logits(l2_normalize(slice(x, 0, 4)), l2_normalize(slice(x, 4, 4)), negs), 0.5);
  };
  CHECK(grad_sweep(nce, [&] { return random_tensor({44}, rng); }, 50).max_error < 1e-5);

  auto lwf = [](Graph& g, Var x) {
    Var old = g.input(Tensor::of({4}, {0.3, -0.2, 0.9, 0.1}));
    return lwf_distillation(old, x, 2.0);
  };
  CHECK(grad_sweep(lwf, [&] { return random_tensor({4}, rng, -2.0, 2.0); }, 50).max_error < 1e-5);
}

TEST_CASE("ewc penalty hand value and zero at the snapshot") {
  auto net = init_xavier(small_config(), 1);
  const ParameterSnapshot old(net);
  FisherDiagonal fisher;
  for (const auto& p : net.parameters()) fisher.values.emplace_back(p.name, Eigen::VectorXd::Constant(p.value.size(), 2.0));
  {
    Graph g;
    CHECK(std::abs(ewc_penalty(g, net, old, fisher, 100.0).item()) <= 1e-15);
  }
  net.parameter("embed.bias").value.data[1] += 0.5;
  net.parameter("fc0.weight").value.data[3] -= 1.0;
  Graph g;
  Var pen = ewc_penalty(g, net, old, fisher, 100.0);
  // (100 / 2) * 2 * (0.25 + 1)
  CHECK(pen.item() == doctest::Approx(125.0).epsilon(1e-12));
  g.backward(pen);
  // d/dtheta = lambda * F * (theta - theta_old)
  CHECK((*net.parameter("embed.bias").value.grad)[1] == doctest::Approx(100.0).epsilon(1e-12));
  CHECK((*net.parameter("fc0.weight").value.grad)[3] == doctest::Approx(-200.0).epsilon(1e-12));

  auto other = small_config();
  other.embed_dim = 3;
  auto wrong = init_xavier(other, 1);
  Graph g2;
  CHECK_THROWS_AS(ewc_penalty(g2, wrong, old, fisher, 1.0), SnapshotError);
}

TEST_CASE("lfl regularizer is zero when the new net equals the old one") {
  std::mt19937_64 rng(4);
  auto net = init_xavier(small_config(), 2);
  const auto old = clone_from(snapshot(net), net.config());
  for (int i = 0; i < 5; ++i) {
    const Tensor img = random_tensor({1, 6, 6}, rng, 0.0, 1.0);
    Graph g;
    Var e_new = embed(g, net, g.view(img));
    Var e_old = embed(g, old, g.view(img));
    CHECK(std::abs(lfl_regularizer(e_old, e_new).item()) <= 1e-15);
  }
}

TEST_CASE("regularizer gradients w.r.t. network parameters") {
  std::mt19937_64 rng(5);
  auto net = init_xavier(small_config(), 3);
  const auto old_snap = snapshot(net);
  const auto old_net = clone_from(old_snap, net.config());
  for (auto& p : net.parameters()) p.value.data += random_vector(p.value.size(), rng, -0.2, 0.2);
  FisherDiagonal fisher;
  for (const auto& p : net.parameters()) fisher.values.emplace_back(p.name, random_vector(p.value.size(), rng, 0.0, 1.0));
  std::vector<Tensor*> params;
  for (auto& p : net.parameters()) params.push_back(&p.value);

  auto ewc = grad_check_detailed(params, [&](Graph& g) { return ewc_penalty(g, net, old_snap, fisher, 3.0); });
  CHECK(ewc.max_relative_error < 1e-5);

  int checked = 0;
  for (int attempt = 0; checked < 5 && attempt < 100; ++attempt) {
    const Tensor img = random_tensor({1, 6, 6}, rng, 0.0, 1.0);
    auto res = grad_check_detailed(params, [&](Graph& g) {
      return lfl_regularizer(embed(g, old_net, g.view(img)), embed(g, net, g.view(img)));
    });
    if (res.kink_margin < 1e-3) continue;
    ++checked;
    CHECK(res.max_relative_error < 1e-5);
  }
  CHECK(checked == 5);
}

TEST_CASE("task loss matches the explicit composition") {
  std::mt19937_64 rng(6);
  auto net = init_xavier(small_config(), 4);
  const auto batch = small_batch(rng, 3, 3);
  LossConfig cfg;
  cfg.alpha = 0.7;
  const Triplet t{0, 1, 4, 0, 1};
  Graph g;
  const double direct = triplet_loss(embed(g, net, g.view(batch[0].image)), embed(g, net, g.view(batch[1].image)),
                                     embed(g, net, g.view(batch[4].image)), 0.7)
                            .item();
  CHECK(task_loss(g, net, batch, t, cfg).item() == direct);

  const NceTuple n{0, 2, {3, 5, 8}, 0, false};
  std::vector<Var> negs{embed(g, net, g.view(batch[3].image)), embed(g, net, g.view(batch[5].image)),
                        embed(g, net, g.view(batch[8].image))};
  const double nd =
      nce_loss(nce_logits(embed(g, net, g.view(batch[0].image)), embed(g, net, g.view(batch[2].image)), negs), 1.0)
          .item();
  CHECK(task_loss(g, net, batch, n, cfg).item() == nd);
}

TEST_CASE("fisher diagonal equals squared finite-difference gradients") {
  std::mt19937_64 rng(7);
  auto net = init_xavier(small_config(), 5);
  for (auto& p : net.parameters())
    if (p.value.rank() == 1) p.value.data.setConstant(0.1);
  const auto batch = small_batch(rng, 3, 3);
  LossConfig cfg;
  cfg.alpha = 5.0;  // keeps the hinge active
  const std::vector<NceTuple> tuples{{0, 1, {3, 6}, 0, false}, {4, 5, {0, 7}, 1, false}};
  const auto fisher = estimate_fisher(net, batch, tuples, cfg);
  CHECK(fisher.sample_count == 2);
  for (const auto& p : net.parameters()) CHECK_FALSE(p.value.grad);

  // Oracle: central differences of each tuple's loss, squared and averaged.
  const double h = 1e-5;
  auto loss_of = [&](const NceTuple& t) {
    Graph g;
    return task_loss(g, net, batch, t, cfg).item();
  };
  for (auto& p : net.parameters()) {
    const auto& f = fisher.at(p.name);
    for (Eigen::Index i = 0; i < p.value.data.size(); i += 3) {
      double expect = 0.0;
      for (const auto& t : tuples) {
        const double orig = p.value.data[i];
        p.value.data[i] = orig + h;
        const double up = loss_of(t);
        p.value.data[i] = orig - h;
        const double down = loss_of(t);
        p.value.data[i] = orig;
        const double g = (up - down) / (2 * h);
        expect += g * g / 2.0;
      }
      CHECK(f[i] >= 0.0);
      CHECK(f[i] == doctest::Approx(expect).epsilon(1e-4).scale(1e-10));
    }
  }
}

TEST_CASE("fisher is zero on frozen layers and rejects empty data") {
  std::mt19937_64 rng(8);
  auto net = init_xavier(small_config(), 6);
  const std::vector<std::string> conv{"conv0"};
  net.freeze(conv);
  const auto batch = small_batch(rng, 2, 2);
  const std::vector<Triplet> tuples{{0, 1, 2, 0, 1}, {3, 2, 0, 1, 0}};
  LossConfig cfg;
  cfg.alpha = 5.0;
  const auto fisher = estimate_fisher(net, batch, tuples, cfg);
  CHECK(fisher.at("conv0.weight").isZero());
  CHECK(fisher.at("conv0.bias").isZero());
  CHECK(fisher.at("embed.weight").maxCoeff() > 0.0);
  for (const auto& [name, v] : fisher.values) CHECK(v.minCoeff() >= 0.0);
  CHECK_THROWS_AS(estimate_fisher(net, batch, std::span<const Triplet>{}, cfg), ContractError);
  CHECK_THROWS_AS(fisher.at("nope"), SnapshotError);
}

TEST_CASE("loss config validation and json") {
  LossConfig c;
  CHECK_NOTHROW(c.validate());
  const nlohmann::json j = c;
  CHECK(j.get<LossConfig>() == c);
  auto bad = j;
  bad["margin"] = 1.0;
  CHECK_THROWS_AS(bad.get<LossConfig>(), ConfigError);
  c.tau = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.lambda_ewc = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(parse_loss_family("nce") == LossFamily::nce);
  CHECK(to_string(LossFamily::triplet) == "triplet");
  CHECK_THROWS_AS(parse_loss_family("softmax"), ConfigError);
}
