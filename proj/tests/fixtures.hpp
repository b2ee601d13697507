// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cilab/grad_check.hpp"
#include "cilab/strategies.hpp"
#include "cilab/synth.hpp"
#include "test_support.hpp"

#include <random>

namespace cilab::testing {

struct ToyStream {
  InstanceDataset train;
  RetrievalSplit eval;
  StreamPlan plan;
  NetConfig net;
};

inline NetConfig toy_net() {
  NetConfig c;
  c.height = 8;
  c.width = 8;
  c.conv_channels = {3};
  c.hidden_dims = {8};
  c.embed_dim = 4;
  return c;
}

/// Eight training instances in `batches` incremental batches, three held out.
inline ToyStream make_toy_stream(std::size_t batches, std::uint64_t seed = 1) {
  GenConfig g;
  g.num_instances = 11;
  g.views_per_instance = 4;
  g.pose_grid = 8;
  g.image_size = 8;
  g.seed = seed;
  auto [train, eval] = hold_out_instances(generate(g), 3);
  ToyStream s{train, make_retrieval_split(eval, 1, seed), {}, toy_net()};
  s.plan = split_incremental(s.train, batches, seed);
  return s;
}

inline StrategyConfig toy_strategy(StrategyKind kind, LossFamily family) {
  StrategyConfig c;
  c.kind = kind;
  c.loss_family = family;
  c.training.epochs_per_batch = 2;
  c.training.minibatch = 4;
  c.training.lr = 5e-3;
  c.training.nce_negatives = 3;
  c.training.fisher_samples = 8;
  return c;
}

inline void perturb(EmbeddingNet& net, std::mt19937_64& rng, double scale) {
  for (auto& p : net.parameters()) p.value.data += random_vector(p.value.data.size(), rng, -scale, scale);
}

/// Network and batch for the composed-loss gradient checks.
struct ComposedSetup {
  NetConfig net;
  std::vector<Sample> batch;
};

/// Linear embedding head over random images in [0.5, 1]: no kinks besides the
/// triplet hinge and gradients of order one in every coordinate.
inline ComposedSetup linear_setup(std::uint64_t seed) {
  ComposedSetup s;
  s.net.height = 3;
  s.net.width = 3;
  s.net.conv_channels = {};
  s.net.hidden_dims = {};
  s.net.embed_dim = 4;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < 12; ++i)
    s.batch.push_back({random_tensor({1, 3, 3}, rng, 0.5, 1.0), i / 3, i % 3, i});
  return s;
}

/// The toy conv network on its first incremental batch.
inline ComposedSetup conv_setup(std::uint64_t seed) {
  const auto toy = make_toy_stream(2, seed);
  return {toy.net, materialize(toy.train, toy.plan.batches[0])};
}

/// Fourth-order central-difference check of a strategy's full minibatch loss
/// (task plus every regularizer) against all network parameters. Per
/// coordinate the error is |a - n| / max(floor, |a| + |n|); floor 1e-8 is the
/// plain relative error. Points with a kink within `min_margin` are redrawn;
/// keep it above the largest step 2h.
inline SweepResult composed_loss_sweep(const ComposedSetup& setup, StrategyKind kind, LossFamily family, int trials,
                                       std::uint64_t seed, double floor = 1e-8, double min_margin = 1e-2,
                                       double h = 7.4e-4) {
  const auto& batch = setup.batch;
  auto cfg = toy_strategy(kind, family);
  cfg.loss.lambda_c = 0.7;
  cfg.loss.lambda_e = 1.3;
  cfg.loss.lambda_kd = 0.8;
  cfg.loss.lambda_ewc = 2.5;
  cfg.loss.tau = 0.2;
  std::mt19937_64 rng(seed);
  SweepResult r;
  for (int i = 0; i < trials;) {
    auto net = init_xavier(setup.net, rng());
    for (auto& p : net.parameters()) p.value.data.array() += 0.05;
    perturb(net, rng, 0.2);
    auto old = net;
    perturb(old, rng, 0.3);
    const auto snap = snapshot(old);
    FisherDiagonal fisher;
    for (const auto& p : net.parameters())
      fisher.values.emplace_back(p.name, random_vector(p.value.data.size(), rng, 0.0, 1.0));
    const Regularization reg{&old, &snap, &fisher};
    const auto triplets = sample_triplets(batch, 3, rng());
    const auto tuples = sample_nce_tuples(batch, 3, cfg.training.nce_negatives, rng());
    auto loss = [&](Graph& g) {
      return family == LossFamily::triplet ? minibatch_loss(g, net, batch, triplets, cfg, reg).total
                                           : minibatch_loss(g, net, batch, tuples, cfg, reg).total;
    };
    double margin = 0.0;
    {
      Graph g;
      g.backward(loss(g));
      margin = g.kink_margin();
    }
    if (margin < min_margin) {
      net.zero_grad();
      ++r.rejected;
      continue;
    }
    auto value = [&] {
      Graph g;
      return loss(g).item();
    };
    for (auto& p : net.parameters()) {
      const Eigen::VectorXd analytic = *p.value.grad;
      for (Eigen::Index k = 0; k < p.value.data.size(); ++k) {
        const double orig = p.value.data[k];
        auto at = [&](double step) {
          p.value.data[k] = orig + step;
          return value();
        };
        const double numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        p.value.data[k] = orig;
        const double err = std::abs(analytic[k] - numeric) / std::max(floor, std::abs(analytic[k]) + std::abs(numeric));
        r.max_error = std::max(r.max_error, err);
      }
    }
    net.zero_grad();
    ++i;
  }
  return r;
}

}  // namespace cilab::testing
