// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cilab/error.hpp"
#include "cilab/stream.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>

using namespace cilab;

namespace {

InstanceDataset toy_dataset(std::size_t instances, std::size_t views, std::mt19937_64* rng = nullptr) {
  InstanceDataset ds;
  std::size_t id = 0;
  for (std::size_t i = 0; i < instances; ++i)
    for (std::size_t v = 0; v < views; ++v) {
      Sample s;
      s.image = rng ? testing::random_tensor({1, 6, 6}, *rng, 0.0, 1.0) : Tensor::zeros({1, 2, 2});
      s.instance = i;
      s.view = v;
      s.id = id++;
      ds.samples.push_back(std::move(s));
    }
  return ds;
}

void check_partition(const InstanceDataset& ds, const StreamPlan& plan) {
  REQUIRE(plan.batches.size() == plan.num_batches);
  std::vector<int> seen(ds.samples.size(), 0);
  for (const auto& b : plan.batches)
    for (auto p : b.positions) ++seen[p];
  CHECK(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));
}

}  // namespace

TEST_CASE("random configurations produce valid partitions") {
  std::mt19937_64 rng(2024);
  const Regime regimes[] = {Regime::random, Regime::balanced, Regime::incremental};
  for (int trial = 0; trial < 200; ++trial) {
    const auto regime = regimes[trial % 3];
    const std::size_t b = 1 + rng() % 6;
    const std::size_t instances = b + rng() % 8;
    const std::size_t views = regime == Regime::balanced ? b * (1 + rng() % 3) : 2 + rng() % 5;
    const auto ds = toy_dataset(instances, views);
    const auto plan = make_plan(ds, regime, b, rng());
    CAPTURE(trial);
    check_partition(ds, plan);
    CHECK_NOTHROW(plan.validate(ds));
    for (const auto& batch : plan.batches) CHECK(!batch.positions.empty());

    if (regime == Regime::random) {
      std::size_t lo = ds.samples.size(), hi = 0;
      for (const auto& batch : plan.batches) {
        lo = std::min(lo, batch.positions.size());
        hi = std::max(hi, batch.positions.size());
      }
      CHECK(hi - lo <= 1);
    }
    if (regime == Regime::incremental) {
      std::map<std::size_t, std::size_t> owner;
      for (const auto& batch : plan.batches)
        for (auto p : batch.positions) {
          auto [it, fresh] = owner.emplace(ds.samples[p].instance, batch.index);
          CHECK(it->second == batch.index);
        }
    }
    if (regime == Regime::balanced) {
      for (const auto& batch : plan.batches) {
        std::map<std::size_t, std::size_t> counts;
        for (auto p : batch.positions) ++counts[ds.samples[p].instance];
        CHECK(counts.size() == instances);
        for (auto [inst, c] : counts) CHECK(c == views / b);
      }
    }
  }
}

TEST_CASE("plans are deterministic per seed") {
  const auto ds = toy_dataset(9, 4);
  for (auto regime : {Regime::random, Regime::balanced, Regime::incremental}) {
    const auto a = make_plan(ds, regime, 2, 5);
    const auto b = make_plan(ds, regime, 2, 5);
    CHECK(a.to_json() == b.to_json());
  }
  CHECK(make_plan(ds, Regime::random, 3, 5).to_json() != make_plan(ds, Regime::random, 3, 6).to_json());
}

TEST_CASE("balanced regime rejects indivisible view counts") {
  const auto ds = toy_dataset(4, 5);
  CHECK_THROWS_AS(split_balanced(ds, 2, 1), ConfigError);
  CHECK_NOTHROW(split_balanced(ds, 5, 1));
}

TEST_CASE("batch counts are checked") {
  const auto ds = toy_dataset(3, 2);
  CHECK_THROWS_AS(make_plan(ds, Regime::incremental, 0, 1), ConfigError);
  CHECK_THROWS_AS(make_plan(ds, Regime::incremental, 4, 1), ConfigError);
  CHECK_THROWS_AS(make_plan(ds, Regime::random, 7, 1), ConfigError);
  CHECK_THROWS_AS(parse_regime("sorted"), ConfigError);
}

TEST_CASE("validate catches corrupted plans") {
  const auto ds = toy_dataset(6, 3);
  auto plan = split_incremental(ds, 3, 4);
  auto dup = plan;
  dup.batches[1].positions.push_back(plan.batches[0].positions.front());
  CHECK_THROWS_AS(dup.validate(ds), ProtocolError);
  auto gap = plan;
  gap.batches[2].positions.pop_back();
  CHECK_THROWS_AS(gap.validate(ds), ProtocolError);

  auto mixed = split_random(ds, 3, 4);
  mixed.regime = Regime::incremental;
  bool spans = false;
  std::map<std::size_t, std::size_t> owner;
  for (const auto& b : mixed.batches)
    for (auto i : b.instances)
      if (!owner.emplace(i, b.index).second) spans = true;
  if (spans) CHECK_THROWS_AS(mixed.validate(ds), ProtocolError);
}

TEST_CASE("plan json roundtrip") {
  const auto ds = toy_dataset(8, 4);
  for (auto regime : {Regime::random, Regime::balanced, Regime::incremental}) {
    const auto plan = make_plan(ds, regime, 4, 17);
    const auto back = StreamPlan::from_json(plan.to_json(), ds);
    CHECK(back.to_json() == plan.to_json());
    for (std::size_t t = 0; t < plan.batches.size(); ++t) CHECK(back.batches[t].instances == plan.batches[t].instances);
  }
  auto j = split_random(ds, 2, 1).to_json();
  j["batches"][0].push_back(999);
  CHECK_THROWS_AS(StreamPlan::from_json(j, ds), ProtocolError);
}

TEST_CASE("incremental batch with one instance starves the samplers") {
  const auto ds = toy_dataset(3, 4);
  const auto plan = split_incremental(ds, 3, 9);
  const auto batch = materialize(ds, plan.batches[0]);
  REQUIRE(plan.batches[0].instances.size() == 1);
  CHECK_THROWS_AS(sample_triplets(batch, 4, 1), StreamStarvationError);
  CHECK_THROWS_AS(sample_nce_tuples(batch, 4, 3, 1), StreamStarvationError);
}

TEST_CASE("batch without a positive pair starves the samplers") {
  const auto ds = toy_dataset(4, 1);
  std::vector<Sample> batch(ds.samples.begin(), ds.samples.end());
  CHECK_THROWS_AS(sample_triplets(batch, 2, 1), StreamStarvationError);
}

TEST_CASE("triplets respect labels") {
  const auto ds = toy_dataset(5, 3);
  const std::vector<Sample> batch(ds.samples.begin(), ds.samples.end());
  const auto triplets = sample_triplets(batch, 200, 3);
  REQUIRE(triplets.size() == 200);
  for (const auto& t : triplets) {
    CHECK(t.anchor != t.positive);
    CHECK(batch[t.positive].instance == batch[t.anchor].instance);
    CHECK(batch[t.negative].instance != batch[t.anchor].instance);
    CHECK(t.anchor_label == batch[t.anchor].instance);
    CHECK(t.negative_label == batch[t.negative].instance);
  }
  CHECK(sample_triplets(batch, 50, 3).size() == 50);
  const auto again = sample_triplets(batch, 200, 3);
  for (std::size_t i = 0; i < triplets.size(); ++i) CHECK(again[i].negative == triplets[i].negative);
}

TEST_CASE("anchors cycle through every eligible sample") {
  const auto ds = toy_dataset(4, 3);
  const std::vector<Sample> batch(ds.samples.begin(), ds.samples.end());
  const auto triplets = sample_triplets(batch, batch.size(), 8);
  std::vector<int> hits(batch.size(), 0);
  for (const auto& t : triplets) ++hits[t.anchor];
  CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
}

TEST_CASE("nce negatives are distinct when the batch allows it") {
  const auto ds = toy_dataset(6, 2);
  const std::vector<Sample> batch(ds.samples.begin(), ds.samples.end());
  for (const auto& t : sample_nce_tuples(batch, 40, 9, 2)) {
    CHECK_FALSE(t.negatives_repeated);
    REQUIRE(t.negatives.size() == 9);
    auto sorted = t.negatives;
    std::sort(sorted.begin(), sorted.end());
    CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
    for (auto n : t.negatives) CHECK(batch[n].instance != t.anchor_label);
    CHECK(batch[t.positive].instance == t.anchor_label);
    CHECK(t.positive != t.anchor);
  }
}

TEST_CASE("nce negatives repeat and flag it when the batch is small") {
  const auto ds = toy_dataset(2, 3);
  const std::vector<Sample> batch(ds.samples.begin(), ds.samples.end());
  for (const auto& t : sample_nce_tuples(batch, 10, 9, 2)) {
    CHECK(t.negatives_repeated);
    CHECK(t.negatives.size() == 9);
    for (auto n : t.negatives) CHECK(batch[n].instance != t.anchor_label);
  }
  CHECK_THROWS_AS(sample_nce_tuples(batch, 1, 0, 2), ContractError);
}

TEST_CASE("batch-hard mining prefers close negatives") {
  std::mt19937_64 rng(31);
  const auto ds = toy_dataset(20, 3, &rng);
  const std::vector<Sample> batch(ds.samples.begin(), ds.samples.end());
  NetConfig cfg;
  cfg.height = 6;
  cfg.width = 6;
  cfg.conv_channels = {2};
  cfg.hidden_dims = {5};
  cfg.embed_dim = 4;
  const auto net = init_xavier(cfg, 3);
  CHECK_THROWS_AS(sample_triplets(batch, 1, 1, Mining::batch_hard), ContractError);

  std::vector<Eigen::VectorXd> emb;
  for (const auto& s : batch) emb.push_back(embed(net, s.image));
  auto mean_rank = [&](const std::vector<Triplet>& ts) {
    double total = 0.0;
    for (const auto& t : ts) {
      const double d = (emb[t.anchor] - emb[t.negative]).squaredNorm();
      std::size_t closer = 0, others = 0;
      for (std::size_t j = 0; j < batch.size(); ++j) {
        if (batch[j].instance == t.anchor_label) continue;
        ++others;
        if ((emb[t.anchor] - emb[j]).squaredNorm() < d) ++closer;
      }
      total += static_cast<double>(closer) / static_cast<double>(others);
    }
    return total / static_cast<double>(ts.size());
  };
  const auto hard = sample_triplets(batch, 120, 5, Mining::batch_hard, &net);
  const auto easy = sample_triplets(batch, 120, 5, Mining::random);
  CHECK(mean_rank(hard) < 0.1);
  CHECK(mean_rank(easy) > 0.3);
  for (const auto& t : hard) CHECK(batch[t.negative].instance != t.anchor_label);
}
