// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cilab/stream.hpp"

#include "cilab/error.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <random>

namespace cilab {

using nlohmann::json;

std::string to_string(Regime r) {
  switch (r) {
    case Regime::random: return "random";
    case Regime::balanced: return "balanced";
    case Regime::incremental: return "incremental";
  }
  return "?";
}

Regime parse_regime(const std::string& s) {
  if (s == "random") return Regime::random;
  if (s == "balanced") return Regime::balanced;
  if (s == "incremental") return Regime::incremental;
  throw ConfigError("stream.regime: unknown regime '" + s + "'");
}

std::string to_string(Mining m) { return m == Mining::random ? "random" : "batch_hard"; }

Mining parse_mining(const std::string& s) {
  if (s == "random") return Mining::random;
  if (s == "batch_hard") return Mining::batch_hard;
  throw ConfigError("training.mining: unknown mining '" + s + "'");
}

namespace {

StreamPlan finish(const InstanceDataset& ds, Regime regime, std::uint64_t seed,
                  std::vector<std::vector<std::size_t>> parts) {
  StreamPlan plan;
  plan.regime = regime;
  plan.num_batches = parts.size();
  plan.seed = seed;
  for (std::size_t t = 0; t < parts.size(); ++t) {
    ContinuousBatch b;
    b.index = t;
    std::sort(parts[t].begin(), parts[t].end());
    b.positions = std::move(parts[t]);
    for (auto p : b.positions) b.instances.insert(ds.samples[p].instance);
    plan.batches.push_back(std::move(b));
  }
  return plan;
}

void require_batches(std::size_t b) {
  if (b == 0) throw ConfigError("stream.batches: must be at least 1");
}

}  // namespace

StreamPlan split_random(const InstanceDataset& ds, std::size_t num_batches, std::uint64_t seed) {
  require_batches(num_batches);
  const auto n = ds.samples.size();
  if (num_batches > n)
    throw ConfigError("stream.batches: " + std::to_string(num_batches) + " batches exceed " + std::to_string(n) +
                      " samples");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> parts(num_batches);
  const auto base = n / num_batches, extra = n % num_batches;
  std::size_t cursor = 0;
  for (std::size_t t = 0; t < num_batches; ++t) {
    const auto len = base + (t < extra ? 1 : 0);
    parts[t].assign(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                    order.begin() + static_cast<std::ptrdiff_t>(cursor + len));
    cursor += len;
  }
  return finish(ds, Regime::random, seed, std::move(parts));
}

StreamPlan split_balanced(const InstanceDataset& ds, std::size_t num_batches, std::uint64_t seed) {
  require_batches(num_batches);
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> parts(num_batches);
  for (auto [inst, positions] : ds.positions_by_instance()) {
    if (positions.size() % num_batches != 0)
      throw ConfigError("stream: balanced regime needs every instance's sample count divisible by " +
                        std::to_string(num_batches) + "; instance " + std::to_string(inst) + " has " +
                        std::to_string(positions.size()));
    std::shuffle(positions.begin(), positions.end(), rng);
    const auto per = positions.size() / num_batches;
    for (std::size_t t = 0; t < num_batches; ++t)
      parts[t].insert(parts[t].end(), positions.begin() + static_cast<std::ptrdiff_t>(t * per),
                      positions.begin() + static_cast<std::ptrdiff_t>((t + 1) * per));
  }
  return finish(ds, Regime::balanced, seed, std::move(parts));
}

StreamPlan split_incremental(const InstanceDataset& ds, std::size_t num_batches, std::uint64_t seed) {
  require_batches(num_batches);
  auto instances = ds.instance_ids();
  if (num_batches > instances.size())
    throw ConfigError("stream.batches: " + std::to_string(num_batches) + " batches exceed " +
                      std::to_string(instances.size()) + " instances");
  std::mt19937_64 rng(seed);
  std::shuffle(instances.begin(), instances.end(), rng);
  std::map<std::size_t, std::size_t> group;
  const auto base = instances.size() / num_batches, extra = instances.size() % num_batches;
  std::size_t cursor = 0;
  for (std::size_t t = 0; t < num_batches; ++t) {
    const auto len = base + (t < extra ? 1 : 0);
    for (std::size_t k = 0; k < len; ++k) group[instances[cursor + k]] = t;
    cursor += len;
  }
  std::vector<std::vector<std::size_t>> parts(num_batches);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) parts[group.at(ds.samples[i].instance)].push_back(i);
  return finish(ds, Regime::incremental, seed, std::move(parts));
}

StreamPlan make_plan(const InstanceDataset& ds, Regime regime, std::size_t num_batches, std::uint64_t seed) {
  switch (regime) {
    case Regime::random: return split_random(ds, num_batches, seed);
    case Regime::balanced: return split_balanced(ds, num_batches, seed);
    case Regime::incremental: return split_incremental(ds, num_batches, seed);
  }
  throw ConfigError("unknown regime");
}

void StreamPlan::validate(const InstanceDataset& ds) const {
  if (batches.size() != num_batches || batches.empty()) throw ProtocolError("plan: batch count mismatch");
  std::vector<int> seen(ds.samples.size(), 0);
  for (std::size_t t = 0; t < batches.size(); ++t) {
    if (batches[t].index != t) throw ProtocolError("plan: batch indices are not 0..B-1");
    for (auto p : batches[t].positions) {
      if (p >= ds.samples.size()) throw ProtocolError("plan: sample position out of range");
      if (seen[p]++) throw ProtocolError("plan: sample " + std::to_string(p) + " appears in two batches");
    }
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) throw ProtocolError("plan: batches do not cover the dataset");
  if (regime == Regime::incremental) {
    std::set<std::size_t> all;
    for (const auto& b : batches)
      for (auto i : b.instances)
        if (!all.insert(i).second) throw ProtocolError("plan: instance " + std::to_string(i) + " spans batches");
  }
  if (regime == Regime::balanced) {
    for (const auto& b : batches) {
      std::map<std::size_t, std::size_t> counts;
      for (auto p : b.positions) ++counts[ds.samples[p].instance];
      for (auto [inst, positions] : ds.positions_by_instance())
        if (counts[inst] * num_batches != positions.size())
          throw ProtocolError("plan: batch " + std::to_string(b.index) + " is unbalanced for instance " +
                              std::to_string(inst));
    }
  }
}

json StreamPlan::to_json() const {
  json b = json::array();
  for (const auto& batch : batches) b.push_back(batch.positions);
  return json{{"regime", cilab::to_string(regime)}, {"seed", seed}, {"num_batches", num_batches}, {"batches", b}};
}

StreamPlan StreamPlan::from_json(const json& j, const InstanceDataset& ds) {
  std::vector<std::vector<std::size_t>> parts;
  for (const auto& b : j.at("batches")) parts.push_back(b.get<std::vector<std::size_t>>());
  for (const auto& part : parts)
    for (auto p : part)
      if (p >= ds.samples.size()) throw ProtocolError("plan: sample position out of range");
  auto plan = finish(ds, parse_regime(j.at("regime").get<std::string>()), j.at("seed").get<std::uint64_t>(),
                     std::move(parts));
  plan.validate(ds);
  return plan;
}

std::vector<Sample> materialize(const InstanceDataset& ds, const ContinuousBatch& batch) {
  std::vector<Sample> out;
  out.reserve(batch.positions.size());
  for (auto p : batch.positions) out.push_back(ds.samples.at(p));
  return out;
}

// ---- tuple sampling --------------------------------------------------------

namespace {

struct BatchIndex {
  std::map<std::size_t, std::vector<std::size_t>> by_instance;
  std::vector<std::size_t> anchors;  // samples with a same-instance partner
};

BatchIndex index_batch(std::span<const Sample> batch) {
  BatchIndex idx;
  for (std::size_t i = 0; i < batch.size(); ++i) idx.by_instance[batch[i].instance].push_back(i);
  if (idx.by_instance.size() < 2)
    throw StreamStarvationError("continuous batch holds " + std::to_string(idx.by_instance.size()) +
                                " instance(s); at least 2 are needed to draw negatives");
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (idx.by_instance[batch[i].instance].size() >= 2) idx.anchors.push_back(i);
  if (idx.anchors.empty())
    throw StreamStarvationError("continuous batch has no instance with two samples; no positive pair exists");
  return idx;
}

std::size_t pick(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

std::size_t pick_positive(std::mt19937_64& rng, const std::vector<std::size_t>& same, std::size_t anchor) {
  std::size_t p;
  do p = same[pick(rng, same.size())];
  while (p == anchor);
  return p;
}

/// Cycles through shuffled anchors, reshuffling after each pass.
class AnchorCycle {
 public:
  AnchorCycle(std::vector<std::size_t> anchors, std::mt19937_64& rng) : anchors_(std::move(anchors)), rng_(rng) {}
  std::size_t next() {
    if (cursor_ == 0) std::shuffle(anchors_.begin(), anchors_.end(), rng_);
    auto a = anchors_[cursor_];
    cursor_ = (cursor_ + 1) % anchors_.size();
    return a;
  }

 private:
  std::vector<std::size_t> anchors_;
  std::mt19937_64& rng_;
  std::size_t cursor_ = 0;
};

}  // namespace

std::vector<Triplet> sample_triplets(std::span<const Sample> batch, std::size_t n, std::uint64_t seed, Mining mining,
                                     const EmbeddingNet* net) {
  if (mining == Mining::batch_hard && net == nullptr)
    throw ContractError("sample_triplets: batch_hard mining needs a network");
  const auto idx = index_batch(batch);
  std::mt19937_64 rng(seed);

  std::vector<Eigen::VectorXd> emb;
  if (mining == Mining::batch_hard) {
    emb.reserve(batch.size());
    for (const auto& s : batch) emb.push_back(embed(*net, s.image));
  }

  AnchorCycle anchors(idx.anchors, rng);
  std::vector<Triplet> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto a = anchors.next();
    const auto label = batch[a].instance;
    const auto p = pick_positive(rng, idx.by_instance.at(label), a);
    const auto others = batch.size() - idx.by_instance.at(label).size();
    auto draw_negative = [&] {
      auto j = pick(rng, others);
      for (const auto& [inst, members] : idx.by_instance) {
        if (inst == label) continue;
        if (j < members.size()) return members[j];
        j -= members.size();
      }
      return std::size_t{0};  // unreachable
    };
    std::size_t neg = draw_negative();
    if (mining == Mining::batch_hard) {
      double best = (emb[a] - emb[neg]).squaredNorm();
      for (std::size_t c = 1; c < std::min(kHardMiningPool, others); ++c) {
        const auto cand = draw_negative();
        const double d = (emb[a] - emb[cand]).squaredNorm();
        if (d < best) {
          best = d;
          neg = cand;
        }
      }
    }
    out.push_back({a, p, neg, label, batch[neg].instance});
  }
  return out;
}

std::vector<NceTuple> sample_nce_tuples(std::span<const Sample> batch, std::size_t n, std::size_t k,
                                        std::uint64_t seed) {
  if (k == 0) throw ContractError("sample_nce_tuples: K must be at least 1");
  const auto idx = index_batch(batch);
  std::mt19937_64 rng(seed);
  AnchorCycle anchors(idx.anchors, rng);
  std::vector<NceTuple> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    NceTuple t;
    t.anchor = anchors.next();
    t.anchor_label = batch[t.anchor].instance;
    t.positive = pick_positive(rng, idx.by_instance.at(t.anchor_label), t.anchor);
    std::vector<std::size_t> pool;
    for (const auto& [inst, members] : idx.by_instance)
      if (inst != t.anchor_label) pool.insert(pool.end(), members.begin(), members.end());
    if (pool.size() >= k) {
      // partial Fisher-Yates: first k entries become a uniform draw without replacement
      for (std::size_t j = 0; j < k; ++j) std::swap(pool[j], pool[j + pick(rng, pool.size() - j)]);
      t.negatives.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    } else {
      t.negatives_repeated = true;
      for (std::size_t j = 0; j < k; ++j) t.negatives.push_back(pool[pick(rng, pool.size())]);
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace cilab
