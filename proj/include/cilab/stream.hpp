// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cilab/dataset.hpp"
#include "cilab/losses.hpp"
#include "cilab/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace cilab {

enum class Regime { random, balanced, incremental };

std::string to_string(Regime r);
Regime parse_regime(const std::string& s);

/// One time step of the stream. `positions` index the dataset's samples.
struct ContinuousBatch {
  std::size_t index = 0;
  std::vector<std::size_t> positions;
  std::set<std::size_t> instances;
};

struct StreamPlan {
  Regime regime = Regime::incremental;
  std::size_t num_batches = 1;
  std::uint64_t seed = 0;
  std::vector<ContinuousBatch> batches;

  /// Checks the partition property and the regime invariant against `ds`.
  void validate(const InstanceDataset& ds) const;

  nlohmann::json to_json() const;
  /// Rebuilds a plan from to_json output; instance sets come from `ds`.
  static StreamPlan from_json(const nlohmann::json& j, const InstanceDataset& ds);
};

/// Uniform random partition into B parts whose sizes differ by at most one.
StreamPlan split_random(const InstanceDataset& ds, std::size_t num_batches, std::uint64_t seed);
/// Every batch holds count(i)/B samples of each instance i. Requires every
/// count to be divisible by B.
StreamPlan split_balanced(const InstanceDataset& ds, std::size_t num_batches, std::uint64_t seed);
/// Shuffled instances split into B near-equal groups; batch t holds all
/// samples of its group.
StreamPlan split_incremental(const InstanceDataset& ds, std::size_t num_batches, std::uint64_t seed);
StreamPlan make_plan(const InstanceDataset& ds, Regime regime, std::size_t num_batches, std::uint64_t seed);

/// Copies the batch's samples out of the dataset.
std::vector<Sample> materialize(const InstanceDataset& ds, const ContinuousBatch& batch);

enum class Mining { random, batch_hard };

std::string to_string(Mining m);
Mining parse_mining(const std::string& s);

inline constexpr std::size_t kHardMiningPool = 32;

/// n triplets drawn from `batch` only. Anchors cycle through a shuffled list
/// of samples whose instance has a second sample. Under batch_hard, `net`
/// picks the closest of up to 32 candidate negatives per anchor.
std::vector<Triplet> sample_triplets(std::span<const Sample> batch, std::size_t n, std::uint64_t seed,
                                     Mining mining = Mining::random, const EmbeddingNet* net = nullptr);
/// n tuples with K negatives each, drawn without replacement from the
/// batch's other-instance samples (with replacement, flagged, if fewer exist).
std::vector<NceTuple> sample_nce_tuples(std::span<const Sample> batch, std::size_t n, std::size_t k,
                                        std::uint64_t seed);

}  // namespace cilab
