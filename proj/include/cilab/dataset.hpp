// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cilab/tensor.hpp"

#include <json.hpp>

#include <cstddef>
#include <filesystem>
#include <map>
#include <set>
#include <vector>

namespace cilab {

struct Sample {
  Tensor image;
  std::size_t instance = 0;
  std::size_t view = 0;
  /// Stable identifier across every subset derived from one dataset.
  std::size_t id = 0;
};

/// Labelled instance images. Synthetic datasets also carry what is needed to
/// re-render them (generator config and per-instance latents).
struct InstanceDataset {
  std::vector<Sample> samples;
  nlohmann::json generator;  // null when the origin is unknown
  std::map<std::size_t, Eigen::VectorXd> latents;
  std::set<std::size_t> outlier_instances;

  /// Sorted distinct instance ids.
  std::vector<std::size_t> instance_ids() const;
  /// Sample positions (indices into `samples`) grouped per instance.
  std::map<std::size_t, std::vector<std::size_t>> positions_by_instance() const;
  /// Every instance has >= 2 samples; view ids unique per instance; sample ids
  /// unique; all images share one shape.
  void validate() const;
  /// Samples of the given instances, in original order, ids preserved.
  InstanceDataset restrict_to(const std::set<std::size_t>& instances) const;
};

/// Query/gallery evaluation split, held fixed for a whole run.
struct RetrievalSplit {
  std::vector<Sample> queries;
  std::vector<Sample> gallery;

  std::set<std::size_t> instances() const;
  /// Every query has a gallery match; query and gallery ids are disjoint.
  void validate() const;
};

/// JSON manifest + little-endian float64 pixel blob (`<manifest>.bin`).
void save_dataset(const InstanceDataset& ds, const std::filesystem::path& manifest);
InstanceDataset load_dataset(const std::filesystem::path& manifest);

}  // namespace cilab
