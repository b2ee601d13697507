// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cilab/dataset.hpp"
#include "cilab/model.hpp"

#include <Eigen/Core>

#include <span>
#include <string>
#include <vector>

namespace cilab {

/// Non-interpolated AP of a ranked list of relevance flags. Throws
/// ProtocolError when `num_relevant` is zero.
double average_precision(const std::vector<bool>& ranking, std::size_t num_relevant);

/// Gallery indices ordered by ascending Euclidean distance to `query`; ties
/// keep gallery order.
std::vector<std::size_t> rank_gallery(const Eigen::VectorXd& query, std::span<const Eigen::VectorXd> gallery);

/// mAP in percent from precomputed embeddings.
double mean_average_precision(std::span<const Eigen::VectorXd> query_embeddings,
                              std::span<const std::size_t> query_labels,
                              std::span<const Eigen::VectorXd> gallery_embeddings,
                              std::span<const std::size_t> gallery_labels);

/// mAP in percent of `net` on `split`.
double mean_average_precision(const EmbeddingNet& net, const RetrievalSplit& split);

/// 100 * (ref - map) / ref. Throws ProtocolError when ref <= 0.
double forget_ratio(double ref_map, double map);

/// Half-away-from-zero rounding to two decimals.
double round2(double x);

struct MetricsRecord {
  std::string strategy;
  std::string loss;
  std::size_t t = 0;
  double map = 0.0;
  double ref_map = 0.0;
  double forget = 0.0;
};

/// Fills ref_map and forget from the cumulative reference, rounding mAP and
/// Ref to two decimals first so the reported triple is self-consistent.
void attach_reference(MetricsRecord& rec, double ref_map);

}  // namespace cilab
