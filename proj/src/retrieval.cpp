// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cilab/retrieval.hpp"

#include "cilab/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cilab {

double average_precision(const std::vector<bool>& ranking, std::size_t num_relevant) {
  if (num_relevant == 0) throw ProtocolError("average_precision: no relevant gallery items");
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < ranking.size(); ++k) {
    if (!ranking[k]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  return sum / static_cast<double>(num_relevant);
}

std::vector<std::size_t> rank_gallery(const Eigen::VectorXd& query, std::span<const Eigen::VectorXd> gallery) {
  std::vector<double> dist(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i) dist[i] = (gallery[i] - query).norm();
  std::vector<std::size_t> order(gallery.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  return order;
}

namespace {

double map_impl(std::span<const Eigen::VectorXd> query_embeddings, std::span<const std::size_t> query_labels,
                std::span<const Eigen::VectorXd> gallery_embeddings, std::span<const std::size_t> gallery_labels,
                std::span<const std::size_t> query_ids) {
  if (query_embeddings.size() != query_labels.size() || gallery_embeddings.size() != gallery_labels.size())
    throw DimensionError("mean_average_precision: embedding and label counts differ");
  if (query_embeddings.empty()) throw ProtocolError("mean_average_precision: empty query set");
  double total = 0.0;
  std::vector<bool> flags(gallery_labels.size());
  for (std::size_t q = 0; q < query_embeddings.size(); ++q) {
    const auto order = rank_gallery(query_embeddings[q], gallery_embeddings);
    std::size_t relevant = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      flags[k] = gallery_labels[order[k]] == query_labels[q];
      relevant += flags[k] ? 1 : 0;
    }
    try {
      total += average_precision(flags, relevant);
    } catch (const ProtocolError& e) {
      throw ProtocolError("query " + std::to_string(query_ids.empty() ? q : query_ids[q]) + ": " + e.what());
    }
  }
  return 100.0 * total / static_cast<double>(query_embeddings.size());
}

}  // namespace

double mean_average_precision(std::span<const Eigen::VectorXd> query_embeddings,
                              std::span<const std::size_t> query_labels,
                              std::span<const Eigen::VectorXd> gallery_embeddings,
                              std::span<const std::size_t> gallery_labels) {
  return map_impl(query_embeddings, query_labels, gallery_embeddings, gallery_labels, {});
}

double mean_average_precision(const EmbeddingNet& net, const RetrievalSplit& split) {
  std::vector<Eigen::VectorXd> qe, ge;
  std::vector<std::size_t> ql, gl, ids;
  for (const auto& s : split.queries) {
    qe.push_back(embed(net, s.image));
    ql.push_back(s.instance);
    ids.push_back(s.id);
  }
  for (const auto& s : split.gallery) {
    ge.push_back(embed(net, s.image));
    gl.push_back(s.instance);
  }
  return map_impl(qe, ql, ge, gl, ids);
}

double forget_ratio(double ref_map, double map) {
  if (!(ref_map > 0.0)) throw ProtocolError("forget_ratio: reference mAP must be positive");
  return 100.0 * (ref_map - map) / ref_map;
}

double round2(double x) { return std::round(x * 100.0) / 100.0; }

void attach_reference(MetricsRecord& rec, double ref_map) {
  rec.map = round2(rec.map);
  rec.ref_map = round2(ref_map);
  rec.forget = round2(forget_ratio(rec.ref_map, rec.map));
}

}  // namespace cilab
