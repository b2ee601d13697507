// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cilab/dataset.hpp"

#include <json.hpp>

#include <cstdint>
#include <utility>
#include <vector>

namespace cilab {

/// Procedural stand-in for a multi-view instance dataset: every instance is a
/// glyph (oriented rectangle plus three Gaussian dots) rendered on a grid of
/// in-plane rotations and, optionally, elevations.
struct GenConfig {
  std::size_t num_instances = 30;
  std::size_t views_per_instance = 12;
  std::size_t pose_grid = 12;
  std::size_t elevations = 1;
  std::size_t image_size = 16;
  double noise_sigma = 0.05;
  double instance_separation = 1.0;
  double outlier_fraction = 0.0;
  double outlier_magnitude = 10.0;
  /// Restrict poses to within 30 degrees of the frontal view.
  bool frontal_only = false;
  std::uint64_t seed = 0;

  void validate() const;
  /// View ids (elevation * pose_grid + pose) that generate() renders.
  std::vector<std::size_t> selected_views() const;
  bool operator==(const GenConfig&) const = default;
};

void to_json(nlohmann::json& j, const GenConfig& c);
void from_json(const nlohmann::json& j, GenConfig& c);

inline constexpr std::size_t kLatentDim = 15;
inline constexpr std::size_t kGlyphDots = 3;

/// Latent drawn for one instance: tanh-squashed Gaussian around the middle of
/// each parameter's range, spread controlled by `separation`.
Eigen::VectorXd sample_latent(std::uint64_t seed, double separation);

/// Rotation (radians) and elevation index encoded by a view id.
std::pair<double, std::size_t> view_pose(std::size_t view, std::size_t pose_grid);

/// Pure render of a latent at a pose; `noise_seed` drives the pixel noise.
Tensor render_glyph(const Eigen::VectorXd& latent, double rotation, std::size_t elevation, std::size_t size,
                    double noise_sigma, std::uint64_t noise_seed);

InstanceDataset generate(const GenConfig& cfg);

/// Scales the latents of a seeded subset (round(fraction * instances)) of
/// instances by `magnitude` and re-renders them. Labels are unchanged.
InstanceDataset inject_outliers(const InstanceDataset& ds, double fraction, double magnitude, std::uint64_t seed);

/// Per instance, `queries_per_instance` seeded views become queries and the
/// rest the gallery.
RetrievalSplit make_retrieval_split(const InstanceDataset& ds, std::size_t queries_per_instance,
                                    std::uint64_t seed = 0);

/// Splits off the `count` highest instance ids as an evaluation pool.
std::pair<InstanceDataset, InstanceDataset> hold_out_instances(const InstanceDataset& ds, std::size_t count);

}  // namespace cilab
