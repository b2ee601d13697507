// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cilab/synth.hpp"

#include "cilab/error.hpp"
#include "cilab/seed.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

namespace cilab {

using nlohmann::json;

namespace {

constexpr double kFrontalHalfAngleDeg = 30.0;
constexpr double kElevationStepDeg = 20.0;
constexpr double kEdgeSoftness = 0.4;

// (mid, half-range) of each latent component:
// half_width, half_height, intensity, then per dot: radius, angle, intensity, sigma.
struct Range {
  double mid, half;
};
constexpr Range kRectRanges[3] = {{3.25, 1.75}, {1.9, 1.1}, {0.6, 0.3}};
constexpr Range kDotRanges[4] = {{3.75, 2.25}, {std::numbers::pi, std::numbers::pi}, {0.65, 0.35}, {0.9, 0.4}};

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

void GenConfig::validate() const {
  if (num_instances < 1) throw ConfigError("data.num_instances: must be positive");
  if (views_per_instance < 2) throw ConfigError("data.views_per_instance: must be at least 2");
  if (pose_grid < 1) throw ConfigError("data.pose_grid: must be positive");
  if (elevations < 1) throw ConfigError("data.elevations: must be positive");
  if (image_size < 4) throw ConfigError("data.image_size: must be at least 4");
  if (image_size > 16) throw ConfigError("data.image_size: images above 16x16 are not supported");
  if (!(noise_sigma >= 0.0)) throw ConfigError("data.noise_sigma: must be >= 0");
  if (!(instance_separation > 0.0)) throw ConfigError("data.instance_separation: must be > 0");
  if (!(outlier_fraction >= 0.0 && outlier_fraction < 0.5))
    throw ConfigError("data.outlier_fraction: must lie in [0, 0.5)");
  if (!(outlier_magnitude > 0.0)) throw ConfigError("data.outlier_magnitude: must be > 0");
  selected_views();
}

std::vector<std::size_t> GenConfig::selected_views() const {
  std::vector<std::size_t> eligible;
  for (std::size_t e = 0; e < elevations; ++e)
    for (std::size_t k = 0; k < pose_grid; ++k) {
      if (frontal_only) {
        double deg = 360.0 * static_cast<double>(k) / static_cast<double>(pose_grid);
        if (deg > 180.0) deg = 360.0 - deg;
        if (deg > kFrontalHalfAngleDeg + 1e-9) continue;
      }
      eligible.push_back(e * pose_grid + k);
    }
  if (views_per_instance > eligible.size())
    throw ConfigError("data.views_per_instance: " + std::to_string(views_per_instance) + " exceeds the " +
                      std::to_string(eligible.size()) + " available poses");
  std::vector<std::size_t> views;
  for (std::size_t i = 0; i < views_per_instance; ++i) views.push_back(eligible[i * eligible.size() / views_per_instance]);
  return views;
}

void to_json(json& j, const GenConfig& c) {
  j = json{{"num_instances", c.num_instances},
           {"views_per_instance", c.views_per_instance},
           {"pose_grid", c.pose_grid},
           {"elevations", c.elevations},
           {"image_size", c.image_size},
           {"noise_sigma", c.noise_sigma},
           {"instance_separation", c.instance_separation},
           {"outlier_fraction", c.outlier_fraction},
           {"outlier_magnitude", c.outlier_magnitude},
           {"frontal_only", c.frontal_only},
           {"seed", c.seed}};
}

void from_json(const json& j, GenConfig& c) {
  static const std::set<std::string> known{"num_instances", "views_per_instance", "pose_grid",
                                           "elevations",    "image_size",         "noise_sigma",
                                           "instance_separation", "outlier_fraction", "outlier_magnitude",
                                           "frontal_only",  "seed"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ConfigError("data: unknown key '" + it.key() + "'");
  c.num_instances = j.value("num_instances", c.num_instances);
  c.views_per_instance = j.value("views_per_instance", c.views_per_instance);
  c.pose_grid = j.value("pose_grid", c.pose_grid);
  c.elevations = j.value("elevations", c.elevations);
  c.image_size = j.value("image_size", c.image_size);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.instance_separation = j.value("instance_separation", c.instance_separation);
  c.outlier_fraction = j.value("outlier_fraction", c.outlier_fraction);
  c.outlier_magnitude = j.value("outlier_magnitude", c.outlier_magnitude);
  c.frontal_only = j.value("frontal_only", c.frontal_only);
  c.seed = j.value("seed", c.seed);
}

Eigen::VectorXd sample_latent(std::uint64_t seed, double separation) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd latent(static_cast<Eigen::Index>(kLatentDim));
  Eigen::Index i = 0;
  for (const auto& r : kRectRanges) latent[i++] = r.mid + r.half * std::tanh(separation * normal(rng));
  for (std::size_t d = 0; d < kGlyphDots; ++d)
    for (const auto& r : kDotRanges) latent[i++] = r.mid + r.half * std::tanh(separation * normal(rng));
  return latent;
}

std::pair<double, std::size_t> view_pose(std::size_t view, std::size_t pose_grid) {
  const auto k = view % pose_grid;
  return {2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(pose_grid), view / pose_grid};
}

Tensor render_glyph(const Eigen::VectorXd& latent, double rotation, std::size_t elevation, std::size_t size,
                    double noise_sigma, std::uint64_t noise_seed) {
  if (latent.size() != static_cast<Eigen::Index>(kLatentDim)) throw DimensionError("render_glyph: bad latent length");
  const double c = std::cos(rotation), s = std::sin(rotation);
  const double squash = std::cos(static_cast<double>(elevation) * kElevationStepDeg * std::numbers::pi / 180.0);
  const double half = static_cast<double>(size) / 2.0;
  const double hw = latent[0], hh = latent[1], intensity = latent[2];

  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  Tensor img = Tensor::zeros({1, size, size});
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) {
      const double px = static_cast<double>(j) + 0.5 - half;
      const double py = static_cast<double>(i) + 0.5 - half;
      const double qx = c * px + s * py;
      const double qy = (-s * px + c * py) / squash;
      double v = intensity * sigmoid((hw - std::abs(qx)) / kEdgeSoftness) * sigmoid((hh - std::abs(qy)) / kEdgeSoftness);
      for (std::size_t d = 0; d < kGlyphDots; ++d) {
        const auto base = static_cast<Eigen::Index>(3 + 4 * d);
        const double r = latent[base], a = latent[base + 1], di = latent[base + 2], sigma = latent[base + 3];
        const double dx = qx - r * std::cos(a), dy = qy - r * std::sin(a);
        v += di * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      }
      if (noise_sigma > 0.0) v += noise_sigma * noise(rng);
      img.data[static_cast<Eigen::Index>(i * size + j)] = std::clamp(v, 0.0, 1.0);
    }
  return img;
}

namespace {

std::uint64_t noise_seed(std::uint64_t seed, std::size_t instance, std::size_t view) {
  return derive_seed(seed, {0x6e6f697365ULL, instance, view});
}

}  // namespace

InstanceDataset generate(const GenConfig& cfg) {
  cfg.validate();
  const auto views = cfg.selected_views();
  InstanceDataset ds;
  ds.generator = cfg;
  for (std::size_t inst = 0; inst < cfg.num_instances; ++inst) {
    auto latent = sample_latent(derive_seed(cfg.seed, {0x6c6174656e74ULL, inst}), cfg.instance_separation);
    for (auto view : views) {
      const auto [rot, elev] = view_pose(view, cfg.pose_grid);
      ds.samples.push_back({render_glyph(latent, rot, elev, cfg.image_size, cfg.noise_sigma,
                                         noise_seed(cfg.seed, inst, view)),
                            inst, view, ds.samples.size()});
    }
    ds.latents.emplace(inst, std::move(latent));
  }
  if (cfg.outlier_fraction > 0.0)
    ds = inject_outliers(ds, cfg.outlier_fraction, cfg.outlier_magnitude, derive_seed(cfg.seed, {0x6f75746c6965ULL}));
  return ds;
}

InstanceDataset inject_outliers(const InstanceDataset& ds, double fraction, double magnitude, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 0.5)) throw ConfigError("outlier fraction must lie in [0, 0.5)");
  if (ds.generator.is_null() || ds.latents.empty())
    throw ContractError("inject_outliers: dataset carries no generator latents");
  const auto cfg = ds.generator.get<GenConfig>();
  auto instances = ds.instance_ids();
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(instances.size())));
  InstanceDataset out = ds;
  if (count == 0) return out;

  std::mt19937_64 rng(seed);
  std::shuffle(instances.begin(), instances.end(), rng);
  const std::set<std::size_t> chosen(instances.begin(), instances.begin() + static_cast<std::ptrdiff_t>(count));
  for (auto inst : chosen) out.latents.at(inst) *= magnitude;
  for (auto& s : out.samples) {
    if (!chosen.count(s.instance)) continue;
    const auto [rot, elev] = view_pose(s.view, cfg.pose_grid);
    s.image = render_glyph(out.latents.at(s.instance), rot, elev, cfg.image_size, cfg.noise_sigma,
                           noise_seed(cfg.seed, s.instance, s.view));
  }
  out.outlier_instances.insert(chosen.begin(), chosen.end());
  return out;
}

RetrievalSplit make_retrieval_split(const InstanceDataset& ds, std::size_t queries_per_instance, std::uint64_t seed) {
  if (queries_per_instance == 0) throw ConfigError("eval.queries_per_instance: must be positive");
  RetrievalSplit split;
  std::mt19937_64 rng(seed);
  for (auto [inst, positions] : ds.positions_by_instance()) {
    if (positions.size() <= queries_per_instance)
      throw ConfigError("eval.queries_per_instance: instance " + std::to_string(inst) + " has only " +
                        std::to_string(positions.size()) + " views");
    std::shuffle(positions.begin(), positions.end(), rng);
    std::sort(positions.begin(), positions.begin() + static_cast<std::ptrdiff_t>(queries_per_instance));
    std::sort(positions.begin() + static_cast<std::ptrdiff_t>(queries_per_instance), positions.end());
    for (std::size_t i = 0; i < positions.size(); ++i)
      (i < queries_per_instance ? split.queries : split.gallery).push_back(ds.samples[positions[i]]);
  }
  return split;
}

std::pair<InstanceDataset, InstanceDataset> hold_out_instances(const InstanceDataset& ds, std::size_t count) {
  const auto ids = ds.instance_ids();
  if (count == 0 || count + 2 > ids.size())
    throw ConfigError("eval.instances: need 1.." + std::to_string(ids.size() >= 2 ? ids.size() - 2 : 0) +
                      " held-out instances, got " + std::to_string(count));
  const std::set<std::size_t> eval(ids.end() - static_cast<std::ptrdiff_t>(count), ids.end());
  const std::set<std::size_t> train(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(count));
  return {ds.restrict_to(train), ds.restrict_to(eval)};
}

}  // namespace cilab
