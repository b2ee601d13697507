// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cilab/autodiff.hpp"
#include "cilab/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cilab {

/// Conv stem + MLP head. Each conv block is conv2d(3x3) -> relu -> maxpool2d;
/// hidden layers are linear -> relu; the last linear layer ("embed") feeds an
/// L2 normalisation.
struct NetConfig {
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  std::vector<std::size_t> conv_channels{8, 16};
  std::vector<std::size_t> hidden_dims{64};
  std::size_t embed_dim = 32;

  std::size_t conv_blocks() const { return conv_channels.size(); }
  /// Length of the flattened conv output. Throws ConfigError when the input
  /// is too small for the requested number of poolings.
  std::size_t flat_features() const;
  void validate() const;
  Shape input_shape() const { return {channels, height, width}; }

  bool operator==(const NetConfig&) const = default;
};

void to_json(nlohmann::json& j, const NetConfig& c);
void from_json(const nlohmann::json& j, NetConfig& c);

struct Parameter {
  std::string name;   // "<layer>.weight" / "<layer>.bias"
  std::string layer;
  Tensor value;
};

inline constexpr std::string_view kHeadLayer = "embed";

class EmbeddingNet {
 public:
  EmbeddingNet(NetConfig config, std::vector<Parameter> params);

  const NetConfig& config() const { return config_; }
  std::span<Parameter> parameters() { return params_; }
  std::span<const Parameter> parameters() const { return params_; }
  Parameter& parameter(std::string_view name);
  const Parameter& parameter(std::string_view name) const;
  std::size_t parameter_count() const;

  /// Layer names in forward order: conv0.., fc0.., embed.
  std::vector<std::string> layer_names() const;
  std::vector<std::string> conv_layer_names() const;

  /// Frozen layers keep requires_grad == false and are skipped by adam_step.
  void freeze(std::span<const std::string> layers);
  void unfreeze_all();
  bool is_frozen(std::string_view layer) const { return frozen_.count(std::string(layer)) != 0; }
  const std::set<std::string>& frozen() const { return frozen_; }

  void zero_grad();

 private:
  NetConfig config_;
  std::vector<Parameter> params_;
  std::set<std::string> frozen_;
};

/// Immutable deep copy of parameter values (the "old" network θ_o).
class ParameterSnapshot {
 public:
  ParameterSnapshot() = default;
  explicit ParameterSnapshot(const EmbeddingNet& net);

  std::span<const Parameter> parameters() const { return params_; }
  const Parameter& parameter(std::string_view name) const;

 private:
  std::vector<Parameter> params_;
};

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  std::vector<Eigen::VectorXd> m;  // parallel to net.parameters()
  std::vector<Eigen::VectorXd> v;

  static AdamState for_net(const EmbeddingNet& net, double lr);
};

/// Xavier-uniform weights, zero biases; deterministic in `seed`.
EmbeddingNet init_xavier(const NetConfig& config, std::uint64_t seed);

/// Differentiable forward pass; gradients reach parameters that require them.
Var embed(Graph& g, EmbeddingNet& net, Var image);
/// Forward pass with parameters bound read-only.
Var embed(Graph& g, const EmbeddingNet& net, Var image);
/// Inference helper returning the unit-norm embedding.
Eigen::VectorXd embed(const EmbeddingNet& net, const Tensor& image);
/// Same, without the final normalisation (used to contrast loss geometry).
Eigen::VectorXd embed_unnormalized(const EmbeddingNet& net, const Tensor& image);

/// Bias-corrected Adam update of every unfrozen parameter, then clears all
/// gradients. Throws ContractError if an unfrozen parameter has no gradient.
void adam_step(EmbeddingNet& net, AdamState& state);

ParameterSnapshot snapshot(const EmbeddingNet& net);
/// Copies snapshot values into `net`. Throws SnapshotError on name or shape
/// mismatch.
void restore(EmbeddingNet& net, const ParameterSnapshot& snap);
void freeze(EmbeddingNet& net, std::span<const std::string> layers);
EmbeddingNet clone_from(const ParameterSnapshot& snap, const NetConfig& config);

/// Re-draws Xavier weights for every unfrozen layer; frozen layers keep their
/// values.
void reinit_unfrozen(EmbeddingNet& net, std::uint64_t seed);

}  // namespace cilab
