// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cilab/model.hpp"

#include "cilab/error.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>

namespace cilab {

namespace {

struct LayerSpec {
  std::string name;
  Shape weight;
  Shape bias;
  std::size_t fan_in;
  std::size_t fan_out;
};

std::vector<LayerSpec> layer_specs(const NetConfig& c) {
  std::vector<LayerSpec> specs;
  std::size_t in = c.channels;
  for (std::size_t i = 0; i < c.conv_channels.size(); ++i) {
    const auto out = c.conv_channels[i];
    specs.push_back({"conv" + std::to_string(i), {out, in, 3, 3}, {out}, in * 9, out * 9});
    in = out;
  }
  std::size_t features = c.flat_features();
  for (std::size_t i = 0; i < c.hidden_dims.size(); ++i) {
    const auto out = c.hidden_dims[i];
    specs.push_back({"fc" + std::to_string(i), {out, features}, {out}, features, out});
    features = out;
  }
  specs.push_back({std::string(kHeadLayer), {c.embed_dim, features}, {c.embed_dim}, features, c.embed_dim});
  return specs;
}

template <class Net, class Bind>
Var forward(Net& net, Var image, Bind bind, bool normalize) {
  const auto& cfg = net.config();
  if (image.shape() != cfg.input_shape())
    throw DimensionError("embed: image shape " + to_string(image.shape()) + " differs from network input " +
                         to_string(cfg.input_shape()));
  Var x = image;
  for (std::size_t i = 0; i < cfg.conv_blocks(); ++i) {
    const std::string layer = "conv" + std::to_string(i);
    x = maxpool2d(relu(conv2d(x, bind(net.parameter(layer + ".weight")), bind(net.parameter(layer + ".bias")))));
  }
  x = reshape(x, {x.size(), 1});
  auto linear = [&](const std::string& layer) {
    Var w = bind(net.parameter(layer + ".weight"));
    Var b = bind(net.parameter(layer + ".bias"));
    return matmul(w, x) + reshape(b, {b.size(), 1});
  };
  for (std::size_t i = 0; i < cfg.hidden_dims.size(); ++i) x = relu(linear("fc" + std::to_string(i)));
  x = reshape(linear(std::string(kHeadLayer)), {cfg.embed_dim});
  return normalize ? l2_normalize(x) : x;
}

}  // namespace

// ---- NetConfig -------------------------------------------------------------

std::size_t NetConfig::flat_features() const {
  std::size_t h = height, w = width, c = channels;
  for (auto out : conv_channels) {
    if (h < 3 || w < 3)
      throw ConfigError("net: input " + std::to_string(height) + "x" + std::to_string(width) + " too small for " +
                        std::to_string(conv_channels.size()) + " conv blocks");
    h /= 2;
    w /= 2;
    c = out;
  }
  return c * h * w;
}

void NetConfig::validate() const {
  if (channels == 0 || height == 0 || width == 0) throw ConfigError("net.input: dimensions must be positive");
  for (auto c : conv_channels)
    if (c == 0) throw ConfigError("net.conv_channels: entries must be positive");
  for (auto d : hidden_dims)
    if (d == 0) throw ConfigError("net.hidden_dims: entries must be positive");
  if (embed_dim < 2) throw ConfigError("net.embed_dim: must be at least 2");
  if (flat_features() == 0) throw ConfigError("net: no spatial extent left after pooling");
}

void to_json(nlohmann::json& j, const NetConfig& c) {
  j = nlohmann::json{{"input", {c.channels, c.height, c.width}},
                     {"conv_channels", c.conv_channels},
                     {"hidden_dims", c.hidden_dims},
                     {"embed_dim", c.embed_dim}};
}

void from_json(const nlohmann::json& j, NetConfig& c) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "input" && it.key() != "conv_channels" && it.key() != "hidden_dims" && it.key() != "embed_dim")
      throw ConfigError("net: unknown key '" + it.key() + "'");
  if (j.contains("input")) {
    auto in = j.at("input").get<std::vector<std::size_t>>();
    if (in.size() != 3) throw ConfigError("net.input: expected [channels, height, width]");
    c.channels = in[0];
    c.height = in[1];
    c.width = in[2];
  }
  if (j.contains("conv_channels")) c.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
  if (j.contains("hidden_dims")) c.hidden_dims = j.at("hidden_dims").get<std::vector<std::size_t>>();
  if (j.contains("embed_dim")) c.embed_dim = j.at("embed_dim").get<std::size_t>();
}

// ---- EmbeddingNet ----------------------------------------------------------

EmbeddingNet::EmbeddingNet(NetConfig config, std::vector<Parameter> params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  const auto specs = layer_specs(config_);
  if (params_.size() != 2 * specs.size())
    throw SnapshotError("expected " + std::to_string(2 * specs.size()) + " parameters, got " +
                        std::to_string(params_.size()));
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& w = params_[2 * i];
    const auto& b = params_[2 * i + 1];
    if (w.name != specs[i].name + ".weight" || b.name != specs[i].name + ".bias")
      throw SnapshotError("parameter order/name mismatch at layer " + specs[i].name);
    if (w.value.shape != specs[i].weight || b.value.shape != specs[i].bias)
      throw SnapshotError("parameter shape mismatch at layer " + specs[i].name);
  }
  for (auto& p : params_) {
    p.layer = p.name.substr(0, p.name.find('.'));
    p.value.requires_grad = true;
  }
}

Parameter& EmbeddingNet::parameter(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw SnapshotError("no parameter named " + std::string(name));
}

const Parameter& EmbeddingNet::parameter(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw SnapshotError("no parameter named " + std::string(name));
}

std::size_t EmbeddingNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::vector<std::string> EmbeddingNet::layer_names() const {
  std::vector<std::string> names;
  for (const auto& s : layer_specs(config_)) names.push_back(s.name);
  return names;
}

std::vector<std::string> EmbeddingNet::conv_layer_names() const {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < config_.conv_blocks(); ++i) names.push_back("conv" + std::to_string(i));
  return names;
}

void EmbeddingNet::freeze(std::span<const std::string> layers) {
  const auto known = layer_names();
  for (const auto& l : layers)
    if (std::find(known.begin(), known.end(), l) == known.end()) throw ConfigError("cannot freeze unknown layer '" + l + "'");
  for (const auto& l : layers) frozen_.insert(l);
  for (auto& p : params_)
    if (frozen_.count(p.layer)) p.value.requires_grad = false;
}

void EmbeddingNet::unfreeze_all() {
  frozen_.clear();
  for (auto& p : params_) p.value.requires_grad = true;
}

void EmbeddingNet::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

// ---- snapshots -------------------------------------------------------------

ParameterSnapshot::ParameterSnapshot(const EmbeddingNet& net) {
  for (const auto& p : net.parameters()) params_.push_back({p.name, p.layer, Tensor(p.value.shape, p.value.data)});
}

const Parameter& ParameterSnapshot::parameter(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw SnapshotError("snapshot has no parameter named " + std::string(name));
}

ParameterSnapshot snapshot(const EmbeddingNet& net) { return ParameterSnapshot(net); }

void restore(EmbeddingNet& net, const ParameterSnapshot& snap) {
  auto dst = net.parameters();
  auto src = snap.parameters();
  if (dst.size() != src.size()) throw SnapshotError("restore: parameter count differs");
  for (std::size_t i = 0; i < dst.size(); ++i)
    if (dst[i].name != src[i].name || dst[i].value.shape != src[i].value.shape)
      throw SnapshotError("restore: mismatch at parameter " + dst[i].name);
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i].value.data = src[i].value.data;
    dst[i].value.zero_grad();
  }
}

void freeze(EmbeddingNet& net, std::span<const std::string> layers) { net.freeze(layers); }

EmbeddingNet clone_from(const ParameterSnapshot& snap, const NetConfig& config) {
  std::vector<Parameter> params(snap.parameters().begin(), snap.parameters().end());
  return EmbeddingNet(config, std::move(params));
}

// ---- init ------------------------------------------------------------------

EmbeddingNet init_xavier(const NetConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::vector<Parameter> params;
  for (const auto& spec : layer_specs(config)) {
    const double bound = std::sqrt(6.0 / static_cast<double>(spec.fan_in + spec.fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor w = Tensor::zeros(spec.weight, true);
    for (Eigen::Index i = 0; i < w.data.size(); ++i) w.data[i] = dist(rng);
    params.push_back({spec.name + ".weight", spec.name, std::move(w)});
    params.push_back({spec.name + ".bias", spec.name, Tensor::zeros(spec.bias, true)});
  }
  return EmbeddingNet(config, std::move(params));
}

void reinit_unfrozen(EmbeddingNet& net, std::uint64_t seed) {
  EmbeddingNet fresh = init_xavier(net.config(), seed);
  auto dst = net.parameters();
  auto src = fresh.parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (net.is_frozen(dst[i].layer)) continue;
    dst[i].value.data = src[i].value.data;
    dst[i].value.zero_grad();
  }
}

// ---- forward ---------------------------------------------------------------

Var embed(Graph& g, EmbeddingNet& net, Var image) {
  return forward(net, image, [&g](Parameter& p) { return g.param(p.value); }, true);
}

Var embed(Graph& g, const EmbeddingNet& net, Var image) {
  return forward(net, image, [&g](const Parameter& p) { return g.view(p.value); }, true);
}

Eigen::VectorXd embed(const EmbeddingNet& net, const Tensor& image) {
  Graph g;
  return embed(g, net, g.view(image)).value().data;
}

Eigen::VectorXd embed_unnormalized(const EmbeddingNet& net, const Tensor& image) {
  Graph g;
  return forward(net, g.view(image), [&g](const Parameter& p) { return g.view(p.value); }, false).value().data;
}

// ---- Adam ------------------------------------------------------------------

AdamState AdamState::for_net(const EmbeddingNet& net, double lr) {
  AdamState s;
  s.lr = lr;
  for (const auto& p : net.parameters()) {
    s.m.push_back(Eigen::VectorXd::Zero(p.value.data.size()));
    s.v.push_back(Eigen::VectorXd::Zero(p.value.data.size()));
  }
  return s;
}

void adam_step(EmbeddingNet& net, AdamState& state) {
  auto params = net.parameters();
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ContractError("adam_step: optimizer state does not mirror the network");
  for (const auto& p : params)
    if (!net.is_frozen(p.layer) && !p.value.grad)
      throw ContractError("adam_step: parameter " + p.name + " has no gradient");

  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (net.is_frozen(p.layer)) continue;
    const auto& g = *p.value.grad;
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g.cwiseProduct(g);
    p.value.data.array() -= state.lr * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + state.eps);
  }
  net.zero_grad();
}

}  // namespace cilab
