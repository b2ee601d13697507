// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cilab/losses.hpp"

#include "cilab/error.hpp"

#include <cmath>
#include <set>

namespace cilab {

std::string to_string(LossFamily f) { return f == LossFamily::triplet ? "triplet" : "nce"; }

LossFamily parse_loss_family(const std::string& s) {
  if (s == "triplet") return LossFamily::triplet;
  if (s == "nce") return LossFamily::nce;
  throw ConfigError("unknown loss family '" + s + "' (expected triplet or nce)");
}

void LossConfig::validate() const {
  const std::pair<const char*, double> weights[] = {{"alpha", alpha},       {"lambda_c", lambda_c},
                                                    {"lambda_e", lambda_e}, {"lambda_ewc", lambda_ewc},
                                                    {"lambda_kd", lambda_kd}};
  for (const auto& [name, w] : weights)
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError(std::string("loss.") + name + ": must be >= 0");
  if (!(tau > 0.0)) throw ConfigError("loss.tau: must be > 0");
  if (!(kd_temperature > 0.0)) throw ConfigError("loss.kd_temperature: must be > 0");
}

void to_json(nlohmann::json& j, const LossConfig& c) {
  j = nlohmann::json{{"alpha", c.alpha},       {"tau", c.tau},           {"lambda_c", c.lambda_c},
                     {"lambda_e", c.lambda_e}, {"lambda_ewc", c.lambda_ewc}, {"lambda_kd", c.lambda_kd},
                     {"kd_temperature", c.kd_temperature}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
  static const std::set<std::string> known{"alpha", "tau", "lambda_c", "lambda_e", "lambda_ewc", "lambda_kd",
                                           "kd_temperature"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ConfigError("loss: unknown key '" + it.key() + "'");
  c.alpha = j.value("alpha", c.alpha);
  c.tau = j.value("tau", c.tau);
  c.lambda_c = j.value("lambda_c", c.lambda_c);
  c.lambda_e = j.value("lambda_e", c.lambda_e);
  c.lambda_ewc = j.value("lambda_ewc", c.lambda_ewc);
  c.lambda_kd = j.value("lambda_kd", c.lambda_kd);
  c.kd_temperature = j.value("kd_temperature", c.kd_temperature);
}

Var triplet_loss(Var anchor, Var positive, Var negative, double alpha) {
  Var dp = anchor - positive;
  Var dn = anchor - negative;
  return relu(dot(dp, dp) - dot(dn, dn) + alpha);
}

Var nce_logits(Var anchor, Var positive, std::span<const Var> negatives) {
  if (negatives.empty()) throw ContractError("nce_logits: at least one negative is required");
  std::vector<Var> z;
  z.reserve(negatives.size() + 1);
  z.push_back(dot(anchor, positive));
  for (const auto& n : negatives) z.push_back(dot(anchor, n));
  return concat(z);
}

Var nce_loss(Var z, double tau) {
  if (!(tau > 0.0)) throw ContractError("nce_loss: tau must be positive");
  Eigen::VectorXd target = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(z.size()));
  target[0] = 1.0;
  return soft_cross_entropy(z * (1.0 / tau), target);
}

Var lfl_regularizer(Var e_old, Var e_new) {
  Var d = e_new - detach(e_old);
  return dot(d, d);
}

Var lwf_distillation(Var z_old, Var z_new, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("lwf_distillation: temperature must be positive");
  if (z_old.shape() != z_new.shape()) throw DimensionError("lwf_distillation: logit shapes differ");
  const Eigen::VectorXd target = softmax(z_old.value().data / temperature);
  return soft_cross_entropy(z_new * (1.0 / temperature), target) * (temperature * temperature);
}

const Eigen::VectorXd& FisherDiagonal::at(const std::string& name) const {
  for (const auto& [n, v] : values)
    if (n == name) return v;
  throw SnapshotError("fisher has no entry for " + name);
}

namespace {

Var embed_sample(Graph& g, EmbeddingNet& net, std::span<const Sample> batch, std::size_t i) {
  if (i >= batch.size()) throw ContractError("tuple index outside the batch");
  return embed(g, net, g.view(batch[i].image));
}

template <class Tuple>
FisherDiagonal fisher_impl(EmbeddingNet& net, std::span<const Sample> batch, std::span<const Tuple> data,
                           const LossConfig& cfg) {
  if (data.empty()) throw ContractError("estimate_fisher: no samples");
  FisherDiagonal f;
  for (const auto& p : net.parameters()) f.values.emplace_back(p.name, Eigen::VectorXd::Zero(p.value.data.size()));
  net.zero_grad();
  for (const auto& tuple : data) {
    Graph g;
    g.backward(task_loss(g, net, batch, tuple, cfg));
    auto params = net.parameters();
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].value.grad) f.values[i].second += params[i].value.grad->cwiseAbs2();
    net.zero_grad();
  }
  for (auto& [name, v] : f.values) v /= static_cast<double>(data.size());
  f.sample_count = data.size();
  return f;
}

}  // namespace

Var task_loss(Graph& g, EmbeddingNet& net, std::span<const Sample> batch, const Triplet& t, const LossConfig& cfg) {
  return triplet_loss(embed_sample(g, net, batch, t.anchor), embed_sample(g, net, batch, t.positive),
                      embed_sample(g, net, batch, t.negative), cfg.alpha);
}

Var task_loss(Graph& g, EmbeddingNet& net, std::span<const Sample> batch, const NceTuple& t, const LossConfig& cfg) {
  std::vector<Var> negatives;
  for (auto n : t.negatives) negatives.push_back(embed_sample(g, net, batch, n));
  return nce_loss(nce_logits(embed_sample(g, net, batch, t.anchor), embed_sample(g, net, batch, t.positive), negatives),
                  cfg.tau);
}

FisherDiagonal estimate_fisher(EmbeddingNet& net, std::span<const Sample> batch, std::span<const Triplet> data,
                               const LossConfig& cfg) {
  return fisher_impl(net, batch, data, cfg);
}

FisherDiagonal estimate_fisher(EmbeddingNet& net, std::span<const Sample> batch, std::span<const NceTuple> data,
                               const LossConfig& cfg) {
  return fisher_impl(net, batch, data, cfg);
}

Var ewc_penalty(Graph& g, EmbeddingNet& net, const ParameterSnapshot& old, const FisherDiagonal& fisher,
                double lambda) {
  auto params = net.parameters();
  if (old.parameters().size() != params.size() || fisher.values.size() != params.size())
    throw SnapshotError("ewc_penalty: network, snapshot and fisher disagree on parameters");
  Var total = g.input(Tensor::zeros({1}));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const auto& o = old.parameters()[i];
    if (o.name != p.name || fisher.values[i].first != p.name)
      throw SnapshotError("ewc_penalty: parameter name mismatch at " + p.name);
    if (o.value.shape != p.value.shape || fisher.values[i].second.size() != p.value.data.size())
      throw SnapshotError("ewc_penalty: shape mismatch at " + p.name);
    Var d = g.param(p.value) - g.view(o.value);
    Var f = g.input(Tensor(p.value.shape, fisher.values[i].second));
    total = total + reduce_sum(mul(mul(d, d), f));
  }
  return total * (lambda / 2.0);
}

}  // namespace cilab
