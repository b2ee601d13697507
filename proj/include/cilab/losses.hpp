// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cilab/autodiff.hpp"
#include "cilab/dataset.hpp"
#include "cilab/model.hpp"

#include <json.hpp>

#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cilab {

enum class LossFamily { triplet, nce };

std::string to_string(LossFamily f);
LossFamily parse_loss_family(const std::string& s);

struct LossConfig {
  double alpha = 1.0;           // triplet margin
  double tau = 1.0;             // NCE temperature
  double lambda_c = 1.0;        // LFL task-loss weight
  double lambda_e = 0.1;        // LFL embedding-drift weight
  double lambda_ewc = 100.0;    // EWC previous-task importance
  double lambda_kd = 1.0;       // LwF distillation weight
  double kd_temperature = 2.0;  // LwF softening temperature

  void validate() const;
  bool operator==(const LossConfig&) const = default;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

/// Indices refer to the sample span of the continuous batch the tuple was
/// drawn from.
struct Triplet {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;
  std::size_t anchor_label = 0;
  std::size_t negative_label = 0;
};

struct NceTuple {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::vector<std::size_t> negatives;
  std::size_t anchor_label = 0;
  /// Set when the batch had fewer than K negatives and some were reused.
  bool negatives_repeated = false;
};

/// max(0, |a-p|^2 - |a-n|^2 + alpha)
Var triplet_loss(Var anchor, Var positive, Var negative, double alpha);
/// (a.p, a.n_1, ..., a.n_K); the positive is always at index 0.
Var nce_logits(Var anchor, Var positive, std::span<const Var> negatives);
/// Softmax cross-entropy of z / tau against index 0.
Var nce_loss(Var z, double tau);
/// |e_old - e_new|^2 with e_old treated as a constant.
Var lfl_regularizer(Var e_old, Var e_new);
/// T^2 * CE(softmax(z_old / T), softmax(z_new / T)) with z_old constant.
Var lwf_distillation(Var z_old, Var z_new, double temperature);

/// Per-parameter importance, parallel to the network's parameter list.
struct FisherDiagonal {
  std::vector<std::pair<std::string, Eigen::VectorXd>> values;
  std::size_t sample_count = 0;

  const Eigen::VectorXd& at(const std::string& name) const;
};

/// Task loss of one tuple under `net`.
Var task_loss(Graph& g, EmbeddingNet& net, std::span<const Sample> batch, const Triplet& t, const LossConfig& cfg);
Var task_loss(Graph& g, EmbeddingNet& net, std::span<const Sample> batch, const NceTuple& t, const LossConfig& cfg);

/// Empirical diagonal Fisher: mean over tuples of squared per-tuple loss
/// gradients. Frozen parameters get zero importance. Leaves net grads cleared.
FisherDiagonal estimate_fisher(EmbeddingNet& net, std::span<const Sample> batch, std::span<const Triplet> data,
                               const LossConfig& cfg);
FisherDiagonal estimate_fisher(EmbeddingNet& net, std::span<const Sample> batch, std::span<const NceTuple> data,
                               const LossConfig& cfg);

/// (lambda / 2) * sum_i F_i (theta_i - theta_old_i)^2
Var ewc_penalty(Graph& g, EmbeddingNet& net, const ParameterSnapshot& old, const FisherDiagonal& fisher,
                double lambda);

}  // namespace cilab
