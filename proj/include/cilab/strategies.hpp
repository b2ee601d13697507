// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cilab/dataset.hpp"
#include "cilab/losses.hpp"
#include "cilab/model.hpp"
#include "cilab/retrieval.hpp"
#include "cilab/stream.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cilab {

enum class StrategyKind { naive, finetune, lfl, lwf, ewc, cumulative };

std::string to_string(StrategyKind k);
StrategyKind parse_strategy(const std::string& s);

struct TrainingConfig {
  std::size_t epochs_per_batch = 8;
  /// Zero means one tuple per sample of the batch (a full anchor pass).
  std::size_t tuples_per_epoch = 0;
  std::size_t minibatch = 8;
  double lr = 1e-3;
  Mining mining = Mining::random;
  std::size_t nce_negatives = 9;
  std::size_t fisher_samples = 64;

  void validate() const;
  bool operator==(const TrainingConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainingConfig& c);
void from_json(const nlohmann::json& j, TrainingConfig& c);

/// Pretraining on synthetic instances followed by a low-rate continual phase
/// with the listed layers frozen.
struct TransferConfig {
  /// Empty means every conv block.
  std::vector<std::string> frozen_layers;
  double transfer_lr = 1e-4;
  std::size_t pretrain_max_epochs = 50;
  std::size_t patience = 5;
  double min_delta = 1e-4;

  bool operator==(const TransferConfig&) const = default;
};

void to_json(nlohmann::json& j, const TransferConfig& c);
void from_json(const nlohmann::json& j, TransferConfig& c);

struct StrategyConfig {
  StrategyKind kind = StrategyKind::naive;
  LossFamily loss_family = LossFamily::triplet;
  LossConfig loss;
  TrainingConfig training;
  std::optional<TransferConfig> transfer;
  /// Also add the penalties of all earlier (snapshot, Fisher) pairs.
  bool ewc_accumulate = false;

  /// Throws ConfigError for LwF with triplets, transfer_lr above lr, or
  /// frozen layers the network does not have.
  void validate(const NetConfig& net) const;
  std::string name() const;
};

struct RunState {
  EmbeddingNet net;
  AdamState adam;
  std::optional<ParameterSnapshot> snapshot_prev;
  std::optional<FisherDiagonal> fisher_prev;
  /// Earlier (snapshot, Fisher) pairs when ewc_accumulate is on.
  std::vector<std::pair<ParameterSnapshot, FisherDiagonal>> ewc_history;
  /// Fisher of the batch just finished, estimated before its data goes away.
  std::optional<FisherDiagonal> fisher_pending;
  std::size_t completed = 0;
  std::uint64_t seed = 0;

  RunState(EmbeddingNet n, double lr, std::uint64_t s) : net(std::move(n)), adam(AdamState::for_net(net, lr)), seed(s) {}
};

/// Hooks for audits and persistence. Default implementations do nothing.
class TrainObserver {
 public:
  virtual ~TrainObserver() = default;
  virtual void on_batch_begin(std::size_t /*t*/, std::span<const Sample> /*batch*/) {}
  /// A sample of the current batch was read for a tuple or a Fisher estimate.
  virtual void on_sample_access(std::size_t /*t*/, std::size_t /*sample_id*/) {}
  /// One optimizer step: mean task loss and regularizer value of the step.
  virtual void on_step(std::size_t /*t*/, std::size_t /*step*/, double /*task*/, double /*regularizer*/) {}
  virtual void on_batch_end(std::size_t /*t*/, const RunState& /*state*/) {}
};

/// Regularizer inputs carried from the previous batch.
struct Regularization {
  const EmbeddingNet* old_net = nullptr;
  const ParameterSnapshot* snapshot = nullptr;
  const FisherDiagonal* fisher = nullptr;
};

/// Loss terms of one minibatch.
struct StepLoss {
  Var total;
  Var task;
  std::optional<Var> regularizer;
};

/// Mean over tuples of the strategy's per-tuple loss plus, for EWC, one
/// penalty term. Regularizers are added only when `reg` supplies history.
StepLoss minibatch_loss(Graph& g, EmbeddingNet& net, std::span<const Sample> batch, std::span<const Triplet> tuples,
                        const StrategyConfig& cfg, const Regularization& reg);
StepLoss minibatch_loss(Graph& g, EmbeddingNet& net, std::span<const Sample> batch, std::span<const NceTuple> tuples,
                        const StrategyConfig& cfg, const Regularization& reg);

/// Per-strategy setup before batch t. Throws ContractError when the state
/// lacks the history batch t needs.
void prepare_batch(RunState& state, const StrategyConfig& cfg, std::size_t t);

/// Epochs of tuple sampling and Adam steps on one continuous batch.
/// Returns the mean task loss of the last epoch.
double train_batch(RunState& state, std::span<const Sample> batch, const StrategyConfig& cfg, std::size_t t,
                   TrainObserver* observer = nullptr);

/// Continual run over `plan`; each record carries mAP on the fixed split
/// (ref_map and forget are filled later). `initial` replaces the Xavier init.
std::vector<MetricsRecord> run_stream(const InstanceDataset& ds, const StreamPlan& plan, const StrategyConfig& cfg,
                                      const NetConfig& net_cfg, const RetrievalSplit& eval, std::uint64_t seed,
                                      TrainObserver* observer = nullptr, const EmbeddingNet* initial = nullptr);

/// Cumulative training on all of `ds` until the epoch loss stops improving.
EmbeddingNet pretrain(const InstanceDataset& ds, const StrategyConfig& cfg, const NetConfig& net_cfg,
                      std::uint64_t seed);

/// Pretrains on `synth`, freezes the transfer layers, and runs the stream at
/// transfer_lr from the pretrained weights.
std::vector<MetricsRecord> synthetic_transfer(const InstanceDataset& synth, const InstanceDataset& ds,
                                              const StreamPlan& plan, const StrategyConfig& cfg,
                                              const NetConfig& net_cfg, const RetrievalSplit& eval,
                                              std::uint64_t seed, TrainObserver* observer = nullptr);

/// Layers frozen by a transfer config (conv blocks when none are listed).
std::vector<std::string> transfer_layers(const TransferConfig& t, const NetConfig& net_cfg);

}  // namespace cilab
