// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cilab/dataset.hpp"
#include "cilab/losses.hpp"
#include "cilab/model.hpp"
#include "cilab/retrieval.hpp"
#include "cilab/strategies.hpp"
#include "cilab/stream.hpp"
#include "cilab/synth.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cilab {

struct EvalConfig {
  /// Highest instance ids held out for evaluation.
  std::size_t instances = 6;
  std::size_t queries_per_instance = 2;
};

struct StreamConfig {
  Regime regime = Regime::incremental;
  std::size_t batches = 5;
  /// Defaults to the experiment seed.
  std::optional<std::uint64_t> seed;
};

/// One row of the strategy grid.
struct StrategyEntry {
  StrategyKind kind = StrategyKind::naive;
  /// Restricts the entry to one loss family; otherwise every listed family.
  std::optional<LossFamily> loss;
};

struct TransferSection {
  GenConfig pretrain_data;
  TransferConfig settings;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::optional<GenConfig> generate;
  std::optional<std::filesystem::path> dataset_path;
  EvalConfig eval;
  StreamConfig stream;
  NetConfig model;
  TrainingConfig training;
  LossConfig loss;
  std::vector<StrategyEntry> strategies{{StrategyKind::naive, std::nullopt}};
  std::vector<LossFamily> loss_families{LossFamily::triplet};
  std::optional<TransferSection> transfer;
  std::filesystem::path output_dir = "out";
  bool checkpoints = true;

  /// Validates every nested section; throws ConfigError naming the field.
  void validate() const;
  /// (strategy, loss family) pairs to run, cumulative excluded, in config order.
  std::vector<StrategyConfig> strategy_grid() const;
  StrategyConfig reference_config(LossFamily family) const;
  std::uint64_t stream_seed() const { return stream.seed.value_or(seed); }
};

/// Parses a config document. Relative dataset paths resolve against
/// `base_dir`. Unknown keys are rejected.
ExperimentConfig parse_experiment(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// Dataset, held-out split and stream plan of an experiment.
struct PreparedData {
  InstanceDataset dataset;
  InstanceDataset train;
  RetrievalSplit split;
  StreamPlan plan;
};

InstanceDataset load_or_generate(const ExperimentConfig& cfg);
PreparedData prepare_data(const ExperimentConfig& cfg);

/// Query/gallery sample ids and the dataset they refer to.
nlohmann::json split_to_json(const RetrievalSplit& split, const std::string& dataset_ref);
RetrievalSplit split_from_json(const nlohmann::json& j, const InstanceDataset& ds);

struct MetricsRow {
  std::string dataset;
  MetricsRecord record;
  std::optional<bool> transfer;
};

/// Runs the cumulative reference and the strategy grid. `transfer` selects
/// the synthetic-transfer variant. Checkpoints go to
/// `<output_dir>/checkpoints` when enabled.
std::vector<MetricsRow> run_experiment(const ExperimentConfig& cfg, const PreparedData& data, bool transfer,
                                       TrainObserver* observer = nullptr);

std::string checkpoint_name(const std::string& strategy, const std::string& loss, bool transfer, std::size_t t);

/// Fixed column order, two-decimal percents. The `transfer` column is present
/// iff any row carries a transfer flag.
std::string metrics_csv(const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> parse_metrics_csv(const std::string& text);

}  // namespace cilab
