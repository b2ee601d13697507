// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cilab/experiment.hpp"

#include "cilab/checkpoint.hpp"
#include "cilab/error.hpp"
#include "cilab/seed.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace cilab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kTagSplit = 0x73706c6974ULL;

void reject_unknown(const json& j, const std::string& section, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  const std::set<std::string> known(keys.begin(), keys.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ConfigError(section + ": unknown key '" + it.key() + "'");
}

// Runs a section parser, prefixing library json errors with the section name.
template <class Fn>
void section(const std::string& name, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const json::exception& e) {
    throw ConfigError(name + ": " + e.what());
  }
}

std::string fmt2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", round2(v) + 0.0);
  return buf;
}

}  // namespace

// ---- config ------------------------------------------------------------------

ExperimentConfig parse_experiment(const json& j, const fs::path& base_dir) {
  reject_unknown(j, "config",
                 {"name", "seed", "data", "eval", "stream", "model", "training", "loss", "strategies", "loss_families",
                  "transfer", "output"});
  ExperimentConfig c;
  section("name", [&] { c.name = j.value("name", c.name); });
  section("seed", [&] { c.seed = j.value("seed", c.seed); });

  if (!j.contains("data")) throw ConfigError("data: missing section");
  section("data", [&] {
    const auto& d = j.at("data");
    reject_unknown(d, "data", {"generate", "path"});
    if (d.contains("generate") == d.contains("path"))
      throw ConfigError("data: exactly one of 'generate' and 'path' is required");
    if (d.contains("generate")) c.generate = d.at("generate").get<GenConfig>();
    if (d.contains("path")) {
      fs::path p = d.at("path").get<std::string>();
      c.dataset_path = p.is_relative() ? base_dir / p : p;
    }
  });
  section("eval", [&] {
    if (!j.contains("eval")) return;
    const auto& e = j.at("eval");
    reject_unknown(e, "eval", {"instances", "queries_per_instance"});
    c.eval.instances = e.value("instances", c.eval.instances);
    c.eval.queries_per_instance = e.value("queries_per_instance", c.eval.queries_per_instance);
  });
  section("stream", [&] {
    if (!j.contains("stream")) return;
    const auto& s = j.at("stream");
    reject_unknown(s, "stream", {"regime", "batches", "seed"});
    if (s.contains("regime")) c.stream.regime = parse_regime(s.at("regime").get<std::string>());
    c.stream.batches = s.value("batches", c.stream.batches);
    if (s.contains("seed")) c.stream.seed = s.at("seed").get<std::uint64_t>();
  });
  section("model", [&] {
    if (j.contains("model")) c.model = j.at("model").get<NetConfig>();
  });
  section("training", [&] {
    if (j.contains("training")) c.training = j.at("training").get<TrainingConfig>();
  });
  section("loss", [&] {
    if (j.contains("loss")) c.loss = j.at("loss").get<LossConfig>();
  });
  section("strategies", [&] {
    if (!j.contains("strategies")) return;
    c.strategies.clear();
    for (const auto& s : j.at("strategies")) {
      StrategyEntry e;
      if (s.is_string()) {
        e.kind = parse_strategy(s.get<std::string>());
      } else {
        reject_unknown(s, "strategies[]", {"kind", "loss"});
        e.kind = parse_strategy(s.at("kind").get<std::string>());
        if (s.contains("loss")) e.loss = parse_loss_family(s.at("loss").get<std::string>());
      }
      c.strategies.push_back(e);
    }
  });
  section("loss_families", [&] {
    if (!j.contains("loss_families")) return;
    c.loss_families.clear();
    for (const auto& f : j.at("loss_families")) c.loss_families.push_back(parse_loss_family(f.get<std::string>()));
  });
  section("transfer", [&] {
    if (!j.contains("transfer")) return;
    const auto& t = j.at("transfer");
    TransferSection ts;
    ts.settings = t.get<TransferConfig>();
    if (t.contains("pretrain_data")) ts.pretrain_data = t.at("pretrain_data").get<GenConfig>();
    c.transfer = ts;
  });
  section("output", [&] {
    if (!j.contains("output")) return;
    const auto& o = j.at("output");
    reject_unknown(o, "output", {"dir", "checkpoints"});
    if (o.contains("dir")) {
      fs::path p = o.at("dir").get<std::string>();
      c.output_dir = p.is_relative() ? base_dir / p : p;
    }
    c.checkpoints = o.value("checkpoints", c.checkpoints);
  });
  if (!j.contains("output") || !j.at("output").contains("dir")) c.output_dir = base_dir / c.output_dir;
  c.validate();
  return c;
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  return parse_experiment(j, path.parent_path());
}

void ExperimentConfig::validate() const {
  if (name.empty() || name.find_first_of(",\n\"") != std::string::npos)
    throw ConfigError("name: must be non-empty and free of commas, quotes and newlines");
  if (generate) {
    generate->validate();
    if (model.channels != 1 || model.height != generate->image_size || model.width != generate->image_size)
      throw ConfigError("model.input: must be [1, " + std::to_string(generate->image_size) + ", " +
                        std::to_string(generate->image_size) + "] to match data.generate.image_size");
  }
  model.validate();
  if (eval.queries_per_instance == 0) throw ConfigError("eval.queries_per_instance: must be positive");
  if (eval.instances == 0) throw ConfigError("eval.instances: must be positive");
  if (generate) {
    if (eval.instances + 2 > generate->num_instances)
      throw ConfigError("eval.instances: leaves fewer than 2 training instances");
    if (eval.queries_per_instance >= generate->views_per_instance)
      throw ConfigError("eval.queries_per_instance: must be below data.generate.views_per_instance");
  }
  if (stream.batches == 0) throw ConfigError("stream.batches: must be positive");
  if (loss_families.empty()) throw ConfigError("loss_families: must not be empty");
  if (strategies.empty()) throw ConfigError("strategies: must not be empty");
  for (const auto& e : strategies)
    if (e.kind == StrategyKind::lwf) {
      const bool triplet = e.loss ? *e.loss == LossFamily::triplet
                                  : std::find(loss_families.begin(), loss_families.end(), LossFamily::triplet) !=
                                        loss_families.end();
      if (triplet)
        throw ConfigError("strategies: lwf cannot be combined with the triplet loss; restrict it with "
                          "{\"kind\": \"lwf\", \"loss\": \"nce\"}");
    }
  if (transfer) {
    transfer->pretrain_data.validate();
    if (model.channels != 1 || model.height != transfer->pretrain_data.image_size ||
        model.width != transfer->pretrain_data.image_size)
      throw ConfigError("transfer.pretrain_data.image_size: must match model.input");
  }
  for (const auto& s : strategy_grid()) s.validate(model);
  for (auto f : loss_families) reference_config(f).validate(model);
}

std::vector<StrategyConfig> ExperimentConfig::strategy_grid() const {
  std::vector<StrategyConfig> out;
  for (auto family : loss_families)
    for (const auto& e : strategies) {
      if (e.kind == StrategyKind::cumulative) continue;
      if (e.loss && *e.loss != family) continue;
      StrategyConfig s;
      s.kind = e.kind;
      s.loss_family = family;
      s.loss = loss;
      s.training = training;
      if (transfer) s.transfer = transfer->settings;
      out.push_back(s);
    }
  return out;
}

StrategyConfig ExperimentConfig::reference_config(LossFamily family) const {
  StrategyConfig s;
  s.kind = StrategyKind::cumulative;
  s.loss_family = family;
  s.loss = loss;
  s.training = training;
  if (transfer) s.transfer = transfer->settings;
  return s;
}

// ---- data --------------------------------------------------------------------

InstanceDataset load_or_generate(const ExperimentConfig& cfg) {
  if (cfg.generate) return generate(*cfg.generate);
  return load_dataset(*cfg.dataset_path);
}

PreparedData prepare_data(const ExperimentConfig& cfg) {
  PreparedData d;
  d.dataset = load_or_generate(cfg);
  d.dataset.validate();
  auto [train, eval] = hold_out_instances(d.dataset, cfg.eval.instances);
  d.train = std::move(train);
  d.split = make_retrieval_split(eval, cfg.eval.queries_per_instance, derive_seed(cfg.seed, {kTagSplit}));
  d.plan = make_plan(d.train, cfg.stream.regime, cfg.stream.batches, cfg.stream_seed());
  return d;
}

json split_to_json(const RetrievalSplit& split, const std::string& dataset_ref) {
  json q = json::array(), g = json::array();
  for (const auto& s : split.queries) q.push_back(s.id);
  for (const auto& s : split.gallery) g.push_back(s.id);
  return json{{"format_version", 1}, {"dataset", dataset_ref}, {"queries", q}, {"gallery", g}};
}

RetrievalSplit split_from_json(const json& j, const InstanceDataset& ds) {
  try {
    if (j.at("format_version").get<int>() != 1) throw PersistenceError("split: unsupported format_version");
    std::map<std::size_t, const Sample*> by_id;
    for (const auto& s : ds.samples) by_id.emplace(s.id, &s);
    auto pick = [&](const json& ids) {
      std::vector<Sample> out;
      for (const auto& id : ids) {
        auto it = by_id.find(id.get<std::size_t>());
        if (it == by_id.end()) throw PersistenceError("split: sample id " + id.dump() + " not in dataset");
        out.push_back(*it->second);
      }
      return out;
    };
    RetrievalSplit split{pick(j.at("queries")), pick(j.at("gallery"))};
    split.validate();
    return split;
  } catch (const json::exception& e) {
    throw PersistenceError(std::string("split: ") + e.what());
  }
}

// ---- runs --------------------------------------------------------------------

std::string checkpoint_name(const std::string& strategy, const std::string& loss, bool transfer, std::size_t t) {
  return strategy + "_" + loss + (transfer ? "_transfer" : "") + "_t" + std::to_string(t) + ".json";
}

namespace {

class CheckpointWriter : public TrainObserver {
 public:
  CheckpointWriter(std::optional<fs::path> dir, TrainObserver* next) : dir_(std::move(dir)), next_(next) {}
  void select(std::string strategy, std::string loss, bool transfer) {
    strategy_ = std::move(strategy);
    loss_ = std::move(loss);
    transfer_ = transfer;
  }

  void on_batch_begin(std::size_t t, std::span<const Sample> batch) override {
    if (next_) next_->on_batch_begin(t, batch);
  }
  void on_sample_access(std::size_t t, std::size_t id) override {
    if (next_) next_->on_sample_access(t, id);
  }
  void on_step(std::size_t t, std::size_t step, double task, double reg) override {
    if (next_) next_->on_step(t, step, task, reg);
  }
  void on_batch_end(std::size_t t, const RunState& state) override {
    if (dir_) save_checkpoint(state.net, state.adam, *dir_ / checkpoint_name(strategy_, loss_, transfer_, t));
    if (next_) next_->on_batch_end(t, state);
  }

 private:
  std::optional<fs::path> dir_;
  TrainObserver* next_;
  std::string strategy_, loss_;
  bool transfer_ = false;
};

}  // namespace

std::vector<MetricsRow> run_experiment(const ExperimentConfig& cfg, const PreparedData& data, bool transfer,
                                       TrainObserver* observer) {
  if (transfer && !cfg.transfer) throw ConfigError("transfer: section missing from config");
  std::optional<fs::path> ckpt_dir;
  if (cfg.checkpoints) {
    ckpt_dir = cfg.output_dir / "checkpoints";
    fs::create_directories(*ckpt_dir);
  }
  CheckpointWriter writer(ckpt_dir, observer);
  const auto grid = cfg.strategy_grid();

  std::optional<InstanceDataset> synth;
  if (transfer) synth = generate(cfg.transfer->pretrain_data);

  std::vector<MetricsRow> rows;
  for (auto family : cfg.loss_families) {
    const auto ref_cfg = cfg.reference_config(family);
    std::optional<EmbeddingNet> pretrained;
    if (transfer) {
      pretrained.emplace(pretrain(*synth, ref_cfg, cfg.model, cfg.seed));
      pretrained->freeze(transfer_layers(cfg.transfer->settings, cfg.model));
    }
    auto run = [&](StrategyConfig s) {
      writer.select(s.name(), to_string(family), transfer);
      if (transfer) s.training.lr = s.transfer->transfer_lr;
      return run_stream(data.train, data.plan, s, cfg.model, data.split, cfg.seed, &writer,
                        pretrained ? &*pretrained : nullptr);
    };

    const auto ref = run(ref_cfg);
    auto emit = [&](std::vector<MetricsRecord> records) {
      for (auto& r : records) {
        attach_reference(r, ref.at(r.t).map);
        rows.push_back({cfg.name, r, transfer ? std::optional<bool>(true) : std::nullopt});
      }
    };
    emit(ref);
    for (const auto& s : grid)
      if (s.loss_family == family) emit(run(s));
  }
  return rows;
}

// ---- CSV ---------------------------------------------------------------------

namespace {

const std::vector<std::string> kColumns{"dataset", "strategy", "loss", "t", "mAP", "ref_mAP", "forget"};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& cell, const std::string& column, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw PersistenceError("metrics.csv line " + std::to_string(line) + ": column '" + column +
                           "' is not a number: '" + cell + "'");
  }
}

}  // namespace

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  bool with_transfer = false;
  for (const auto& r : rows) with_transfer |= r.transfer.has_value();
  std::string out = "dataset,strategy,loss,t,mAP,ref_mAP,forget";
  out += with_transfer ? ",transfer\n" : "\n";
  for (const auto& row : rows) {
    const auto& r = row.record;
    out += row.dataset + "," + r.strategy + "," + r.loss + "," + std::to_string(r.t) + "," + fmt2(r.map) + "," +
           fmt2(r.ref_map) + "," + fmt2(r.forget);
    if (with_transfer) out += std::string(",") + (row.transfer.value_or(false) ? "true" : "false");
    out += "\n";
  }
  return out;
}

std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw PersistenceError("metrics.csv: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv_line(line);
  for (std::size_t i = 0; i < kColumns.size(); ++i) {
    if (i >= header.size()) throw PersistenceError("metrics.csv: missing column '" + kColumns[i] + "'");
    if (header[i] != kColumns[i])
      throw PersistenceError("metrics.csv: column " + std::to_string(i + 1) + " is '" + header[i] + "', expected '" +
                             kColumns[i] + "'");
  }
  const bool with_transfer = header.size() == kColumns.size() + 1;
  if (with_transfer && header.back() != "transfer")
    throw PersistenceError("metrics.csv: unexpected column '" + header.back() + "'");
  if (header.size() > kColumns.size() + 1)
    throw PersistenceError("metrics.csv: unexpected column '" + header[kColumns.size() + 1] + "'");

  std::vector<MetricsRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw PersistenceError("metrics.csv line " + std::to_string(lineno) + ": expected " +
                             std::to_string(header.size()) + " cells, got " + std::to_string(cells.size()));
    MetricsRow row;
    row.dataset = cells[0];
    row.record.strategy = cells[1];
    row.record.loss = cells[2];
    const double t = parse_number(cells[3], "t", lineno);
    if (t < 0 || t != static_cast<double>(static_cast<std::size_t>(t)))
      throw PersistenceError("metrics.csv line " + std::to_string(lineno) + ": column 't' must be a whole number");
    row.record.t = static_cast<std::size_t>(t);
    row.record.map = parse_number(cells[4], "mAP", lineno);
    row.record.ref_map = parse_number(cells[5], "ref_mAP", lineno);
    row.record.forget = parse_number(cells[6], "forget", lineno);
    if (with_transfer) {
      if (cells[7] != "true" && cells[7] != "false")
        throw PersistenceError("metrics.csv line " + std::to_string(lineno) + ": column 'transfer' must be true/false");
      row.transfer = cells[7] == "true";
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace cilab
