// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cilab/checkpoint.hpp"
#include "cilab/error.hpp"
#include "cilab/experiment.hpp"
#include "cilab/report.hpp"
#include "cilab/retrieval.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace cilab;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

ExperimentConfig load(const CommonOptions& o) {
  auto cfg = load_experiment(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) cfg.output_dir = o.out;
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw PersistenceError("cannot write '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw PersistenceError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int cmd_generate(const CommonOptions& o) {
  const auto cfg = load(o);
  if (!cfg.generate) throw ConfigError("data.generate: generate-data needs a generator section");
  const auto data = prepare_data(cfg);
  fs::create_directories(cfg.output_dir);
  save_dataset(data.dataset, cfg.output_dir / "dataset.json");
  write_text(cfg.output_dir / "split.json", split_to_json(data.split, "dataset.json").dump(2) + "\n");
  std::cout << "instances " << data.dataset.instance_ids().size() << ", samples " << data.dataset.samples.size()
            << ", outliers " << data.dataset.outlier_instances.size() << "\n"
            << "train instances " << data.train.instance_ids().size() << ", eval instances "
            << data.split.instances().size() << " (" << data.split.queries.size() << " queries, "
            << data.split.gallery.size() << " gallery)\n"
            << "wrote " << (cfg.output_dir / "dataset.json").string() << " and "
            << (cfg.output_dir / "split.json").string() << "\n";
  return 0;
}

void print_rows(const std::vector<MetricsRow>& rows) {
  for (const auto& r : rows)
    std::cout << r.record.strategy << "/" << r.record.loss << (r.transfer.value_or(false) ? "/transfer" : "")
              << " t=" << r.record.t << " mAP=" << round2(r.record.map) << " Ref=" << round2(r.record.ref_map)
              << " Forget=" << round2(r.record.forget) << "\n";
}

int cmd_train(const CommonOptions& o, bool transfer) {
  const auto cfg = load(o);
  if (transfer && !cfg.transfer) throw ConfigError("transfer: transfer needs a transfer section");
  const auto data = prepare_data(cfg);
  auto rows = run_experiment(cfg, data, false);
  if (transfer) {
    for (auto& r : rows) r.transfer = false;
    auto with = run_experiment(cfg, data, true);
    rows.insert(rows.end(), with.begin(), with.end());
  }
  write_text(cfg.output_dir / "metrics.csv", metrics_csv(rows));
  print_rows(rows);
  std::cout << "wrote " << (cfg.output_dir / "metrics.csv").string() << "\n";
  return 0;
}

int cmd_report(const std::string& csv, const std::string& out) {
  const auto rows = parse_metrics_csv(read_text(csv));
  std::cout << render_report(rows);
  const fs::path dir = out.empty() ? fs::path(csv).parent_path() : fs::path(out);
  write_text(dir / "curves.csv", curves_csv(rows));
  return 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& split_path) {
  const auto [net, adam] = load_checkpoint(checkpoint);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(split_path));
  } catch (const nlohmann::json::exception& e) {
    throw PersistenceError("split '" + split_path + "': " + e.what());
  }
  if (!j.contains("dataset") || !j.at("dataset").is_string())
    throw PersistenceError("split '" + split_path + "': missing dataset reference");
  fs::path ds_path = j.at("dataset").get<std::string>();
  if (ds_path.is_relative()) ds_path = fs::path(split_path).parent_path() / ds_path;
  const auto ds = load_dataset(ds_path);
  const auto split = split_from_json(j, ds);
  std::cout << "mAP " << std::fixed << std::setprecision(2) << round2(mean_average_precision(net, split)) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual instance learning lab"};
  app.require_subcommand(1);

  CommonOptions common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "Overrides the config seed");
    sub->add_option("--out", common.out, "Output directory");
  };
  auto* gen = app.add_subcommand("generate-data", "Generate the dataset and evaluation split");
  add_common(gen);
  auto* train = app.add_subcommand("train", "Run the cumulative reference and every strategy");
  add_common(train);
  auto* transfer = app.add_subcommand("transfer", "Run with and without synthetic pretraining");
  add_common(transfer);

  std::string csv, report_out;
  auto* report = app.add_subcommand("report", "Summarise a metrics.csv");
  report->add_option("metrics", csv, "metrics.csv")->required()->check(CLI::ExistingFile);
  report->add_option("--out", report_out, "Directory for curves.csv (default: next to metrics.csv)");

  std::string checkpoint, split;
  auto* evaluate = app.add_subcommand("evaluate", "mAP of a checkpoint on a split");
  evaluate->add_option("checkpoint", checkpoint, "Checkpoint manifest")->required();
  evaluate->add_option("split", split, "split.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) return cmd_generate(common);
    if (*train) return cmd_train(common, false);
    if (*transfer) return cmd_train(common, true);
    if (*report) return cmd_report(csv, report_out);
    if (*evaluate) return cmd_evaluate(checkpoint, split);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ProtocolError& e) {
    std::cerr << "protocol error: " << e.what() << "\n";
    return 3;
  } catch (const PersistenceError& e) {
    std::cerr << "persistence error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
