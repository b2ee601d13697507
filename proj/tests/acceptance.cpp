// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cilab/checkpoint.hpp"
#include "cilab/error.hpp"
#include "cilab/experiment.hpp"
#include "cilab/losses.hpp"
#include "cilab/retrieval.hpp"
#include "cilab/stream.hpp"
#include "cilab/strategies.hpp"
#include "fixtures.hpp"
#include "grad_cases.hpp"

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>

using namespace cilab;
using namespace cilab::testing;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kSource = CILAB_SOURCE_DIR;

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (ok) return;
    if (pass) detail = what;
    pass = false;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("cilab_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(CILAB_CLI) + " " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path smoke_config(const fs::path& dir) {
  auto j = json::parse(read_file(kSource / "configs" / "smoke.json"));
  j["output"]["dir"] = (dir / "out").string();
  const auto path = dir / "smoke.json";
  std::ofstream(path) << j.dump(2);
  return path;
}

bool same_bytes(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

// ---- AC1 --------------------------------------------------------------------

Verdict ac1() {
  Verdict v;
  struct Row {
    double ref, map, forget;
  };
  const Row rows[] = {{70.82, 50.01, 29.38}, {70.82, 50.91, 28.11}, {94.99, 83.77, 11.81},
                      {94.99, 81.44, 14.26}, {54.41, 38.60, 29.06}, {54.41, 37.43, 31.21}};
  for (const auto& r : rows) {
    const double f = forget_ratio(r.ref, r.map);
    v.require(std::abs(f - r.forget) <= 0.01, "Forget(" + fmt("%.2f", r.ref) + ", " + fmt("%.2f", r.map) +
                                                  ") = " + fmt("%.4f", f));
  }
  return v;
}

// ---- AC2 --------------------------------------------------------------------

Verdict ac2() {
  Verdict v;
  constexpr double kTol = 1e-5;
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2);
  auto record = [&](const std::string& name, double err) {
    v.require(err < kTol, name + " max relative error " + fmt("%.3g", err));
  };
  for (const auto& c : op_cases()) record(c.name, sweep_case(c, rng, 100).max_error);
  for (const auto& c : loss_cases()) record(c.name, sweep_case(c, rng, 100).max_error);

  NetConfig cfg;
  cfg.height = 6;
  cfg.width = 6;
  cfg.conv_channels = {2};
  cfg.hidden_dims = {5};
  cfg.embed_dim = 4;
  double ewc_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    auto net = init_xavier(cfg, static_cast<std::uint64_t>(trial));
    const auto old = snapshot(net);
    perturb(net, rng, 0.3);
    FisherDiagonal fisher;
    for (const auto& p : net.parameters())
      fisher.values.emplace_back(p.name, random_vector(p.value.size(), rng, 0.0, 1.0));
    std::vector<Tensor*> params;
    for (auto& p : net.parameters()) params.push_back(&p.value);
    const auto res = grad_check_detailed(params, [&](Graph& g) { return ewc_penalty(g, net, old, fisher, 2.5); });
    ewc_err = std::max(ewc_err, res.max_relative_error);
  }
  record("ewc_penalty", ewc_err);

  for (auto family : {LossFamily::triplet, LossFamily::nce})
    for (auto kind : {StrategyKind::naive, StrategyKind::lfl, StrategyKind::lwf, StrategyKind::ewc}) {
      if (kind == StrategyKind::lwf && family == LossFamily::triplet) continue;
      const auto r = composed_loss_sweep(linear_setup(31), kind, family, 100, 31);
      record("composed " + to_string(kind) + "/" + to_string(family), r.max_error);
    }

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  v.require(secs < 60.0, "sweep took " + fmt("%.1f", secs) + " s");
  if (v.pass) v.detail = fmt("%.1f s", secs);
  return v;
}

// ---- AC3 --------------------------------------------------------------------

Verdict ac3() {
  Verdict v;
  for (std::size_t k : {1u, 9u}) {
    Graph g;
    Var z = g.input(Tensor::zeros({k + 1}));
    const double loss = nce_loss(z, 0.5).item();
    const double expected = std::log(static_cast<double>(k + 1));
    v.require(std::abs(loss - expected) <= 1e-12, "NCE uniform K=" + std::to_string(k) + " " + fmt("%.17g", loss));
  }
  {
    Graph g;
    const Tensor e = Tensor::of({3}, {0.6, 0.0, 0.8});
    const double loss = triplet_loss(g.input(e), g.input(e), g.input(e), 0.7).item();
    v.require(std::abs(loss - 0.7) <= 1e-15, "collapsed triplet " + fmt("%.17g", loss));
  }
  NetConfig cfg = toy_net();
  auto net = init_xavier(cfg, 5);
  const auto old = snapshot(net);
  const auto old_net = clone_from(old, cfg);
  FisherDiagonal fisher;
  std::mt19937_64 rng(3);
  for (const auto& p : net.parameters())
    fisher.values.emplace_back(p.name, random_vector(p.value.size(), rng, 0.0, 5.0));
  {
    Graph g;
    const double pen = ewc_penalty(g, net, old, fisher, 100.0).item();
    v.require(std::abs(pen) <= 1e-15, "ewc penalty at the anchor " + fmt("%.3g", pen));
  }
  for (int i = 0; i < 5; ++i) {
    const Tensor img = random_tensor({1, 8, 8}, rng, 0.0, 1.0);
    Graph g;
    const double reg = lfl_regularizer(embed(g, old_net, g.view(img)), embed(g, net, g.view(img))).item();
    v.require(std::abs(reg) <= 1e-15, "lfl regularizer at the anchor " + fmt("%.3g", reg));
  }
  return v;
}

// ---- AC4 --------------------------------------------------------------------

/// Per-query AP from ranks counted directly, no sorting, summed in rank order.
double brute_force_map(const std::vector<Eigen::VectorXd>& qe, const std::vector<std::size_t>& ql,
                       const std::vector<Eigen::VectorXd>& ge, const std::vector<std::size_t>& gl) {
  double total = 0.0;
  for (std::size_t q = 0; q < qe.size(); ++q) {
    std::vector<double> d(ge.size());
    for (std::size_t g = 0; g < ge.size(); ++g) d[g] = (ge[g] - qe[q]).norm();
    auto rank = [&](std::size_t g) {
      std::size_t r = 1;
      for (std::size_t h = 0; h < ge.size(); ++h)
        if (d[h] < d[g] || (d[h] == d[g] && h < g)) ++r;
      return r;
    };
    double ap = 0.0;
    std::size_t relevant = 0;
    for (std::size_t g = 0; g < ge.size(); ++g) relevant += gl[g] == ql[q] ? 1 : 0;
    for (std::size_t r = 1; r <= ge.size(); ++r)
      for (std::size_t g = 0; g < ge.size(); ++g) {
        if (rank(g) != r || gl[g] != ql[q]) continue;
        std::size_t above = 0;
        for (std::size_t h = 0; h < ge.size(); ++h)
          if (gl[h] == ql[q] && rank(h) <= r) ++above;
        ap += static_cast<double>(above) / static_cast<double>(r);
      }
    total += ap / static_cast<double>(relevant);
  }
  return 100.0 * total / static_cast<double>(qe.size());
}

Verdict ac4() {
  Verdict v;
  std::mt19937_64 rng(4);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t instances = 2 + rng() % 5;
    const std::size_t nq = 1 + rng() % 10, ng = instances + rng() % (31 - instances);
    std::vector<Eigen::VectorXd> qe, ge;
    std::vector<std::size_t> ql, gl;
    for (std::size_t i = 0; i < nq; ++i) {
      qe.push_back(random_vector(3, rng));
      ql.push_back(rng() % instances);
    }
    for (std::size_t i = 0; i < ng; ++i) {
      ge.push_back(random_vector(3, rng));
      gl.push_back(i < instances ? i : rng() % instances);
    }
    const double got = mean_average_precision(qe, ql, ge, gl);
    const double want = brute_force_map(qe, ql, ge, gl);
    worst = std::max(worst, std::abs(got - want));
  }
  v.require(worst == 0.0, "max |mAP - oracle| " + fmt("%.3g", worst));
  return v;
}

// ---- AC5 --------------------------------------------------------------------

InstanceDataset grid_dataset(std::size_t instances, std::size_t views) {
  InstanceDataset ds;
  std::size_t id = 0;
  for (std::size_t i = 0; i < instances; ++i)
    for (std::size_t k = 0; k < views; ++k) ds.samples.push_back({Tensor::zeros({1, 2, 2}), i, k, id++});
  return ds;
}

Verdict ac5() {
  Verdict v;
  std::mt19937_64 rng(5);
  const Regime regimes[] = {Regime::random, Regime::balanced, Regime::incremental};
  for (int trial = 0; trial < 200; ++trial) {
    const auto regime = regimes[trial % 3];
    const std::size_t b = 1 + rng() % 6;
    const std::size_t instances = b + rng() % 8;
    const std::size_t views = regime == Regime::balanced ? b * (1 + rng() % 3) : 2 + rng() % 5;
    const auto ds = grid_dataset(instances, views);
    const auto plan = make_plan(ds, regime, b, rng());
    const std::string tag = "trial " + std::to_string(trial) + " " + to_string(regime) + ": ";

    std::vector<int> seen(ds.samples.size(), 0);
    for (const auto& batch : plan.batches) {
      v.require(!batch.positions.empty(), tag + "empty batch");
      for (auto p : batch.positions) ++seen[p];
    }
    v.require(plan.batches.size() == b, tag + "batch count");
    v.require(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }), tag + "not a partition");

    if (regime == Regime::random) {
      std::size_t lo = ds.samples.size(), hi = 0;
      for (const auto& batch : plan.batches) {
        lo = std::min(lo, batch.positions.size());
        hi = std::max(hi, batch.positions.size());
      }
      v.require(hi - lo <= 1, tag + "uneven sizes");
    }
    if (regime == Regime::incremental) {
      std::map<std::size_t, std::size_t> owner;
      for (const auto& batch : plan.batches)
        for (auto p : batch.positions)
          v.require(owner.emplace(ds.samples[p].instance, batch.index).first->second == batch.index,
                    tag + "instance split across batches");
    }
    if (regime == Regime::balanced)
      for (const auto& batch : plan.batches) {
        std::map<std::size_t, std::size_t> counts;
        for (auto p : batch.positions) ++counts[ds.samples[p].instance];
        v.require(counts.size() == instances, tag + "instance missing from a batch");
        for (auto [inst, c] : counts) v.require(c == views / b, tag + "unbalanced views");
      }
  }

  const auto ds = grid_dataset(3, 4);
  const auto plan = split_incremental(ds, 3, 9);
  const auto batch = materialize(ds, plan.batches[0]);
  for (int which = 0; which < 2; ++which) {
    bool starved = false;
    try {
      if (which == 0)
        sample_triplets(batch, 4, 1);
      else
        sample_nce_tuples(batch, 4, 3, 1);
    } catch (const StreamStarvationError&) {
      starved = true;
    }
    v.require(starved, which == 0 ? "single-instance batch fed triplets" : "single-instance batch fed NCE tuples");
  }
  return v;
}

// ---- AC6 --------------------------------------------------------------------

class NetRecorder : public TrainObserver {
 public:
  void on_batch_end(std::size_t, const RunState& state) override { nets.push_back(snapshot(state.net)); }
  std::vector<ParameterSnapshot> nets;
};

bool identical_runs(const ToyStream& toy, const StrategyConfig& a, const StrategyConfig& b) {
  NetRecorder ra, rb;
  const auto ma = run_stream(toy.train, toy.plan, a, toy.net, toy.eval, 4, &ra);
  const auto mb = run_stream(toy.train, toy.plan, b, toy.net, toy.eval, 4, &rb);
  if (ma.size() != mb.size() || ra.nets.size() != rb.nets.size()) return false;
  for (std::size_t t = 0; t < ma.size(); ++t)
    if (ma[t].map != mb[t].map) return false;
  for (std::size_t t = 0; t < ra.nets.size(); ++t)
    for (std::size_t i = 0; i < ra.nets[t].parameters().size(); ++i)
      if (!same_bytes(ra.nets[t].parameters()[i].value.data, rb.nets[t].parameters()[i].value.data)) return false;
  return true;
}

Verdict ac6() {
  Verdict v;
  const auto toy = make_toy_stream(3);
  for (auto family : {LossFamily::triplet, LossFamily::nce}) {
    const auto naive = toy_strategy(StrategyKind::naive, family);
    auto lfl = toy_strategy(StrategyKind::lfl, family);
    lfl.loss.lambda_c = 1.0;
    lfl.loss.lambda_e = 0.0;
    v.require(identical_runs(toy, naive, lfl), "lfl with lambda_e = 0 differs from naive/" + to_string(family));
    auto ewc = toy_strategy(StrategyKind::ewc, family);
    ewc.loss.lambda_ewc = 0.0;
    v.require(identical_runs(toy, naive, ewc), "ewc with lambda = 0 differs from naive/" + to_string(family));
  }
  bool rejected = false;
  try {
    run_stream(toy.train, toy.plan, toy_strategy(StrategyKind::lwf, LossFamily::triplet), toy.net, toy.eval, 1);
  } catch (const ConfigError&) {
    rejected = true;
  }
  v.require(rejected, "lwf with triplets accepted");
  return v;
}

// ---- AC7 --------------------------------------------------------------------

Verdict ac7() {
  Verdict v;
  const auto pilot = json::parse(read_file(kSource / "configs" / "toy_pilot.json"));
  const double margin = pilot.at("margin").get<double>();
  auto cfg = load_experiment(kSource / "configs" / "toy.json");
  cfg.strategies = {{StrategyKind::naive, std::nullopt}};
  cfg.loss_families = {LossFamily::triplet};
  cfg.transfer.reset();
  cfg.checkpoints = false;
  cfg.validate();
  const auto rows = run_experiment(cfg, prepare_data(cfg), false);
  std::size_t final_t = 0;
  for (const auto& r : rows) final_t = std::max(final_t, r.record.t);
  std::optional<double> naive, cumulative;
  for (const auto& r : rows) {
    if (r.record.t != final_t) continue;
    if (r.record.strategy == "naive") naive = r.record.forget;
    if (r.record.strategy == "cumulative") cumulative = r.record.forget;
  }
  v.require(naive && cumulative, "missing final rows");
  if (!v.pass) return v;
  v.require(*naive > 0.0 && *naive > margin,
            "naive Forget " + fmt("%.2f", *naive) + " not above margin " + fmt("%.2f", margin));
  v.require(round2(*cumulative) == 0.0, "cumulative Forget " + fmt("%.2f", *cumulative));
  if (v.pass) v.detail = "naive Forget " + fmt("%.2f", *naive) + " > " + fmt("%.2f", margin);
  return v;
}

// ---- AC8 --------------------------------------------------------------------

Verdict ac8() {
  Verdict v;
  const auto dir = scratch("ac8");
  const auto cfg_path = smoke_config(dir);
  v.require(cli("transfer --config " + cfg_path.string(), dir / "transfer.log") == 0, "transfer command failed");
  v.require(cli("train --config " + cfg_path.string(), dir / "train.log") == 0, "train command failed");
  if (!v.pass) return v;
  const auto cfg = load_experiment(cfg_path);
  const auto ckpt = cfg.output_dir / "checkpoints";

  for (const auto& s : cfg.strategy_grid()) {
    const auto name = s.name();
    const auto family = to_string(s.loss_family);
    const auto [first, a0] = load_checkpoint(ckpt / checkpoint_name(name, family, true, 0));
    for (std::size_t t = 1; t < cfg.stream.batches; ++t) {
      const auto [net, a] = load_checkpoint(ckpt / checkpoint_name(name, family, true, t));
      for (const auto& layer : net.conv_layer_names())
        v.require(same_bytes(net.parameter(layer + ".weight").value.data, first.parameter(layer + ".weight").value.data) &&
                      same_bytes(net.parameter(layer + ".bias").value.data, first.parameter(layer + ".bias").value.data),
                  name + "/" + family + " transfer " + layer + " changed at t=" + std::to_string(t));
    }
  }

  for (auto family : cfg.loss_families) {
    const auto fam = to_string(family);
    const auto [first, a0] = load_checkpoint(ckpt / checkpoint_name("finetune", fam, false, 0));
    for (std::size_t t = 1; t < cfg.stream.batches; ++t) {
      const auto [net, a] = load_checkpoint(ckpt / checkpoint_name("finetune", fam, false, t));
      bool head_moved = false;
      for (std::size_t i = 0; i < net.parameters().size(); ++i) {
        const auto& p = net.parameters()[i];
        const bool same = same_bytes(p.value.data, first.parameters()[i].value.data);
        if (p.layer == kHeadLayer)
          head_moved = head_moved || !same;
        else
          v.require(same, "finetune/" + fam + " " + p.name + " changed at t=" + std::to_string(t));
      }
      v.require(head_moved, "finetune/" + fam + " head did not train at t=" + std::to_string(t));
    }
  }
  fs::remove_all(dir);
  return v;
}

// ---- AC9 --------------------------------------------------------------------

Verdict ac9() {
  Verdict v;
  const auto a = scratch("ac9a"), b = scratch("ac9b");
  v.require(cli("train --config " + smoke_config(a).string(), a / "log") == 0, "first run failed");
  v.require(cli("train --config " + smoke_config(b).string(), b / "log") == 0, "second run failed");
  if (!v.pass) return v;
  const auto ma = read_file(a / "out" / "metrics.csv"), mb = read_file(b / "out" / "metrics.csv");
  v.require(!ma.empty() && ma == mb, "metrics.csv differs between runs");
  fs::remove_all(a);
  fs::remove_all(b);
  return v;
}

// ---- AC10 -------------------------------------------------------------------

Verdict ac10() {
  Verdict v;
  std::mt19937_64 rng(10);
  constexpr std::size_t kDim = 8, kNeg = 9;
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    Graph g;
    auto unit = [&] {
      return g.input(Tensor({kDim}, random_unit(kDim, rng), true));
    };
    Var a = unit(), p = unit();
    std::vector<Var> negs;
    for (std::size_t k = 0; k < kNeg; ++k) negs.push_back(unit());
    g.backward(nce_loss(nce_logits(a, p, negs), 1.0));
    worst = std::max({worst, a.grad().cwiseAbs().maxCoeff(), p.grad().cwiseAbs().maxCoeff()});
    for (auto& n : negs) worst = std::max(worst, n.grad().cwiseAbs().maxCoeff());
  }
  v.require(worst < 10.0, "max |NCE gradient entry| " + fmt("%.3g", worst));

  std::printf("       triplet gradient vs embedding scale, hinge active (unnormalized):\n");
  for (double scale : {1.0, 10.0, 100.0}) {
    Graph g;
    Eigen::VectorXd dir = Eigen::VectorXd::Zero(kDim);
    dir[0] = 1.0;
    Var a = g.input(Tensor({kDim}, Eigen::VectorXd::Zero(kDim), true));
    Var p = g.input(Tensor({kDim}, 0.5 * scale * dir, true));
    Var n = g.input(Tensor({kDim}, 0.4 * scale * dir, true));
    g.backward(triplet_loss(a, p, n, 1.0));
    std::printf("         scale x%-5.0f d(a,n) %7.2f  max |grad_a| %8.3f\n", scale, 0.4 * scale,
                a.grad().cwiseAbs().maxCoeff());
  }
  if (v.pass) v.detail = "max |NCE gradient entry| " + fmt("%.3f", worst);
  return v;
}

}  // namespace

int main() {
  struct Criterion {
    const char* id;
    Verdict (*run)();
  };
  const Criterion criteria[] = {{"AC1", ac1}, {"AC2", ac2}, {"AC3", ac3}, {"AC4", ac4}, {"AC5", ac5},
                                {"AC6", ac6}, {"AC7", ac7}, {"AC8", ac8}, {"AC9", ac9}, {"AC10", ac10}};
  int failures = 0;
  for (const auto& c : criteria) {
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("exception: ") + e.what();
    }
    if (v.pass) {
      std::printf("[PASS] %s%s%s\n", c.id, v.detail.empty() ? "" : " ", v.detail.c_str());
    } else {
      ++failures;
      std::printf("[FAIL] %s %s\n", c.id, v.detail.c_str());
    }
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
