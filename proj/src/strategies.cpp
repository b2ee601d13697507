// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cilab/strategies.hpp"

#include "cilab/error.hpp"
#include "cilab/seed.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <set>

namespace cilab {

using nlohmann::json;

namespace {

constexpr std::uint64_t kTagInit = 0x696e6974ULL;
constexpr std::uint64_t kTagTuples = 0x7475706cULL;
constexpr std::uint64_t kTagFisher = 0x66697368ULL;
constexpr std::uint64_t kTagLwf = 0x6c7766ULL;
constexpr std::uint64_t kTagPretrain = 0x70726574ULL;

void reject_unknown(const json& j, const char* section, std::initializer_list<const char*> keys) {
  const std::set<std::string> known(keys.begin(), keys.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ConfigError(std::string(section) + ": unknown key '" + it.key() + "'");
}

}  // namespace

std::string to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::naive: return "naive";
    case StrategyKind::finetune: return "finetune";
    case StrategyKind::lfl: return "lfl";
    case StrategyKind::lwf: return "lwf";
    case StrategyKind::ewc: return "ewc";
    case StrategyKind::cumulative: return "cumulative";
  }
  return "?";
}

StrategyKind parse_strategy(const std::string& s) {
  for (auto k : {StrategyKind::naive, StrategyKind::finetune, StrategyKind::lfl, StrategyKind::lwf, StrategyKind::ewc,
                 StrategyKind::cumulative})
    if (to_string(k) == s) return k;
  throw ConfigError("strategies: unknown strategy '" + s + "'");
}

// ---- configs -----------------------------------------------------------------

void TrainingConfig::validate() const {
  if (epochs_per_batch == 0) throw ConfigError("training.epochs_per_batch: must be positive");
  if (minibatch == 0) throw ConfigError("training.minibatch: must be positive");
  if (!(lr > 0.0)) throw ConfigError("training.lr: must be > 0");
  if (nce_negatives == 0) throw ConfigError("training.nce_negatives: must be positive");
  if (fisher_samples == 0) throw ConfigError("training.fisher_samples: must be positive");
}

void to_json(json& j, const TrainingConfig& c) {
  j = json{{"epochs_per_batch", c.epochs_per_batch}, {"tuples_per_epoch", c.tuples_per_epoch},
           {"minibatch", c.minibatch},               {"lr", c.lr},
           {"mining", to_string(c.mining)},          {"nce_negatives", c.nce_negatives},
           {"fisher_samples", c.fisher_samples}};
}

void from_json(const json& j, TrainingConfig& c) {
  reject_unknown(j, "training",
                 {"epochs_per_batch", "tuples_per_epoch", "minibatch", "lr", "mining", "nce_negatives",
                  "fisher_samples"});
  c.epochs_per_batch = j.value("epochs_per_batch", c.epochs_per_batch);
  c.tuples_per_epoch = j.value("tuples_per_epoch", c.tuples_per_epoch);
  c.minibatch = j.value("minibatch", c.minibatch);
  c.lr = j.value("lr", c.lr);
  if (j.contains("mining")) c.mining = parse_mining(j.at("mining").get<std::string>());
  c.nce_negatives = j.value("nce_negatives", c.nce_negatives);
  c.fisher_samples = j.value("fisher_samples", c.fisher_samples);
}

void to_json(json& j, const TransferConfig& c) {
  j = json{{"frozen_layers", c.frozen_layers},
           {"transfer_lr", c.transfer_lr},
           {"pretrain_max_epochs", c.pretrain_max_epochs},
           {"patience", c.patience},
           {"min_delta", c.min_delta}};
}

void from_json(const json& j, TransferConfig& c) {
  reject_unknown(j, "transfer",
                 {"frozen_layers", "transfer_lr", "pretrain_max_epochs", "patience", "min_delta", "pretrain_data"});
  c.frozen_layers = j.value("frozen_layers", c.frozen_layers);
  c.transfer_lr = j.value("transfer_lr", c.transfer_lr);
  c.pretrain_max_epochs = j.value("pretrain_max_epochs", c.pretrain_max_epochs);
  c.patience = j.value("patience", c.patience);
  c.min_delta = j.value("min_delta", c.min_delta);
}

std::vector<std::string> transfer_layers(const TransferConfig& t, const NetConfig& net_cfg) {
  if (!t.frozen_layers.empty()) return t.frozen_layers;
  std::vector<std::string> conv;
  for (std::size_t i = 0; i < net_cfg.conv_blocks(); ++i) conv.push_back("conv" + std::to_string(i));
  return conv;
}

void StrategyConfig::validate(const NetConfig& net) const {
  loss.validate();
  training.validate();
  if (kind == StrategyKind::lwf && loss_family == LossFamily::triplet)
    throw ConfigError("strategies: lwf needs class-like logits and cannot be combined with the triplet loss");
  if (transfer) {
    if (!(transfer->transfer_lr > 0.0 && transfer->transfer_lr <= training.lr))
      throw ConfigError("transfer.transfer_lr: must lie in (0, training.lr]");
    if (transfer->pretrain_max_epochs == 0) throw ConfigError("transfer.pretrain_max_epochs: must be positive");
    if (transfer->patience == 0) throw ConfigError("transfer.patience: must be positive");
    NetConfig copy = net;
    copy.validate();
    std::vector<std::string> known;
    for (std::size_t i = 0; i < copy.conv_blocks(); ++i) known.push_back("conv" + std::to_string(i));
    for (std::size_t i = 0; i < copy.hidden_dims.size(); ++i) known.push_back("fc" + std::to_string(i));
    known.emplace_back(kHeadLayer);
    for (const auto& l : transfer_layers(*transfer, net))
      if (std::find(known.begin(), known.end(), l) == known.end())
        throw ConfigError("transfer.frozen_layers: network has no layer '" + l + "'");
  }
}

std::string StrategyConfig::name() const { return to_string(kind); }

// ---- losses ------------------------------------------------------------------

namespace {

class EmbeddingCache {
 public:
  EmbeddingCache(Graph& g, EmbeddingNet& net, const EmbeddingNet* old_net, std::span<const Sample> batch)
      : g_(g), net_(net), old_net_(old_net), batch_(batch) {}

  Var current(std::size_t i) {
    auto it = current_.find(i);
    if (it == current_.end()) it = current_.emplace(i, embed(g_, net_, g_.view(batch_[i].image))).first;
    return it->second;
  }
  Var old(std::size_t i) {
    auto it = old_.find(i);
    if (it == old_.end())
      it = old_.emplace(i, embed(g_, static_cast<const EmbeddingNet&>(*old_net_), g_.view(batch_[i].image))).first;
    return it->second;
  }

 private:
  Graph& g_;
  EmbeddingNet& net_;
  const EmbeddingNet* old_net_;
  std::span<const Sample> batch_;
  std::map<std::size_t, Var> current_;
  std::map<std::size_t, Var> old_;
};

std::vector<std::size_t> members(const Triplet& t) { return {t.anchor, t.positive, t.negative}; }
std::vector<std::size_t> members(const NceTuple& t) {
  std::vector<std::size_t> m{t.anchor, t.positive};
  m.insert(m.end(), t.negatives.begin(), t.negatives.end());
  return m;
}

Var tuple_task(EmbeddingCache& e, const Triplet& t, const LossConfig& cfg) {
  return triplet_loss(e.current(t.anchor), e.current(t.positive), e.current(t.negative), cfg.alpha);
}

Var logits(EmbeddingCache& e, const NceTuple& t, bool old) {
  auto get = [&](std::size_t i) { return old ? e.old(i) : e.current(i); };
  std::vector<Var> negatives;
  for (auto n : t.negatives) negatives.push_back(get(n));
  return nce_logits(get(t.anchor), get(t.positive), negatives);
}

Var tuple_task(EmbeddingCache& e, const NceTuple& t, const LossConfig& cfg) {
  return nce_loss(logits(e, t, false), cfg.tau);
}

Var sum(const std::vector<Var>& xs) {
  Var acc = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) acc = acc + xs[i];
  return acc;
}

template <class Tuple>
StepLoss minibatch_impl(Graph& g, EmbeddingNet& net, std::span<const Sample> batch, std::span<const Tuple> tuples,
                        const StrategyConfig& cfg, const Regularization& reg) {
  if (tuples.empty()) throw ContractError("minibatch_loss: no tuples");
  const auto& lc = cfg.loss;
  const bool lfl = cfg.kind == StrategyKind::lfl && reg.old_net;
  const bool lwf = cfg.kind == StrategyKind::lwf && reg.old_net;
  if constexpr (std::is_same_v<Tuple, Triplet>)
    if (cfg.kind == StrategyKind::lwf) throw ConfigError("strategies: lwf cannot be combined with the triplet loss");

  EmbeddingCache cache(g, net, reg.old_net, batch);
  const double inv = 1.0 / static_cast<double>(tuples.size());
  std::vector<Var> tasks, terms, regs;
  for (const auto& t : tuples) {
    Var task = tuple_task(cache, t, lc);
    tasks.push_back(task);
    if (cfg.kind == StrategyKind::lfl) {
      Var term = task * lc.lambda_c;
      if (lfl) {
        std::vector<std::size_t> ids = members(t);
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
        std::vector<Var> drift;
        for (auto i : ids) drift.push_back(lfl_regularizer(cache.old(i), cache.current(i)));
        Var r = sum(drift) * (1.0 / static_cast<double>(ids.size()));
        regs.push_back(r);
        term = term + r * lc.lambda_e;
      }
      terms.push_back(term);
    } else if (lwf) {
      if constexpr (std::is_same_v<Tuple, NceTuple>) {
        Var d = lwf_distillation(logits(cache, t, true), logits(cache, t, false), lc.kd_temperature);
        regs.push_back(d);
        terms.push_back(task + d * lc.lambda_kd);
      }
    } else {
      terms.push_back(task);
    }
  }

  StepLoss out{sum(terms) * inv, sum(tasks) * inv, std::nullopt};
  if (!regs.empty()) out.regularizer = sum(regs) * inv;
  if (cfg.kind == StrategyKind::ewc && reg.snapshot && reg.fisher) {
    Var penalty = ewc_penalty(g, net, *reg.snapshot, *reg.fisher, lc.lambda_ewc);
    out.regularizer = penalty;
    out.total = out.total + penalty;
  }
  return out;
}

}  // namespace

StepLoss minibatch_loss(Graph& g, EmbeddingNet& net, std::span<const Sample> batch, std::span<const Triplet> tuples,
                        const StrategyConfig& cfg, const Regularization& reg) {
  return minibatch_impl(g, net, batch, tuples, cfg, reg);
}

StepLoss minibatch_loss(Graph& g, EmbeddingNet& net, std::span<const Sample> batch, std::span<const NceTuple> tuples,
                        const StrategyConfig& cfg, const Regularization& reg) {
  return minibatch_impl(g, net, batch, tuples, cfg, reg);
}

// ---- training ----------------------------------------------------------------

void prepare_batch(RunState& state, const StrategyConfig& cfg, std::size_t t) {
  if (t > 0) {
    if (state.completed != t)
      throw ContractError("prepare_batch: batch " + std::to_string(t - 1) + " has not been trained");
    switch (cfg.kind) {
      case StrategyKind::lfl:
        state.snapshot_prev = snapshot(state.net);
        break;
      case StrategyKind::lwf:
        state.snapshot_prev = snapshot(state.net);
        reinit_unfrozen(state.net, derive_seed(state.seed, {kTagLwf, t}));
        break;
      case StrategyKind::ewc:
        if (!state.fisher_pending)
          throw ContractError("prepare_batch: no Fisher estimate from batch " + std::to_string(t - 1));
        if (cfg.ewc_accumulate && state.snapshot_prev && state.fisher_prev)
          state.ewc_history.emplace_back(std::move(*state.snapshot_prev), std::move(*state.fisher_prev));
        state.snapshot_prev = snapshot(state.net);
        state.fisher_prev = std::move(state.fisher_pending);
        state.fisher_pending.reset();
        break;
      case StrategyKind::finetune: {
        std::vector<std::string> body;
        for (auto& l : state.net.layer_names())
          if (l != kHeadLayer) body.push_back(l);
        state.net.freeze(body);
        break;
      }
      case StrategyKind::naive:
      case StrategyKind::cumulative:
        break;
    }
  }
  state.adam = AdamState::for_net(state.net, cfg.training.lr);
}

namespace {

struct EpochContext {
  RunState& state;
  std::span<const Sample> batch;
  const StrategyConfig& cfg;
  std::size_t t;
  TrainObserver* observer;
  std::size_t step = 0;
};

template <class Tuple>
double train_tuples(EpochContext& ctx, const std::vector<Tuple>& tuples, const Regularization& reg) {
  const auto mb = ctx.cfg.training.minibatch;
  double task_sum = 0.0;
  for (std::size_t start = 0; start < tuples.size(); start += mb) {
    const auto n = std::min(mb, tuples.size() - start);
    std::span<const Tuple> chunk(tuples.data() + start, n);
    if (ctx.observer)
      for (const auto& tup : chunk)
        for (auto i : members(tup)) ctx.observer->on_sample_access(ctx.t, ctx.batch[i].id);

    Graph g;
    std::vector<Var> extra;
    StepLoss loss = minibatch_loss(g, ctx.state.net, ctx.batch, chunk, ctx.cfg, reg);
    Var total = loss.total;
    if (ctx.cfg.kind == StrategyKind::ewc)
      for (const auto& [snap, fisher] : ctx.state.ewc_history)
        total = total + ewc_penalty(g, ctx.state.net, snap, fisher, ctx.cfg.loss.lambda_ewc);
    g.backward(total);
    adam_step(ctx.state.net, ctx.state.adam);
    const double task = loss.task.item();
    if (ctx.observer) ctx.observer->on_step(ctx.t, ctx.step, task, loss.regularizer ? loss.regularizer->item() : 0.0);
    ++ctx.step;
    task_sum += task * static_cast<double>(n);
  }
  return task_sum / static_cast<double>(tuples.size());
}

double run_epoch(EpochContext& ctx, std::size_t epoch, const Regularization& reg) {
  const auto& tc = ctx.cfg.training;
  const auto seed = derive_seed(ctx.state.seed, {kTagTuples, ctx.t, epoch});
  const auto n = tc.tuples_per_epoch ? tc.tuples_per_epoch : ctx.batch.size();
  try {
    if (ctx.cfg.loss_family == LossFamily::triplet)
      return train_tuples(ctx, sample_triplets(ctx.batch, n, seed, tc.mining, &ctx.state.net), reg);
    return train_tuples(ctx, sample_nce_tuples(ctx.batch, n, tc.nce_negatives, seed), reg);
  } catch (const StreamStarvationError& e) {
    throw StreamStarvationError("batch " + std::to_string(ctx.t) + ": " + e.what());
  }
}

void estimate_pending_fisher(EpochContext& ctx) {
  const auto& tc = ctx.cfg.training;
  const auto seed = derive_seed(ctx.state.seed, {kTagFisher, ctx.t});
  auto notify = [&](const auto& tuples) {
    if (ctx.observer)
      for (const auto& tup : tuples)
        for (auto i : members(tup)) ctx.observer->on_sample_access(ctx.t, ctx.batch[i].id);
  };
  if (ctx.cfg.loss_family == LossFamily::triplet) {
    const auto tuples = sample_triplets(ctx.batch, tc.fisher_samples, seed);
    notify(tuples);
    ctx.state.fisher_pending = estimate_fisher(ctx.state.net, ctx.batch, tuples, ctx.cfg.loss);
  } else {
    const auto tuples = sample_nce_tuples(ctx.batch, tc.fisher_samples, tc.nce_negatives, seed);
    notify(tuples);
    ctx.state.fisher_pending = estimate_fisher(ctx.state.net, ctx.batch, tuples, ctx.cfg.loss);
  }
}

}  // namespace

double train_batch(RunState& state, std::span<const Sample> batch, const StrategyConfig& cfg, std::size_t t,
                   TrainObserver* observer) {
  if (batch.empty()) throw ContractError("train_batch: empty continuous batch");
  if (observer) observer->on_batch_begin(t, batch);

  std::optional<EmbeddingNet> old_net;
  Regularization reg;
  if (state.snapshot_prev) {
    if (cfg.kind == StrategyKind::lfl || cfg.kind == StrategyKind::lwf) {
      old_net.emplace(clone_from(*state.snapshot_prev, state.net.config()));
      reg.old_net = &*old_net;
    }
    reg.snapshot = &*state.snapshot_prev;
    if (state.fisher_prev) reg.fisher = &*state.fisher_prev;
  }

  EpochContext ctx{state, batch, cfg, t, observer};
  double last = 0.0;
  for (std::size_t e = 0; e < cfg.training.epochs_per_batch; ++e) last = run_epoch(ctx, e, reg);
  if (cfg.kind == StrategyKind::ewc) estimate_pending_fisher(ctx);
  state.completed = t + 1;
  if (observer) observer->on_batch_end(t, state);
  return last;
}

namespace {

std::set<std::size_t> plan_instances(const StreamPlan& plan) {
  std::set<std::size_t> out;
  for (const auto& b : plan.batches) out.insert(b.instances.begin(), b.instances.end());
  return out;
}

}  // namespace

std::vector<MetricsRecord> run_stream(const InstanceDataset& ds, const StreamPlan& plan, const StrategyConfig& cfg,
                                      const NetConfig& net_cfg, const RetrievalSplit& eval, std::uint64_t seed,
                                      TrainObserver* observer, const EmbeddingNet* initial) {
  cfg.validate(net_cfg);
  plan.validate(ds);
  eval.validate();
  for (auto inst : eval.instances())
    if (plan_instances(plan).count(inst))
      throw ProtocolError("instance " + std::to_string(inst) + " appears in both the stream and the evaluation split");

  auto fresh = [&] { return initial ? EmbeddingNet(*initial) : init_xavier(net_cfg, derive_seed(seed, {kTagInit})); };
  std::vector<MetricsRecord> records;
  auto record = [&](std::size_t t, const EmbeddingNet& net) {
    records.push_back({cfg.name(), to_string(cfg.loss_family), t, mean_average_precision(net, eval), 0.0, 0.0});
  };

  if (cfg.kind == StrategyKind::cumulative) {
    std::vector<Sample> seen;
    for (std::size_t t = 0; t < plan.batches.size(); ++t) {
      const auto batch = materialize(ds, plan.batches[t]);
      seen.insert(seen.end(), batch.begin(), batch.end());
      RunState state(fresh(), cfg.training.lr, seed);
      prepare_batch(state, cfg, 0);
      train_batch(state, seen, cfg, t, observer);
      record(t, state.net);
    }
    return records;
  }

  RunState state(fresh(), cfg.training.lr, seed);
  for (std::size_t t = 0; t < plan.batches.size(); ++t) {
    prepare_batch(state, cfg, t);
    {
      const auto batch = materialize(ds, plan.batches[t]);
      train_batch(state, batch, cfg, t, observer);
    }
    record(t, state.net);
  }
  return records;
}

EmbeddingNet pretrain(const InstanceDataset& ds, const StrategyConfig& cfg, const NetConfig& net_cfg,
                      std::uint64_t seed) {
  StrategyConfig pc = cfg;
  pc.kind = StrategyKind::naive;
  pc.transfer.reset();
  pc.validate(net_cfg);
  const TransferConfig limits = cfg.transfer.value_or(TransferConfig{});

  const auto pre_seed = derive_seed(seed, {kTagPretrain});
  RunState state(init_xavier(net_cfg, derive_seed(pre_seed, {kTagInit})), pc.training.lr, pre_seed);
  EpochContext ctx{state, ds.samples, pc, 0, nullptr};
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t e = 0; e < limits.pretrain_max_epochs; ++e) {
    const double loss = run_epoch(ctx, e, {});
    if (loss < best - limits.min_delta) {
      best = loss;
      stale = 0;
    } else if (++stale >= limits.patience) {
      break;
    }
  }
  return std::move(state.net);
}

std::vector<MetricsRecord> synthetic_transfer(const InstanceDataset& synth, const InstanceDataset& ds,
                                              const StreamPlan& plan, const StrategyConfig& cfg,
                                              const NetConfig& net_cfg, const RetrievalSplit& eval,
                                              std::uint64_t seed, TrainObserver* observer) {
  if (!cfg.transfer) throw ConfigError("transfer: strategy has no transfer settings");
  cfg.validate(net_cfg);
  EmbeddingNet net = pretrain(synth, cfg, net_cfg, seed);
  const auto layers = transfer_layers(*cfg.transfer, net_cfg);
  net.freeze(layers);
  StrategyConfig continual = cfg;
  continual.training.lr = cfg.transfer->transfer_lr;
  return run_stream(ds, plan, continual, net_cfg, eval, seed, observer, &net);
}

}  // namespace cilab
