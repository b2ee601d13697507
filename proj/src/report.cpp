// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cilab/report.hpp"

#include "cilab/error.hpp"
#include "cilab/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <tuple>

namespace cilab {

namespace {

constexpr double kForgetTolerance = 0.01 + 1e-9;

std::string fmt2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", round2(v) + 0.0);
  return buf;
}

std::string pad(const std::string& s, std::size_t width, bool right = false) {
  if (s.size() >= width) return s;
  const std::string fill(width - s.size(), ' ');
  return right ? fill + s : s + fill;
}

using RunKey = std::tuple<std::string, bool, std::string, std::string>;  // dataset, transfer, strategy, loss

}  // namespace

std::vector<ReportRow> final_rows(const std::vector<MetricsRow>& rows) {
  std::map<std::pair<std::string, bool>, std::size_t> last_t;
  for (const auto& r : rows) {
    auto& t = last_t[{r.dataset, r.transfer.value_or(false)}];
    t = std::max(t, r.record.t);
  }

  std::vector<ReportRow> out;
  std::vector<RunKey> seen;
  for (const auto& r : rows) {
    const bool transfer = r.transfer.value_or(false);
    if (r.record.t != last_t[{r.dataset, transfer}]) continue;
    const RunKey key{r.dataset, transfer, r.record.strategy, r.record.loss};
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
    seen.push_back(key);
    const double forget = round2(forget_ratio(r.record.ref_map, r.record.map));
    if (std::abs(forget - r.record.forget) > kForgetTolerance)
      throw PersistenceError("metrics.csv: forget " + fmt2(r.record.forget) + " of " + r.record.strategy + "/" +
                             r.record.loss + " disagrees with Ref " + fmt2(r.record.ref_map) + " and mAP " +
                             fmt2(r.record.map));
    out.push_back({r.dataset, r.record.strategy, r.record.loss, transfer, r.record.ref_map, r.record.map, forget, false});
  }

  std::map<std::pair<std::string, bool>, std::vector<std::size_t>> blocks;
  for (std::size_t i = 0; i < out.size(); ++i) blocks[{out[i].dataset, out[i].transfer}].push_back(i);
  for (const auto& [key, idx] : blocks) {
    std::vector<std::size_t> candidates;
    for (auto i : idx)
      if (out[i].strategy != "cumulative") candidates.push_back(i);
    if (candidates.empty()) candidates = idx;
    auto best = std::min_element(candidates.begin(), candidates.end(),
                                 [&](std::size_t a, std::size_t b) { return out[a].forget < out[b].forget; });
    out[*best].best = true;
  }
  return out;
}

std::string render_report(const std::vector<MetricsRow>& rows) {
  const auto table = final_rows(rows);
  std::string s;
  s += "Final-step retrieval results (* = lowest Forget in block)\n";
  s += pad("dataset", 14) + pad("strategy", 12) + pad("loss", 9) + pad("transfer", 10) + pad("Ref(%)", 9, true) +
       pad("mAP(%)", 9, true) + pad("Forget(%)", 11, true) + "\n";
  for (const auto& r : table)
    s += pad(r.dataset, 14) + pad(r.strategy, 12) + pad(r.loss, 9) + pad(r.transfer ? "yes" : "no", 10) +
         pad(fmt2(r.ref_map), 9, true) + pad(fmt2(r.map), 9, true) + pad(fmt2(r.forget) + (r.best ? "*" : " "), 11, true) +
         "\n";

  // Forget under the triplet regression loss against NCE, per strategy.
  std::map<std::tuple<std::string, bool, std::string>, std::pair<const ReportRow*, const ReportRow*>> by_loss;
  for (const auto& r : table) {
    if (r.strategy == "cumulative") continue;
    auto& slot = by_loss[{r.dataset, r.transfer, r.strategy}];
    (r.loss == "triplet" ? slot.first : slot.second) = &r;
  }
  std::string cmp;
  for (const auto& [key, pair] : by_loss)
    if (pair.first && pair.second)
      cmp += pad(std::get<0>(key), 14) + pad(std::get<2>(key), 12) + pad(std::get<1>(key) ? "yes" : "no", 10) +
             pad(fmt2(pair.first->forget), 16, true) + pad(fmt2(pair.second->forget), 14, true) + "\n";
  if (!cmp.empty()) {
    s += "\nForget: triplet regression vs NCE\n";
    s += pad("dataset", 14) + pad("strategy", 12) + pad("transfer", 10) + pad("Regression(%)", 16, true) +
         pad("w/ NCE(%)", 14, true) + "\n" + cmp;
  }

  std::map<std::tuple<std::string, std::string, std::string>, std::pair<const ReportRow*, const ReportRow*>> by_transfer;
  for (const auto& r : table) {
    auto& slot = by_transfer[{r.dataset, r.strategy, r.loss}];
    (r.transfer ? slot.second : slot.first) = &r;
  }
  std::string tr;
  for (const auto& [key, pair] : by_transfer)
    if (pair.first && pair.second)
      tr += pad(std::get<0>(key), 14) + pad(std::get<1>(key), 12) + pad(std::get<2>(key), 9) +
            pad(fmt2(pair.first->map), 12, true) + pad(fmt2(pair.first->forget), 12, true) +
            pad(fmt2(pair.second->map), 12, true) + pad(fmt2(pair.second->forget), 12, true) + "\n";
  if (!tr.empty()) {
    s += "\nSynthetic transfer\n";
    s += pad("dataset", 14) + pad("strategy", 12) + pad("loss", 9) + pad("mAP w/o", 12, true) +
         pad("Forget w/o", 12, true) + pad("mAP w/", 12, true) + pad("Forget w/", 12, true) + "\n" + tr;
  }
  return s;
}

std::string curves_csv(const std::vector<MetricsRow>& rows) {
  std::string s = "dataset,strategy,loss,transfer,t,mAP\n";
  for (const auto& r : rows)
    s += r.dataset + "," + r.record.strategy + "," + r.record.loss + "," +
         (r.transfer.value_or(false) ? "true" : "false") + "," + std::to_string(r.record.t) + "," + fmt2(r.record.map) +
         "\n";
  return s;
}

}  // namespace cilab
