// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cilab/experiment.hpp"

#include <string>
#include <vector>

namespace cilab {

struct ReportRow {
  std::string dataset;
  std::string strategy;
  std::string loss;
  bool transfer = false;
  double ref_map = 0.0;
  double map = 0.0;
  double forget = 0.0;
  bool best = false;
};

/// Final-t rows grouped by (dataset, transfer). Forget is recomputed from Ref
/// and mAP; rows whose CSV value disagrees by more than 0.01 raise
/// PersistenceError. Within each block the lowest-Forget non-reference row is
/// marked (the reference row only when it is alone).
std::vector<ReportRow> final_rows(const std::vector<MetricsRow>& rows);

/// Plain-text report: results table, triplet-vs-NCE Forget comparison and,
/// when present, the with/without-transfer comparison.
std::string render_report(const std::vector<MetricsRow>& rows);

/// dataset,strategy,loss,transfer,t,mAP for plotting mAP against t.
std::string curves_csv(const std::vector<MetricsRow>& rows);

}  // namespace cilab
