// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nm/corpus.hpp"
#include "nm/model.hpp"
#include "nm/tensor.hpp"

namespace nm {

// Sample-level activations of one routable unit: one row per sample that
// routed at least one token to the unit (mean over those tokens).
struct UnitSampleActivations {
  int layer = 0;
  int unit = 0;  // 0 = base MLP, 1.. = added experts
  std::vector<std::int64_t> sample_ids;
  std::vector<std::string> sample_languages;
  std::vector<std::size_t> token_counts;
  Tensor values;  // [entries x width]

  std::size_t entries() const { return sample_ids.size(); }
};

struct ExpertActivationSet {
  std::size_t unit_width = 0;
  std::vector<std::vector<UnitSampleActivations>> layers;  // [layer][unit]
};

ExpertActivationSet collect_expert_activations(const MoEModel& model,
                                               const LabeledCorpus& corpus);

// Per-unit, per-language AP over the unit's entered samples. Languages whose
// one-vs-rest split degenerates for a unit are absent, not zero.
struct UnitAPScores {
  int layer = 0;
  int unit = 0;
  std::vector<std::string> languages;       // defined languages only
  std::vector<std::vector<double>> scores;  // [language][neuron]
  std::size_t population = 0;               // samples entered for this unit
};

struct ExpertAPReport {
  std::vector<std::string> all_languages;
  std::size_t unit_width = 0;
  std::vector<UnitAPScores> units;  // ordered by (layer, unit)
};

ExpertAPReport expert_ap(const ExpertActivationSet& activations);

struct HighApCell {
  int layer = 0;
  int unit = 0;
  std::string language;
  int count = 0;
  double ratio = 0.0;  // count / unit width
};

struct HighApCounts {
  double threshold = 0.9;
  std::size_t unit_width = 0;
  std::vector<std::string> languages;
  std::vector<HighApCell> cells;  // ordered by (layer, unit, language)
};

HighApCounts high_ap_counts(const ExpertAPReport& report, double threshold = 0.9);

// CSV grid: header "layer,unit,<lang>,...", one row per routable unit, cells =
// high-AP ratios. Deterministic by (layer, unit).
void export_heatmap(const ExpertAPReport& report, const std::string& path,
                    double threshold = 0.9);

// Text table with one row per (layer, unit, language): count and ratio percent.
std::string render_high_ap_table(const HighApCounts& counts);

void write_expert_ap_json(const ExpertAPReport& report, const std::string& path);

}  // namespace nm
