// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "nm/profile.hpp"

namespace nm {

// Per-layer specialization scores: unique language-specific neurons per layer.
struct LayerScores {
  std::vector<int> values;

  friend bool operator==(const LayerScores&, const LayerScores&) = default;
};

enum class Rounding { floor, nearest };

std::string rounding_name(Rounding r);
Rounding rounding_from_name(const std::string& name);

struct AllocationPlan {
  int e_min = 1;
  int e_max = 6;
  Rounding rounding = Rounding::floor;
  std::vector<int> scores;  // empty when the source scores are not known
  std::vector<int> experts_per_layer;

  std::size_t n_layers() const { return experts_per_layer.size(); }
  int total_experts() const;
  void validate() const;

  friend bool operator==(const AllocationPlan&, const AllocationPlan&) = default;
};

// S_l = size of the union over languages of layer-l neurons (all components pooled).
LayerScores layer_scores(const std::vector<LanguageNeuronSet>& sets, std::size_t n_layers);

// Min-max normalization to [0,1]; a constant score vector maps to all zeros.
std::vector<double> normalize_scores(const LayerScores& scores);

// E_l = e_min + round(norm(S_l) * (e_max - e_min)).
AllocationPlan allocate(const LayerScores& scores, int e_min, int e_max,
                        Rounding rounding = Rounding::floor);

void write_plan(const AllocationPlan& plan, const std::string& path);
AllocationPlan read_plan(const std::string& path);

}  // namespace nm
