// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0

#include "nm/alloc.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "json_util.hpp"
#include "nm/common.hpp"

namespace nm {

std::string rounding_name(Rounding r) {
  return r == Rounding::floor ? "floor" : "nearest";
}

Rounding rounding_from_name(const std::string& name) {
  if (name == "floor") return Rounding::floor;
  if (name == "nearest") return Rounding::nearest;
  throw ValidationError("unknown rounding mode '" + name + "'");
}

int AllocationPlan::total_experts() const {
  int total = 0;
  for (int e : experts_per_layer) total += e;
  return total;
}

void AllocationPlan::validate() const {
  if (e_min < 1) throw ValidationError("plan e_min must be >= 1 (experts >= 1)");
  if (e_min > e_max) throw ValidationError("plan e_min exceeds e_max");
  if (experts_per_layer.empty()) throw ValidationError("plan has no layers");
  for (std::size_t l = 0; l < experts_per_layer.size(); ++l) {
    const int e = experts_per_layer[l];
    if (e < e_min || e > e_max)
      throw ValidationError("layer " + std::to_string(l) + " expert count " + std::to_string(e) +
                            " outside [" + std::to_string(e_min) + "," + std::to_string(e_max) +
                            "]");
  }
  if (!scores.empty()) {
    if (scores.size() != experts_per_layer.size())
      throw ValidationError("plan scores length does not match layer count");
    // With known scores the allocation must be exactly reproducible.
    LayerScores ls{scores};
    const AllocationPlan expect = allocate(ls, e_min, e_max, rounding);
    if (expect.experts_per_layer != experts_per_layer)
      throw ValidationError("plan experts_per_layer inconsistent with its scores");
  }
}

LayerScores layer_scores(const std::vector<LanguageNeuronSet>& sets, std::size_t n_layers) {
  if (sets.empty()) throw ValidationError("layer_scores: no language sets");
  std::vector<std::set<NeuronId>> unions(n_layers);
  for (const auto& set : sets) {
    for (const auto& neuron : set.neurons) {
      if (neuron.id.layer < 0 || static_cast<std::size_t>(neuron.id.layer) >= n_layers)
        throw ValidationError("neuron references layer " + std::to_string(neuron.id.layer) +
                              " beyond n_layers " + std::to_string(n_layers));
      unions[static_cast<std::size_t>(neuron.id.layer)].insert(neuron.id);
    }
  }
  LayerScores scores;
  scores.values.reserve(n_layers);
  for (const auto& u : unions) scores.values.push_back(static_cast<int>(u.size()));
  return scores;
}

std::vector<double> normalize_scores(const LayerScores& scores) {
  if (scores.values.empty()) throw ValidationError("normalize_scores: empty score vector");
  const auto [mn_it, mx_it] = std::minmax_element(scores.values.begin(), scores.values.end());
  const int mn = *mn_it, mx = *mx_it;
  std::vector<double> out(scores.values.size(), 0.0);
  if (mx == mn) return out;  // no diversity signal: all zeros
  const double span = static_cast<double>(mx - mn);
  for (std::size_t l = 0; l < out.size(); ++l)
    out[l] = static_cast<double>(scores.values[l] - mn) / span;
  return out;
}

AllocationPlan allocate(const LayerScores& scores, int e_min, int e_max, Rounding rounding) {
  if (e_min < 1) throw ValidationError("e_min must be >= 1");
  if (e_min > e_max) throw ValidationError("e_min exceeds e_max");
  for (int s : scores.values)
    if (s < 0) throw ValidationError("layer scores must be non-negative");

  const std::vector<double> norm = normalize_scores(scores);
  AllocationPlan plan;
  plan.e_min = e_min;
  plan.e_max = e_max;
  plan.rounding = rounding;
  plan.scores = scores.values;
  plan.experts_per_layer.reserve(norm.size());
  const double span = static_cast<double>(e_max - e_min);
  for (double n : norm) {
    const double scaled = n * span;
    const long r = rounding == Rounding::floor ? static_cast<long>(std::floor(scaled))
                                               : std::lround(scaled);
    plan.experts_per_layer.push_back(e_min + static_cast<int>(r));
  }
  return plan;
}

void write_plan(const AllocationPlan& plan, const std::string& path) {
  plan.validate();
  save_json_file(plan_to_json(plan), path);
}

AllocationPlan read_plan(const std::string& path) {
  const nlohmann::json j = load_json_file(path);
  try {
    return plan_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("parse error: " + path + ": " + e.what());
  }
}

}  // namespace nm
