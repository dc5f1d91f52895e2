// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nm/trace.hpp"

namespace nm {

// Average precision of the binary `labels` under the descending sort of
// `activations`, ties broken by ascending position. Requires at least one
// positive and one negative label.
double compute_ap(std::span<const double> activations, std::span<const std::uint8_t> labels);

// One AP score per (neuron, language), one-vs-rest over the trace's samples.
struct APTable {
  std::vector<std::string> languages;
  std::vector<NeuronId> neurons;     // trace column order
  std::vector<double> scores;        // [neurons x languages] row-major

  double at(std::size_t neuron, std::size_t lang) const {
    return scores[neuron * languages.size() + lang];
  }
};

APTable compute_ap_table(const ActivationTrace& trace);

struct ScoredNeuron {
  NeuronId id;
  double ap = 0.0;

  friend bool operator==(const ScoredNeuron&, const ScoredNeuron&) = default;
};

struct LanguageNeuronSet {
  std::string language;
  std::size_t k = 0;
  double threshold = 0.5;
  std::vector<ScoredNeuron> neurons;  // AP descending, NeuronId ascending on ties

  friend bool operator==(const LanguageNeuronSet&, const LanguageNeuronSet&) = default;
};

// Global top-k per language across all layers, then filtered to AP > threshold.
std::vector<LanguageNeuronSet> select_language_specific(const APTable& table, std::size_t k,
                                                        double threshold);

void write_ap_table_csv(const APTable& table, const std::string& path);
void write_neuron_set_json(const LanguageNeuronSet& set, const std::string& path);
LanguageNeuronSet read_neuron_set_json(const std::string& path);

}  // namespace nm
