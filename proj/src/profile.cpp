// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0

#include "nm/profile.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "json_util.hpp"
#include "nm/common.hpp"

namespace nm {

double compute_ap(std::span<const double> activations, std::span<const std::uint8_t> labels) {
  if (activations.size() != labels.size())
    throw ValidationError("compute_ap: activations and labels differ in length");
  const std::size_t n = activations.size();
  std::size_t positives = 0;
  for (std::uint8_t y : labels) positives += y ? 1 : 0;
  if (positives == 0 || positives == n)
    throw ValidationError("compute_ap: needs at least one positive and one negative label");

  // Descending activation, ties broken by ascending index.
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (activations[a] != activations[b]) return activations[a] > activations[b];
    return a < b;
  });

  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (labels[order[k]]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
  }
  return sum / static_cast<double>(positives);
}

APTable compute_ap_table(const ActivationTrace& trace) {
  trace.validate();
  APTable table;
  for (const auto& s : trace.samples)
    if (std::find(table.languages.begin(), table.languages.end(), s.language) ==
        table.languages.end())
      table.languages.push_back(s.language);
  if (table.languages.size() < 2)
    throw ValidationError("compute_ap_table: trace needs at least 2 languages");

  const std::size_t n = trace.rows(), n_langs = table.languages.size();
  std::vector<std::size_t> lang_of(n);
  std::vector<std::size_t> lang_total(n_langs, 0);
  for (std::size_t s = 0; s < n; ++s) {
    lang_of[s] = static_cast<std::size_t>(
        std::find(table.languages.begin(), table.languages.end(), trace.samples[s].language) -
        table.languages.begin());
    ++lang_total[lang_of[s]];
  }

  table.neurons.reserve(trace.cols);
  for (std::size_t c = 0; c < trace.cols; ++c)
    table.neurons.push_back(neuron_of(trace.probe_points, c));
  table.scores.assign(trace.cols * n_langs, 0.0);

  // One sort per neuron; a single sweep yields every one-vs-rest AP, since
  // P(k) for language L only needs the running count of L in the top k.
  std::vector<std::uint32_t> order(n);
  std::vector<std::size_t> hits(n_langs);
  for (std::size_t c = 0; c < trace.cols; ++c) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
      const float va = trace.at(a, c), vb = trace.at(b, c);
      if (va != vb) return va > vb;
      return a < b;
    });
    std::fill(hits.begin(), hits.end(), 0);
    double* row = &table.scores[c * n_langs];
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t lang = lang_of[order[k]];
      ++hits[lang];
      row[lang] += static_cast<double>(hits[lang]) / static_cast<double>(k + 1);
    }
    for (std::size_t g = 0; g < n_langs; ++g) row[g] /= static_cast<double>(lang_total[g]);
  }
  return table;
}

std::vector<LanguageNeuronSet> select_language_specific(const APTable& table, std::size_t k,
                                                        double threshold) {
  if (k < 1) throw ValidationError("select_language_specific: k must be >= 1");
  if (!(threshold >= 0.0 && threshold < 1.0))
    throw ValidationError("select_language_specific: threshold must lie in [0, 1)");

  std::vector<LanguageNeuronSet> sets;
  for (std::size_t g = 0; g < table.languages.size(); ++g) {
    LanguageNeuronSet set;
    set.language = table.languages[g];
    set.k = k;
    set.threshold = threshold;
    std::vector<ScoredNeuron> all;
    all.reserve(table.neurons.size());
    for (std::size_t c = 0; c < table.neurons.size(); ++c)
      all.push_back(ScoredNeuron{table.neurons[c], table.at(c, g)});
    std::sort(all.begin(), all.end(), [](const ScoredNeuron& a, const ScoredNeuron& b) {
      if (a.ap != b.ap) return a.ap > b.ap;
      return a.id < b.id;
    });
    if (all.size() > k) all.resize(k);
    for (const auto& it : all)
      if (it.ap > threshold) set.neurons.push_back(it);
    sets.push_back(std::move(set));
  }
  return sets;
}

void write_ap_table_csv(const APTable& table, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "layer,component,neuron,language,ap\n";
  char buf[32];
  for (std::size_t c = 0; c < table.neurons.size(); ++c) {
    const NeuronId& id = table.neurons[c];
    for (std::size_t g = 0; g < table.languages.size(); ++g) {
      std::snprintf(buf, sizeof buf, "%.12g", table.at(c, g));
      out << id.layer << "," << component_name(id.component) << "," << id.index << ","
          << table.languages[g] << "," << buf << "\n";
    }
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

void write_neuron_set_json(const LanguageNeuronSet& set, const std::string& path) {
  nlohmann::json j;
  j["language"] = set.language;
  j["k"] = set.k;
  j["threshold"] = set.threshold;
  j["neurons"] = nlohmann::json::array();
  for (const auto& n : set.neurons)
    j["neurons"].push_back({{"layer", n.id.layer},
                            {"component", component_name(n.id.component)},
                            {"index", n.id.index},
                            {"ap", n.ap}});
  save_json_file(j, path);
}

LanguageNeuronSet read_neuron_set_json(const std::string& path) {
  const nlohmann::json j = load_json_file(path);
  LanguageNeuronSet set;
  try {
    set.language = j.at("language").get<std::string>();
    set.k = j.at("k").get<std::size_t>();
    set.threshold = j.at("threshold").get<double>();
    for (const auto& n : j.at("neurons")) {
      ScoredNeuron sn;
      sn.id.layer = n.at("layer").get<int>();
      sn.id.component = component_from_name(n.at("component").get<std::string>());
      sn.id.index = n.at("index").get<int>();
      sn.ap = n.at("ap").get<double>();
      set.neurons.push_back(sn);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("parse error: " + path + ": " + e.what());
  }
  return set;
}

}  // namespace nm
