// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0

#include "nm/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "json_util.hpp"
#include "nm/common.hpp"
#include "nm/profile.hpp"

namespace nm {

ExpertActivationSet collect_expert_activations(const MoEModel& model,
                                               const LabeledCorpus& corpus) {
  if (corpus.samples.empty())
    throw ValidationError("collect_expert_activations: empty corpus");

  const std::size_t n_layers = model.base.config.n_layers;
  const std::size_t width = model.base.config.d_ff;

  ExpertActivationSet set;
  set.unit_width = width;
  set.layers.resize(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    set.layers[l].resize(model.n_routable(l));
    for (std::size_t u = 0; u < model.n_routable(l); ++u) {
      set.layers[l][u].layer = static_cast<int>(l);
      set.layers[l][u].unit = static_cast<int>(u);
    }
  }

  // Flat append buffers; packed into tensors at the end.
  std::vector<std::vector<std::vector<double>>> rows(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) rows[l].resize(model.n_routable(l));

  std::vector<std::vector<double>> sums;
  std::vector<std::size_t> counts;
  ForwardOptions opts;
  opts.collect_expert_hidden = true;
  for (const auto& sample : corpus.samples) {
    const ForwardResult r = forward(model, sample.tokens, opts);
    for (std::size_t l = 0; l < n_layers; ++l) {
      sums.assign(model.n_routable(l), std::vector<double>(width, 0.0));
      counts.assign(model.n_routable(l), 0);

      const LayerRouting& lr = r.routing.layers[l];
      const std::size_t k = static_cast<std::size_t>(lr.top_k);
      const Tensor& hidden = r.expert_hidden[l];  // [T, k, width]
      for (std::size_t t = 0; t < r.routing.tokens; ++t) {
        for (std::size_t i = 0; i < k; ++i) {
          const std::size_t u = static_cast<std::size_t>(lr.selected[t * k + i]);
          const double* h = hidden.data() + (t * k + i) * width;
          for (std::size_t j = 0; j < width; ++j) sums[u][j] += h[j];
          ++counts[u];
        }
      }
      for (std::size_t u = 0; u < model.n_routable(l); ++u) {
        if (counts[u] == 0) continue;  // no tokens routed: no entry
        UnitSampleActivations& usa = set.layers[l][u];
        usa.sample_ids.push_back(sample.id);
        usa.sample_languages.push_back(sample.language);
        usa.token_counts.push_back(counts[u]);
        auto& buf = rows[l][u];
        for (std::size_t j = 0; j < width; ++j)
          buf.push_back(sums[u][j] / static_cast<double>(counts[u]));
      }
    }
  }

  for (std::size_t l = 0; l < n_layers; ++l) {
    for (std::size_t u = 0; u < model.n_routable(l); ++u) {
      UnitSampleActivations& usa = set.layers[l][u];
      usa.values = Tensor(usa.entries(), width);
      std::copy(rows[l][u].begin(), rows[l][u].end(), usa.values.data());
    }
  }
  return set;
}

ExpertAPReport expert_ap(const ExpertActivationSet& activations) {
  ExpertAPReport report;
  report.unit_width = activations.unit_width;

  for (const auto& layer : activations.layers)
    for (const auto& unit : layer)
      for (const auto& lang : unit.sample_languages)
        if (std::find(report.all_languages.begin(), report.all_languages.end(), lang) ==
            report.all_languages.end())
          report.all_languages.push_back(lang);

  for (const auto& layer : activations.layers) {
    for (const auto& unit : layer) {
      UnitAPScores scores;
      scores.layer = unit.layer;
      scores.unit = unit.unit;
      scores.population = unit.entries();
      const std::size_t n = unit.entries();
      for (const auto& lang : report.all_languages) {
        std::vector<std::uint8_t> labels(n, 0);
        std::size_t positives = 0;
        for (std::size_t s = 0; s < n; ++s) {
          labels[s] = unit.sample_languages[s] == lang ? 1 : 0;
          positives += labels[s];
        }
        // One-vs-rest needs both classes among the entered samples.
        if (positives == 0 || positives == n) continue;
        std::vector<double> ap(activations.unit_width, 0.0);
        std::vector<double> column(n);
        for (std::size_t j = 0; j < activations.unit_width; ++j) {
          for (std::size_t s = 0; s < n; ++s) column[s] = unit.values.at(s, j);
          ap[j] = compute_ap(column, labels);
        }
        scores.languages.push_back(lang);
        scores.scores.push_back(std::move(ap));
      }
      report.units.push_back(std::move(scores));
    }
  }
  return report;
}

HighApCounts high_ap_counts(const ExpertAPReport& report, double threshold) {
  HighApCounts counts;
  counts.threshold = threshold;
  counts.unit_width = report.unit_width;
  counts.languages = report.all_languages;
  for (const auto& unit : report.units) {
    for (const auto& lang : report.all_languages) {
      HighApCell cell;
      cell.layer = unit.layer;
      cell.unit = unit.unit;
      cell.language = lang;
      const auto it = std::find(unit.languages.begin(), unit.languages.end(), lang);
      if (it != unit.languages.end()) {
        const auto& ap = unit.scores[static_cast<std::size_t>(it - unit.languages.begin())];
        for (double v : ap)
          if (v >= threshold) ++cell.count;
      }
      cell.ratio = report.unit_width == 0
                       ? 0.0
                       : static_cast<double>(cell.count) / static_cast<double>(report.unit_width);
      counts.cells.push_back(std::move(cell));
    }
  }
  return counts;
}

void export_heatmap(const ExpertAPReport& report, const std::string& path, double threshold) {
  const HighApCounts counts = high_ap_counts(report, threshold);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "layer,unit";
  for (const auto& lang : counts.languages) out << "," << lang;
  out << "\n";
  char buf[32];
  const std::size_t n_langs = counts.languages.size();
  // Cells are unit-major: one CSV row per routable unit.
  for (std::size_t i = 0; n_langs > 0 && i + n_langs <= counts.cells.size(); i += n_langs) {
    out << counts.cells[i].layer << "," << counts.cells[i].unit;
    for (std::size_t g = 0; g < n_langs; ++g) {
      std::snprintf(buf, sizeof buf, "%.6f", counts.cells[i + g].ratio);
      out << "," << buf;
    }
    out << "\n";
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

std::string render_high_ap_table(const HighApCounts& counts) {
  std::string out;
  char line[128];
  std::snprintf(line, sizeof line, "%-6s %-12s %-6s %10s %10s\n", "layer", "unit", "lang",
                "high-AP", "ratio(%)");
  out += line;
  for (const auto& cell : counts.cells) {
    const std::string unit_name =
        cell.unit == 0 ? "base_layer" : "expert_" + std::to_string(cell.unit - 1);
    std::snprintf(line, sizeof line, "L%-5d %-12s %-6s %10d %10.2f\n", cell.layer,
                  unit_name.c_str(), cell.language.c_str(), cell.count, cell.ratio * 100.0);
    out += line;
  }
  return out;
}

void write_expert_ap_json(const ExpertAPReport& report, const std::string& path) {
  nlohmann::json j;
  j["unit_width"] = report.unit_width;
  j["languages"] = report.all_languages;
  j["units"] = nlohmann::json::array();
  for (const auto& unit : report.units) {
    nlohmann::json u;
    u["layer"] = unit.layer;
    u["unit"] = unit.unit;
    u["population"] = unit.population;
    u["ap"] = nlohmann::json::object();
    for (std::size_t g = 0; g < unit.languages.size(); ++g)
      u["ap"][unit.languages[g]] = unit.scores[g];
    j["units"].push_back(std::move(u));
  }
  save_json_file(j, path);
}

}  // namespace nm
