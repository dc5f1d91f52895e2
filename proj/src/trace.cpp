// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0

#include "nm/trace.hpp"

#include <cstring>
#include <fstream>
#include <set>

#include "json_util.hpp"
#include "nm/common.hpp"
#include "nm/model.hpp"

namespace nm {

std::string component_name(ProbeComponent c) {
  return c == ProbeComponent::attention_output ? "attention-output" : "mlp-hidden";
}

ProbeComponent component_from_name(const std::string& name) {
  if (name == "attention-output") return ProbeComponent::attention_output;
  if (name == "mlp-hidden") return ProbeComponent::mlp_hidden;
  throw ValidationError("unknown probe component '" + name + "'");
}

void ActivationTrace::validate() const {
  std::set<std::pair<int, int>> seen;
  std::size_t width_sum = 0;
  for (const auto& p : probe_points) {
    if (p.width <= 0) throw ValidationError("probe point with non-positive width");
    if (!seen.insert({p.layer, static_cast<int>(p.component)}).second)
      throw ValidationError("duplicate probe point (layer " + std::to_string(p.layer) + ", " +
                            component_name(p.component) + ")");
    width_sum += static_cast<std::size_t>(p.width);
  }
  if (cols != width_sum)
    throw ValidationError("trace cols " + std::to_string(cols) + " != probe width sum " +
                          std::to_string(width_sum));
  if (values.size() != rows() * cols)
    throw ValidationError("trace value count does not match rows x cols");
  for (float v : values)
    if (!std::isfinite(v)) throw ValidationError("non-finite value in trace");
}

std::size_t column_of(const std::vector<ProbePoint>& points, const NeuronId& id) {
  std::size_t offset = 0;
  for (const auto& p : points) {
    if (p.layer == id.layer && p.component == id.component) {
      if (id.index < 0 || id.index >= p.width)
        throw ValidationError("neuron index " + std::to_string(id.index) +
                              " out of range for probe width " + std::to_string(p.width));
      return offset + static_cast<std::size_t>(id.index);
    }
    offset += static_cast<std::size_t>(p.width);
  }
  throw ValidationError("neuron (layer " + std::to_string(id.layer) + ", " +
                        component_name(id.component) + ") resolves to no probe point");
}

NeuronId neuron_of(const std::vector<ProbePoint>& points, std::size_t column) {
  std::size_t offset = 0;
  for (const auto& p : points) {
    if (column < offset + static_cast<std::size_t>(p.width))
      return NeuronId{p.layer, p.component, static_cast<int>(column - offset)};
    offset += static_cast<std::size_t>(p.width);
  }
  throw ValidationError("column " + std::to_string(column) + " beyond trace width");
}

namespace {

template <class ModelT>
ActivationTrace record_impl(const ModelT& model, const ModelConfig& config,
                            const std::string& model_id, const LabeledCorpus& corpus) {
  if (corpus.samples.empty()) throw ValidationError("record_trace: empty corpus");

  ActivationTrace trace;
  trace.model_id = model_id;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    trace.probe_points.push_back(ProbePoint{static_cast<int>(l), ProbeComponent::attention_output,
                                            static_cast<int>(config.d_model)});
    trace.probe_points.push_back(
        ProbePoint{static_cast<int>(l), ProbeComponent::mlp_hidden, static_cast<int>(config.d_ff)});
  }
  trace.cols = config.n_layers * (config.d_model + config.d_ff);
  trace.values.assign(corpus.samples.size() * trace.cols, 0.0f);

  ForwardOptions opts;
  opts.probes = true;
  for (std::size_t s = 0; s < corpus.samples.size(); ++s) {
    const auto& sample = corpus.samples[s];
    trace.samples.push_back(TraceSampleInfo{sample.id, sample.language});
    const ForwardResult result = forward(model, sample.tokens, opts);
    std::size_t col = 0;
    for (const Tensor& probe : result.probes) {
      const std::vector<float> row = probe_sample_mean(probe);
      std::copy(row.begin(), row.end(), trace.values.begin() + s * trace.cols + col);
      col += row.size();
    }
  }
  trace.validate();
  return trace;
}

constexpr char kMagic[4] = {'N', 'M', 'T', 'R'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

std::vector<float> probe_sample_mean(const Tensor& per_token) {
  const std::size_t t_len = per_token.dim(0), width = per_token.dim(1);
  std::vector<float> out(width);
  const double inv_t = 1.0 / static_cast<double>(t_len);
  for (std::size_t j = 0; j < width; ++j) {
    double mean = 0.0;
    for (std::size_t t = 0; t < t_len; ++t) mean += per_token.at(t, j);
    out[j] = static_cast<float>(mean * inv_t);
  }
  return out;
}

ActivationTrace record_trace(const DenseModel& model, const LabeledCorpus& corpus) {
  return record_impl(model, model.config, model.config.id_string("dense"), corpus);
}

ActivationTrace record_trace(const MoEModel& model, const LabeledCorpus& corpus) {
  return record_impl(model, model.base.config, model.base.config.id_string("moe"), corpus);
}

void write_trace(const ActivationTrace& trace, const std::string& base_path) {
  trace.validate();
  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["model_id"] = trace.model_id;
  manifest["probe_points"] = nlohmann::json::array();
  for (const auto& p : trace.probe_points)
    manifest["probe_points"].push_back({{"layer", p.layer},
                                        {"component", component_name(p.component)},
                                        {"width", p.width}});
  manifest["samples"] = nlohmann::json::array();
  for (const auto& s : trace.samples)
    manifest["samples"].push_back({{"id", s.id}, {"language", s.language}});
  save_json_file(manifest, base_path + ".manifest.json");

  std::ofstream out(base_path + ".act", std::ios::binary);
  if (!out) throw IoError("cannot open '" + base_path + ".act' for writing");
  out.write(kMagic, 4);
  out.write(reinterpret_cast<const char*>(&kVersion), sizeof kVersion);
  const std::uint64_t rows = trace.rows(), cols = trace.cols;
  out.write(reinterpret_cast<const char*>(&rows), sizeof rows);
  out.write(reinterpret_cast<const char*>(&cols), sizeof cols);
  out.write(reinterpret_cast<const char*>(trace.values.data()),
            static_cast<std::streamsize>(trace.values.size() * sizeof(float)));
  if (!out) throw IoError("write failed for '" + base_path + ".act'");
}

ActivationTrace read_trace(const std::string& base_path) {
  const nlohmann::json manifest = load_json_file(base_path + ".manifest.json");
  ActivationTrace trace;
  try {
    if (manifest.at("version").get<int>() != 1)
      throw FormatError("trace manifest '" + base_path + "': unsupported version");
    trace.model_id = manifest.at("model_id").get<std::string>();
    for (const auto& p : manifest.at("probe_points")) {
      trace.probe_points.push_back(ProbePoint{
          p.at("layer").get<int>(), component_from_name(p.at("component").get<std::string>()),
          p.at("width").get<int>()});
      trace.cols += static_cast<std::size_t>(trace.probe_points.back().width);
    }
    for (const auto& s : manifest.at("samples"))
      trace.samples.push_back(
          TraceSampleInfo{s.at("id").get<std::int64_t>(), s.at("language").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("trace manifest '" + base_path + "': " + e.what());
  }

  const std::string act_path = base_path + ".act";
  std::ifstream in(act_path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + act_path + "' for reading");
  char magic[4] = {};
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("'" + act_path + "' is not a trace payload (bad magic)");
  std::uint32_t version = 0;
  if (!in.read(reinterpret_cast<char*>(&version), sizeof version) || version != kVersion)
    throw FormatError("trace payload '" + act_path + "': unsupported version");
  std::uint64_t rows = 0, cols = 0;
  if (!in.read(reinterpret_cast<char*>(&rows), sizeof rows) ||
      !in.read(reinterpret_cast<char*>(&cols), sizeof cols))
    throw FormatError("truncated trace payload '" + act_path + "'");
  if (rows != trace.samples.size() || cols != trace.cols)
    throw FormatError("trace payload '" + act_path + "' is " + std::to_string(rows) + "x" +
                      std::to_string(cols) + ", manifest says " +
                      std::to_string(trace.samples.size()) + "x" + std::to_string(trace.cols));

  trace.values.assign(rows * cols, 0.0f);
  const std::streamsize want =
      static_cast<std::streamsize>(trace.values.size() * sizeof(float));
  if (!in.read(reinterpret_cast<char*>(trace.values.data()), want))
    throw FormatError("trace payload '" + act_path + "': expected " + std::to_string(want) +
                      " data bytes, got " + std::to_string(in.gcount()));
  char extra = 0;
  if (in.read(&extra, 1))
    throw FormatError("trace payload '" + act_path + "' has trailing bytes");
  trace.validate();
  return trace;
}

}  // namespace nm
