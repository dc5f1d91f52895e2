// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <vector>

#include "nm/corpus.hpp"
#include "nm/tensor.hpp"

namespace nm {

struct DenseModel;
struct MoEModel;

enum class ProbeComponent { attention_output, mlp_hidden };

std::string component_name(ProbeComponent c);
ProbeComponent component_from_name(const std::string& name);

struct ProbePoint {
  int layer = 0;
  ProbeComponent component = ProbeComponent::attention_output;
  int width = 0;

  friend bool operator==(const ProbePoint&, const ProbePoint&) = default;
};

struct NeuronId {
  int layer = 0;
  ProbeComponent component = ProbeComponent::attention_output;
  int index = 0;

  friend auto operator<=>(const NeuronId&, const NeuronId&) = default;
};

struct TraceSampleInfo {
  std::int64_t id = 0;
  std::string language;

  friend bool operator==(const TraceSampleInfo&, const TraceSampleInfo&) = default;
};

// Sample-level activations over the probe points of a model. Values are stored
// as binary32: average precision depends only on the ordering.
struct ActivationTrace {
  std::string model_id;
  std::vector<ProbePoint> probe_points;
  std::vector<TraceSampleInfo> samples;
  std::size_t cols = 0;
  std::vector<float> values;  // [samples x cols] row-major

  float at(std::size_t row, std::size_t col) const { return values[row * cols + col]; }
  std::size_t rows() const { return samples.size(); }
  void validate() const;

  friend bool operator==(const ActivationTrace&, const ActivationTrace&) = default;
};

// Column layout is the concatenation of probe points in manifest order.
std::size_t column_of(const std::vector<ProbePoint>& points, const NeuronId& id);
NeuronId neuron_of(const std::vector<ProbePoint>& points, std::size_t column);

// One row per sample; each neuron's value is the mean of its token-level
// activations over the sample.
ActivationTrace record_trace(const DenseModel& model, const LabeledCorpus& corpus);
ActivationTrace record_trace(const MoEModel& model, const LabeledCorpus& corpus);

// The token-to-sample aggregation step: per-column mean over a [T, width]
// per-token probe, quantized to the trace payload precision.
std::vector<float> probe_sample_mean(const Tensor& per_token);

// Writes <base>.manifest.json and <base>.act.
void write_trace(const ActivationTrace& trace, const std::string& base_path);
ActivationTrace read_trace(const std::string& base_path);

}  // namespace nm
