// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "nm/alloc.hpp"
#include "nm/common.hpp"
#include "nm/model.hpp"

namespace nm {

inline nlohmann::json plan_to_json(const AllocationPlan& plan) {
  nlohmann::json j;
  j["version"] = 1;
  j["n_layers"] = plan.n_layers();
  j["e_min"] = plan.e_min;
  j["e_max"] = plan.e_max;
  j["rounding"] = rounding_name(plan.rounding);
  if (plan.scores.empty())
    j["scores"] = nullptr;
  else
    j["scores"] = plan.scores;
  j["experts_per_layer"] = plan.experts_per_layer;
  j["total"] = plan.total_experts();
  return j;
}

inline AllocationPlan plan_from_json(const nlohmann::json& j) {
  AllocationPlan plan;
  plan.e_min = j.at("e_min").get<int>();
  plan.e_max = j.at("e_max").get<int>();
  plan.rounding = rounding_from_name(j.at("rounding").get<std::string>());
  if (j.contains("scores") && !j.at("scores").is_null())
    plan.scores = j.at("scores").get<std::vector<int>>();
  plan.experts_per_layer = j.at("experts_per_layer").get<std::vector<int>>();
  if (j.contains("n_layers") &&
      j.at("n_layers").get<std::size_t>() != plan.experts_per_layer.size())
    throw ValidationError("plan n_layers does not match experts_per_layer length");
  if (j.contains("total")) {
    long long total = 0;
    for (int e : plan.experts_per_layer) total += e;
    if (j.at("total").get<long long>() != total)
      throw ValidationError("plan total " + j.at("total").dump() +
                            " does not match expert sum " + std::to_string(total));
  }
  plan.validate();
  return plan;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"vocab_size", c.vocab_size},   {"d_model", c.d_model},
                        {"n_layers", c.n_layers},       {"n_heads", c.n_heads},
                        {"d_ff", c.d_ff},               {"max_seq_len", c.max_seq_len}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::uint32_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.validate();
  return c;
}

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("parse error: " + path + ": " + e.what());
  }
  return j;
}

inline void save_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace nm
