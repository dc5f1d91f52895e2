// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "nm/alloc.hpp"
#include "nm/tensor.hpp"

namespace nm {

struct ModelConfig {
  std::uint32_t vocab_size = 128;
  std::size_t d_model = 32;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 64;
  std::size_t max_seq_len = 64;

  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
  std::string id_string(const char* kind) const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerNormParams {
  Tensor gamma, beta;  // [D]
};

struct AttentionParams {
  Tensor wq, wk, wv, wo;  // [D, D]
};

struct MlpParams {
  Tensor w_in;   // [D, F]
  Tensor w_out;  // [F, D]
};

struct DenseLayerParams {
  LayerNormParams ln1;
  AttentionParams attn;
  LayerNormParams ln2;
  MlpParams mlp;
};

struct DenseModel {
  ModelConfig config;
  Tensor tok_emb;  // [V, D]
  Tensor pos_emb;  // [M, D]
  std::vector<DenseLayerParams> layers;
  LayerNormParams ln_f;
  Tensor head;  // [D, V]
};

struct MoELayerParams {
  Tensor router;                  // [D, 1 + E_l]; unit 0 is the base MLP
  std::vector<MlpParams> experts;  // E_l added experts
};

struct MoEModel {
  DenseModel base;
  std::vector<MoELayerParams> moe;
  AllocationPlan plan;
  std::map<std::string, bool> trainable;  // per tensor name
  int stage = 1;

  std::size_t n_routable(std::size_t layer) const { return 1 + moe[layer].experts.size(); }
  std::size_t top_k(std::size_t layer) const { return std::min<std::size_t>(2, n_routable(layer)); }
};

// Canonical named enumeration of every parameter tensor.
struct ParamRef {
  std::string name;
  Tensor* tensor;
  bool trainable;
};

std::vector<ParamRef> param_refs(DenseModel& model);
std::vector<ParamRef> param_refs(MoEModel& model);
std::vector<ParamRef> param_refs(const DenseModel& model);  // tensors are non-const internally
std::vector<ParamRef> param_refs(const MoEModel& model);

// Routing information of one forward pass.
struct LayerRouting {
  int n_routable = 1;
  int top_k = 1;
  std::vector<int> selected;     // [T * top_k] unit indices
  std::vector<double> weights;   // [T * top_k] renormalized, sum 1 per token
  std::vector<double> probs;     // [T * n_routable] full softmax rows
};

struct RoutingRecord {
  std::size_t tokens = 0;
  std::vector<LayerRouting> layers;  // empty for dense models
};

struct ForwardOptions {
  bool probes = false;
  bool collect_expert_hidden = false;  // per-token expert hidden activations
  double aux_coefficient = 0.01;
};

struct ForwardResult {
  Tensor logits;  // [T, V]
  double loss = 0.0;  // ce + aux
  double ce = 0.0;
  double aux = 0.0;   // coefficient included; 0 for dense
  RoutingRecord routing;
  // Per probe point (layer-major, attention-output then mlp-hidden): [T, width].
  std::vector<Tensor> probes;
  // Per layer when collect_expert_hidden: [T, top_k, F] hidden activations of the
  // selected units, slot order matching routing.selected.
  std::vector<Tensor> expert_hidden;
};

DenseModel init_dense(const ModelConfig& config, std::uint64_t seed);

ForwardResult forward(const DenseModel& model, std::span<const std::uint32_t> tokens,
                      const ForwardOptions& opts = {});
ForwardResult forward(const MoEModel& model, std::span<const std::uint32_t> tokens,
                      const ForwardOptions& opts = {});

struct BatchGradients {
  double loss = 0.0;
  double ce = 0.0;
  double aux = 0.0;
};

// Analytic gradients of the batch-mean loss (cross-entropy + aux) with respect
// to every parameter. Gradients of frozen tensors are zeroed.
BatchGradients loss_and_grads(const DenseModel& model,
                              const std::vector<std::vector<std::uint32_t>>& batch,
                              DenseModel& grads, double aux_coefficient = 0.01);
BatchGradients loss_and_grads(const MoEModel& model,
                              const std::vector<std::vector<std::uint32_t>>& batch,
                              MoEModel& grads, double aux_coefficient = 0.01);

// A zeroed parameter mirror used as gradient storage.
DenseModel make_grad_buffer(const DenseModel& model);
MoEModel make_grad_buffer(const MoEModel& model);

MoEModel upcycle_to_moe(const DenseModel& dense, const AllocationPlan& plan, std::uint64_t seed);

// Stage 1: base frozen, experts and routers trainable.
// Stage 2: routers only.
void set_stage_mask(MoEModel& model, int stage);

void save_checkpoint(const DenseModel& model, const std::string& path);
void save_checkpoint(const MoEModel& model, const std::string& path);

struct LoadedModel {
  bool is_moe = false;
  DenseModel dense;
  MoEModel moe;
};

LoadedModel load_checkpoint(const std::string& path);

}  // namespace nm
