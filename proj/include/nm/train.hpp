// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nm/corpus.hpp"
#include "nm/model.hpp"

namespace nm {

struct TrainConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  std::size_t warmup_steps = 0;
  std::size_t batch_size = 16;
  std::size_t total_steps = 2000;
  double max_grad_norm = 1.0;
  double aux_coefficient = 0.01;
  std::uint64_t seed = 42;
  std::string target_language;  // optional; used by the stage drivers
  std::string source_language;  // optional; required source in the stage-2 mix
  double stage2_source_fraction = 0.5;  // source share of each stage-2 batch

  void validate() const;
};

struct TrainReport {
  std::vector<double> loss_curve;
  std::vector<double> aux_curve;
  std::map<std::string, double> final_perplexity;
  // Per tensor: digest before and after training.
  std::map<std::string, std::pair<std::string, std::string>> digests;
  std::vector<std::string> warnings;
};

// lr = base * 0.5 * (1 + cos(pi * step / total)); steps past total clamp to 0.
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr);

// Load-balance penalty over a routing record: alpha * mean over layers of
// N_l * sum_e f_e * pbar_e, with f_e the fraction of (token, slot) selections
// of unit e and pbar_e its mean router probability.
double aux_load_balance(const RoutingRecord& routing, const std::vector<int>& n_routable,
                        double alpha = 0.01);

struct AdamState {
  std::vector<Tensor> m, v;  // aligned with param_refs order
  std::size_t step = 0;
};

template <class ModelT>
AdamState make_adam_state(const ModelT& model);

// Decoupled weight decay update with bias correction; frozen tensors untouched.
// `step_index` is 1-based. Throws NumericalError on non-finite gradients before
// touching any parameter.
void adamw_step(std::vector<ParamRef>& params, const std::vector<ParamRef>& grads,
                AdamState& state, const TrainConfig& cfg, std::size_t step_index, double lr);

// Scales trainable gradients so their global norm is at most max_norm.
double clip_grad_norm(const std::vector<ParamRef>& params, std::vector<ParamRef>& grads,
                      double max_norm);

// exp(mean next-token negative log likelihood); aux loss excluded.
// language "all" pools every sample.
double eval_perplexity(const DenseModel& model, const LabeledCorpus& corpus,
                       const std::string& language = "all");
double eval_perplexity(const MoEModel& model, const LabeledCorpus& corpus,
                       const std::string& language = "all");

// Generic training loop over a corpus (uniform batch sampling). Exposed for
// the dense baseline; the stage drivers add freeze handling around it.
TrainReport train_dense(DenseModel& model, const LabeledCorpus& corpus, const TrainConfig& cfg);

// Stage 1: experts + routers on target-language data, base frozen.
TrainReport train_stage1(MoEModel& model, const LabeledCorpus& target_corpus,
                         const TrainConfig& cfg);

// Stage 2: routers only, on a source + target replay mix.
TrainReport train_stage2(MoEModel& model, const LabeledCorpus& replay_mix, const TrainConfig& cfg);

std::string tensor_digest(const Tensor& t);

}  // namespace nm
