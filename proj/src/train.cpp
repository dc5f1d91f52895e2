// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0

#include "nm/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "nm/common.hpp"

namespace nm {

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw ValidationError("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ValidationError("betas must lie in [0, 1)");
  if (epsilon <= 0.0) throw ValidationError("epsilon must be positive");
  if (weight_decay < 0.0) throw ValidationError("weight_decay must be non-negative");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (max_grad_norm <= 0.0) throw ValidationError("max_grad_norm must be positive");
  if (aux_coefficient < 0.0) throw ValidationError("aux_coefficient must be non-negative");
  if (!(stage2_source_fraction > 0.0 && stage2_source_fraction < 1.0))
    throw ValidationError("stage2_source_fraction must lie in (0, 1)");
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  if (total_steps == 0 || step >= total_steps) return 0.0;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

double aux_load_balance(const RoutingRecord& routing, const std::vector<int>& n_routable,
                        double alpha) {
  if (routing.layers.empty()) return 0.0;
  if (n_routable.size() != routing.layers.size())
    throw ValidationError("aux_load_balance: n_routable length does not match record layers");

  double total = 0.0;
  for (std::size_t l = 0; l < routing.layers.size(); ++l) {
    const LayerRouting& lr = routing.layers[l];
    const std::size_t n_units = static_cast<std::size_t>(n_routable[l]);
    if (static_cast<std::size_t>(lr.n_routable) != n_units)
      throw ValidationError("aux_load_balance: layer " + std::to_string(l) +
                            " unit count mismatch");
    const std::size_t t_len = routing.tokens;
    const std::size_t k = static_cast<std::size_t>(lr.top_k);
    std::vector<double> f_e(n_units, 0.0), pbar(n_units, 0.0);
    for (int u : lr.selected) f_e[static_cast<std::size_t>(u)] += 1.0;
    for (auto& v : f_e) v /= static_cast<double>(t_len * k);
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t e = 0; e < n_units; ++e) pbar[e] += lr.probs[t * n_units + e];
    double term = 0.0;
    for (std::size_t e = 0; e < n_units; ++e)
      term += f_e[e] * pbar[e] / static_cast<double>(t_len);
    total += static_cast<double>(n_units) * term;
  }
  return alpha * total / static_cast<double>(routing.layers.size());
}

template <class ModelT>
AdamState make_adam_state(const ModelT& model) {
  AdamState state;
  for (const auto& ref : param_refs(model)) {
    state.m.push_back(Tensor::zeros_like(*ref.tensor));
    state.v.push_back(Tensor::zeros_like(*ref.tensor));
  }
  return state;
}

template AdamState make_adam_state(const DenseModel&);
template AdamState make_adam_state(const MoEModel&);

void adamw_step(std::vector<ParamRef>& params, const std::vector<ParamRef>& grads,
                AdamState& state, const TrainConfig& cfg, std::size_t step_index, double lr) {
  if (step_index < 1) throw ValidationError("adamw_step: step_index is 1-based");
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ValidationError("adamw_step: parameter/gradient/state size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    if (!grads[i].tensor->all_finite())
      throw NumericalError("non-finite gradient for " + params[i].name);
  }

  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_index));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_index));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    Tensor& p = *params[i].tensor;
    const Tensor& g = *grads[i].tensor;
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= lr * (mhat / (std::sqrt(vhat) + cfg.epsilon) + cfg.weight_decay * p[j]);
    }
  }
  state.step = step_index;
}

double clip_grad_norm(const std::vector<ParamRef>& params, std::vector<ParamRef>& grads,
                      double max_norm) {
  double sq = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!params[i].trainable) continue;
    const Tensor& g = *grads[i].tensor;
    for (std::size_t j = 0; j < g.size(); ++j) sq += g[j] * g[j];
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (!params[i].trainable) continue;
      Tensor& g = *grads[i].tensor;
      for (std::size_t j = 0; j < g.size(); ++j) g[j] *= scale;
    }
  }
  return norm;
}

std::string tensor_digest(const Tensor& t) {
  return sha256_hex(t.data(), t.size() * sizeof(double));
}

namespace {

template <class ModelT>
double perplexity_impl(const ModelT& model, const LabeledCorpus& corpus,
                       const std::string& language) {
  double nll = 0.0;
  std::size_t predictions = 0;
  bool saw_language = false;
  for (const auto& sample : corpus.samples) {
    if (language != "all" && sample.language != language) continue;
    saw_language = true;
    ForwardOptions opts;
    opts.aux_coefficient = 0.0;
    const ForwardResult r = forward(model, sample.tokens, opts);
    nll += r.ce * static_cast<double>(sample.tokens.size() - 1);
    predictions += sample.tokens.size() - 1;
  }
  if (!saw_language)
    throw ValidationError("eval_perplexity: no samples for language '" + language + "'");
  return std::exp(nll / static_cast<double>(predictions));
}

// Uniform batch sampling with replacement; deterministic in cfg.seed.
std::vector<std::vector<std::uint32_t>> sample_batch(const LabeledCorpus& corpus,
                                                     const std::vector<std::size_t>& pool,
                                                     std::size_t batch_size, Rng& rng) {
  std::vector<std::vector<std::uint32_t>> batch;
  batch.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i)
    batch.push_back(corpus.samples[pool[rng.below(pool.size())]].tokens);
  return batch;
}

template <class ModelT>
struct DigestTracker {
  std::map<std::string, std::string> before;

  explicit DigestTracker(const ModelT& model) {
    for (const auto& ref : param_refs(model)) before[ref.name] = tensor_digest(*ref.tensor);
  }

  void finish(const ModelT& model, TrainReport& report) const {
    for (const auto& ref : param_refs(model))
      report.digests[ref.name] = {before.at(ref.name), tensor_digest(*ref.tensor)};
  }
};

// One optimization run. `batcher` returns the token sequences of a step.
template <class ModelT, class Batcher>
TrainReport run_loop(ModelT& model, const LabeledCorpus& eval_corpus, const TrainConfig& cfg,
                     Batcher&& batcher) {
  cfg.validate();
  DigestTracker<ModelT> tracker(model);
  TrainReport report;

  ModelT grads = make_grad_buffer(model);
  AdamState state = make_adam_state(model);
  auto params = param_refs(model);

  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    const auto batch = batcher(step);
    const BatchGradients bg = loss_and_grads(model, batch, grads, cfg.aux_coefficient);
    auto grad_refs = param_refs(grads);
    clip_grad_norm(params, grad_refs, cfg.max_grad_norm);
    double lr = cosine_lr(step, cfg.total_steps, cfg.learning_rate);
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
      lr *= static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
    adamw_step(params, grad_refs, state, cfg, step + 1, lr);
    report.loss_curve.push_back(bg.loss);
    report.aux_curve.push_back(bg.aux);
  }

  for (const auto& id : eval_corpus.language_ids())
    if (eval_corpus.count_language(id) > 0)
      report.final_perplexity[id] = perplexity_impl(model, eval_corpus, id);
  tracker.finish(model, report);
  return report;
}

}  // namespace

double eval_perplexity(const DenseModel& model, const LabeledCorpus& corpus,
                       const std::string& language) {
  return perplexity_impl(model, corpus, language);
}

double eval_perplexity(const MoEModel& model, const LabeledCorpus& corpus,
                       const std::string& language) {
  return perplexity_impl(model, corpus, language);
}

TrainReport train_dense(DenseModel& model, const LabeledCorpus& corpus, const TrainConfig& cfg) {
  if (corpus.samples.empty()) throw ValidationError("train_dense: empty corpus");
  std::vector<std::size_t> pool(corpus.samples.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  Rng rng(cfg.seed);
  return run_loop(model, corpus, cfg, [&](std::size_t) {
    return sample_batch(corpus, pool, cfg.batch_size, rng);
  });
}

TrainReport train_stage1(MoEModel& model, const LabeledCorpus& target_corpus,
                         const TrainConfig& cfg) {
  if (target_corpus.samples.empty()) throw ValidationError("train_stage1: empty corpus");
  if (model.stage != 1) throw ValidationError("train_stage1: stage mask is not set to 1");

  std::set<std::string> present;
  for (const auto& s : target_corpus.samples) present.insert(s.language);
  std::vector<std::string> warnings;
  if (!cfg.target_language.empty()) {
    for (const auto& lang : present)
      if (lang != cfg.target_language)
        warnings.push_back("stage 1 corpus contains non-target language '" + lang + "'");
  } else if (present.size() > 1) {
    warnings.push_back("stage 1 corpus contains multiple languages; stage 1 is target-only");
  }

  std::vector<std::size_t> pool(target_corpus.samples.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  Rng rng(cfg.seed);
  TrainReport report = run_loop(model, target_corpus, cfg, [&](std::size_t) {
    return sample_batch(target_corpus, pool, cfg.batch_size, rng);
  });
  report.warnings = std::move(warnings);
  return report;
}

TrainReport train_stage2(MoEModel& model, const LabeledCorpus& replay_mix,
                         const TrainConfig& cfg) {
  if (replay_mix.samples.empty()) throw ValidationError("train_stage2: empty corpus");
  if (model.stage != 2) throw ValidationError("train_stage2: stage mask is not set to 2");
  if (cfg.batch_size < 2)
    throw ValidationError("train_stage2: batch_size must be >= 2 to interleave replay data");

  // Source pool: the configured source language, else everything non-target.
  std::vector<std::size_t> source_pool, target_pool;
  for (std::size_t i = 0; i < replay_mix.samples.size(); ++i) {
    const auto& lang = replay_mix.samples[i].language;
    const bool is_source =
        cfg.source_language.empty() ? lang != cfg.target_language : lang == cfg.source_language;
    (is_source ? source_pool : target_pool).push_back(i);
  }
  if (source_pool.empty())
    throw ValidationError("train_stage2: replay mix is missing the source language" +
                          (cfg.source_language.empty() ? std::string()
                                                       : " '" + cfg.source_language + "'"));
  if (target_pool.empty())
    throw ValidationError("train_stage2: replay mix is missing target-language samples");

  const std::size_t n_source = std::clamp<std::size_t>(
      static_cast<std::size_t>(
          std::llround(cfg.stage2_source_fraction * static_cast<double>(cfg.batch_size))),
      1, cfg.batch_size - 1);

  Rng rng(cfg.seed);
  return run_loop(model, replay_mix, cfg, [&](std::size_t) {
    std::vector<std::vector<std::uint32_t>> batch;
    batch.reserve(cfg.batch_size);
    for (std::size_t i = 0; i < n_source; ++i)
      batch.push_back(replay_mix.samples[source_pool[rng.below(source_pool.size())]].tokens);
    for (std::size_t i = n_source; i < cfg.batch_size; ++i)
      batch.push_back(replay_mix.samples[target_pool[rng.below(target_pool.size())]].tokens);
    return batch;
  });
}

}  // namespace nm
