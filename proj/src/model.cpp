// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0

#include "nm/model.hpp"

#include <cmath>
#include <sstream>

#include "nm/common.hpp"

namespace nm {

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ValidationError("vocab_size must be >= 2");
  if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || max_seq_len < 1)
    throw ValidationError("all model dimensions must be >= 1");
  if (d_model % n_heads != 0)
    throw ValidationError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                          std::to_string(n_heads));
}

std::string ModelConfig::id_string(const char* kind) const {
  std::ostringstream os;
  os << kind << "(v=" << vocab_size << ",d=" << d_model << ",l=" << n_layers
     << ",h=" << n_heads << ",f=" << d_ff << ",m=" << max_seq_len << ")";
  return os.str();
}

namespace {

void init_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double gain = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-gain, gain);
}

}  // namespace

DenseModel init_dense(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.d_model, f = config.d_ff;

  DenseModel m;
  m.config = config;
  Rng rng(splitmix64(seed ^ 0x6d6f64656c696e69ull));

  m.tok_emb = Tensor(config.vocab_size, d);
  init_uniform(m.tok_emb, d, rng);
  m.pos_emb = Tensor(config.max_seq_len, d);
  init_uniform(m.pos_emb, d, rng);

  m.layers.resize(config.n_layers);
  for (auto& layer : m.layers) {
    layer.ln1.gamma = Tensor(std::vector<std::size_t>{d});
    layer.ln1.gamma.fill(1.0);
    layer.ln1.beta = Tensor(std::vector<std::size_t>{d});
    layer.attn.wq = Tensor(d, d);
    layer.attn.wk = Tensor(d, d);
    layer.attn.wv = Tensor(d, d);
    layer.attn.wo = Tensor(d, d);
    init_uniform(layer.attn.wq, d, rng);
    init_uniform(layer.attn.wk, d, rng);
    init_uniform(layer.attn.wv, d, rng);
    init_uniform(layer.attn.wo, d, rng);
    layer.ln2.gamma = Tensor(std::vector<std::size_t>{d});
    layer.ln2.gamma.fill(1.0);
    layer.ln2.beta = Tensor(std::vector<std::size_t>{d});
    layer.mlp.w_in = Tensor(d, f);
    layer.mlp.w_out = Tensor(f, d);
    init_uniform(layer.mlp.w_in, d, rng);
    init_uniform(layer.mlp.w_out, f, rng);
  }

  m.ln_f.gamma = Tensor(std::vector<std::size_t>{d});
  m.ln_f.gamma.fill(1.0);
  m.ln_f.beta = Tensor(std::vector<std::size_t>{d});
  m.head = Tensor(d, config.vocab_size);
  init_uniform(m.head, d, rng);
  return m;
}

namespace {

template <class ModelT, class Fn>
void visit_dense(ModelT& m, Fn&& fn) {
  fn("tok_emb", m.tok_emb);
  fn("pos_emb", m.pos_emb);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    auto& layer = m.layers[l];
    fn(p + "ln1.gamma", layer.ln1.gamma);
    fn(p + "ln1.beta", layer.ln1.beta);
    fn(p + "attn.wq", layer.attn.wq);
    fn(p + "attn.wk", layer.attn.wk);
    fn(p + "attn.wv", layer.attn.wv);
    fn(p + "attn.wo", layer.attn.wo);
    fn(p + "ln2.gamma", layer.ln2.gamma);
    fn(p + "ln2.beta", layer.ln2.beta);
    fn(p + "mlp.w_in", layer.mlp.w_in);
    fn(p + "mlp.w_out", layer.mlp.w_out);
  }
  fn("ln_f.gamma", m.ln_f.gamma);
  fn("ln_f.beta", m.ln_f.beta);
  fn("head", m.head);
}

template <class ModelT, class Fn>
void visit_moe(ModelT& m, Fn&& fn) {
  visit_dense(m.base, fn);
  for (std::size_t l = 0; l < m.moe.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    fn(p + "router", m.moe[l].router);
    for (std::size_t e = 0; e < m.moe[l].experts.size(); ++e) {
      const std::string q = p + "experts." + std::to_string(e) + ".";
      fn(q + "w_in", m.moe[l].experts[e].w_in);
      fn(q + "w_out", m.moe[l].experts[e].w_out);
    }
  }
}

}  // namespace

std::vector<ParamRef> param_refs(DenseModel& model) {
  std::vector<ParamRef> refs;
  visit_dense(model, [&](const std::string& name, Tensor& t) {
    refs.push_back(ParamRef{name, &t, true});
  });
  return refs;
}

std::vector<ParamRef> param_refs(MoEModel& model) {
  std::vector<ParamRef> refs;
  visit_moe(model, [&](const std::string& name, Tensor& t) {
    const auto it = model.trainable.find(name);
    const bool trainable = it != model.trainable.end() && it->second;
    refs.push_back(ParamRef{name, &t, trainable});
  });
  return refs;
}

std::vector<ParamRef> param_refs(const DenseModel& model) {
  return param_refs(const_cast<DenseModel&>(model));
}

std::vector<ParamRef> param_refs(const MoEModel& model) {
  return param_refs(const_cast<MoEModel&>(model));
}

DenseModel make_grad_buffer(const DenseModel& model) {
  DenseModel g = model;
  for (auto& ref : param_refs(g)) ref.tensor->zero();
  return g;
}

MoEModel make_grad_buffer(const MoEModel& model) {
  MoEModel g = model;
  for (auto& ref : param_refs(g)) ref.tensor->zero();
  return g;
}

MoEModel upcycle_to_moe(const DenseModel& dense, const AllocationPlan& plan, std::uint64_t seed) {
  plan.validate();
  if (plan.n_layers() != dense.config.n_layers)
    throw ValidationError("plan covers " + std::to_string(plan.n_layers()) + " layers, model has " +
                          std::to_string(dense.config.n_layers));

  MoEModel m;
  m.base = dense;
  m.plan = plan;
  m.moe.resize(dense.config.n_layers);
  for (std::size_t l = 0; l < m.moe.size(); ++l) {
    const int n_experts = plan.experts_per_layer[l];
    // Zero router logits: uniform initial routing, so the upcycled model
    // reproduces the dense model exactly until training moves the experts.
    m.moe[l].router = Tensor(dense.config.d_model, static_cast<std::size_t>(1 + n_experts));
    m.moe[l].experts.assign(static_cast<std::size_t>(n_experts), dense.layers[l].mlp);
  }
  (void)seed;  // reserved: upcycling is fully determined by (dense, plan)
  set_stage_mask(m, 1);
  return m;
}

void set_stage_mask(MoEModel& model, int stage) {
  if (stage != 1 && stage != 2)
    throw ValidationError("stage must be 1 or 2, got " + std::to_string(stage));
  model.stage = stage;
  model.trainable.clear();
  visit_dense(model.base, [&](const std::string& name, Tensor&) {
    model.trainable[name] = false;
  });
  for (std::size_t l = 0; l < model.moe.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    model.trainable[p + "router"] = true;
    for (std::size_t e = 0; e < model.moe[l].experts.size(); ++e) {
      const std::string q = p + "experts." + std::to_string(e) + ".";
      model.trainable[q + "w_in"] = stage == 1;
      model.trainable[q + "w_out"] = stage == 1;
    }
  }
}

}  // namespace nm
