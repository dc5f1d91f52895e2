// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0
//
// Scalar (single core, f64) forward and reverse passes for the dense and MoE
// transformer. The reverse pass is hand-derived; tests pin it against central
// finite differences.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "nm/common.hpp"
#include "nm/model.hpp"

namespace nm {
namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

void softmax_row(const double* in, double* out, std::size_t n) {
  double mx = in[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(in[i] - mx);
    sum += out[i];
  }
  const double inv = 1.0 / sum;
  for (std::size_t i = 0; i < n; ++i) out[i] *= inv;
}

// Views unify the dense and MoE parameter layouts for the shared passes.
struct UnitRef {
  const Tensor* w_in;
  const Tensor* w_out;
};

struct LayerView {
  const LayerNormParams* ln1;
  const AttentionParams* attn;
  const LayerNormParams* ln2;
  bool moe = false;
  const Tensor* router = nullptr;
  std::vector<UnitRef> units;  // unit 0 = base MLP
};

struct ModelView {
  const ModelConfig* cfg;
  const Tensor* tok_emb;
  const Tensor* pos_emb;
  const LayerNormParams* ln_f;
  const Tensor* head;
  std::vector<LayerView> layers;
};

ModelView view_of(const DenseModel& m) {
  ModelView v;
  v.cfg = &m.config;
  v.tok_emb = &m.tok_emb;
  v.pos_emb = &m.pos_emb;
  v.ln_f = &m.ln_f;
  v.head = &m.head;
  v.layers.resize(m.layers.size());
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& lv = v.layers[l];
    lv.ln1 = &m.layers[l].ln1;
    lv.attn = &m.layers[l].attn;
    lv.ln2 = &m.layers[l].ln2;
    lv.units.push_back(UnitRef{&m.layers[l].mlp.w_in, &m.layers[l].mlp.w_out});
  }
  return v;
}

ModelView view_of(const MoEModel& m) {
  ModelView v = view_of(m.base);
  for (std::size_t l = 0; l < v.layers.size(); ++l) {
    auto& lv = v.layers[l];
    lv.moe = true;
    lv.router = &m.moe[l].router;
    for (const auto& e : m.moe[l].experts) lv.units.push_back(UnitRef{&e.w_in, &e.w_out});
  }
  return v;
}

struct UnitGradRef {
  Tensor* w_in;
  Tensor* w_out;
};

struct LayerGradView {
  LayerNormParams* ln1;
  AttentionParams* attn;
  LayerNormParams* ln2;
  Tensor* router = nullptr;
  std::vector<UnitGradRef> units;
};

struct GradView {
  Tensor* tok_emb;
  Tensor* pos_emb;
  LayerNormParams* ln_f;
  Tensor* head;
  std::vector<LayerGradView> layers;
};

GradView grad_view_of(DenseModel& g) {
  GradView v;
  v.tok_emb = &g.tok_emb;
  v.pos_emb = &g.pos_emb;
  v.ln_f = &g.ln_f;
  v.head = &g.head;
  v.layers.resize(g.layers.size());
  for (std::size_t l = 0; l < g.layers.size(); ++l) {
    auto& lv = v.layers[l];
    lv.ln1 = &g.layers[l].ln1;
    lv.attn = &g.layers[l].attn;
    lv.ln2 = &g.layers[l].ln2;
    lv.units.push_back(UnitGradRef{&g.layers[l].mlp.w_in, &g.layers[l].mlp.w_out});
  }
  return v;
}

GradView grad_view_of(MoEModel& g) {
  GradView v = grad_view_of(g.base);
  for (std::size_t l = 0; l < v.layers.size(); ++l) {
    v.layers[l].router = &g.moe[l].router;
    for (auto& e : g.moe[l].experts)
      v.layers[l].units.push_back(UnitGradRef{&e.w_in, &e.w_out});
  }
  return v;
}

struct LayerCache {
  Tensor x_in;                 // [T,D]
  Tensor ln1_u;                // [T,D]
  std::vector<double> ln1_rstd;
  Tensor y;                    // [T,D]
  Tensor q, k, vv;             // [T,D]
  std::vector<Tensor> attn_p;  // per head [T,T]
  Tensor ctx;                  // [T,D]
  Tensor attn_out;             // [T,D]
  Tensor resid1;               // [T,D]
  Tensor ln2_u;
  std::vector<double> ln2_rstd;
  Tensor z;  // [T,D]
  // dense path
  Tensor mlp_pre, mlp_act;  // [T,F]
  // moe path
  Tensor probs;              // [T,U]
  std::vector<int> sel;      // [T*k]
  std::vector<double> selw;  // [T*k]
  Tensor unit_pre;           // [T,k,F]
  Tensor unit_act;           // [T,k,F]
  Tensor unit_out;           // [T,k,D]
};

struct SeqCache {
  Tensor x0;  // [T,D]
  std::vector<LayerCache> layers;
  Tensor lnf_u;
  std::vector<double> lnf_rstd;
  Tensor yf;      // [T,D]
  Tensor logits;  // [T,V]
  double ce = 0.0;
};

void layernorm_forward(const Tensor& x, const LayerNormParams& p, Tensor& u,
                       std::vector<double>& rstd, Tensor& y) {
  const std::size_t t_len = x.dim(0), d = x.dim(1);
  u = Tensor(t_len, d);
  y = Tensor(t_len, d);
  rstd.assign(t_len, 0.0);
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* xr = x.row(t);
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    rstd[t] = rs;
    double* ur = u.row(t);
    double* yr = y.row(t);
    for (std::size_t j = 0; j < d; ++j) {
      ur[j] = (xr[j] - mu) * rs;
      yr[j] = p.gamma[j] * ur[j] + p.beta[j];
    }
  }
}

// dy -> dx (+=), and gamma/beta gradient accumulation.
void layernorm_backward(const Tensor& dy, const Tensor& u, const std::vector<double>& rstd,
                        const LayerNormParams& p, LayerNormParams& grad, Tensor& dx) {
  const std::size_t t_len = dy.dim(0), d = dy.dim(1);
  std::vector<double> du(d);
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* dyr = dy.row(t);
    const double* ur = u.row(t);
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      du[j] = dyr[j] * p.gamma[j];
      m1 += du[j];
      m2 += du[j] * ur[j];
      grad.gamma[j] += dyr[j] * ur[j];
      grad.beta[j] += dyr[j];
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    double* dxr = dx.row(t);
    const double rs = rstd[t];
    for (std::size_t j = 0; j < d; ++j) dxr[j] += rs * (du[j] - m1 - ur[j] * m2);
  }
}

void attention_forward(const ModelConfig& cfg, const LayerView& lv, LayerCache& c) {
  const std::size_t t_len = c.y.dim(0), d = cfg.d_model, h = cfg.n_heads, dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  c.q = Tensor(t_len, d);
  c.k = Tensor(t_len, d);
  c.vv = Tensor(t_len, d);
  matmul_acc(c.y.data(), lv.attn->wq.data(), c.q.data(), t_len, d, d);
  matmul_acc(c.y.data(), lv.attn->wk.data(), c.k.data(), t_len, d, d);
  matmul_acc(c.y.data(), lv.attn->wv.data(), c.vv.data(), t_len, d, d);

  c.attn_p.assign(h, Tensor(t_len, t_len));
  c.ctx = Tensor(t_len, d);
  std::vector<double> scores;
  for (std::size_t hi = 0; hi < h; ++hi) {
    Tensor& p = c.attn_p[hi];
    const std::size_t off = hi * dh;
    for (std::size_t t = 0; t < t_len; ++t) {
      scores.assign(t + 1, 0.0);
      const double* qr = c.q.row(t) + off;
      for (std::size_t s = 0; s <= t; ++s) {
        const double* kr = c.k.row(s) + off;
        double acc = 0.0;
        for (std::size_t j = 0; j < dh; ++j) acc += qr[j] * kr[j];
        scores[s] = acc * scale;
      }
      softmax_row(scores.data(), p.row(t), t + 1);  // causal: columns > t stay 0
      double* ctx = c.ctx.row(t) + off;
      for (std::size_t s = 0; s <= t; ++s) {
        const double w = p.at(t, s);
        const double* vr = c.vv.row(s) + off;
        for (std::size_t j = 0; j < dh; ++j) ctx[j] += w * vr[j];
      }
    }
  }
  c.attn_out = Tensor(t_len, d);
  matmul_acc(c.ctx.data(), lv.attn->wo.data(), c.attn_out.data(), t_len, d, d);
}

void attention_backward(const ModelConfig& cfg, const LayerView& lv, const LayerCache& c,
                        const Tensor& d_attn_out, LayerGradView& g, Tensor& dy) {
  const std::size_t t_len = c.y.dim(0), d = cfg.d_model, h = cfg.n_heads, dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor dctx(t_len, d);
  matmul_bt_acc(d_attn_out.data(), lv.attn->wo.data(), dctx.data(), t_len, d, d);
  matmul_at_acc(c.ctx.data(), d_attn_out.data(), g.attn->wo.data(), t_len, d, d);

  Tensor dq(t_len, d), dk(t_len, d), dv(t_len, d);
  std::vector<double> dp, ds;
  for (std::size_t hi = 0; hi < h; ++hi) {
    const Tensor& p = c.attn_p[hi];
    const std::size_t off = hi * dh;
    for (std::size_t t = 0; t < t_len; ++t) {
      const double* dctxr = dctx.row(t) + off;
      dp.assign(t + 1, 0.0);
      for (std::size_t s = 0; s <= t; ++s) {
        const double* vr = c.vv.row(s) + off;
        double acc = 0.0;
        for (std::size_t j = 0; j < dh; ++j) acc += dctxr[j] * vr[j];
        dp[s] = acc;
        const double w = p.at(t, s);
        double* dvr = dv.row(s) + off;
        for (std::size_t j = 0; j < dh; ++j) dvr[j] += w * dctxr[j];
      }
      double dot = 0.0;
      for (std::size_t s = 0; s <= t; ++s) dot += dp[s] * p.at(t, s);
      ds.assign(t + 1, 0.0);
      for (std::size_t s = 0; s <= t; ++s) ds[s] = p.at(t, s) * (dp[s] - dot);
      double* dqr = dq.row(t) + off;
      const double* qr = c.q.row(t) + off;
      for (std::size_t s = 0; s <= t; ++s) {
        const double dss = ds[s] * scale;
        const double* kr = c.k.row(s) + off;
        double* dkr = dk.row(s) + off;
        for (std::size_t j = 0; j < dh; ++j) {
          dqr[j] += dss * kr[j];
          dkr[j] += dss * qr[j];
        }
      }
    }
  }

  matmul_at_acc(c.y.data(), dq.data(), g.attn->wq.data(), t_len, d, d);
  matmul_at_acc(c.y.data(), dk.data(), g.attn->wk.data(), t_len, d, d);
  matmul_at_acc(c.y.data(), dv.data(), g.attn->wv.data(), t_len, d, d);
  matmul_bt_acc(dq.data(), lv.attn->wq.data(), dy.data(), t_len, d, d);
  matmul_bt_acc(dk.data(), lv.attn->wk.data(), dy.data(), t_len, d, d);
  matmul_bt_acc(dv.data(), lv.attn->wv.data(), dy.data(), t_len, d, d);
}

// Top-k router selection: by logit descending, ties to the lower unit index.
// Scanning ascending with strict `>` keeps the lowest index among ties.
void select_top_k(const double* logits, std::size_t n_units, std::size_t k, int* out) {
  std::size_t first = 0;
  for (std::size_t e = 1; e < n_units; ++e)
    if (logits[e] > logits[first]) first = e;
  out[0] = static_cast<int>(first);
  if (k < 2) return;
  std::size_t second = n_units;
  for (std::size_t e = 0; e < n_units; ++e) {
    if (e == first) continue;
    if (second == n_units || logits[e] > logits[second]) second = e;
  }
  out[1] = static_cast<int>(second);
}

// The router reads the pre-norm residual stream (it carries token identity
// linearly); the experts consume the normalized z as usual.
void moe_layer_forward(const ModelConfig& cfg, const LayerView& lv, LayerCache& c, Tensor& m_out,
                       Tensor* hidden_probe) {
  const std::size_t t_len = c.z.dim(0), d = cfg.d_model, f = cfg.d_ff;
  const std::size_t n_units = lv.units.size();
  const std::size_t k = std::min<std::size_t>(2, n_units);

  c.probs = Tensor(t_len, n_units);
  c.sel.assign(t_len * k, 0);
  c.selw.assign(t_len * k, 0.0);
  c.unit_pre = Tensor(std::vector<std::size_t>{t_len, k, f});
  c.unit_act = Tensor(std::vector<std::size_t>{t_len, k, f});
  c.unit_out = Tensor(std::vector<std::size_t>{t_len, k, d});
  m_out = Tensor(t_len, d);
  if (hidden_probe) *hidden_probe = Tensor(t_len, f);

  std::vector<double> logits(n_units);
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* xr = c.resid1.row(t);
    const double* zr = c.z.row(t);
    for (std::size_t e = 0; e < n_units; ++e) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += xr[j] * lv.router->at(j, e);
      logits[e] = acc;
    }
    softmax_row(logits.data(), c.probs.row(t), n_units);

    int sel[2] = {0, 0};
    select_top_k(logits.data(), n_units, k, sel);
    double psum = 0.0;
    for (std::size_t i = 0; i < k; ++i) psum += c.probs.at(t, static_cast<std::size_t>(sel[i]));
    for (std::size_t i = 0; i < k; ++i) {
      c.sel[t * k + i] = sel[i];
      c.selw[t * k + i] = c.probs.at(t, static_cast<std::size_t>(sel[i])) / psum;
    }

    double* mr = m_out.row(t);
    for (std::size_t i = 0; i < k; ++i) {
      const UnitRef& unit = lv.units[static_cast<std::size_t>(sel[i])];
      const double w = c.selw[t * k + i];
      double* pre = c.unit_pre.data() + (t * k + i) * f;
      double* act = c.unit_act.data() + (t * k + i) * f;
      double* out = c.unit_out.data() + (t * k + i) * d;
      for (std::size_t j = 0; j < f; ++j) {
        double acc = 0.0;
        for (std::size_t dd = 0; dd < d; ++dd) acc += zr[dd] * unit.w_in->at(dd, j);
        pre[j] = acc;
        act[j] = gelu(acc);
      }
      for (std::size_t dd = 0; dd < d; ++dd) {
        double acc = 0.0;
        for (std::size_t j = 0; j < f; ++j) acc += act[j] * unit.w_out->at(j, dd);
        out[dd] = acc;
        mr[dd] += w * acc;
      }
      if (hidden_probe) {
        double* hp = hidden_probe->row(t);
        for (std::size_t j = 0; j < f; ++j) hp[j] += w * act[j];
      }
    }
  }
}

// dm -> dz (+=) and the router path -> dresid (+=); aux_dp carries the
// auxiliary per-probability gradient (all zeros when alpha == 0).
void moe_layer_backward(const ModelConfig& cfg, const LayerView& lv, const LayerCache& c,
                        const Tensor& dm, const std::vector<double>& aux_dp, LayerGradView& g,
                        Tensor& dz, Tensor& dresid) {
  const std::size_t t_len = c.z.dim(0), d = cfg.d_model, f = cfg.d_ff;
  const std::size_t n_units = lv.units.size();
  const std::size_t k = std::min<std::size_t>(2, n_units);

  std::vector<double> dact(f), dpre(f), dw(k), dp_full(n_units), dr(n_units);
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* zr = c.z.row(t);
    const double* dmr = dm.row(t);

    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t u = static_cast<std::size_t>(c.sel[t * k + i]);
      const UnitRef& unit = lv.units[u];
      UnitGradRef& gunit = g.units[u];
      const double w = c.selw[t * k + i];
      const double* pre = c.unit_pre.data() + (t * k + i) * f;
      const double* act = c.unit_act.data() + (t * k + i) * f;
      const double* out = c.unit_out.data() + (t * k + i) * d;

      double dws = 0.0;
      for (std::size_t dd = 0; dd < d; ++dd) dws += dmr[dd] * out[dd];
      dw[i] = dws;

      for (std::size_t j = 0; j < f; ++j) {
        double acc = 0.0;
        for (std::size_t dd = 0; dd < d; ++dd) {
          const double dout = w * dmr[dd];
          gunit.w_out->at(j, dd) += act[j] * dout;
          acc += dout * unit.w_out->at(j, dd);
        }
        dact[j] = acc;
        dpre[j] = acc * gelu_grad(pre[j]);
      }
      double* dzr = dz.row(t);
      for (std::size_t dd = 0; dd < d; ++dd) {
        double acc = 0.0;
        for (std::size_t j = 0; j < f; ++j) {
          gunit.w_in->at(dd, j) += zr[dd] * dpre[j];
          acc += dpre[j] * unit.w_in->at(dd, j);
        }
        dzr[dd] += acc;
      }
    }

    // Renormalized top-k weights back to full softmax probabilities.
    std::fill(dp_full.begin(), dp_full.end(), 0.0);
    double psum = 0.0, wdot = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      psum += c.probs.at(t, static_cast<std::size_t>(c.sel[t * k + i]));
      wdot += dw[i] * c.selw[t * k + i];
    }
    for (std::size_t i = 0; i < k; ++i)
      dp_full[static_cast<std::size_t>(c.sel[t * k + i])] = (dw[i] - wdot) / psum;
    for (std::size_t e = 0; e < n_units; ++e) dp_full[e] += aux_dp[e];

    const double* pr = c.probs.row(t);
    double dot = 0.0;
    for (std::size_t e = 0; e < n_units; ++e) dot += pr[e] * dp_full[e];
    for (std::size_t e = 0; e < n_units; ++e) dr[e] = pr[e] * (dp_full[e] - dot);

    const double* xr = c.resid1.row(t);
    double* dxr = dresid.row(t);
    for (std::size_t dd = 0; dd < d; ++dd) {
      double acc = 0.0;
      for (std::size_t e = 0; e < n_units; ++e) {
        g.router->at(dd, e) += xr[dd] * dr[e];
        acc += dr[e] * lv.router->at(dd, e);
      }
      dxr[dd] += acc;
    }
  }
}

void validate_tokens(const ModelConfig& cfg, std::span<const std::uint32_t> tokens) {
  if (tokens.size() < 2) throw ValidationError("sequence must contain at least 2 tokens");
  if (tokens.size() > cfg.max_seq_len)
    throw ValidationError("sequence length " + std::to_string(tokens.size()) +
                          " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  for (std::uint32_t t : tokens)
    if (t >= cfg.vocab_size)
      throw ValidationError("token id " + std::to_string(t) + " >= vocab size " +
                            std::to_string(cfg.vocab_size));
}

// Full forward pass; fills the cache and returns the mean next-token CE.
double forward_seq(const ModelView& mv, std::span<const std::uint32_t> tokens, SeqCache& cache,
                   ForwardResult* result, const ForwardOptions& opts) {
  const ModelConfig& cfg = *mv.cfg;
  validate_tokens(cfg, tokens);
  const std::size_t t_len = tokens.size(), d = cfg.d_model, f = cfg.d_ff;

  cache.x0 = Tensor(t_len, d);
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* tok = mv.tok_emb->row(tokens[t]);
    const double* pos = mv.pos_emb->row(t);
    double* x = cache.x0.row(t);
    for (std::size_t j = 0; j < d; ++j) x[j] = tok[j] + pos[j];
  }

  cache.layers.resize(mv.layers.size());
  if (result) {
    result->routing.tokens = t_len;
    if (opts.probes) result->probes.clear();
  }

  Tensor x = cache.x0;
  for (std::size_t l = 0; l < mv.layers.size(); ++l) {
    const LayerView& lv = mv.layers[l];
    LayerCache& c = cache.layers[l];
    c.x_in = std::move(x);

    layernorm_forward(c.x_in, *lv.ln1, c.ln1_u, c.ln1_rstd, c.y);
    attention_forward(cfg, lv, c);

    c.resid1 = Tensor(t_len, d);
    for (std::size_t i = 0; i < t_len * d; ++i)
      c.resid1[i] = c.x_in[i] + c.attn_out[i];

    layernorm_forward(c.resid1, *lv.ln2, c.ln2_u, c.ln2_rstd, c.z);

    Tensor m_out;
    Tensor hidden_probe;
    if (!lv.moe) {
      c.mlp_pre = Tensor(t_len, f);
      c.mlp_act = Tensor(t_len, f);
      matmul_acc(c.z.data(), lv.units[0].w_in->data(), c.mlp_pre.data(), t_len, d, f);
      for (std::size_t i = 0; i < t_len * f; ++i) c.mlp_act[i] = gelu(c.mlp_pre[i]);
      m_out = Tensor(t_len, d);
      matmul_acc(c.mlp_act.data(), lv.units[0].w_out->data(), m_out.data(), t_len, f, d);
      if (result && opts.probes) hidden_probe = c.mlp_act;
    } else {
      moe_layer_forward(cfg, lv, c, m_out, result && opts.probes ? &hidden_probe : nullptr);
      if (result) {
        LayerRouting lr;
        lr.n_routable = static_cast<int>(lv.units.size());
        lr.top_k = static_cast<int>(std::min<std::size_t>(2, lv.units.size()));
        lr.selected = c.sel;
        lr.weights = c.selw;
        lr.probs.assign(c.probs.data(), c.probs.data() + c.probs.size());
        result->routing.layers.push_back(std::move(lr));
        if (opts.collect_expert_hidden) result->expert_hidden.push_back(c.unit_act);
      }
    }

    if (result && opts.probes) {
      result->probes.push_back(c.attn_out);
      result->probes.push_back(std::move(hidden_probe));
    }

    x = Tensor(t_len, d);
    for (std::size_t i = 0; i < t_len * d; ++i) x[i] = c.resid1[i] + m_out[i];
  }

  layernorm_forward(x, *mv.ln_f, cache.lnf_u, cache.lnf_rstd, cache.yf);
  cache.logits = Tensor(t_len, cfg.vocab_size);
  matmul_acc(cache.yf.data(), mv.head->data(), cache.logits.data(), t_len, d, cfg.vocab_size);

  // Mean next-token cross entropy.
  double ce = 0.0;
  for (std::size_t t = 0; t + 1 < t_len; ++t) {
    const double* lr = cache.logits.row(t);
    double mx = lr[0];
    for (std::size_t j = 1; j < cfg.vocab_size; ++j) mx = std::max(mx, lr[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < cfg.vocab_size; ++j) sum += std::exp(lr[j] - mx);
    ce += mx + std::log(sum) - lr[tokens[t + 1]];
  }
  ce /= static_cast<double>(t_len - 1);
  cache.ce = ce;

  if (result) result->logits = cache.logits;
  return ce;
}

// Per-sequence auxiliary load-balance value (alpha excluded): mean over layers
// of N_l * sum_e f_e * pbar_e.
double aux_from_cache(const ModelView& mv, const SeqCache& cache, std::size_t t_len) {
  double total = 0.0;
  std::size_t n_layers = mv.layers.size();
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (!mv.layers[l].moe) return 0.0;
    const LayerCache& c = cache.layers[l];
    const std::size_t n_units = mv.layers[l].units.size();
    const std::size_t k = std::min<std::size_t>(2, n_units);
    std::vector<double> f_e(n_units, 0.0), pbar(n_units, 0.0);
    for (std::size_t i = 0; i < t_len * k; ++i) f_e[static_cast<std::size_t>(c.sel[i])] += 1.0;
    for (auto& v : f_e) v /= static_cast<double>(t_len * k);
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t e = 0; e < n_units; ++e) pbar[e] += c.probs.at(t, e);
    double term = 0.0;
    for (std::size_t e = 0; e < n_units; ++e)
      term += f_e[e] * pbar[e] / static_cast<double>(t_len);
    total += static_cast<double>(n_units) * term;
  }
  return total / static_cast<double>(n_layers);
}

void backward_seq(const ModelView& mv, std::span<const std::uint32_t> tokens, SeqCache& cache,
                  double loss_scale, double aux_coefficient, GradView& g) {
  const ModelConfig& cfg = *mv.cfg;
  const std::size_t t_len = tokens.size(), d = cfg.d_model, f = cfg.d_ff,
                    v = cfg.vocab_size;

  // dLogits for the mean cross entropy.
  Tensor dlogits(t_len, v);
  const double ce_scale = loss_scale / static_cast<double>(t_len - 1);
  std::vector<double> sm(v);
  for (std::size_t t = 0; t + 1 < t_len; ++t) {
    softmax_row(cache.logits.row(t), sm.data(), v);
    double* dr = dlogits.row(t);
    for (std::size_t j = 0; j < v; ++j) dr[j] = sm[j] * ce_scale;
    dr[tokens[t + 1]] -= ce_scale;
  }

  Tensor dyf(t_len, d);
  matmul_bt_acc(dlogits.data(), mv.head->data(), dyf.data(), t_len, v, d);
  matmul_at_acc(cache.yf.data(), dlogits.data(), g.head->data(), t_len, d, v);

  Tensor dx(t_len, d);
  layernorm_backward(dyf, cache.lnf_u, cache.lnf_rstd, *mv.ln_f, *g.ln_f, dx);

  for (std::size_t l = mv.layers.size(); l-- > 0;) {
    const LayerView& lv = mv.layers[l];
    LayerCache& c = cache.layers[l];
    LayerGradView& gl = g.layers[l];

    // dx holds the gradient at the layer output = resid1 + m_out; the
    // residual path seeds the resid1 gradient directly.
    Tensor dz(t_len, d);
    Tensor dresid1 = dx;
    if (!lv.moe) {
      Tensor dact(t_len, f);
      matmul_bt_acc(dx.data(), lv.units[0].w_out->data(), dact.data(), t_len, d, f);
      matmul_at_acc(c.mlp_act.data(), dx.data(), gl.units[0].w_out->data(), t_len, f, d);
      Tensor dpre(t_len, f);
      for (std::size_t i = 0; i < t_len * f; ++i) dpre[i] = dact[i] * gelu_grad(c.mlp_pre[i]);
      matmul_at_acc(c.z.data(), dpre.data(), gl.units[0].w_in->data(), t_len, d, f);
      matmul_bt_acc(dpre.data(), lv.units[0].w_in->data(), dz.data(), t_len, f, d);
    } else {
      const std::size_t n_units = lv.units.size();
      const std::size_t k = std::min<std::size_t>(2, n_units);
      std::vector<double> aux_dp(n_units, 0.0);
      if (aux_coefficient != 0.0) {
        std::vector<double> f_e(n_units, 0.0);
        for (std::size_t i = 0; i < t_len * k; ++i)
          f_e[static_cast<std::size_t>(c.sel[i])] += 1.0;
        for (auto& q : f_e) q /= static_cast<double>(t_len * k);
        const double s = loss_scale * aux_coefficient * static_cast<double>(n_units) /
                         (static_cast<double>(mv.layers.size()) * static_cast<double>(t_len));
        for (std::size_t e = 0; e < n_units; ++e) aux_dp[e] = s * f_e[e];
      }
      moe_layer_backward(cfg, lv, c, dx, aux_dp, gl, dz, dresid1);
    }

    layernorm_backward(dz, c.ln2_u, c.ln2_rstd, *lv.ln2, *gl.ln2, dresid1);

    // dresid1 splits into the attention output and the layer input.
    Tensor dy(t_len, d);
    attention_backward(cfg, lv, c, dresid1, gl, dy);

    Tensor dx_in = dresid1;
    layernorm_backward(dy, c.ln1_u, c.ln1_rstd, *lv.ln1, *gl.ln1, dx_in);
    dx = std::move(dx_in);
  }

  for (std::size_t t = 0; t < t_len; ++t) {
    const double* dxr = dx.row(t);
    double* tok = g.tok_emb->row(tokens[t]);
    double* pos = g.pos_emb->row(t);
    for (std::size_t j = 0; j < d; ++j) {
      tok[j] += dxr[j];
      pos[j] += dxr[j];
    }
  }
}

template <class ModelT>
ForwardResult forward_impl(const ModelT& model, std::span<const std::uint32_t> tokens,
                           const ForwardOptions& opts) {
  const ModelView mv = view_of(model);
  ForwardResult result;
  SeqCache cache;
  const double ce = forward_seq(mv, tokens, cache, &result, opts);
  result.ce = ce;
  result.aux = opts.aux_coefficient * aux_from_cache(mv, cache, tokens.size());
  result.loss = result.ce + result.aux;
  if (!std::isfinite(result.loss)) throw NumericalError("non-finite loss in forward pass");
  return result;
}

template <class ModelT>
BatchGradients grads_impl(const ModelT& model, const std::vector<std::vector<std::uint32_t>>& batch,
                          ModelT& grads, double aux_coefficient) {
  if (batch.empty()) throw ValidationError("empty batch");
  const ModelView mv = view_of(model);
  GradView gv = grad_view_of(grads);
  for (auto& ref : param_refs(grads)) ref.tensor->zero();

  const double loss_scale = 1.0 / static_cast<double>(batch.size());
  BatchGradients out;
  for (const auto& seq : batch) {
    SeqCache cache;
    const double ce = forward_seq(mv, seq, cache, nullptr, ForwardOptions{});
    const double aux = aux_from_cache(mv, cache, seq.size());
    out.ce += ce * loss_scale;
    out.aux += aux_coefficient * aux * loss_scale;
    backward_seq(mv, seq, cache, loss_scale, aux_coefficient, gv);
  }
  out.loss = out.ce + out.aux;
  if (!std::isfinite(out.loss)) throw NumericalError("non-finite loss in backward pass");

  // Frozen tensors keep zero gradients.
  const auto model_refs = param_refs(model);
  auto grad_refs = param_refs(grads);
  for (std::size_t i = 0; i < grad_refs.size(); ++i) {
    if (!model_refs[i].trainable) grad_refs[i].tensor->zero();
    else if (!grad_refs[i].tensor->all_finite())
      throw NumericalError("non-finite gradient for " + grad_refs[i].name);
  }
  return out;
}

}  // namespace

ForwardResult forward(const DenseModel& model, std::span<const std::uint32_t> tokens,
                      const ForwardOptions& opts) {
  return forward_impl(model, tokens, opts);
}

ForwardResult forward(const MoEModel& model, std::span<const std::uint32_t> tokens,
                      const ForwardOptions& opts) {
  return forward_impl(model, tokens, opts);
}

BatchGradients loss_and_grads(const DenseModel& model,
                              const std::vector<std::vector<std::uint32_t>>& batch,
                              DenseModel& grads, double aux_coefficient) {
  return grads_impl(model, batch, grads, aux_coefficient);
}

BatchGradients loss_and_grads(const MoEModel& model,
                              const std::vector<std::vector<std::uint32_t>>& batch,
                              MoEModel& grads, double aux_coefficient) {
  return grads_impl(model, batch, grads, aux_coefficient);
}

}  // namespace nm
