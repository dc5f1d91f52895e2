// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one pass/fail line per criterion. Run with no arguments
// for all criteria or `--only N` for a single one.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "nm/alloc.hpp"
#include "nm/analysis.hpp"
#include "nm/common.hpp"
#include "nm/corpus.hpp"
#include "nm/model.hpp"
#include "nm/profile.hpp"
#include "nm/trace.hpp"
#include "nm/train.hpp"
#include "test_util.hpp"

using namespace nm;

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::runtime_error(what);
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// ---------------------------------------------------------------------------
// Shared toy pipeline for criteria 7 and 8: two synthetic languages, dense
// pretrained on the source, upcycled and trained in two stages on the target.
// ---------------------------------------------------------------------------

struct ToyPipeline {
  ModelConfig config;
  LabeledCorpus train_src, eval_src, train_tgt, eval_tgt, eval_all;
  DenseModel dense;
  MoEModel moe;  // after stage 2
  double dense_ppl_src = 0.0, dense_ppl_tgt = 0.0;
  double stage1_ppl_tgt = 0.0, stage1_ppl_src = 0.0;
  double stage2_ppl_src = 0.0, stage2_ppl_tgt = 0.0;
  double wall_seconds = 0.0;
};

const ToyPipeline& toy_pipeline() {
  static std::unique_ptr<ToyPipeline> cached;
  if (cached) return *cached;
  const auto start = std::chrono::steady_clock::now();
  auto p = std::make_unique<ToyPipeline>();

  // Two disjoint-band Markov languages with shared anchors.
  const std::vector<LanguageSpec> specs = {
      {"src", 2, 40, 101, {0, 1}, 1},
      {"tgt", 40, 78, 202, {0, 1}, 1},
  };
  const LabeledCorpus corpus = gen_corpus(specs, 2048, 24, 7, 80);
  const auto [train, eval] = split_corpus(corpus, 0.8, 3);
  p->train_src = filter_language(train, "src");
  p->train_tgt = filter_language(train, "tgt");
  p->eval_src = filter_language(eval, "src");
  p->eval_tgt = filter_language(eval, "tgt");
  p->eval_all = eval;

  p->config.vocab_size = 80;
  p->config.d_model = 32;
  p->config.n_layers = 2;
  p->config.n_heads = 4;
  p->config.d_ff = 64;
  p->config.max_seq_len = 32;

  // Dense baseline: source language plus a sliver of target exposure, the way
  // a pretrained base model has seen trace amounts of the target script.
  LabeledCorpus pretrain = p->train_src;
  for (std::size_t i = 0; i < p->train_tgt.samples.size(); i += 12)
    pretrain.samples.push_back(p->train_tgt.samples[i]);
  p->dense = init_dense(p->config, 42);
  TrainConfig dense_cfg;
  dense_cfg.learning_rate = 5e-3;
  dense_cfg.batch_size = 16;
  dense_cfg.total_steps = 1200;
  dense_cfg.seed = 42;
  train_dense(p->dense, pretrain, dense_cfg);
  p->dense_ppl_src = eval_perplexity(p->dense, p->eval_src, "src");
  p->dense_ppl_tgt = eval_perplexity(p->dense, p->eval_tgt, "tgt");

  // Allocation from the measured neuron diversity of the dense model.
  const ActivationTrace trace = record_trace(p->dense, train);
  const APTable table = compute_ap_table(trace);
  const auto sets = select_language_specific(table, 50, 0.5);
  const LayerScores scores = layer_scores(sets, p->config.n_layers);
  const AllocationPlan plan = allocate(scores, 1, 2, Rounding::floor);

  p->moe = upcycle_to_moe(p->dense, plan, 0);

  // Stage 1: experts and routers on target data.
  TrainConfig s1;
  s1.learning_rate = 1e-2;
  s1.batch_size = 16;
  s1.total_steps = 300;
  s1.seed = 43;
  s1.target_language = "tgt";
  train_stage1(p->moe, p->train_tgt, s1);
  p->stage1_ppl_tgt = eval_perplexity(p->moe, p->eval_tgt, "tgt");
  p->stage1_ppl_src = eval_perplexity(p->moe, p->eval_src, "src");

  // Stage 2: router-only on a replay mix sized at 1% of stage-1 tokens.
  const std::size_t stage1_tokens = s1.total_steps * s1.batch_size * 24;
  const LabeledCorpus mix = make_replay_mix(p->train_src, p->train_tgt, 0.01, stage1_tokens, 9);
  set_stage_mask(p->moe, 2);
  TrainConfig s2;
  s2.learning_rate = 2e-2;
  s2.batch_size = 16;
  s2.total_steps = 2000;
  s2.seed = 44;
  s2.source_language = "src";
  s2.target_language = "tgt";
  s2.stage2_source_fraction = 0.75;
  train_stage2(p->moe, mix, s2);
  p->stage2_ppl_src = eval_perplexity(p->moe, p->eval_src, "src");
  p->stage2_ppl_tgt = eval_perplexity(p->moe, p->eval_tgt, "tgt");

  p->wall_seconds = seconds_since(start);
  cached = std::move(p);
  return *cached;
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

// 1: the reference 28-layer scores reproduce the reference allocation column
// except at layers 16 and 18, where the reference tables contradict each other.
void criterion_1() {
  const auto start = std::chrono::steady_clock::now();
  LayerScores scores{{nmtest::kGreek28Scores.begin(), nmtest::kGreek28Scores.end()}};
  const AllocationPlan plan = allocate(scores, 1, 6, Rounding::floor);

  require(plan.experts_per_layer[0] == 6, "layer 0 must receive 6 experts");
  for (std::size_t l = 3; l <= 10; ++l)
    require(plan.experts_per_layer[l] == 1, "layers 3-10 must receive 1 expert");
  require(plan.experts_per_layer[21] == 4, "layer 21 must receive 4 experts");
  require(plan.experts_per_layer[27] == 4, "layer 27 must receive 4 experts");

  int matches = 0;
  std::vector<int> mismatched;
  for (std::size_t l = 0; l < 28; ++l) {
    if (plan.experts_per_layer[l] == nmtest::kGreek28ReferenceAllocation[l]) ++matches;
    else mismatched.push_back(static_cast<int>(l));
  }
  require(matches == 26, "exactly 26 of 28 layers must match the reference column, got " +
                             std::to_string(matches));
  require(mismatched == std::vector<int>{16, 18},
          "the discrepant layers must be exactly 16 and 18");
  std::printf("         note: layers 16 and 18 disagree with the reference column "
              "(score-derived %d/%d vs reference %d/%d); the source tables are mutually "
              "inconsistent there\n",
              plan.experts_per_layer[16], plan.experts_per_layer[18],
              nmtest::kGreek28ReferenceAllocation[16], nmtest::kGreek28ReferenceAllocation[18]);
  require(seconds_since(start) < 1.0, "allocation reproduction must run in under 1 s");
}

// 2: AP equals a quadratic brute force on 1,000 seeded tied instances.
void criterion_2() {
  const std::vector<double> hand = {0.9, 0.8, 0.1, 0.7};
  const std::vector<std::uint8_t> hand_y = {1, 0, 1, 0};
  require(std::abs(compute_ap(hand, hand_y) - 0.75) < 1e-12, "hand case must give 0.75");

  Rng rng(20260809);
  std::size_t done = 0;
  while (done < 1000) {
    const std::size_t n = 2 + rng.below(63);  // N <= 64
    std::vector<double> a(n);
    std::vector<std::uint8_t> y(n);
    for (auto& v : a) v = static_cast<double>(rng.below(8)) * 0.125;  // injected ties
    bool pos = false, neg = false;
    for (auto& v : y) {
      v = rng.below(2) ? 1 : 0;
      (v ? pos : neg) = true;
    }
    if (!pos || !neg) continue;
    ++done;
    const double fast = compute_ap(a, y);
    const double slow = nmtest::ap_bruteforce(a, y);
    require(std::abs(fast - slow) < 1e-12,
            "instance " + std::to_string(done) + ": |" + std::to_string(fast) + " - " +
                std::to_string(slow) + "| >= 1e-12");
  }
}

// 3: analytic gradients vs central finite differences, every parameter.
void criterion_3() {
  const auto start = std::chrono::steady_clock::now();
  ModelConfig cfg;
  cfg.vocab_size = 32;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 24;
  cfg.max_seq_len = 12;

  DenseModel dense = init_dense(cfg, 42);
  Rng rng(7);
  std::vector<std::vector<std::uint32_t>> batch = {
      nmtest::random_tokens(rng, 6, cfg.vocab_size),
      nmtest::random_tokens(rng, 5, cfg.vocab_size),
  };
  const double dense_err = nmtest::max_grad_rel_err(dense, batch, 0.01);
  require(dense_err < 1e-4,
          "dense max relative error " + std::to_string(dense_err) + " >= 1e-4");

  AllocationPlan plan;
  plan.experts_per_layer = {2, 1};
  MoEModel moe = upcycle_to_moe(dense, plan, 0);
  for (auto& layer : moe.moe)
    for (std::size_t i = 0; i < layer.router.size(); ++i)
      layer.router[i] = rng.gaussian() * 0.2;
  set_stage_mask(moe, 1);
  const double moe_err = nmtest::max_grad_rel_err(moe, batch, 0.01);
  require(moe_err < 1e-4, "moe max relative error " + std::to_string(moe_err) + " >= 1e-4");

  const double elapsed = seconds_since(start);
  require(elapsed < 300.0, "gradient check must finish within 5 minutes");
  std::printf("         note: max relative error dense %.3g, moe %.3g (%.1fs)\n", dense_err,
              moe_err, elapsed);
}

// 4: untrained upcycled model equals its dense source on 10 random sequences.
void criterion_4() {
  ModelConfig cfg;
  cfg.vocab_size = 64;
  cfg.d_model = 32;
  cfg.n_layers = 3;
  cfg.n_heads = 4;
  cfg.d_ff = 48;
  cfg.max_seq_len = 16;
  const DenseModel dense = init_dense(cfg, 11);
  AllocationPlan plan;
  plan.experts_per_layer = {3, 1, 2};
  const MoEModel moe = upcycle_to_moe(dense, plan, 0);

  Rng rng(13);
  for (int i = 0; i < 10; ++i) {
    const auto tokens = nmtest::random_tokens(rng, 4 + rng.below(12), cfg.vocab_size);
    const ForwardResult rd = forward(dense, tokens);
    const ForwardResult rm = forward(moe, tokens);
    for (std::size_t j = 0; j < rd.logits.size(); ++j)
      require(std::abs(rd.logits[j] - rm.logits[j]) < 1e-9,
              "logit mismatch beyond 1e-9 on sequence " + std::to_string(i));
  }
}

// 5: per-tensor digests prove the stage freeze contracts bit-exactly.
void criterion_5() {
  ModelConfig cfg = nmtest::tiny_config();
  std::vector<LanguageSpec> specs = {
      {"src", 2, 16, 3, {0}, 1},
      {"tgt", 16, 30, 4, {0}, 1},
  };
  const LabeledCorpus corpus = gen_corpus(specs, 6, 10, 5, cfg.vocab_size);
  const LabeledCorpus target = filter_language(corpus, "tgt");

  AllocationPlan plan;
  plan.experts_per_layer = {2, 1};
  MoEModel moe = upcycle_to_moe(init_dense(cfg, 21), plan, 0);

  TrainConfig s1;
  s1.learning_rate = 1e-2;
  s1.batch_size = 4;
  s1.total_steps = 8;
  s1.target_language = "tgt";
  const TrainReport r1 = train_stage1(moe, target, s1);
  bool experts_changed = false, routers_changed = false;
  for (const auto& [name, d] : r1.digests) {
    const bool changed = d.first != d.second;
    const bool is_expert = name.find("experts.") != std::string::npos;
    const bool is_router = name.find("router") != std::string::npos;
    if (changed) require(is_expert || is_router, "stage 1 changed base tensor " + name);
    experts_changed |= is_expert && changed;
    routers_changed |= is_router && changed;
  }
  require(experts_changed, "stage 1 must update the experts");
  require(routers_changed, "stage 1 must update the routers");

  set_stage_mask(moe, 2);
  TrainConfig s2 = s1;
  s2.source_language = "src";
  const TrainReport r2 = train_stage2(moe, corpus, s2);
  bool routers_changed2 = false;
  for (const auto& [name, d] : r2.digests) {
    const bool changed = d.first != d.second;
    const bool is_router = name.find("router") != std::string::npos;
    if (changed) require(is_router, "stage 2 changed non-router tensor " + name);
    routers_changed2 |= is_router && changed;
  }
  require(routers_changed2, "stage 2 must update the routers");
}

// 6: routing contract on every forward; aux equals alpha per layer under
// uniform-balanced routing.
void criterion_6() {
  ModelConfig cfg = nmtest::tiny_config();
  AllocationPlan plan;
  plan.experts_per_layer = {1, 4};
  MoEModel moe = upcycle_to_moe(init_dense(cfg, 31), plan, 0);

  Rng rng(37);
  for (int round = 0; round < 8; ++round) {
    if (round > 0)
      for (auto& layer : moe.moe)
        for (std::size_t i = 0; i < layer.router.size(); ++i)
          layer.router[i] = rng.gaussian() * 0.5;
    const auto tokens = nmtest::random_tokens(rng, 4 + rng.below(8), cfg.vocab_size);
    const ForwardResult r = forward(moe, tokens);
    for (std::size_t l = 0; l < r.routing.layers.size(); ++l) {
      const auto& lr = r.routing.layers[l];
      const int expect_k = std::min(2, lr.n_routable);
      require(lr.top_k == expect_k, "top_k must be min(2, 1+E_l)");
      for (std::size_t t = 0; t < r.routing.tokens; ++t) {
        double sum = 0.0;
        for (int i = 0; i < expect_k; ++i) {
          sum += lr.weights[t * expect_k + i];
          require(lr.weights[t * expect_k + i] >= 0.0, "weights must be non-negative");
        }
        require(std::abs(sum - 1.0) < 1e-9, "weights must sum to 1 within 1e-9");
      }
    }
  }

  // Constructed uniform-balanced routing: the per-layer term equals alpha.
  // 6 tokens x 2 slots = 12 selections, divisible by each unit count.
  RoutingRecord rec;
  rec.tokens = 6;
  for (int n_units : {2, 3, 4}) {
    LayerRouting lr;
    lr.n_routable = n_units;
    lr.top_k = 2;
    for (std::size_t i = 0; i < rec.tokens * 2; ++i)
      lr.selected.push_back(static_cast<int>(i % static_cast<std::size_t>(n_units)));
    for (std::size_t t = 0; t < rec.tokens; ++t) {
      lr.weights.insert(lr.weights.end(), {0.5, 0.5});
      for (int e = 0; e < n_units; ++e) lr.probs.push_back(1.0 / n_units);
    }
    rec.layers.push_back(std::move(lr));
  }
  const std::vector<int> n_routable = {2, 3, 4};
  const double aux = aux_load_balance(rec, n_routable, 0.01);
  require(std::abs(aux - 0.01) < 1e-12,
          "uniform-balanced aux must equal alpha, got " + std::to_string(aux));
}

// 7: end-to-end synthetic-bilingual run.
void criterion_7() {
  const ToyPipeline& p = toy_pipeline();
  std::printf("         note: dense ppl src %.3f tgt %.3f | stage1 ppl tgt %.3f src %.3f | "
              "stage2 ppl src %.3f tgt %.3f | %.0fs\n",
              p.dense_ppl_src, p.dense_ppl_tgt, p.stage1_ppl_tgt, p.stage1_ppl_src,
              p.stage2_ppl_src, p.stage2_ppl_tgt, p.wall_seconds);
  require(p.stage1_ppl_tgt < p.dense_ppl_tgt,
          "stage 1 target perplexity must fall below the dense baseline");
  require(std::abs(p.stage2_ppl_src - p.dense_ppl_src) <= 0.10 * p.dense_ppl_src,
          "stage 2 source perplexity must sit within 10% of the dense baseline (" +
              std::to_string(p.stage2_ppl_src) + " vs " + std::to_string(p.dense_ppl_src) + ")");
  require(p.wall_seconds < 900.0, "toy run must finish within 15 minutes");
}

// 8: specialization emerges in the trained experts; expert AP matches a
// brute-force oracle exactly on a hand-built routing fixture.
void criterion_8() {
  const ToyPipeline& p = toy_pipeline();
  const ExpertActivationSet set = collect_expert_activations(p.moe, p.eval_all);
  const ExpertAPReport report = expert_ap(set);

  const int last_layer = static_cast<int>(p.config.n_layers) - 1;
  bool found = false;
  double best = 0.0;
  for (const auto& unit : report.units) {
    if (unit.unit == 0) continue;  // added experts only
    if (unit.layer != 0 && unit.layer != last_layer) continue;
    for (std::size_t g = 0; g < unit.languages.size(); ++g) {
      if (unit.languages[g] != "tgt") continue;
      for (double ap : unit.scores[g]) {
        best = std::max(best, ap);
        if (ap >= 0.9) found = true;
      }
    }
  }
  std::printf("         note: best target-language expert AP in boundary layers: %.4f\n", best);
  require(found, "no added expert in the first or last layer reached AP >= 0.9 for the target");

  // Hand-built routing fixture against the quadratic oracle.
  ExpertActivationSet fixture;
  fixture.unit_width = 3;
  fixture.layers.resize(1);
  fixture.layers[0].resize(1);
  UnitSampleActivations& unit = fixture.layers[0][0];
  unit.layer = 0;
  unit.unit = 0;
  const std::vector<std::vector<double>> rows = {
      {0.9, 0.2, 0.5}, {0.8, 0.2, 0.5}, {0.1, 0.9, 0.5}, {0.7, 0.4, 0.5}, {0.3, 0.8, 0.5}};
  const std::vector<std::string> langs = {"tgt", "src", "tgt", "src", "tgt"};
  unit.values = Tensor(rows.size(), 3);
  for (std::size_t s = 0; s < rows.size(); ++s) {
    unit.sample_ids.push_back(static_cast<std::int64_t>(s));
    unit.sample_languages.push_back(langs[s]);
    unit.token_counts.push_back(2);
    for (std::size_t j = 0; j < 3; ++j) unit.values.at(s, j) = rows[s][j];
  }
  const ExpertAPReport fr = expert_ap(fixture);
  for (std::size_t g = 0; g < fr.units[0].languages.size(); ++g) {
    for (std::size_t j = 0; j < 3; ++j) {
      std::vector<double> col(rows.size());
      std::vector<std::uint8_t> y(rows.size());
      for (std::size_t s = 0; s < rows.size(); ++s) {
        col[s] = rows[s][j];
        y[s] = langs[s] == fr.units[0].languages[g] ? 1 : 0;
      }
      require(fr.units[0].scores[g][j] == nmtest::ap_bruteforce(col, y),
              "fixture expert AP must equal the brute-force oracle exactly");
    }
  }
}

// 9: format round trips and the reference 24-layer plan fixture.
void criterion_9() {
  // Corpus.
  std::vector<LanguageSpec> specs = {
      {"src", 2, 16, 3, {0, 1}, 1},
      {"tgt", 16, 30, 4, {0, 1}, 2},
  };
  const LabeledCorpus corpus = gen_corpus(specs, 5, 9, 77, 32);
  const std::string corpus_path = temp_path("nm_acc_corpus.txt");
  save_corpus(corpus, corpus_path);
  require(load_corpus(corpus_path) == corpus, "corpus save/load must round trip");

  // Trace.
  ModelConfig cfg = nmtest::tiny_config();
  const DenseModel dense = init_dense(cfg, 5);
  const ActivationTrace trace = record_trace(dense, corpus);
  const std::string trace_base = temp_path("nm_acc_trace");
  write_trace(trace, trace_base);
  require(read_trace(trace_base) == trace, "trace write/read must round trip");

  // Plan.
  LayerScores scores{{nmtest::kGreek28Scores.begin(), nmtest::kGreek28Scores.end()}};
  const AllocationPlan plan = allocate(scores, 1, 6, Rounding::floor);
  const std::string plan_path = temp_path("nm_acc_plan.json");
  write_plan(plan, plan_path);
  require(read_plan(plan_path) == plan, "plan write/read must round trip");

  // Checkpoints, bit-exact tensors.
  const std::string dense_path = temp_path("nm_acc_dense.nmck");
  save_checkpoint(dense, dense_path);
  const LoadedModel ld = load_checkpoint(dense_path);
  auto dref = param_refs(dense);
  auto lref = param_refs(ld.dense);
  for (std::size_t i = 0; i < dref.size(); ++i)
    require(*dref[i].tensor == *lref[i].tensor,
            "dense checkpoint tensor " + dref[i].name + " must round trip bit-exactly");

  AllocationPlan toy_plan;
  toy_plan.experts_per_layer = {2, 1};
  MoEModel moe = upcycle_to_moe(dense, toy_plan, 0);
  set_stage_mask(moe, 2);
  const std::string moe_path = temp_path("nm_acc_moe.nmck");
  save_checkpoint(moe, moe_path);
  const LoadedModel lm = load_checkpoint(moe_path);
  require(lm.is_moe, "moe checkpoint must load as moe");
  require(lm.moe.plan == moe.plan, "moe checkpoint must preserve the plan");
  require(lm.moe.trainable == moe.trainable, "moe checkpoint must preserve the mask");
  auto mref = param_refs(moe);
  auto mlref = param_refs(lm.moe);
  for (std::size_t i = 0; i < mref.size(); ++i)
    require(*mref[i].tensor == *mlref[i].tensor,
            "moe checkpoint tensor " + mref[i].name + " must round trip bit-exactly");

  // Reference 24-layer allocation vector: the checked-in fixture file parses
  // as a valid plan totalling 36 added experts, and survives a round trip.
  const AllocationPlan qloaded = read_plan(std::string(NM_TEST_DATA_DIR) + "/plan_qwen24.json");
  require(qloaded.n_layers() == 24, "24-layer fixture must parse with 24 layers");
  require(qloaded.total_experts() == 36, "24-layer fixture must total 36 added experts");
  require(qloaded.experts_per_layer ==
              std::vector<int>(nmtest::kQwen24Allocation.begin(), nmtest::kQwen24Allocation.end()),
          "24-layer fixture vector mismatch");
  const std::string qwen_path = temp_path("nm_acc_plan_qwen.json");
  write_plan(qloaded, qwen_path);
  require(read_plan(qwen_path) == qloaded, "24-layer fixture must round trip");
}

struct Criterion {
  int id;
  const char* name;
  std::function<void()> run;
};

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) only = std::atoi(argv[i + 1]);
  }

  const std::vector<Criterion> criteria = {
      {1, "allocation reproduction", criterion_1},
      {2, "AP oracle equivalence", criterion_2},
      {3, "gradient correctness", criterion_3},
      {4, "upcycle identity", criterion_4},
      {5, "stage separation", criterion_5},
      {6, "routing contract", criterion_6},
      {7, "end-to-end synthetic bilingual", criterion_7},
      {8, "specialization emergence", criterion_8},
      {9, "format round trips", criterion_9},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (only != 0 && c.id != only) continue;
    const auto start = std::chrono::steady_clock::now();
    try {
      c.run();
      std::printf("PASS criterion %d: %s (%.1fs)\n", c.id, c.name, seconds_since(start));
    } catch (const std::exception& e) {
      std::printf("FAIL criterion %d: %s: %s\n", c.id, c.name, e.what());
      ++failures;
    }
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
