// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0
//
// Pipeline CLI: gen-corpus | train-dense | trace | profile | allocate |
// upcycle | train | analyze | report. Every subcommand writes its artifact
// plus a `<out>.run.json` manifest. Exit codes: 0 ok, 1 validation error,
// 2 I/O error, 3 numerical failure.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nm/alloc.hpp"
#include "nm/analysis.hpp"
#include "nm/common.hpp"
#include "nm/corpus.hpp"
#include "nm/model.hpp"
#include "nm/profile.hpp"
#include "nm/trace.hpp"
#include "nm/train.hpp"

using nlohmann::json;
using namespace nm;

namespace {

constexpr const char* kToolVersion = "0.1.0";

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw FormatError("parse error: " + path + ": " + e.what());
  }
  return j;
}

struct ManifestWriter {
  std::string subcommand;
  json config = json::object();
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::uint64_t seed = 0;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(const std::string& next_to) const {
    json m;
    m["subcommand"] = subcommand;
    m["config_digest"] = sha256_hex(config.dump());
    m["inputs"] = inputs;
    m["outputs"] = outputs;
    m["seed"] = seed;
    m["tool_version"] = kToolVersion;
    m["wall_time_ms"] =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
            .count();
    std::ofstream out(next_to + ".run.json");
    if (!out) throw IoError("cannot write run manifest next to '" + next_to + "'");
    out << m.dump(2) << "\n";
  }
};

ModelConfig model_config_from(const json& j) {
  ModelConfig c;
  if (j.contains("vocab_size")) c.vocab_size = j.at("vocab_size").get<std::uint32_t>();
  if (j.contains("d_model")) c.d_model = j.at("d_model").get<std::size_t>();
  if (j.contains("n_layers")) c.n_layers = j.at("n_layers").get<std::size_t>();
  if (j.contains("n_heads")) c.n_heads = j.at("n_heads").get<std::size_t>();
  if (j.contains("d_ff")) c.d_ff = j.at("d_ff").get<std::size_t>();
  if (j.contains("max_seq_len")) c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.validate();
  return c;
}

TrainConfig train_config_from(const json& j) {
  TrainConfig c;
  if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("beta1")) c.beta1 = j.at("beta1").get<double>();
  if (j.contains("beta2")) c.beta2 = j.at("beta2").get<double>();
  if (j.contains("epsilon")) c.epsilon = j.at("epsilon").get<double>();
  if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("warmup_steps")) c.warmup_steps = j.at("warmup_steps").get<std::size_t>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<std::size_t>();
  if (j.contains("total_steps")) c.total_steps = j.at("total_steps").get<std::size_t>();
  if (j.contains("max_grad_norm")) c.max_grad_norm = j.at("max_grad_norm").get<double>();
  if (j.contains("aux_coefficient")) c.aux_coefficient = j.at("aux_coefficient").get<double>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("target_language")) c.target_language = j.at("target_language").get<std::string>();
  if (j.contains("source_language")) c.source_language = j.at("source_language").get<std::string>();
  if (j.contains("stage2_source_fraction"))
    c.stage2_source_fraction = j.at("stage2_source_fraction").get<double>();
  return c;
}

void write_train_report(const TrainReport& report, const std::string& path) {
  json j;
  j["loss_curve"] = report.loss_curve;
  j["aux_curve"] = report.aux_curve;
  j["final_perplexity"] = report.final_perplexity;
  j["warnings"] = report.warnings;
  json digests = json::object();
  for (const auto& [name, d] : report.digests)
    digests[name] = {{"before", d.first}, {"after", d.second}, {"changed", d.first != d.second}};
  j["digests"] = digests;
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
}

// ---- subcommands ----------------------------------------------------------

int cmd_gen_corpus(const std::string& config_path, const std::string& out,
                   std::optional<std::uint64_t> seed_flag) {
  const json cfg = load_json(config_path);
  std::vector<LanguageSpec> specs;
  for (const auto& l : cfg.at("languages")) {
    LanguageSpec spec;
    spec.id = l.at("id").get<std::string>();
    spec.vocab_lo = l.at("vocab_lo").get<std::uint32_t>();
    spec.vocab_hi = l.at("vocab_hi").get<std::uint32_t>();
    spec.transition_seed = l.at("transition_seed").get<std::uint64_t>();
    if (l.contains("anchors")) spec.shared_anchor_ids = l.at("anchors").get<std::vector<std::uint32_t>>();
    if (l.contains("order")) spec.order = l.at("order").get<int>();
    specs.push_back(std::move(spec));
  }
  const std::size_t per_lang = cfg.at("samples_per_language").get<std::size_t>();
  const std::size_t sample_len = cfg.at("sample_len").get<std::size_t>();
  const std::uint64_t seed = seed_flag.value_or(cfg.value("seed", 7ull));
  const std::uint32_t vocab = cfg.value("vocab_size", 0u);

  ManifestWriter manifest{.subcommand = "gen-corpus", .config = cfg, .inputs = {config_path},
                          .outputs = {out}, .seed = seed};
  const LabeledCorpus corpus = gen_corpus(specs, per_lang, sample_len, seed, vocab);
  save_corpus(corpus, out);
  manifest.write(out);
  std::cerr << "wrote " << corpus.samples.size() << " samples to " << out << "\n";
  return 0;
}

int cmd_train_dense(const std::string& config_path, const std::string& corpus_path,
                    const std::string& out, const std::string& report_path,
                    const std::string& language, std::optional<std::uint64_t> seed_flag) {
  const json cfg = load_json(config_path);
  const ModelConfig mc = model_config_from(cfg.value("model", json::object()));
  TrainConfig tc = train_config_from(cfg.value("train", json::object()));
  if (seed_flag) tc.seed = *seed_flag;

  LabeledCorpus corpus = load_corpus(corpus_path);
  if (!language.empty()) corpus = filter_language(corpus, language);

  ManifestWriter manifest{.subcommand = "train-dense", .config = cfg,
                          .inputs = {config_path, corpus_path}, .outputs = {out}, .seed = tc.seed};
  DenseModel model = init_dense(mc, tc.seed);
  const TrainReport report = train_dense(model, corpus, tc);
  save_checkpoint(model, out);
  if (!report_path.empty()) {
    write_train_report(report, report_path);
    manifest.outputs.push_back(report_path);
  }
  manifest.write(out);
  for (const auto& [lang, ppl] : report.final_perplexity)
    std::cerr << "perplexity[" << lang << "] = " << ppl << "\n";
  return 0;
}

int cmd_trace(const std::string& model_path, const std::string& corpus_path,
              const std::string& out) {
  const LoadedModel loaded = load_checkpoint(model_path);
  const LabeledCorpus corpus = load_corpus(corpus_path);
  ManifestWriter manifest{.subcommand = "trace", .config = {{"model", model_path}},
                          .inputs = {model_path, corpus_path},
                          .outputs = {out + ".manifest.json", out + ".act"}};
  const ActivationTrace trace = loaded.is_moe ? record_trace(loaded.moe, corpus)
                                              : record_trace(loaded.dense, corpus);
  write_trace(trace, out);
  manifest.write(out);
  std::cerr << "traced " << trace.rows() << " samples x " << trace.cols << " neurons\n";
  return 0;
}

int cmd_profile(const std::string& trace_path, const std::string& out_dir, std::size_t k,
                double threshold) {
  const ActivationTrace trace = read_trace(trace_path);
  ManifestWriter manifest{.subcommand = "profile",
                          .config = {{"k", k}, {"threshold", threshold}},
                          .inputs = {trace_path}};
  const APTable table = compute_ap_table(trace);
  const auto sets = select_language_specific(table, k, threshold);

  std::filesystem::create_directories(out_dir);
  const std::string table_path = out_dir + "/ap_table.csv";
  write_ap_table_csv(table, table_path);
  manifest.outputs.push_back(table_path);
  for (const auto& set : sets) {
    const std::string path = out_dir + "/neurons_" + set.language + ".json";
    write_neuron_set_json(set, path);
    manifest.outputs.push_back(path);
    std::cerr << "language " << set.language << ": " << set.neurons.size()
              << " specific neurons\n";
  }
  manifest.write(out_dir + "/profile");
  return 0;
}

int cmd_allocate(const std::string& scores_path, const std::vector<std::string>& set_paths,
                 std::size_t n_layers, int e_min, int e_max, const std::string& rounding,
                 const std::string& out) {
  LayerScores scores;
  json config = {{"e_min", e_min}, {"e_max", e_max}, {"rounding", rounding}};
  std::vector<std::string> inputs;
  if (!scores_path.empty()) {
    const json j = load_json(scores_path);
    scores.values = j.is_array() ? j.get<std::vector<int>>()
                                 : j.at("scores").get<std::vector<int>>();
    inputs.push_back(scores_path);
  } else if (!set_paths.empty()) {
    std::vector<LanguageNeuronSet> sets;
    for (const auto& p : set_paths) {
      sets.push_back(read_neuron_set_json(p));
      inputs.push_back(p);
    }
    if (n_layers == 0)
      throw ValidationError("--n-layers is required when allocating from neuron sets");
    scores = layer_scores(sets, n_layers);
  } else {
    throw ValidationError("allocate needs --scores or --sets");
  }

  ManifestWriter manifest{.subcommand = "allocate", .config = config, .inputs = inputs,
                          .outputs = {out}};
  const AllocationPlan plan = allocate(scores, e_min, e_max, rounding_from_name(rounding));
  write_plan(plan, out);
  manifest.write(out);
  std::cerr << "plan: " << plan.total_experts() << " experts over " << plan.n_layers()
            << " layers\n";
  return 0;
}

int cmd_upcycle(const std::string& model_path, const std::string& plan_path,
                const std::string& out, std::uint64_t seed) {
  const LoadedModel loaded = load_checkpoint(model_path);
  if (loaded.is_moe) throw ValidationError("upcycle expects a dense checkpoint");
  const AllocationPlan plan = read_plan(plan_path);
  ManifestWriter manifest{.subcommand = "upcycle", .config = {{"plan", plan_path}},
                          .inputs = {model_path, plan_path}, .outputs = {out}, .seed = seed};
  const MoEModel moe = upcycle_to_moe(loaded.dense, plan, seed);
  save_checkpoint(moe, out);
  manifest.write(out);
  std::cerr << "upcycled with " << plan.total_experts() << " added experts\n";
  return 0;
}

int cmd_train(int stage, const std::string& config_path, const std::string& model_path,
              const std::string& corpus_path, const std::string& out,
              const std::string& report_path, std::optional<std::uint64_t> seed_flag) {
  const json cfg = config_path.empty() ? json::object() : load_json(config_path);
  TrainConfig tc = train_config_from(cfg.value("train", cfg));
  if (seed_flag) tc.seed = *seed_flag;

  LoadedModel loaded = load_checkpoint(model_path);
  if (!loaded.is_moe) throw ValidationError("train expects an upcycled (moe) checkpoint");
  const LabeledCorpus corpus = load_corpus(corpus_path);

  ManifestWriter manifest{.subcommand = "train", .config = cfg,
                          .inputs = {model_path, corpus_path}, .outputs = {out},
                          .seed = tc.seed};
  set_stage_mask(loaded.moe, stage);
  const TrainReport report = stage == 1 ? train_stage1(loaded.moe, corpus, tc)
                                        : train_stage2(loaded.moe, corpus, tc);
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  save_checkpoint(loaded.moe, out);
  if (!report_path.empty()) {
    write_train_report(report, report_path);
    manifest.outputs.push_back(report_path);
  }
  manifest.write(out);
  for (const auto& [lang, ppl] : report.final_perplexity)
    std::cerr << "perplexity[" << lang << "] = " << ppl << "\n";
  return 0;
}

int cmd_analyze(const std::string& model_path, const std::string& corpus_path,
                const std::string& out_dir, double threshold) {
  const LoadedModel loaded = load_checkpoint(model_path);
  if (!loaded.is_moe) throw ValidationError("analyze expects an upcycled (moe) checkpoint");
  const LabeledCorpus corpus = load_corpus(corpus_path);

  ManifestWriter manifest{.subcommand = "analyze", .config = {{"threshold", threshold}},
                          .inputs = {model_path, corpus_path}};
  const ExpertActivationSet set = collect_expert_activations(loaded.moe, corpus);
  const ExpertAPReport report = expert_ap(set);
  const HighApCounts counts = high_ap_counts(report, threshold);

  std::filesystem::create_directories(out_dir);
  const std::string ap_path = out_dir + "/expert_ap.json";
  const std::string heatmap_path = out_dir + "/heatmap.csv";
  const std::string table_path = out_dir + "/high_ap_table.txt";
  write_expert_ap_json(report, ap_path);
  export_heatmap(report, heatmap_path, threshold);
  {
    std::ofstream out(table_path);
    if (!out) throw IoError("cannot open '" + table_path + "' for writing");
    out << render_high_ap_table(counts);
  }
  manifest.outputs = {ap_path, heatmap_path, table_path};
  manifest.write(out_dir + "/analyze");
  std::cerr << render_high_ap_table(counts);
  return 0;
}

int cmd_report(const std::string& plan_path, const std::string& compare_path,
               const std::string& heatmap_path, const std::string& out) {
  std::ostringstream os;
  ManifestWriter manifest{.subcommand = "report", .config = json::object()};

  if (!plan_path.empty()) {
    const AllocationPlan plan = read_plan(plan_path);
    manifest.inputs.push_back(plan_path);
    std::optional<AllocationPlan> other;
    if (!compare_path.empty()) {
      other = read_plan(compare_path);
      manifest.inputs.push_back(compare_path);
      if (other->n_layers() != plan.n_layers())
        throw ValidationError("plans cover different layer counts");
    }
    os << "layer  score  experts" << (other ? "  compare" : "") << "\n";
    for (std::size_t l = 0; l < plan.n_layers(); ++l) {
      char line[96];
      if (plan.scores.empty())
        std::snprintf(line, sizeof line, "%-6zu %-6s %-7d", l, "-", plan.experts_per_layer[l]);
      else
        std::snprintf(line, sizeof line, "%-6zu %-6d %-7d", l, plan.scores[l],
                      plan.experts_per_layer[l]);
      os << line;
      if (other) {
        std::snprintf(line, sizeof line, "  %-7d", other->experts_per_layer[l]);
        os << line;
      }
      os << "\n";
    }
    os << "total experts: " << plan.total_experts();
    if (other) os << " vs " << other->total_experts();
    os << "\n";
  }

  if (!heatmap_path.empty()) {
    manifest.inputs.push_back(heatmap_path);
    std::ifstream in(heatmap_path);
    if (!in) throw IoError("cannot open '" + heatmap_path + "' for reading");
    os << "\nhigh-AP ratio heatmap (" << heatmap_path << "):\n";
    for (std::string line; std::getline(in, line);) {
      for (auto& ch : line)
        if (ch == ',') ch = '\t';
      os << "  " << line << "\n";
    }
  }

  if (plan_path.empty() && heatmap_path.empty())
    throw ValidationError("report needs --plan and/or --heatmap");

  if (out.empty()) {
    std::cout << os.str();
  } else {
    std::ofstream f(out);
    if (!f) throw IoError("cannot open '" + out + "' for writing");
    f << os.str();
    manifest.outputs.push_back(out);
    manifest.write(out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"neuron-guided mixture-of-experts toolkit"};
  app.require_subcommand(1);
  app.fallthrough();  // accept global flags after the subcommand name

  std::optional<std::uint64_t> seed_flag;
  app.add_option("--seed", seed_flag, "override the config seed")->expected(1);

  // gen-corpus
  std::string gc_config, gc_out;
  auto* gen = app.add_subcommand("gen-corpus", "generate a labeled synthetic corpus");
  gen->add_option("--config", gc_config, "corpus config JSON")->required();
  gen->add_option("--out", gc_out, "output corpus file")->required();

  // train-dense
  std::string td_config, td_corpus, td_out, td_report, td_language;
  auto* dense = app.add_subcommand("train-dense", "pretrain the dense baseline");
  dense->add_option("--config", td_config, "model+train config JSON")->required();
  dense->add_option("--corpus", td_corpus, "training corpus")->required();
  dense->add_option("--out", td_out, "output checkpoint")->required();
  dense->add_option("--report", td_report, "training report JSON");
  dense->add_option("--language", td_language, "restrict training to one language");

  // trace
  std::string tr_model, tr_corpus, tr_out;
  auto* trace = app.add_subcommand("trace", "record per-neuron activations");
  trace->add_option("--model", tr_model, "model checkpoint")->required();
  trace->add_option("--corpus", tr_corpus, "probe corpus")->required();
  trace->add_option("--out", tr_out, "trace base path (writes .manifest.json and .act)")
      ->required();

  // profile
  std::string pf_trace, pf_out;
  std::size_t pf_k = 50;
  double pf_threshold = 0.5;
  auto* profile = app.add_subcommand("profile", "AP table and language-specific neurons");
  profile->add_option("--trace", pf_trace, "trace base path")->required();
  profile->add_option("--out", pf_out, "output directory")->required();
  profile->add_option("--k", pf_k, "top-k neurons per language");
  profile->add_option("--threshold", pf_threshold, "AP threshold");

  // allocate
  std::string al_scores, al_rounding = "floor", al_out;
  std::vector<std::string> al_sets;
  std::size_t al_layers = 0;
  int al_min = 1, al_max = 6;
  auto* alloc = app.add_subcommand("allocate", "turn scores into per-layer expert counts");
  alloc->add_option("--scores", al_scores, "raw score vector JSON");
  alloc->add_option("--sets", al_sets, "language neuron set JSON files");
  alloc->add_option("--n-layers", al_layers, "layer count (with --sets)");
  alloc->add_option("--e-min", al_min, "minimum experts per layer");
  alloc->add_option("--e-max", al_max, "maximum experts per layer");
  alloc->add_option("--rounding", al_rounding, "floor | nearest");
  alloc->add_option("--out", al_out, "output plan JSON")->required();

  // upcycle
  std::string up_model, up_plan, up_out;
  auto* upcycle = app.add_subcommand("upcycle", "convert a dense checkpoint into a MoE");
  upcycle->add_option("--model", up_model, "dense checkpoint")->required();
  upcycle->add_option("--plan", up_plan, "allocation plan JSON")->required();
  upcycle->add_option("--out", up_out, "output checkpoint")->required();

  // train
  int tn_stage = 1;
  std::string tn_config, tn_model, tn_corpus, tn_out, tn_report;
  auto* train = app.add_subcommand("train", "stage 1 or stage 2 training");
  train->add_option("--stage", tn_stage, "1 or 2")->required();
  train->add_option("--config", tn_config, "train config JSON");
  train->add_option("--model", tn_model, "moe checkpoint")->required();
  train->add_option("--corpus", tn_corpus, "training corpus (stage 2: replay mix)")->required();
  train->add_option("--out", tn_out, "output checkpoint")->required();
  train->add_option("--report", tn_report, "training report JSON");

  // analyze
  std::string an_model, an_corpus, an_out;
  double an_threshold = 0.9;
  auto* analyze = app.add_subcommand("analyze", "per-expert language specialization");
  analyze->add_option("--model", an_model, "moe checkpoint")->required();
  analyze->add_option("--corpus", an_corpus, "evaluation corpus")->required();
  analyze->add_option("--out", an_out, "output directory")->required();
  analyze->add_option("--threshold", an_threshold, "high-AP threshold");

  // report
  std::string rp_plan, rp_compare, rp_heatmap, rp_out;
  auto* report = app.add_subcommand("report", "render allocation and heatmap tables");
  report->add_option("--plan", rp_plan, "plan JSON");
  report->add_option("--compare", rp_compare, "second plan JSON for comparison");
  report->add_option("--heatmap", rp_heatmap, "heatmap CSV from analyze");
  report->add_option("--out", rp_out, "write the rendered report here (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the error and usage hint to stderr
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_corpus(gc_config, gc_out, seed_flag);
    if (dense->parsed())
      return cmd_train_dense(td_config, td_corpus, td_out, td_report, td_language, seed_flag);
    if (trace->parsed()) return cmd_trace(tr_model, tr_corpus, tr_out);
    if (profile->parsed()) return cmd_profile(pf_trace, pf_out, pf_k, pf_threshold);
    if (alloc->parsed())
      return cmd_allocate(al_scores, al_sets, al_layers, al_min, al_max, al_rounding, al_out);
    if (upcycle->parsed()) return cmd_upcycle(up_model, up_plan, up_out, seed_flag.value_or(0));
    if (train->parsed())
      return cmd_train(tn_stage, tn_config, tn_model, tn_corpus, tn_out, tn_report, seed_flag);
    if (analyze->parsed()) return cmd_analyze(an_model, an_corpus, an_out, an_threshold);
    if (report->parsed()) return cmd_report(rp_plan, rp_compare, rp_heatmap, rp_out);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
