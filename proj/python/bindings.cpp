// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0
//
// Python bindings over the core pipeline operations.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "nm/alloc.hpp"
#include "nm/analysis.hpp"
#include "nm/common.hpp"
#include "nm/corpus.hpp"
#include "nm/model.hpp"
#include "nm/profile.hpp"
#include "nm/trace.hpp"
#include "nm/train.hpp"

namespace py = pybind11;
using namespace nm;

namespace {

py::array_t<double> tensor_to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

std::vector<std::uint32_t> to_tokens(const py::sequence& seq) {
  std::vector<std::uint32_t> tokens;
  tokens.reserve(static_cast<std::size_t>(py::len(seq)));
  for (const auto& item : seq) tokens.push_back(item.cast<std::uint32_t>());
  return tokens;
}

py::dict forward_dict(const ForwardResult& r) {
  py::dict d;
  d["logits"] = tensor_to_array(r.logits);
  d["loss"] = r.loss;
  d["ce"] = r.ce;
  d["aux"] = r.aux;
  py::list layers;
  for (const auto& lr : r.routing.layers) {
    py::dict layer;
    layer["n_routable"] = lr.n_routable;
    layer["top_k"] = lr.top_k;
    layer["selected"] = lr.selected;
    layer["weights"] = lr.weights;
    layer["probs"] = lr.probs;
    layers.append(layer);
  }
  d["routing"] = layers;
  return d;
}

py::dict report_dict(const TrainReport& r) {
  py::dict d;
  d["loss_curve"] = r.loss_curve;
  d["aux_curve"] = r.aux_curve;
  d["final_perplexity"] = r.final_perplexity;
  py::dict digests;
  for (const auto& [name, pair] : r.digests) {
    py::dict entry;
    entry["before"] = pair.first;
    entry["after"] = pair.second;
    entry["changed"] = pair.first != pair.second;
    digests[py::str(name)] = entry;
  }
  d["digests"] = digests;
  d["warnings"] = r.warnings;
  return d;
}

TrainConfig train_config_from_kwargs(const py::kwargs& kwargs) {
  TrainConfig cfg;
  for (const auto& item : kwargs) {
    const std::string key = item.first.cast<std::string>();
    if (key == "learning_rate") cfg.learning_rate = item.second.cast<double>();
    else if (key == "beta1") cfg.beta1 = item.second.cast<double>();
    else if (key == "beta2") cfg.beta2 = item.second.cast<double>();
    else if (key == "epsilon") cfg.epsilon = item.second.cast<double>();
    else if (key == "weight_decay") cfg.weight_decay = item.second.cast<double>();
    else if (key == "warmup_steps") cfg.warmup_steps = item.second.cast<std::size_t>();
    else if (key == "batch_size") cfg.batch_size = item.second.cast<std::size_t>();
    else if (key == "total_steps") cfg.total_steps = item.second.cast<std::size_t>();
    else if (key == "max_grad_norm") cfg.max_grad_norm = item.second.cast<double>();
    else if (key == "aux_coefficient") cfg.aux_coefficient = item.second.cast<double>();
    else if (key == "seed") cfg.seed = item.second.cast<std::uint64_t>();
    else if (key == "target_language") cfg.target_language = item.second.cast<std::string>();
    else if (key == "source_language") cfg.source_language = item.second.cast<std::string>();
    else if (key == "stage2_source_fraction")
      cfg.stage2_source_fraction = item.second.cast<double>();
    else throw ValidationError("unknown train config key '" + key + "'");
  }
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "neuron-guided mixture-of-experts toolkit";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_IOError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  py::class_<LanguageSpec>(m, "LanguageSpec")
      .def(py::init([](std::string id, std::uint32_t vocab_lo, std::uint32_t vocab_hi,
                       std::uint64_t transition_seed, std::vector<std::uint32_t> anchors,
                       int order) {
             return LanguageSpec{std::move(id), vocab_lo, vocab_hi, transition_seed,
                                 std::move(anchors), order};
           }),
           py::arg("id"), py::arg("vocab_lo"), py::arg("vocab_hi"), py::arg("transition_seed"),
           py::arg("anchors") = std::vector<std::uint32_t>{}, py::arg("order") = 1)
      .def_readwrite("id", &LanguageSpec::id)
      .def_readwrite("vocab_lo", &LanguageSpec::vocab_lo)
      .def_readwrite("vocab_hi", &LanguageSpec::vocab_hi)
      .def_readwrite("transition_seed", &LanguageSpec::transition_seed)
      .def_readwrite("anchors", &LanguageSpec::shared_anchor_ids)
      .def_readwrite("order", &LanguageSpec::order);

  py::class_<Sample>(m, "Sample")
      .def_readonly("id", &Sample::id)
      .def_readonly("language", &Sample::language)
      .def_readonly("tokens", &Sample::tokens);

  py::class_<LabeledCorpus>(m, "LabeledCorpus")
      .def_readonly("vocab_size", &LabeledCorpus::vocab_size)
      .def_readonly("samples", &LabeledCorpus::samples)
      .def("language_ids", &LabeledCorpus::language_ids)
      .def("count_language", &LabeledCorpus::count_language)
      .def("total_tokens", &LabeledCorpus::total_tokens)
      .def("__len__", [](const LabeledCorpus& c) { return c.samples.size(); })
      .def("__eq__", [](const LabeledCorpus& a, const LabeledCorpus& b) { return a == b; });

  m.def("gen_corpus", &gen_corpus, py::arg("specs"), py::arg("samples_per_language"),
        py::arg("sample_len"), py::arg("seed"), py::arg("vocab_size") = 0);
  m.def("split_corpus", &split_corpus, py::arg("corpus"), py::arg("train_fraction"),
        py::arg("seed"));
  m.def("save_corpus", &save_corpus, py::arg("corpus"), py::arg("path"));
  m.def("load_corpus", &load_corpus, py::arg("path"));
  m.def("filter_language", &filter_language, py::arg("corpus"), py::arg("language"));
  m.def("make_replay_mix",
        static_cast<LabeledCorpus (*)(const LabeledCorpus&, const LabeledCorpus&, double,
                                      std::size_t, std::uint64_t)>(&make_replay_mix),
        py::arg("source"), py::arg("target"), py::arg("source_token_fraction") = 0.01,
        py::arg("stage1_tokens"), py::arg("seed"));

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init([](std::uint32_t vocab_size, std::size_t d_model, std::size_t n_layers,
                       std::size_t n_heads, std::size_t d_ff, std::size_t max_seq_len) {
             ModelConfig c{vocab_size, d_model, n_layers, n_heads, d_ff, max_seq_len};
             c.validate();
             return c;
           }),
           py::arg("vocab_size") = 128, py::arg("d_model") = 32, py::arg("n_layers") = 4,
           py::arg("n_heads") = 4, py::arg("d_ff") = 64, py::arg("max_seq_len") = 64)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("d_ff", &ModelConfig::d_ff)
      .def_readwrite("max_seq_len", &ModelConfig::max_seq_len);

  py::class_<DenseModel>(m, "DenseModel")
      .def_readonly("config", &DenseModel::config)
      .def("parameters", [](const DenseModel& model) {
        py::dict out;
        for (const auto& ref : param_refs(model)) out[py::str(ref.name)] = tensor_to_array(*ref.tensor);
        return out;
      });

  py::class_<MoEModel>(m, "MoEModel")
      .def_property_readonly("config", [](const MoEModel& m_) { return m_.base.config; })
      .def_readonly("plan", &MoEModel::plan)
      .def_readonly("stage", &MoEModel::stage)
      .def_property_readonly("trainable", [](const MoEModel& m_) { return m_.trainable; })
      .def("parameters", [](const MoEModel& model) {
        py::dict out;
        for (const auto& ref : param_refs(model)) out[py::str(ref.name)] = tensor_to_array(*ref.tensor);
        return out;
      });

  m.def("init_dense", &init_dense, py::arg("config"), py::arg("seed"));
  m.def(
      "forward",
      [](const DenseModel& model, const py::sequence& tokens, bool probes, double aux_coefficient) {
        ForwardOptions opts;
        opts.probes = probes;
        opts.aux_coefficient = aux_coefficient;
        return forward_dict(forward(model, to_tokens(tokens), opts));
      },
      py::arg("model"), py::arg("tokens"), py::arg("probes") = false,
      py::arg("aux_coefficient") = 0.01);
  m.def(
      "forward",
      [](const MoEModel& model, const py::sequence& tokens, bool probes, double aux_coefficient) {
        ForwardOptions opts;
        opts.probes = probes;
        opts.aux_coefficient = aux_coefficient;
        return forward_dict(forward(model, to_tokens(tokens), opts));
      },
      py::arg("model"), py::arg("tokens"), py::arg("probes") = false,
      py::arg("aux_coefficient") = 0.01);

  m.def("upcycle_to_moe", &upcycle_to_moe, py::arg("dense"), py::arg("plan"), py::arg("seed") = 0);
  m.def("set_stage_mask", &set_stage_mask, py::arg("model"), py::arg("stage"));
  m.def("save_checkpoint", py::overload_cast<const DenseModel&, const std::string&>(&save_checkpoint),
        py::arg("model"), py::arg("path"));
  m.def("save_checkpoint", py::overload_cast<const MoEModel&, const std::string&>(&save_checkpoint),
        py::arg("model"), py::arg("path"));
  m.def("load_checkpoint", [](const std::string& path) -> py::object {
    LoadedModel loaded = load_checkpoint(path);
    if (loaded.is_moe) return py::cast(std::move(loaded.moe));
    return py::cast(std::move(loaded.dense));
  });

  py::class_<ActivationTrace>(m, "ActivationTrace")
      .def_readonly("model_id", &ActivationTrace::model_id)
      .def_property_readonly("shape",
                             [](const ActivationTrace& t) {
                               return py::make_tuple(t.rows(), t.cols);
                             })
      .def_property_readonly("languages",
                             [](const ActivationTrace& t) {
                               std::vector<std::string> out;
                               for (const auto& s : t.samples) out.push_back(s.language);
                               return out;
                             })
      .def("values", [](const ActivationTrace& t) {
        py::array_t<float> out({t.rows(), t.cols});
        std::copy(t.values.begin(), t.values.end(), out.mutable_data());
        return out;
      })
      .def("__eq__", [](const ActivationTrace& a, const ActivationTrace& b) { return a == b; });

  m.def("record_trace",
        py::overload_cast<const DenseModel&, const LabeledCorpus&>(&record_trace),
        py::arg("model"), py::arg("corpus"));
  m.def("record_trace", py::overload_cast<const MoEModel&, const LabeledCorpus&>(&record_trace),
        py::arg("model"), py::arg("corpus"));
  m.def("write_trace", &write_trace, py::arg("trace"), py::arg("base_path"));
  m.def("read_trace", &read_trace, py::arg("base_path"));

  m.def("compute_ap", [](const std::vector<double>& activations,
                         const std::vector<int>& labels) {
    std::vector<std::uint8_t> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) y[i] = labels[i] ? 1 : 0;
    return compute_ap(activations, y);
  });

  py::class_<NeuronId>(m, "NeuronId")
      .def_readonly("layer", &NeuronId::layer)
      .def_property_readonly("component",
                             [](const NeuronId& n) { return component_name(n.component); })
      .def_readonly("index", &NeuronId::index);

  py::class_<ScoredNeuron>(m, "ScoredNeuron")
      .def_readonly("id", &ScoredNeuron::id)
      .def_readonly("ap", &ScoredNeuron::ap);

  py::class_<LanguageNeuronSet>(m, "LanguageNeuronSet")
      .def_readonly("language", &LanguageNeuronSet::language)
      .def_readonly("k", &LanguageNeuronSet::k)
      .def_readonly("threshold", &LanguageNeuronSet::threshold)
      .def_readonly("neurons", &LanguageNeuronSet::neurons);

  py::class_<APTable>(m, "APTable")
      .def_readonly("languages", &APTable::languages)
      .def("scores",
           [](const APTable& t) {
             py::array_t<double> out({t.neurons.size(), t.languages.size()});
             std::copy(t.scores.begin(), t.scores.end(), out.mutable_data());
             return out;
           })
      .def("neuron", [](const APTable& t, std::size_t i) { return t.neurons.at(i); });

  m.def("compute_ap_table", &compute_ap_table, py::arg("trace"));
  m.def("select_language_specific", &select_language_specific, py::arg("table"), py::arg("k"),
        py::arg("threshold"));
  m.def("write_neuron_set_json", &write_neuron_set_json, py::arg("set"), py::arg("path"));
  m.def("read_neuron_set_json", &read_neuron_set_json, py::arg("path"));

  py::class_<LayerScores>(m, "LayerScores")
      .def(py::init([](std::vector<int> values) { return LayerScores{std::move(values)}; }))
      .def_readonly("values", &LayerScores::values);

  py::class_<AllocationPlan>(m, "AllocationPlan")
      .def_readonly("e_min", &AllocationPlan::e_min)
      .def_readonly("e_max", &AllocationPlan::e_max)
      .def_property_readonly("rounding",
                             [](const AllocationPlan& p) { return rounding_name(p.rounding); })
      .def_readonly("scores", &AllocationPlan::scores)
      .def_readonly("experts_per_layer", &AllocationPlan::experts_per_layer)
      .def_property_readonly("total", &AllocationPlan::total_experts);

  m.def("layer_scores", &layer_scores, py::arg("sets"), py::arg("n_layers"));
  m.def("normalize_scores", &normalize_scores, py::arg("scores"));
  m.def(
      "allocate",
      [](const LayerScores& scores, int e_min, int e_max, const std::string& rounding) {
        return allocate(scores, e_min, e_max, rounding_from_name(rounding));
      },
      py::arg("scores"), py::arg("e_min") = 1, py::arg("e_max") = 6,
      py::arg("rounding") = "floor");
  m.def("write_plan", &write_plan, py::arg("plan"), py::arg("path"));
  m.def("read_plan", &read_plan, py::arg("path"));

  m.def("cosine_lr", &cosine_lr, py::arg("step"), py::arg("total_steps"), py::arg("base_lr"));
  m.def(
      "train_dense",
      [](DenseModel& model, const LabeledCorpus& corpus, const py::kwargs& kwargs) {
        return report_dict(train_dense(model, corpus, train_config_from_kwargs(kwargs)));
      },
      py::arg("model"), py::arg("corpus"));
  m.def(
      "train_stage1",
      [](MoEModel& model, const LabeledCorpus& corpus, const py::kwargs& kwargs) {
        return report_dict(train_stage1(model, corpus, train_config_from_kwargs(kwargs)));
      },
      py::arg("model"), py::arg("corpus"));
  m.def(
      "train_stage2",
      [](MoEModel& model, const LabeledCorpus& corpus, const py::kwargs& kwargs) {
        return report_dict(train_stage2(model, corpus, train_config_from_kwargs(kwargs)));
      },
      py::arg("model"), py::arg("corpus"));
  m.def("eval_perplexity",
        py::overload_cast<const DenseModel&, const LabeledCorpus&, const std::string&>(
            &eval_perplexity),
        py::arg("model"), py::arg("corpus"), py::arg("language") = "all");
  m.def("eval_perplexity",
        py::overload_cast<const MoEModel&, const LabeledCorpus&, const std::string&>(
            &eval_perplexity),
        py::arg("model"), py::arg("corpus"), py::arg("language") = "all");

  py::class_<ExpertActivationSet>(m, "ExpertActivationSet")
      .def_readonly("unit_width", &ExpertActivationSet::unit_width);

  py::class_<ExpertAPReport>(m, "ExpertAPReport")
      .def_readonly("languages", &ExpertAPReport::all_languages)
      .def_readonly("unit_width", &ExpertAPReport::unit_width)
      .def("units", [](const ExpertAPReport& r) {
        py::list out;
        for (const auto& unit : r.units) {
          py::dict d;
          d["layer"] = unit.layer;
          d["unit"] = unit.unit;
          d["population"] = unit.population;
          py::dict ap;
          for (std::size_t g = 0; g < unit.languages.size(); ++g)
            ap[py::str(unit.languages[g])] = unit.scores[g];
          d["ap"] = ap;
          out.append(d);
        }
        return out;
      });

  m.def("collect_expert_activations", &collect_expert_activations, py::arg("model"),
        py::arg("corpus"));
  m.def("expert_ap", &expert_ap, py::arg("activations"));
  m.def(
      "high_ap_counts",
      [](const ExpertAPReport& report, double threshold) {
        py::list out;
        for (const auto& cell : high_ap_counts(report, threshold).cells) {
          py::dict d;
          d["layer"] = cell.layer;
          d["unit"] = cell.unit;
          d["language"] = cell.language;
          d["count"] = cell.count;
          d["ratio"] = cell.ratio;
          out.append(d);
        }
        return out;
      },
      py::arg("report"), py::arg("threshold") = 0.9);
  m.def("export_heatmap", &export_heatmap, py::arg("report"), py::arg("path"),
        py::arg("threshold") = 0.9);
}
