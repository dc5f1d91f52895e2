// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0

#include "nm/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "nm/common.hpp"

namespace nm {

const LanguageSpec* LabeledCorpus::find_language(const std::string& id) const {
  for (const auto& l : languages)
    if (l.id == id) return &l;
  return nullptr;
}

std::vector<std::string> LabeledCorpus::language_ids() const {
  std::vector<std::string> ids;
  ids.reserve(languages.size());
  for (const auto& l : languages) ids.push_back(l.id);
  return ids;
}

std::size_t LabeledCorpus::count_language(const std::string& id) const {
  std::size_t n = 0;
  for (const auto& s : samples)
    if (s.language == id) ++n;
  return n;
}

std::size_t LabeledCorpus::total_tokens() const {
  std::size_t n = 0;
  for (const auto& s : samples) n += s.tokens.size();
  return n;
}

namespace {

void validate_specs(const std::vector<LanguageSpec>& specs, std::uint32_t vocab_size) {
  if (specs.empty()) throw ValidationError("gen_corpus: no language specs");
  std::set<std::string> seen_ids;
  for (const auto& s : specs) {
    if (s.id.empty()) throw ValidationError("language spec with empty id");
    if (!seen_ids.insert(s.id).second)
      throw ValidationError("duplicate language id '" + s.id + "'");
    if (s.vocab_lo >= s.vocab_hi)
      throw ValidationError("language '" + s.id + "': empty vocab range");
    if (s.vocab_hi > vocab_size)
      throw ValidationError("language '" + s.id + "': vocab range [" +
                            std::to_string(s.vocab_lo) + "," + std::to_string(s.vocab_hi) +
                            ") exceeds vocab size " + std::to_string(vocab_size));
    if (s.order != 1 && s.order != 2)
      throw ValidationError("language '" + s.id + "': Markov order must be 1 or 2");
    for (std::uint32_t a : s.shared_anchor_ids)
      if (a >= vocab_size)
        throw ValidationError("language '" + s.id + "': anchor id " + std::to_string(a) +
                              " exceeds vocab size");
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    for (std::size_t j = i + 1; j < specs.size(); ++j) {
      const auto& a = specs[i];
      const auto& b = specs[j];
      const bool overlap = a.vocab_lo < b.vocab_hi && b.vocab_lo < a.vocab_hi;
      if (overlap && a.transition_seed == b.transition_seed)
        throw ValidationError("languages '" + a.id + "' and '" + b.id +
                              "' overlap in vocab range but share a transition seed");
      // Anchors are shared tokens: every language must emit the same set.
      std::set<std::uint32_t> sa(a.shared_anchor_ids.begin(), a.shared_anchor_ids.end());
      std::set<std::uint32_t> sb(b.shared_anchor_ids.begin(), b.shared_anchor_ids.end());
      if (sa != sb)
        throw ValidationError("languages '" + a.id + "' and '" + b.id +
                              "' declare different shared anchor sets");
    }
  }
}

// Sentinel "previous token" values for the first positions of a sample.
constexpr std::uint32_t kStart1 = 0xfffffffeu;
constexpr std::uint32_t kStart2 = 0xffffffffu;

// The emission distribution of one Markov context: a handful of in-band
// successors plus (when anchors exist) one anchor, with fixed integer weights.
struct ContextDist {
  std::uint32_t tokens[5];
  std::uint32_t weights[5];
  std::uint32_t n = 0;
  std::uint32_t weight_total = 0;
};

ContextDist context_dist(const LanguageSpec& spec, std::uint32_t prev1, std::uint32_t prev2) {
  std::uint64_t h = splitmix64(spec.transition_seed ^ 0x6e6d636f72707573ull);
  h = splitmix64(h ^ prev1);
  if (spec.order == 2) h = splitmix64(h ^ prev2);

  const std::uint32_t band = spec.vocab_hi - spec.vocab_lo;
  static constexpr std::uint32_t kBranchWeights[4] = {9, 5, 3, 2};
  ContextDist d;
  for (std::uint32_t j = 0; j < 4; ++j) {
    d.tokens[d.n] = spec.vocab_lo + static_cast<std::uint32_t>(splitmix64(h + 1 + j) % band);
    d.weights[d.n] = kBranchWeights[j];
    d.weight_total += kBranchWeights[j];
    ++d.n;
  }
  if (!spec.shared_anchor_ids.empty()) {
    const std::size_t pick = splitmix64(h ^ 0xa5c3a5c3a5c3a5c3ull) % spec.shared_anchor_ids.size();
    d.tokens[d.n] = spec.shared_anchor_ids[pick];
    d.weights[d.n] = 3;
    d.weight_total += 3;
    ++d.n;
  }
  return d;
}

std::uint32_t draw_token(const ContextDist& d, Rng& rng) {
  std::uint64_t u = rng.below(d.weight_total);
  for (std::uint32_t i = 0; i < d.n; ++i) {
    if (u < d.weights[i]) return d.tokens[i];
    u -= d.weights[i];
  }
  return d.tokens[d.n - 1];
}

}  // namespace

LabeledCorpus gen_corpus(const std::vector<LanguageSpec>& specs,
                         std::size_t samples_per_language, std::size_t sample_len,
                         std::uint64_t seed, std::uint32_t vocab_size) {
  if (samples_per_language < 1) throw ValidationError("samples_per_language must be >= 1");
  if (sample_len < 2) throw ValidationError("sample_len must be >= 2");

  std::uint32_t derived = 0;
  for (const auto& s : specs) {
    derived = std::max(derived, s.vocab_hi);
    for (std::uint32_t a : s.shared_anchor_ids) derived = std::max(derived, a + 1);
  }
  if (vocab_size == 0) vocab_size = derived;
  if (vocab_size < derived)
    throw ValidationError("vocab_size " + std::to_string(vocab_size) +
                          " smaller than required " + std::to_string(derived));
  validate_specs(specs, vocab_size);

  LabeledCorpus corpus;
  corpus.vocab_size = vocab_size;
  corpus.languages = specs;

  std::int64_t next_id = 0;
  for (std::size_t li = 0; li < specs.size(); ++li) {
    const auto& spec = specs[li];
    for (std::size_t si = 0; si < samples_per_language; ++si) {
      Rng rng(splitmix64(seed ^ splitmix64(spec.transition_seed + 0x517cc1b7ull)) + si);
      Sample sample;
      sample.id = next_id++;
      sample.language = spec.id;
      sample.tokens.reserve(sample_len);
      std::uint32_t prev1 = kStart1, prev2 = kStart2;
      for (std::size_t t = 0; t < sample_len; ++t) {
        const std::uint32_t tok = draw_token(context_dist(spec, prev1, prev2), rng);
        sample.tokens.push_back(tok);
        prev2 = prev1;
        prev1 = tok;
      }
      corpus.samples.push_back(std::move(sample));
    }
  }
  return corpus;
}

std::pair<LabeledCorpus, LabeledCorpus> split_corpus(const LabeledCorpus& corpus,
                                                     double train_fraction,
                                                     std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ValidationError("train_fraction must lie in (0, 1)");

  std::map<std::string, std::vector<std::size_t>> by_language;
  for (std::size_t i = 0; i < corpus.samples.size(); ++i)
    by_language[corpus.samples[i].language].push_back(i);

  std::vector<bool> in_train(corpus.samples.size(), false);
  Rng rng(seed);
  // Iterate languages in corpus order for determinism.
  for (const auto& id : corpus.language_ids()) {
    auto it = by_language.find(id);
    if (it == by_language.end()) continue;
    auto& idx = it->second;
    const std::size_t n = idx.size();
    if (n < 2)
      throw ValidationError("language '" + id + "' has fewer than 2 samples; cannot stratify");
    std::size_t n_train = static_cast<std::size_t>(
        std::llround(train_fraction * static_cast<double>(n)));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
    rng.shuffle(idx);
    for (std::size_t i = 0; i < n_train; ++i) in_train[idx[i]] = true;
  }
  // Languages present in samples but absent from the spec list still split.
  for (const auto& [id, idx] : by_language) {
    if (corpus.find_language(id) != nullptr) continue;
    throw ValidationError("sample language '" + id + "' missing from corpus language list");
  }

  LabeledCorpus train, eval;
  train.vocab_size = eval.vocab_size = corpus.vocab_size;
  train.languages = eval.languages = corpus.languages;
  for (std::size_t i = 0; i < corpus.samples.size(); ++i)
    (in_train[i] ? train : eval).samples.push_back(corpus.samples[i]);
  return {std::move(train), std::move(eval)};
}

namespace {

[[noreturn]] void parse_fail(const std::string& path, std::size_t line, const std::string& what) {
  throw FormatError("parse error: " + path + ":" + std::to_string(line) + ": " + what);
}

std::uint64_t parse_u64(const std::string& path, std::size_t line, std::string_view text,
                        const char* what) {
  std::uint64_t value = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size())
    parse_fail(path, line, std::string("invalid ") + what + " '" + std::string(text) + "'");
  return value;
}

}  // namespace

void save_corpus(const LabeledCorpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "#nmcorpus v1 vocab=" << corpus.vocab_size << "\n";
  for (const auto& l : corpus.languages) {
    out << "#lang " << l.id << " range=[" << l.vocab_lo << "," << l.vocab_hi << ") seed="
        << l.transition_seed << " order=" << l.order << " anchors=";
    for (std::size_t i = 0; i < l.shared_anchor_ids.size(); ++i) {
      if (i) out << ",";
      out << l.shared_anchor_ids[i];
    }
    out << "\n";
  }
  for (const auto& s : corpus.samples) {
    out << s.id << "\t" << s.language << "\t";
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      if (i) out << " ";
      out << s.tokens[i];
    }
    out << "\n";
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

LabeledCorpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");

  LabeledCorpus corpus;
  std::string line;
  std::size_t line_no = 0;

  if (!std::getline(in, line)) throw FormatError("parse error: " + path + ": empty file");
  ++line_no;
  if (line.rfind("#nmcorpus v1 vocab=", 0) != 0)
    parse_fail(path, line_no, "missing '#nmcorpus v1 vocab=<V>' header");
  corpus.vocab_size = static_cast<std::uint32_t>(
      parse_u64(path, line_no, std::string_view(line).substr(19), "vocab size"));

  bool derived_languages = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("#lang ", 0) == 0) {
        LanguageSpec spec;
        std::istringstream ls(line.substr(6));
        std::string field;
        if (!(ls >> spec.id)) parse_fail(path, line_no, "missing language id");
        while (ls >> field) {
          if (field.rfind("range=[", 0) == 0) {
            const auto comma = field.find(',');
            const auto close = field.find(')');
            if (comma == std::string::npos || close == std::string::npos)
              parse_fail(path, line_no, "bad range field '" + field + "'");
            spec.vocab_lo = static_cast<std::uint32_t>(
                parse_u64(path, line_no, std::string_view(field).substr(7, comma - 7), "range lo"));
            spec.vocab_hi = static_cast<std::uint32_t>(parse_u64(
                path, line_no, std::string_view(field).substr(comma + 1, close - comma - 1),
                "range hi"));
          } else if (field.rfind("seed=", 0) == 0) {
            spec.transition_seed = parse_u64(path, line_no, std::string_view(field).substr(5), "seed");
          } else if (field.rfind("order=", 0) == 0) {
            spec.order = static_cast<int>(
                parse_u64(path, line_no, std::string_view(field).substr(6), "order"));
          } else if (field.rfind("anchors=", 0) == 0) {
            std::string rest = field.substr(8);
            std::size_t pos = 0;
            while (pos < rest.size()) {
              const auto next = rest.find(',', pos);
              const auto piece = rest.substr(pos, next == std::string::npos ? next : next - pos);
              spec.shared_anchor_ids.push_back(static_cast<std::uint32_t>(
                  parse_u64(path, line_no, piece, "anchor id")));
              if (next == std::string::npos) break;
              pos = next + 1;
            }
          } else {
            parse_fail(path, line_no, "unknown language field '" + field + "'");
          }
        }
        corpus.languages.push_back(std::move(spec));
      }
      continue;
    }

    // Record: <id>\t<language>\t<t0> <t1> ...
    const auto tab1 = line.find('\t');
    const auto tab2 = tab1 == std::string::npos ? std::string::npos : line.find('\t', tab1 + 1);
    if (tab1 == std::string::npos || tab2 == std::string::npos)
      parse_fail(path, line_no, "expected '<id>\\t<language>\\t<tokens>'");
    Sample sample;
    sample.id = static_cast<std::int64_t>(
        parse_u64(path, line_no, std::string_view(line).substr(0, tab1), "sample id"));
    sample.language = line.substr(tab1 + 1, tab2 - tab1 - 1);
    if (sample.language.empty()) parse_fail(path, line_no, "empty language code");

    std::size_t pos = tab2 + 1;
    while (pos < line.size()) {
      while (pos < line.size() && line[pos] == ' ') ++pos;
      if (pos >= line.size()) break;
      auto end = line.find(' ', pos);
      if (end == std::string::npos) end = line.size();
      const std::uint64_t tok =
          parse_u64(path, line_no, std::string_view(line).substr(pos, end - pos), "token id");
      if (tok >= corpus.vocab_size)
        throw ValidationError(path + ":" + std::to_string(line_no) + ": token id " +
                              std::to_string(tok) + " >= vocab size " +
                              std::to_string(corpus.vocab_size));
      sample.tokens.push_back(static_cast<std::uint32_t>(tok));
      pos = end;
    }
    if (sample.tokens.size() < 2)
      parse_fail(path, line_no, "sample needs at least 2 tokens");
    corpus.samples.push_back(std::move(sample));
  }
  if (in.bad()) throw IoError("read failed for '" + path + "'");

  if (corpus.languages.empty()) {
    // File without #lang lines: derive minimal specs from the records.
    derived_languages = true;
    std::vector<std::string> seen;
    for (const auto& s : corpus.samples)
      if (std::find(seen.begin(), seen.end(), s.language) == seen.end())
        seen.push_back(s.language);
    for (const auto& id : seen)
      corpus.languages.push_back(LanguageSpec{id, 0, corpus.vocab_size, 0, {}, 1});
  }
  (void)derived_languages;

  for (const auto& s : corpus.samples)
    if (corpus.find_language(s.language) == nullptr)
      throw ValidationError(path + ": unknown language id '" + s.language + "'");
  return corpus;
}

LabeledCorpus filter_language(const LabeledCorpus& corpus, const std::string& id) {
  if (corpus.find_language(id) == nullptr)
    throw ValidationError("language '" + id + "' not present in corpus");
  LabeledCorpus out;
  out.vocab_size = corpus.vocab_size;
  out.languages = corpus.languages;
  for (const auto& s : corpus.samples)
    if (s.language == id) out.samples.push_back(s);
  return out;
}

LabeledCorpus make_replay_mix(const LabeledCorpus& source, const LabeledCorpus& target,
                              double source_token_fraction, std::size_t stage1_tokens,
                              std::uint64_t seed) {
  if (source.samples.empty() || target.samples.empty())
    throw ValidationError("replay mix needs non-empty source and target corpora");
  if (source.vocab_size != target.vocab_size)
    throw ValidationError("replay mix: vocab size mismatch between source and target");

  const double want_tokens = source_token_fraction * static_cast<double>(stage1_tokens);
  LabeledCorpus mix;
  mix.vocab_size = target.vocab_size;
  mix.languages = target.languages;
  for (const auto& l : source.languages)
    if (mix.find_language(l.id) == nullptr) mix.languages.push_back(l);

  std::vector<std::size_t> order(source.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  std::size_t got = 0;
  for (std::size_t i = 0; i < order.size() && (got < want_tokens || got == 0); ++i) {
    mix.samples.push_back(source.samples[order[i]]);
    got += source.samples[order[i]].tokens.size();
  }
  for (const auto& s : target.samples) mix.samples.push_back(s);
  return mix;
}

}  // namespace nm
