// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace nm {

// A synthetic language: a Markov chain over a half-open token-id band
// [vocab_lo, vocab_hi) plus a set of anchor tokens shared across languages.
struct LanguageSpec {
  std::string id;
  std::uint32_t vocab_lo = 0;
  std::uint32_t vocab_hi = 0;  // exclusive
  std::uint64_t transition_seed = 0;
  std::vector<std::uint32_t> shared_anchor_ids;
  int order = 1;  // Markov order, 1 or 2

  friend bool operator==(const LanguageSpec&, const LanguageSpec&) = default;
};

struct Sample {
  std::int64_t id = 0;
  std::string language;
  std::vector<std::uint32_t> tokens;  // length >= 2

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct LabeledCorpus {
  std::uint32_t vocab_size = 0;
  std::vector<LanguageSpec> languages;
  std::vector<Sample> samples;

  const LanguageSpec* find_language(const std::string& id) const;
  std::vector<std::string> language_ids() const;
  std::size_t count_language(const std::string& id) const;
  std::size_t total_tokens() const;

  friend bool operator==(const LabeledCorpus&, const LabeledCorpus&) = default;
};

// Deterministic generation: a pure function of (specs, counts, seed).
// vocab_size 0 derives the smallest vocabulary covering all bands and anchors.
LabeledCorpus gen_corpus(const std::vector<LanguageSpec>& specs,
                         std::size_t samples_per_language, std::size_t sample_len,
                         std::uint64_t seed, std::uint32_t vocab_size = 0);

// Stratified split; every language keeps at least one sample on each side.
std::pair<LabeledCorpus, LabeledCorpus> split_corpus(const LabeledCorpus& corpus,
                                                     double train_fraction,
                                                     std::uint64_t seed);

void save_corpus(const LabeledCorpus& corpus, const std::string& path);
LabeledCorpus load_corpus(const std::string& path);

// Samples of one language (language specs carried over unchanged).
LabeledCorpus filter_language(const LabeledCorpus& corpus, const std::string& id);

// Replay mix for router training: all of `target` plus enough source samples
// to cover roughly `source_token_fraction` of `stage1_tokens` (at least one).
// The default mirrors the usual replay budget of 1% of stage-1 data.
LabeledCorpus make_replay_mix(const LabeledCorpus& source, const LabeledCorpus& target,
                              double source_token_fraction, std::size_t stage1_tokens,
                              std::uint64_t seed);
inline LabeledCorpus make_replay_mix(const LabeledCorpus& source, const LabeledCorpus& target,
                                     std::size_t stage1_tokens, std::uint64_t seed) {
  return make_replay_mix(source, target, 0.01, stage1_tokens, seed);
}

}  // namespace nm
