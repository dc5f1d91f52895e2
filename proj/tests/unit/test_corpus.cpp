// Copyright 2026 the neuronmoe authors
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "nm/common.hpp"
#include "nm/corpus.hpp"
#include "test_util.hpp"

using namespace nm;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("gen_corpus counts and determinism") {
  const auto specs = nmtest::two_language_specs();
  const LabeledCorpus c1 = gen_corpus(specs, 4, 16, 7);
  CHECK(c1.samples.size() == 8);
  CHECK(c1.count_language("aa") == 4);
  CHECK(c1.count_language("bb") == 4);
  for (const auto& s : c1.samples) CHECK(s.tokens.size() == 16);

  const LabeledCorpus c2 = gen_corpus(specs, 4, 16, 7);
  CHECK(c1 == c2);

  const LabeledCorpus c3 = gen_corpus(specs, 4, 16, 8);
  CHECK(c1.samples != c3.samples);
}

TEST_CASE("gen_corpus respects vocab bands and anchors") {
  std::vector<LanguageSpec> specs = {
      {"aa", 0, 50, 3, {0, 1}, 1},
      {"bb", 50, 100, 4, {0, 1}, 1},
  };
  const LabeledCorpus corpus = gen_corpus(specs, 16, 24, 11);
  for (const auto& s : corpus.samples) {
    if (s.language != "bb") continue;
    for (std::uint32_t t : s.tokens) {
      const bool anchor = t == 0 || t == 1;
      if (!anchor) {
        CHECK(t >= 50);
        CHECK(t < 100);
      }
    }
  }
}

TEST_CASE("gen_corpus rejects bad specs") {
  std::vector<LanguageSpec> overlap_same_seed = {
      {"aa", 0, 60, 3, {}, 1},
      {"bb", 50, 100, 3, {}, 1},
  };
  CHECK_THROWS_AS(gen_corpus(overlap_same_seed, 2, 8, 1), ValidationError);

  std::vector<LanguageSpec> overlap_distinct_seed = {
      {"aa", 0, 60, 3, {}, 1},
      {"bb", 50, 100, 4, {}, 1},
  };
  CHECK_NOTHROW(gen_corpus(overlap_distinct_seed, 2, 8, 1));

  std::vector<LanguageSpec> beyond_vocab = {{"aa", 0, 200, 3, {}, 1}};
  CHECK_THROWS_AS(gen_corpus(beyond_vocab, 2, 8, 1, 100), ValidationError);

  std::vector<LanguageSpec> uneven_anchors = {
      {"aa", 2, 40, 3, {0, 1}, 1},
      {"bb", 40, 80, 4, {0}, 1},
  };
  CHECK_THROWS_AS(gen_corpus(uneven_anchors, 2, 8, 1), ValidationError);

  std::vector<LanguageSpec> empty_range = {{"aa", 10, 10, 3, {}, 1}};
  CHECK_THROWS_AS(gen_corpus(empty_range, 2, 8, 1), ValidationError);

  CHECK_THROWS_AS(gen_corpus(nmtest::two_language_specs(), 0, 8, 1), ValidationError);
  CHECK_THROWS_AS(gen_corpus(nmtest::two_language_specs(), 2, 1, 1), ValidationError);
}

TEST_CASE("order-2 chains generate within the band too") {
  std::vector<LanguageSpec> specs = {{"aa", 4, 40, 5, {2}, 2}};
  const LabeledCorpus corpus = gen_corpus(specs, 4, 32, 9);
  for (const auto& s : corpus.samples)
    for (std::uint32_t t : s.tokens) CHECK(((t >= 4 && t < 40) || t == 2));
}

TEST_CASE("split_corpus stratifies and partitions") {
  const auto specs = nmtest::two_language_specs();
  const LabeledCorpus corpus = gen_corpus(specs, 4, 8, 7);

  const auto [train, eval] = split_corpus(corpus, 0.75, 13);
  CHECK(train.samples.size() == 6);
  CHECK(eval.samples.size() == 2);
  CHECK(train.count_language("aa") == 3);
  CHECK(train.count_language("bb") == 3);
  CHECK(eval.count_language("aa") == 1);
  CHECK(eval.count_language("bb") == 1);

  // Union equals the input, disjoint by sample id.
  std::set<std::int64_t> ids;
  for (const auto& s : train.samples) ids.insert(s.id);
  for (const auto& s : eval.samples) CHECK(ids.insert(s.id).second);
  CHECK(ids.size() == corpus.samples.size());

  const auto [t2, e2] = split_corpus(corpus, 0.75, 13);
  CHECK(t2 == train);
  CHECK(e2 == eval);
}

TEST_CASE("split_corpus small and degenerate cases") {
  const auto specs = nmtest::two_language_specs();
  const LabeledCorpus two_each = gen_corpus(specs, 2, 8, 7);
  const auto [train, eval] = split_corpus(two_each, 0.5, 1);
  CHECK(train.count_language("aa") == 1);
  CHECK(train.count_language("bb") == 1);
  CHECK(eval.count_language("aa") == 1);
  CHECK(eval.count_language("bb") == 1);

  const LabeledCorpus one_each = gen_corpus(specs, 1, 8, 7);
  CHECK_THROWS_AS(split_corpus(one_each, 0.5, 1), ValidationError);
  CHECK_THROWS_AS(split_corpus(two_each, 0.0, 1), ValidationError);
  CHECK_THROWS_AS(split_corpus(two_each, 1.0, 1), ValidationError);
}

TEST_CASE("split proportions stay within one sample per language") {
  const auto specs = nmtest::two_language_specs();
  const LabeledCorpus corpus = gen_corpus(specs, 9, 8, 21);
  for (double frac : {0.3, 0.5, 0.66, 0.9}) {
    const auto [train, eval] = split_corpus(corpus, frac, 5);
    for (const auto& id : corpus.language_ids()) {
      const double exact = frac * 9.0;
      CHECK(std::abs(static_cast<double>(train.count_language(id)) - exact) <= 1.0);
      CHECK(train.count_language(id) + eval.count_language(id) == 9);
    }
  }
}

TEST_CASE("corpus save/load round trip") {
  const auto specs = nmtest::two_language_specs();
  const LabeledCorpus corpus = gen_corpus(specs, 4, 8, 7);
  const std::string path = temp_path("nm_corpus_roundtrip.txt");
  save_corpus(corpus, path);
  const LabeledCorpus loaded = load_corpus(path);
  CHECK(loaded == corpus);

  // Saving the loaded corpus reproduces the bytes.
  const std::string path2 = temp_path("nm_corpus_roundtrip2.txt");
  save_corpus(loaded, path2);
  std::ifstream f1(path), f2(path2);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
}

TEST_CASE("corpus load rejects malformed files") {
  const std::string path = temp_path("nm_corpus_bad.txt");
  {
    std::ofstream out(path);
    out << "#nmcorpus v1 vocab=64\n0\taa\t1 2 3\n1\taa\t";  // truncated record
  }
  CHECK_THROWS_AS(load_corpus(path), FormatError);

  {
    std::ofstream out(path);
    out << "#nmcorpus v1 vocab=64\n0\taa\t1 2 64\n";  // token == vocab
  }
  CHECK_THROWS_AS(load_corpus(path), ValidationError);

  {
    std::ofstream out(path);
    out << "#nmcorpus v1 vocab=64\n#lang aa range=[0,64) seed=1 order=1 anchors=\n"
        << "0\tzz\t1 2 3\n";  // language not declared
  }
  CHECK_THROWS_AS(load_corpus(path), ValidationError);

  {
    std::ofstream out(path);
    out << "not a corpus\n";
  }
  CHECK_THROWS_AS(load_corpus(path), FormatError);
}

TEST_CASE("disjoint bands without anchors separate languages perfectly") {
  const auto specs = nmtest::two_language_specs(30, /*anchors=*/false);
  const LabeledCorpus corpus = gen_corpus(specs, 10, 16, 3);
  // Unigram classification: assign by the band of the first token.
  for (const auto& s : corpus.samples) {
    const std::string predicted = s.tokens[0] < 32 ? "aa" : "bb";
    CHECK(predicted == s.language);
  }
}

TEST_CASE("filter_language keeps only the requested samples") {
  const auto specs = nmtest::two_language_specs();
  const LabeledCorpus corpus = gen_corpus(specs, 4, 8, 7);
  const LabeledCorpus only_b = filter_language(corpus, "bb");
  CHECK(only_b.samples.size() == 4);
  for (const auto& s : only_b.samples) CHECK(s.language == "bb");
  CHECK_THROWS_AS(filter_language(corpus, "zz"), ValidationError);
}

TEST_CASE("make_replay_mix sizes the source slice by token budget") {
  const auto specs = nmtest::two_language_specs();
  const LabeledCorpus corpus = gen_corpus(specs, 20, 10, 7);
  const LabeledCorpus source = filter_language(corpus, "aa");
  const LabeledCorpus target = filter_language(corpus, "bb");

  // 1% of a 10k-token stage-1 budget = 100 tokens = 10 source samples.
  const LabeledCorpus mix = make_replay_mix(source, target, 0.01, 10000, 5);
  CHECK(mix.count_language("bb") == 20);
  const std::size_t n_source = mix.count_language("aa");
  CHECK(n_source >= 10);
  CHECK(n_source <= 11);
  CHECK(mix.samples.size() == 20 + n_source);
}
