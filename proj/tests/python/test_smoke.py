# Copyright 2026 the neuronmoe authors
# SPDX-License-Identifier: Apache-2.0
"""Smoke tests for the python bindings: one pass over every main operation."""

import math

import numpy as np
import pytest

import neuronmoe as nm


@pytest.fixture(scope="module")
def specs():
    return [
        nm.LanguageSpec("src", 2, 20, 101, anchors=[0], order=1),
        nm.LanguageSpec("tgt", 20, 38, 202, anchors=[0], order=1),
    ]


@pytest.fixture(scope="module")
def corpus(specs):
    return nm.gen_corpus(specs, samples_per_language=12, sample_len=10, seed=7, vocab_size=40)


@pytest.fixture(scope="module")
def config():
    return nm.ModelConfig(vocab_size=40, d_model=16, n_layers=2, n_heads=2, d_ff=24,
                          max_seq_len=16)


def test_corpus_generation_and_roundtrip(corpus, tmp_path_factory):
    assert len(corpus) == 24
    assert corpus.count_language("src") == 12
    path = str(tmp_path_factory.mktemp("corpus") / "corpus.txt")
    nm.save_corpus(corpus, path)
    assert nm.load_corpus(path) == corpus


def test_split_is_stratified(corpus):
    train, eval_ = nm.split_corpus(corpus, 0.75, seed=3)
    assert train.count_language("src") == 9
    assert eval_.count_language("tgt") == 3


def test_compute_ap_hand_case():
    assert nm.compute_ap([0.9, 0.8, 0.1, 0.7], [1, 0, 1, 0]) == pytest.approx(0.75, abs=1e-12)
    with pytest.raises(ValueError):
        nm.compute_ap([1.0, 2.0], [1, 1])


def test_allocation_from_reference_scores():
    scores = nm.LayerScores([342, 79, 11, 18, 15, 11, 8, 7, 8, 8, 7, 6, 9, 14, 9, 18, 81, 20,
                             19, 28, 38, 232, 51, 208, 114, 111, 238, 223])
    plan = nm.allocate(scores, e_min=1, e_max=6, rounding="floor")
    assert plan.experts_per_layer[0] == 6
    assert plan.experts_per_layer[21] == 4
    assert plan.total == 49
    norm = nm.normalize_scores(scores)
    assert norm[0] == pytest.approx(1.0)
    assert norm[11] == pytest.approx(0.0)


def test_forward_and_upcycle_identity(config, corpus):
    dense = nm.init_dense(config, seed=42)
    tokens = corpus.samples[0].tokens
    out = nm.forward(dense, tokens)
    assert out["logits"].shape == (len(tokens), 40)
    assert math.isfinite(out["loss"])

    plan = nm.allocate(nm.LayerScores([3, 9]), e_min=1, e_max=2)
    moe = nm.upcycle_to_moe(dense, plan, seed=0)
    assert moe.plan.experts_per_layer == [1, 2]
    moe_out = nm.forward(moe, tokens)
    np.testing.assert_allclose(out["logits"], moe_out["logits"], atol=1e-9)

    routing = moe_out["routing"]
    assert len(routing) == 2
    for layer in routing:
        assert layer["top_k"] == 2
        weights = np.asarray(layer["weights"]).reshape(-1, 2)
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-9)


def test_trace_profile_pipeline(config, corpus, tmp_path_factory):
    dense = nm.init_dense(config, seed=42)
    trace = nm.record_trace(dense, corpus)
    assert trace.shape == (24, 2 * (16 + 24))

    base = str(tmp_path_factory.mktemp("trace") / "t")
    nm.write_trace(trace, base)
    assert nm.read_trace(base) == trace

    table = nm.compute_ap_table(trace)
    assert set(table.languages) == {"src", "tgt"}
    scores = table.scores()
    assert scores.shape == (trace.shape[1], 2)
    assert scores.min() >= 0.0 and scores.max() <= 1.0

    sets = nm.select_language_specific(table, k=10, threshold=0.5)
    layer_scores = nm.layer_scores(sets, 2)
    assert len(layer_scores.values) == 2


def test_two_stage_training_freezes_the_right_tensors(config, corpus):
    dense = nm.init_dense(config, seed=42)
    train, eval_ = nm.split_corpus(corpus, 0.75, seed=3)
    tgt = nm.filter_language(train, "tgt")

    plan = nm.allocate(nm.LayerScores([1, 1]), e_min=1, e_max=1)
    moe = nm.upcycle_to_moe(dense, plan, seed=0)
    report = nm.train_stage1(moe, tgt, learning_rate=0.01, batch_size=4, total_steps=6,
                             seed=11, target_language="tgt")
    assert len(report["loss_curve"]) == 6
    for name, entry in report["digests"].items():
        if "expert" not in name and "router" not in name:
            assert not entry["changed"], f"base tensor {name} changed in stage 1"

    nm.set_stage_mask(moe, 2)
    report2 = nm.train_stage2(moe, train, learning_rate=0.01, batch_size=4, total_steps=6,
                              seed=12, source_language="src", target_language="tgt")
    for name, entry in report2["digests"].items():
        if "router" not in name:
            assert not entry["changed"], f"non-router tensor {name} changed in stage 2"

    ppl = nm.eval_perplexity(moe, eval_, "src")
    assert ppl > 1.0


def test_checkpoint_roundtrip(config, tmp_path_factory, corpus):
    dense = nm.init_dense(config, seed=1)
    path = str(tmp_path_factory.mktemp("ckpt") / "dense.nmck")
    nm.save_checkpoint(dense, path)
    loaded = nm.load_checkpoint(path)
    tokens = corpus.samples[0].tokens
    np.testing.assert_array_equal(nm.forward(dense, tokens)["logits"],
                                  nm.forward(loaded, tokens)["logits"])


def test_expert_analysis(config, corpus):
    dense = nm.init_dense(config, seed=42)
    plan = nm.allocate(nm.LayerScores([1, 1]), e_min=1, e_max=1)
    moe = nm.upcycle_to_moe(dense, plan, seed=0)
    acts = nm.collect_expert_activations(moe, corpus)
    report = nm.expert_ap(acts)
    assert report.unit_width == 24
    units = report.units()
    assert len(units) == 4  # 2 layers x (base + 1 expert)
    for unit in units:
        assert unit["population"] == len(corpus)  # top-2 of 2: all samples enter
    cells = nm.high_ap_counts(report, threshold=0.0)
    for cell in cells:
        assert cell["count"] == report.unit_width  # every defined AP >= 0
