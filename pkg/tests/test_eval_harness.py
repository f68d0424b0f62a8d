import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from multiplex_embed import encoder as enc
from multiplex_embed.errors import ConfigError
from multiplex_embed.eval_harness import (CandidateProfile, EvalBatch, aggregate_candidate_matching,
                                          average_prec_at_1, batched_prec_at_1, cross_relation_matrix,
                                          macro_f1, prec_at_1, relation_prec_at_1, rmse)
from multiplex_embed.graph_store import split_edges
from multiplex_embed.synthetic import make_factor_graph
from multiplex_embed.text_pipeline import build_vocabulary, encode_text
from multiplex_embed.trainer import TrainConfig


def test_prec_at_1_examples():
    eye = np.eye(4)
    assert prec_at_1(EvalBatch(eye, eye)) == 1.0
    assert prec_at_1(EvalBatch(np.eye(2), np.eye(2)[::-1])) == 0.0
    ones = np.ones((4, 3))
    assert prec_at_1(EvalBatch(ones, ones)) == 0.25


def test_eval_batch_validation():
    with pytest.raises(ConfigError):
        EvalBatch(np.ones((1, 3)), np.ones((1, 3)))
    with pytest.raises(ConfigError):
        EvalBatch(np.ones((3, 3)), np.ones((2, 3)))


def brute_prec(q, k):
    hits = 0
    for i in range(len(q)):
        scores = [float(np.dot(q[i], k[j])) for j in range(len(k))]
        best = max(range(len(scores)), key=lambda j: (scores[j], -j))
        hits += best == i
    return hits / len(q)


emb = arrays(np.float64, (6, 4), elements=st.floats(-5, 5))


@settings(max_examples=60, deadline=None)
@given(emb, emb, st.permutations(range(6)), st.floats(1e-3, 1e3))
def test_prec_at_1_invariances(q, k, perm, scale):
    base = prec_at_1(EvalBatch(q, k))
    assert base == brute_prec(q, k)
    perm = list(perm)
    # a joint relabelling only changes tie-breaking among exactly equal scores
    assert prec_at_1(EvalBatch(q[perm], k[perm])) == brute_prec(q[perm], k[perm])
    assert prec_at_1(EvalBatch(q, k[perm])) == brute_prec(q, k[perm])
    assert prec_at_1(EvalBatch(q * scale, k)) == brute_prec(q * scale, k)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=2, max_size=6).map(np.array), st.permutations(range(6)))
def test_prec_at_1_joint_permutation_without_ties(dims, perm):
    q = np.eye(6)[: len(dims)]
    k = np.eye(6)[dims]
    perm = [p for p in perm if p < len(dims)]
    # orthonormal rows: each score row has a unique maximum
    if len(set(dims.tolist())) == len(dims):
        assert prec_at_1(EvalBatch(q, k)) == prec_at_1(EvalBatch(q[perm], k[perm]))


def test_macro_f1_examples():
    assert macro_f1([0, 1, 1, 1], [0, 0, 1, 1], 2) == pytest.approx((2 / 3 + 0.8) / 2, abs=1e-15)
    assert macro_f1([0, 0], [0, 1], 2) == pytest.approx(1 / 3, abs=1e-15)
    assert macro_f1([2, 0, 1], [2, 0, 1], 3) == 1.0
    with pytest.raises(ConfigError):
        macro_f1([0, 3], [0, 1], 2)


def test_rmse_examples():
    assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5), abs=1e-15)
    assert rmse([1.5, 2.5], [1.5, 2.5]) == 0.0
    assert rmse(np.array([1.0, -2.0, 7.0]) + 0.25, [1.0, -2.0, 7.0]) == pytest.approx(0.25, abs=1e-15)


def scalar_macro_f1(pred, gold, c):
    scores = []
    for k in range(c):
        tp = sum(p == k and g == k for p, g in zip(pred, gold))
        fp = sum(p == k and g != k for p, g in zip(pred, gold))
        fn = sum(p != k and g == k for p, g in zip(pred, gold))
        scores.append(0.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(scores) / c


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 4).flatmap(lambda c: st.tuples(
    st.just(c), st.lists(st.tuples(st.integers(0, c - 1), st.integers(0, c - 1)), min_size=1, max_size=12))))
def test_macro_f1_matches_scalar_oracle(case):
    c, pairs = case
    pred, gold = [p for p, _ in pairs], [g for _, g in pairs]
    assert macro_f1(pred, gold, c) == pytest.approx(scalar_macro_f1(pred, gold, c), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=1, max_size=12))
def test_rmse_matches_scalar_oracle(pairs):
    expected = math.sqrt(sum((p - t) ** 2 for p, t in pairs) / len(pairs))
    assert rmse([p for p, _ in pairs], [t for _, t in pairs]) == pytest.approx(expected, abs=1e-12, rel=1e-12)


def test_batched_prec_drops_single_trailing_row():
    eye = np.eye(5)
    assert batched_prec_at_1(eye, eye, 2) == 1.0
    with pytest.raises(ConfigError):
        batched_prec_at_1(eye, eye, 1)


def test_relation_prec_is_deterministic(small_checkpoint, small_factor_graph):
    g = small_factor_graph.graph
    pairs = g.edge_array("r0")
    a = relation_prec_at_1(small_checkpoint, g, "r0", pairs, 8, seed=3)
    assert a == relation_prec_at_1(small_checkpoint, g, "r0", pairs, 8, seed=3)
    assert 0.0 <= a <= 1.0
    assert set(average_prec_at_1(small_checkpoint, g, 8)) == {"r0", "r1", "r2"}


def test_cross_relation_matrix_identical_relations():
    g = make_factor_graph(n_nodes=60, n_clusters=10, seed=1, identical=(0, 1)).graph
    vocab = build_vocabulary(g.texts)
    ec = enc.EncoderConfig(vocab_size=len(vocab), layers=1, hidden=16, heads=2, ffn=32, prior_tokens=2,
                           max_positions=14)
    tc = TrainConfig(epochs=2, batch_size=8, warmup_epochs=0, max_len=12)
    m = cross_relation_matrix(g, vocab, ec, tc, holdout_fraction=0.3, eval_batch_size=8)
    assert m.shape == (3, 3)
    assert ((m >= 0) & (m <= 1)).all()
    assert abs(m[0, 1] - m[0, 0]) <= 0.03
    assert abs(m[1, 0] - m[1, 1]) <= 0.03
    assert np.array_equal(m, cross_relation_matrix(g, vocab, ec, tc, holdout_fraction=0.3, eval_batch_size=8))


def test_aggregate_candidates_self_match(small_checkpoint, small_factor_graph):
    texts = small_factor_graph.graph.texts[:8]
    ck = small_checkpoint
    queries = [(encode_text(ck.vocab, t, ck.max_len), i) for i, t in enumerate(texts)]
    cands = [CandidateProfile(i, (t,)) for i, t in enumerate(texts)]
    assert aggregate_candidate_matching(ck, "r0", queries, cands, batch_size=4, long_max_len=ck.max_len) == 1.0


def test_aggregate_candidates_degenerate_checkpoint(small_checkpoint, small_factor_graph):
    ck = copy.deepcopy(small_checkpoint)
    ck.params["lnf.g"] = np.zeros_like(ck.params["lnf.g"])  # every embedding collapses to lnf.b
    texts = small_factor_graph.graph.texts[:4]
    queries = [(encode_text(ck.vocab, t, ck.max_len), i) for i, t in enumerate(texts)]
    cands = [CandidateProfile(i, (t,)) for i, t in enumerate(texts)]
    assert aggregate_candidate_matching(ck, "r1", queries, cands, batch_size=4) == 0.25


def test_aggregate_candidates_truncate_long_profiles(small_checkpoint, small_factor_graph):
    ck = small_checkpoint
    texts = small_factor_graph.graph.texts[:4]
    queries = [(encode_text(ck.vocab, t, ck.max_len), i) for i, t in enumerate(texts)]
    def profiles(extra):
        return [CandidateProfile(i, (t, "w1 " * extra)) for i, t in enumerate(texts)]
    short = aggregate_candidate_matching(ck, "r0", queries, profiles(10), 4, long_max_len=8)
    long = aggregate_candidate_matching(ck, "r0", queries, profiles(10_000), 4, long_max_len=8)
    assert short == long


def test_candidate_needs_documents():
    with pytest.raises(ConfigError):
        CandidateProfile("venue", ())
