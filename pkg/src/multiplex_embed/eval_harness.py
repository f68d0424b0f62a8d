"""Evaluation metrics and protocol drivers."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import encoder as enc
from .checkpoint import Checkpoint
from .errors import ConfigError
from .graph_store import MultiplexGraph, split_edges
from .text_pipeline import TokenSequence, Vocabulary, encode_corpus, encode_text, stack_sequences
from .trainer import RelationWeights, TrainConfig, train


@dataclass(frozen=True)
class EvalBatch:
    queries: np.ndarray
    keys: np.ndarray

    def __post_init__(self):
        q, k = np.asarray(self.queries), np.asarray(self.keys)
        if q.ndim != 2 or q.shape != k.shape:
            raise ConfigError("queries and keys must be equal-shape (B, d) arrays")
        if q.shape[0] < 2:
            raise ConfigError("an evaluation batch needs B >= 2")


@dataclass(frozen=True)
class CandidateProfile:
    entity_id: int | str
    documents: tuple[str, ...]

    def __post_init__(self):
        if len(self.documents) < 1:
            raise ConfigError(f"candidate {self.entity_id!r} has no member documents")


def prec_at_1_hits(queries: np.ndarray, keys: np.ndarray) -> int:
    scores = np.asarray(queries) @ np.asarray(keys).T
    # np.argmax returns the first maximum, i.e. ties go to the smallest index
    return int(np.sum(np.argmax(scores, axis=1) == np.arange(len(scores))))


def prec_at_1(batch: EvalBatch) -> float:
    """Fraction of rows whose own key scores highest in the batch."""
    return prec_at_1_hits(batch.queries, batch.keys) / len(batch.queries)


def macro_f1(predictions: Sequence[int], labels: Sequence[int], n_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with no support and no
    predictions scores 0."""
    pred = np.asarray(predictions, dtype=np.int64)
    gold = np.asarray(labels, dtype=np.int64)
    if pred.shape != gold.shape:
        raise ConfigError("predictions and labels differ in length")
    for arr in (pred, gold):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ConfigError(f"class id out of range 0..{n_classes - 1}")
    f1 = []
    for c in range(n_classes):
        tp = int(np.sum((pred == c) & (gold == c)))
        fp = int(np.sum((pred == c) & (gold != c)))
        fn = int(np.sum((pred != c) & (gold == c)))
        denom = 2 * tp + fp + fn
        f1.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1))


def rmse(predictions: Sequence[float], targets: Sequence[float]) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ConfigError("predictions and targets differ in length")
    if p.size == 0:
        raise ConfigError("rmse needs at least one value")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def batched_prec_at_1(queries: np.ndarray, keys: np.ndarray, batch_size: int) -> float:
    """In-batch PREC@1 over consecutive chunks; a trailing chunk of one row is dropped."""
    if batch_size < 2:
        raise ConfigError("batch size must be >= 2")
    hits = total = 0
    for i in range(0, len(queries), batch_size):
        q, k = queries[i:i + batch_size], keys[i:i + batch_size]
        if len(q) < 2:
            continue
        hits += prec_at_1_hits(q, k)
        total += len(q)
    if total == 0:
        raise ConfigError("not enough pairs for a single evaluation batch")
    return hits / total


def relation_prec_at_1(ckpt: Checkpoint, graph: MultiplexGraph, relation, pairs: np.ndarray,
                       batch_size: int = 32, seed: int = 0, prior_relation=None) -> float:
    """Held-out in-batch PREC@1 for ``pairs`` (node-id pairs) of one relation.

    Pairs are shuffled with ``seed`` and scored in batches; queries are the
    first endpoints, keys the second. ``prior_relation`` overrides which
    relation's priors condition the encoder (defaults to ``relation``).
    """
    rows = ckpt.prior_rows(relation if prior_relation is None else prior_relation)
    pairs = np.asarray(pairs)[np.random.default_rng(seed).permutation(len(pairs))]
    ids, lengths = encode_corpus(ckpt.vocab, graph.texts, ckpt.max_len)
    src, dst = graph.positions(pairs[:, 0]), graph.positions(pairs[:, 1])
    needed = np.unique(np.concatenate([src, dst]))
    emb = np.zeros((graph.n_nodes, ckpt.config.hidden))
    emb[needed] = enc.encode_batch(ckpt.params, ckpt.config, rows, ids[needed], lengths[needed])
    return batched_prec_at_1(emb[src], emb[dst], batch_size)


def average_prec_at_1(ckpt: Checkpoint, test_graph: MultiplexGraph, batch_size: int = 32,
                      seed: int = 0) -> dict[str, float]:
    return {r.name: relation_prec_at_1(ckpt, test_graph, r.name, test_graph.edges[r.id].pairs, batch_size, seed)
            for r in test_graph.relations if len(test_graph.edges[r.id]) >= 2}


def cross_relation_matrix(graph: MultiplexGraph, vocab: Vocabulary, encoder_config: enc.EncoderConfig,
                          train_config: TrainConfig, *, holdout_fraction: float = 0.2, split_seed: int = 0,
                          eval_batch_size: int = 32) -> np.ndarray:
    """Train one single-relation model per relation and score it on every relation.

    Entry (k, l) is the held-out PREC@1 on relation l's edges of a model
    trained only on relation k's training edges (encoding with k's priors).
    """
    train_graph, test_graph = split_edges(graph, holdout_fraction, split_seed)
    n = len(graph.relations)
    for r in graph.relations:
        if len(test_graph.edges[r.id]) < 2:
            raise ConfigError(f"relation {r.name} has too few held-out edges")
    out = np.zeros((n, n))
    for k in range(n):
        res = train(train_graph, vocab, encoder_config, train_config,
                    RelationWeights.uniform(n), relations=[k])
        for l in range(n):
            out[k, l] = relation_prec_at_1(res.checkpoint, test_graph, l, test_graph.edges[l].pairs,
                                           eval_batch_size, split_seed, prior_relation=k)
    return out


def aggregate_candidate_matching(ckpt: Checkpoint, relation, queries: Sequence[tuple[TokenSequence, object]],
                                 candidates: Sequence[CandidateProfile], batch_size: int = 32,
                                 long_max_len: int | None = None) -> float:
    """PREC@1 of matching queries to entities described by many documents.

    Each candidate is embedded once from the concatenation of its member
    documents, truncated to ``long_max_len`` tokens (default: the longest
    sequence the encoder accepts alongside the priors). Queries are scored
    in batches against the candidates of the batch's true entities.
    """
    rows = ckpt.prior_rows(relation)
    if long_max_len is None:
        long_max_len = ckpt.config.max_positions - rows.shape[0]
    by_id = {c.entity_id: c for c in candidates}
    missing = [e for _, e in queries if e not in by_id]
    if missing:
        raise ConfigError(f"query entity {missing[0]!r} not among candidates")
    cand_ids = list(by_id)
    seqs = [encode_text(ckpt.vocab, " ".join(by_id[c].documents), long_max_len) for c in cand_ids]
    cand_emb = enc.encode_batch(ckpt.params, ckpt.config, rows, *stack_sequences(seqs))
    index = {c: i for i, c in enumerate(cand_ids)}
    q_emb = enc.encode_batch(ckpt.params, ckpt.config, rows, *stack_sequences([q for q, _ in queries]))
    keys = cand_emb[[index[e] for _, e in queries]]
    return batched_prec_at_1(q_emb, keys, batch_size)
