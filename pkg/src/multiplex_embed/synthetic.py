"""Synthetic multiplex graphs whose relations follow disjoint latent factors.

Every node draws one cluster per factor. Its text contains one marker word
per factor (``f<factor>c<cluster>``) plus filler words, in shuffled order.
Relation ``r`` links nodes that share their factor-``r`` cluster, so the
relations overlap only by chance and a single embedding cannot serve all
of them at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .graph_store import MultiplexGraph, build_graph


@dataclass
class FactorGraph:
    graph: MultiplexGraph
    clusters: np.ndarray  # (n_nodes, n_factors) cluster index per node and factor


def make_factor_graph(n_nodes: int = 300, n_relations: int = 3, n_clusters: int = 50,
                      n_filler: int = 4, filler_vocab: int = 200, seed: int = 0,
                      identical: tuple[int, int] | None = None) -> FactorGraph:
    """Generate a graph with one relation per latent factor.

    Clusters are balanced (every cluster gets ``n_nodes // n_clusters`` or
    one more node). ``identical=(a, b)`` makes relation ``b`` a copy of
    relation ``a``.
    """
    rng = np.random.default_rng(seed)
    clusters = np.stack([rng.permutation(np.arange(n_nodes) % n_clusters) for _ in range(n_relations)], axis=1)
    texts = {}
    for v in range(n_nodes):
        words = [f"f{r}c{clusters[v, r]}" for r in range(n_relations)]
        words += [f"w{i}" for i in rng.integers(0, filler_vocab, size=n_filler)]
        rng.shuffle(words)
        texts[v] = " ".join(words)
    edges = {}
    for r in range(n_relations):
        pairs = []
        for c in range(n_clusters):
            members = np.flatnonzero(clusters[:, r] == c)
            pairs.extend(combinations(members.tolist(), 2))
        edges[f"r{r}"] = pairs
    if identical is not None:
        a, b = identical
        edges[f"r{b}"] = list(edges[f"r{a}"])
        clusters[:, b] = clusters[:, a]
    return FactorGraph(build_graph(texts, edges), clusters)
