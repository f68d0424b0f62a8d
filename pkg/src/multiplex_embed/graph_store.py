"""Multiplex text-attributed graphs: loading, sampling, and edge-set overlap.

Edges are kept as undirected pairs canonicalised to ``src < dst`` and stored
per relation as sorted ``(E, 2)`` integer arrays of node ids.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, GraphError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RelationKind:
    id: int
    name: str


@dataclass(frozen=True)
class NodeRecord:
    node_id: int
    text: str


@dataclass(frozen=True)
class EdgeList:
    relation: RelationKind
    pairs: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class PairSample:
    relation: RelationKind
    src: int
    dst: int


def canonical_pairs(pairs, *, drop_self_loops: bool = False) -> np.ndarray:
    """Sort endpoints within each pair, drop duplicates, return sorted (E, 2) int64."""
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if drop_self_loops:
        arr = arr[arr[:, 0] != arr[:, 1]]
    arr = np.sort(arr, axis=1)
    if len(arr) == 0:
        return np.empty((0, 2), dtype=np.int64)
    return np.unique(arr, axis=0)


class MultiplexGraph:
    """Immutable node set with one text per node and one edge set per relation."""

    def __init__(self, nodes: Sequence[NodeRecord], relations: Sequence[RelationKind],
                 edges: Sequence[EdgeList], *, allow_single_relation: bool = False):
        nodes = sorted(nodes, key=lambda n: n.node_id)
        ids = np.array([n.node_id for n in nodes], dtype=np.int64)
        if len(ids) and np.any(np.diff(ids) == 0):
            dup = ids[np.flatnonzero(np.diff(ids) == 0)[0]]
            raise GraphError(f"duplicate node_id {dup}")
        for n in nodes:
            if not n.text.strip():
                raise GraphError(f"node {n.node_id} has empty text")
        if len(relations) <= 1 and not allow_single_relation:
            raise GraphError("|R| must exceed 1 for a multiplex graph")
        if [r.id for r in relations] != list(range(len(relations))):
            raise GraphError("relation ids must be dense 0..|R|-1")
        names = [r.name for r in relations]
        if len(set(names)) != len(names):
            raise GraphError("relation names must be unique")
        if [e.relation for e in edges] != list(relations):
            raise GraphError("need exactly one edge list per relation, in relation order")
        for e in edges:
            p = e.pairs
            if len(p) == 0:
                continue
            if np.any(p[:, 0] >= p[:, 1]):
                raise GraphError(f"relation {e.relation.name}: pairs must be canonical src<dst without self-loops")
            pos = np.searchsorted(ids, p.ravel())
            bad = (pos >= len(ids)) | (ids[np.minimum(pos, len(ids) - 1)] != p.ravel())
            if np.any(bad):
                missing = p.ravel()[np.flatnonzero(bad)[0]]
                raise GraphError(f"dangling endpoint {missing} in relation {e.relation.name}")
        self.nodes: tuple[NodeRecord, ...] = tuple(nodes)
        self.relations: tuple[RelationKind, ...] = tuple(relations)
        self.edges: tuple[EdgeList, ...] = tuple(edges)
        self.node_ids = ids
        self.node_ids.setflags(write=False)
        for e in self.edges:
            e.pairs.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def texts(self) -> list[str]:
        return [n.text for n in self.nodes]

    @property
    def relation_names(self) -> list[str]:
        return [r.name for r in self.relations]

    def relation(self, key) -> RelationKind:
        """Look up a relation by name, id, or RelationKind."""
        if isinstance(key, RelationKind):
            key = key.id
        for r in self.relations:
            if r.name == key or (isinstance(key, (int, np.integer)) and r.id == key):
                return r
        raise ConfigError(f"unknown relation {key!r}; available: {', '.join(self.relation_names)}")

    def edge_array(self, key) -> np.ndarray:
        return self.edges[self.relation(key).id].pairs

    def positions(self, node_ids) -> np.ndarray:
        """Map node ids to row positions in ``self.nodes``."""
        node_ids = np.asarray(node_ids, dtype=np.int64)
        pos = np.searchsorted(self.node_ids, node_ids)
        if np.any(pos >= len(self.node_ids)) or np.any(self.node_ids[np.minimum(pos, len(self.node_ids) - 1)] != node_ids):
            raise GraphError("unknown node id")
        return pos

    def edge_counts(self) -> dict[str, int]:
        return {r.name: len(e) for r, e in zip(self.relations, self.edges)}

    def with_edges(self, edge_arrays: Sequence[np.ndarray]) -> "MultiplexGraph":
        edges = [EdgeList(r, canonical_pairs(a)) for r, a in zip(self.relations, edge_arrays)]
        return MultiplexGraph(self.nodes, self.relations, edges,
                              allow_single_relation=len(self.relations) <= 1)

    def __repr__(self) -> str:
        return f"MultiplexGraph(|V|={self.n_nodes}, edges={self.edge_counts()})"


def build_graph(texts: Mapping[int, str], relation_edges: Mapping[str, Sequence[tuple[int, int]]]) -> MultiplexGraph:
    """Build a graph in memory; duplicate edges and orientation are normalised."""
    nodes = [NodeRecord(int(i), t) for i, t in texts.items()]
    relations = [RelationKind(i, name) for i, name in enumerate(relation_edges)]
    edges = []
    for r in relations:
        raw = np.asarray(relation_edges[r.name], dtype=np.int64).reshape(-1, 2)
        if np.any(raw[:, 0] == raw[:, 1]):
            raise GraphError(f"self-loop in relation {r.name}")
        edges.append(EdgeList(r, canonical_pairs(raw)))
    return MultiplexGraph(nodes, relations, edges)


def _read_nodes(path) -> list[NodeRecord]:
    path = Path(path)
    if not path.is_file():
        raise GraphError(f"missing file: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            idx, sep, text = line.partition("\t")
            if not sep:
                raise GraphError(f"{path}:{lineno}: expected 'id<TAB>text'")
            try:
                out.append(NodeRecord(int(idx), text))
            except ValueError:
                raise GraphError(f"{path}:{lineno}: bad node id {idx!r}") from None
    return out


def _read_edges(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise GraphError(f"missing file: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise GraphError(f"{path}:{lineno}: expected 'src<TAB>dst'")
            try:
                rows.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise GraphError(f"{path}:{lineno}: bad node id") from None
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def load_graph(nodes_path, edge_paths: Mapping[str, str | Path], *,
               max_edges_per_relation: int | None = None, seed: int = 0) -> MultiplexGraph:
    """Load and validate a graph from a nodes file and one edge file per relation.

    ``max_edges_per_relation`` keeps a seeded uniform subsample of each
    relation's deduplicated edges.
    """
    if len(edge_paths) <= 1:
        raise GraphError("|R| must exceed 1 for a multiplex graph")
    nodes = _read_nodes(nodes_path)
    relations = [RelationKind(i, name) for i, name in enumerate(edge_paths)]
    edges = []
    for r in relations:
        raw = _read_edges(edge_paths[r.name])
        if np.any(raw[:, 0] == raw[:, 1]):
            raise GraphError(f"self-loop in relation {r.name}")
        pairs = canonical_pairs(raw)
        if max_edges_per_relation is not None and len(pairs) > max_edges_per_relation:
            rng = np.random.default_rng([seed, r.id])
            keep = np.sort(rng.choice(len(pairs), max_edges_per_relation, replace=False))
            pairs = pairs[keep]
        edges.append(EdgeList(r, pairs))
    graph = MultiplexGraph(nodes, relations, edges)
    log.info("loaded graph with %d nodes; edges per relation: %s", graph.n_nodes, graph.edge_counts())
    return graph


def load_graph_dir(directory, **kwargs) -> MultiplexGraph:
    """Load ``nodes.tsv`` plus every ``edges_<relation>.tsv`` in a directory."""
    directory = Path(directory)
    edge_files = sorted(directory.glob("edges_*.tsv"))
    edge_paths = {p.stem[len("edges_"):]: p for p in edge_files}
    return load_graph(directory / "nodes.tsv", edge_paths, **kwargs)


def save_graph_dir(graph: MultiplexGraph, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "nodes.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for n in graph.nodes:
            fh.write(f"{n.node_id}\t{n.text}\n")
    for r, e in zip(graph.relations, graph.edges):
        with open(directory / f"edges_{r.name}.tsv", "w", encoding="utf-8", newline="\n") as fh:
            for u, v in e.pairs:
                fh.write(f"{u}\t{v}\n")


def _assign_sources(edges: np.ndarray, order: np.ndarray, flips: np.ndarray, batch_size: int):
    """Pick up to ``batch_size`` edges in ``order`` so each gets a distinct source.

    Each accepted edge is matched to one of its endpoints (its source); when
    both endpoints are taken, Kuhn-style augmenting paths try to re-route
    earlier edges to their other endpoint.
    """
    owner: dict[int, int] = {}  # node -> edge index acting through it
    source: dict[int, int] = {}  # edge index -> chosen source node

    def endpoints(e):
        u, v = int(edges[e, 0]), int(edges[e, 1])
        return (v, u) if flips[e] else (u, v)

    def augment(e, seen):
        for node in endpoints(e):
            if node in seen:
                continue
            seen.add(node)
            holder = owner.get(node)
            if holder is None or augment(holder, seen):
                owner[node] = e
                source[e] = node
                return True
        return False

    chosen = []
    for e in order:
        e = int(e)
        if augment(e, set()):
            chosen.append(e)
            if len(chosen) == batch_size:
                break
    return chosen, source


def sample_positive_pairs(graph: MultiplexGraph, relation, batch_size: int, seed) -> list[PairSample]:
    """Draw ``batch_size`` distinct edges of one relation with pairwise-distinct sources.

    Deterministic for a fixed ``seed`` (an int or a sequence of ints, as
    accepted by ``numpy.random.default_rng``).
    """
    rel = graph.relation(relation)
    edges = graph.edges[rel.id].pairs
    if len(edges) < batch_size:
        raise ConfigError(f"relation {rel.name} has {len(edges)} edges, fewer than batch size {batch_size}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(edges))
    flips = rng.random(len(edges)) < 0.5
    chosen, source = _assign_sources(edges, order, flips, batch_size)
    if len(chosen) < batch_size:
        raise ConfigError(f"relation {rel.name}: cannot form a batch of {batch_size} pairs with distinct sources")
    out = []
    for e in chosen:
        u, v = int(edges[e, 0]), int(edges[e, 1])
        src = source[e]
        out.append(PairSample(rel, src, v if src == u else u))
    return out


def _pair_keys(pairs: np.ndarray) -> np.ndarray:
    # structured view so set ops work row-wise
    return np.ascontiguousarray(pairs).view([("u", np.int64), ("v", np.int64)]).ravel()


def jaccard_shift(graph: MultiplexGraph, r_k, r_l) -> float:
    """|E_k ∩ E_l| / |E_k ∪ E_l| over unordered node pairs (1.0 when both are empty)."""
    a = _pair_keys(graph.edge_array(r_k))
    b = _pair_keys(graph.edge_array(r_l))
    inter = len(np.intersect1d(a, b, assume_unique=True))
    union = len(a) + len(b) - inter
    if union == 0:
        return 1.0
    return inter / union


def shift_matrix(graph: MultiplexGraph) -> np.ndarray:
    n = len(graph.relations)
    out = np.eye(n)
    for k in range(n):
        for l in range(k + 1, n):
            out[k, l] = out[l, k] = jaccard_shift(graph, k, l)
    return out


def format_matrix(names: Sequence[str], matrix: np.ndarray) -> str:
    lines = ["\t".join(names)]
    for row in np.asarray(matrix):
        lines.append("\t".join(f"{x:.6f}" for x in row))
    return "\n".join(lines) + "\n"


def write_matrix(path, names: Sequence[str], matrix: np.ndarray) -> None:
    Path(path).write_text(format_matrix(names, matrix), encoding="utf-8")


def read_matrix(path) -> tuple[list[str], np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    names = lines[0].split("\t")
    return names, np.array([[float(x) for x in ln.split("\t")] for ln in lines[1:]])


def induced_subgraph(graph: MultiplexGraph, node_count: int, seed: int) -> MultiplexGraph:
    """Uniform node subsample; every relation keeps only edges inside the subset."""
    if node_count > graph.n_nodes:
        raise ConfigError(f"node_count {node_count} exceeds |V|={graph.n_nodes}")
    if node_count < 0:
        raise ConfigError("node_count must be non-negative")
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(graph.n_nodes, node_count, replace=False))
    kept_ids = graph.node_ids[keep]
    nodes = [graph.nodes[i] for i in keep]
    edges = []
    for r, e in zip(graph.relations, graph.edges):
        mask = np.isin(e.pairs[:, 0], kept_ids) & np.isin(e.pairs[:, 1], kept_ids)
        edges.append(EdgeList(r, e.pairs[mask].copy()))
    return MultiplexGraph(nodes, graph.relations, edges,
                          allow_single_relation=len(graph.relations) <= 1)


def split_edges(graph: MultiplexGraph, holdout_fraction: float, seed: int) -> tuple[MultiplexGraph, MultiplexGraph]:
    """Split edges into (train, held-out) graphs.

    The split is decided per unordered node pair over the union of all
    relations, so a pair shared by two relations lands on the same side
    for both.
    """
    if not 0.0 <= holdout_fraction < 1.0:
        raise ConfigError("holdout_fraction must lie in [0, 1)")
    union = canonical_pairs(np.concatenate([e.pairs for e in graph.edges]))
    rng = np.random.default_rng(seed)
    held = np.zeros(len(union), dtype=bool)
    held[rng.permutation(len(union))[: int(round(holdout_fraction * len(union)))]] = True
    held_keys = _pair_keys(union[held])
    train, test = [], []
    for e in graph.edges:
        mask = np.isin(_pair_keys(e.pairs), held_keys)
        train.append(e.pairs[~mask])
        test.append(e.pairs[mask])
    return graph.with_edges(train), graph.with_edges(test)
