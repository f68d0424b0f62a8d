"""Downstream inference: direct relation conditioning and learned relation selection.

Learned selection keeps the encoder and the relation prior pool frozen.
Only the query embeddings ``Q`` (and a linear head for classification or
regression) are trained. Each query row attends over every pool row,

    alpha[t] = softmax(pool @ Q[t]),    mixed[t] = alpha[t] @ pool,

and the mixed rows replace a relation's priors in front of the document.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import encoder as enc
from .checkpoint import Checkpoint
from .errors import ConfigError, MultiplexError
from .eval_harness import batched_prec_at_1, macro_f1, rmse
from .text_pipeline import TokenSequence
from .trainer import OptimizerState, TrainConfig, adam_step

log = logging.getLogger(__name__)

TASK_KINDS = ("matching", "classification", "regression")


@dataclass(frozen=True)
class TaskKind:
    kind: str
    n_classes: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task kind must be one of {TASK_KINDS}")
        if self.kind == "classification" and self.n_classes < 2:
            raise ConfigError("classification needs at least 2 classes")

    @property
    def higher_is_better(self) -> bool:
        return self.kind != "regression"


@dataclass
class QueryEmbeddings:
    matrix: np.ndarray  # (s, d)

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise ConfigError("query embeddings must be an (s >= 1, d) matrix")

    @property
    def s(self) -> int:
        return self.matrix.shape[0]


@dataclass
class MixedPrior:
    alpha: np.ndarray  # (s, n_pool), rows on the simplex
    rows: np.ndarray  # (s, d)


@dataclass
class TaskHeadParams:
    weight: np.ndarray | None = None  # (d, C) or (d,)
    bias: np.ndarray | None = None  # (C,) or ()


@dataclass
class TaskData:
    """Encoded examples for one split.

    ``inputs`` are (ids, lengths) arrays. Matching tasks carry aligned
    ``targets``; the other kinds carry ``labels``.
    """

    inputs: tuple[np.ndarray, np.ndarray]
    labels: np.ndarray | None = None
    targets: tuple[np.ndarray, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.inputs[0])

    def subset(self, idx) -> "TaskData":
        pick = lambda pair: (pair[0][idx], pair[1][idx])
        return TaskData(pick(self.inputs),
                        None if self.labels is None else self.labels[idx],
                        None if self.targets is None else pick(self.targets))


@dataclass(frozen=True)
class SelectionConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-2
    patience: int = 5
    eval_batch_size: int = 32
    n_queries: int | None = None  # defaults to the checkpoint's prior_tokens
    seed: int = 0


@dataclass
class SelectionResult:
    queries: QueryEmbeddings
    head: TaskHeadParams
    val_metric: float
    init_val_metric: float
    history: list[tuple[int, float]] = field(default_factory=list)


def direct_infer(ckpt: Checkpoint, relation, seq: TokenSequence) -> np.ndarray:
    """h_target from one evident source relation (given by name or index)."""
    return enc.encode_conditioned(ckpt.params, ckpt.config, ckpt.priors, ckpt.relation_index(relation), seq)


def _pool(pool) -> np.ndarray:
    if isinstance(pool, enc.RelationPriorTable):
        return pool.pool()
    pool = np.asarray(pool)
    return pool.reshape(-1, pool.shape[-1])


def attention_mixup(queries: QueryEmbeddings, pool) -> MixedPrior:
    z = _pool(pool)
    if z.shape[0] == 0:
        raise ConfigError("empty prior pool")
    if z.shape[1] != queries.matrix.shape[1]:
        raise ConfigError(f"query dim {queries.matrix.shape[1]} != pool dim {z.shape[1]}")
    logits = queries.matrix @ z.T
    logits = logits - logits.max(axis=1, keepdims=True)
    alpha = np.exp(logits)
    alpha /= alpha.sum(axis=1, keepdims=True)
    return MixedPrior(alpha, alpha @ z)


def attention_mixup_backward(pool, mixed: MixedPrior, d_rows: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the query matrix given dL/d(mixed rows)."""
    z = _pool(pool)
    d_alpha = d_rows @ z.T
    d_logits = mixed.alpha * (d_alpha - (d_alpha * mixed.alpha).sum(axis=1, keepdims=True))
    return d_logits @ z


def encode_target(ckpt: Checkpoint, queries: QueryEmbeddings, seq: TokenSequence) -> np.ndarray:
    mixed = attention_mixup(queries, ckpt.priors)
    return enc.encode_with_prior_rows(ckpt.params, ckpt.config, mixed.rows, seq)


def relation_weight_report(mixed: MixedPrior, relations: Sequence[str]) -> dict[str, float]:
    """Query-averaged attention mass per relation (pool rows are relation-major)."""
    n_pool = mixed.alpha.shape[1]
    if n_pool % len(relations):
        raise ConfigError("pool size is not a multiple of the number of relations")
    per_row = mixed.alpha.mean(axis=0).reshape(len(relations), -1)
    return {name: float(w) for name, w in zip(relations, per_row.sum(axis=1))}


def format_report(report: dict[str, float]) -> str:
    return "".join(f"{name}\t{w:.6f}\n" for name, w in report.items())


def _embed(ckpt: Checkpoint, rows: np.ndarray, data: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    return enc.encode_batch(ckpt.params, ckpt.config, rows, *data)


def _predict(task: TaskKind, head: TaskHeadParams, h: np.ndarray) -> np.ndarray:
    out = h @ head.weight + head.bias
    return np.argmax(out, axis=1) if task.kind == "classification" else out


def evaluate_selection(ckpt: Checkpoint, task: TaskKind, queries: QueryEmbeddings, head: TaskHeadParams,
                       data: TaskData, eval_batch_size: int = 32) -> float:
    """PREC@1 for matching, Macro-F1 for classification, RMSE for regression."""
    rows = attention_mixup(queries, ckpt.priors).rows
    h = _embed(ckpt, rows, data.inputs)
    if task.kind == "matching":
        return batched_prec_at_1(h, _embed(ckpt, rows, data.targets), eval_batch_size)
    pred = _predict(task, head, h)
    if task.kind == "classification":
        return macro_f1(pred, data.labels, task.n_classes)
    return rmse(pred, data.labels)


def _check_data(task: TaskKind, data: TaskData, name: str) -> None:
    if len(data) == 0:
        raise ConfigError(f"empty {name} set")
    if task.kind == "matching" and data.targets is None:
        raise ConfigError(f"matching task needs targets in the {name} set")
    if task.kind != "matching" and data.labels is None:
        raise ConfigError(f"{task.kind} task needs labels in the {name} set")


def _batch_loss_grads(ckpt, task, rows, head, batch: TaskData):
    """Loss, dL/d(prior rows) summed over the batch, and head gradients."""
    cfg, params = ckpt.config, ckpt.params
    if task.kind == "matching":
        b = len(batch)
        ids = np.concatenate([batch.inputs[0], batch.targets[0]])
        lengths = np.concatenate([batch.inputs[1], batch.targets[1]])
        h, cache = enc.forward(params, cfg, rows, ids, lengths, keep_cache=True)
        loss, dscores = enc.infonce_rows(h[:b] @ h[b:].T)
        dh = np.concatenate([dscores @ h[b:], dscores.T @ h[:b]])
        head_grads = {}
    else:
        h, cache = enc.forward(params, cfg, rows, *batch.inputs, keep_cache=True)
        out = h @ head.weight + head.bias
        n = len(h)
        if task.kind == "classification":
            shifted = out - out.max(axis=1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            loss = float(-np.mean(logp[np.arange(n), batch.labels]))
            dout = np.exp(logp)
            dout[np.arange(n), batch.labels] -= 1.0
            dout /= n
            dh = dout @ head.weight.T
            head_grads = {"weight": h.T @ dout, "bias": dout.sum(axis=0)}
        else:
            err = out - batch.labels
            loss = float(np.mean(err * err))
            dout = 2.0 * err / n
            dh = np.outer(dout, head.weight)
            head_grads = {"weight": h.T @ dout, "bias": np.asarray(dout.sum())}
    _, dprior = enc.backward(params, cfg, cache, dh)
    return loss, dprior.sum(axis=0), head_grads


def train_selection(ckpt: Checkpoint, task: TaskKind, train_set: TaskData, val_set: TaskData,
                    config: SelectionConfig = SelectionConfig()) -> SelectionResult:
    """Learn query embeddings (and a linear head) over a frozen checkpoint.

    The validation metric is computed before training and after every
    epoch; the best state is returned and training stops once ``patience``
    evaluations pass without improvement.
    """
    _check_data(task, train_set, "train")
    _check_data(task, val_set, "validation")
    d = ckpt.config.hidden
    s = config.n_queries or ckpt.config.prior_tokens
    rng = np.random.default_rng([config.seed, 11])
    queries = QueryEmbeddings(rng.normal(0.0, enc.INIT_STD, size=(s, d)))
    if task.kind == "classification":
        head = TaskHeadParams(rng.normal(0.0, enc.INIT_STD, size=(d, task.n_classes)), np.zeros(task.n_classes))
    elif task.kind == "regression":
        head = TaskHeadParams(rng.normal(0.0, enc.INIT_STD, size=d), np.asarray(float(np.mean(train_set.labels))))
    else:
        head = TaskHeadParams()

    trainable = {"q": queries.matrix}
    if head.weight is not None:
        trainable.update(weight=head.weight, bias=head.bias)
    state = OptimizerState.zeros_like(trainable)
    adam_cfg = TrainConfig()

    def unpack(tr):
        h = TaskHeadParams(tr.get("weight"), tr.get("bias"))
        return QueryEmbeddings(tr["q"]), h

    better = (lambda a, b: a > b) if task.higher_is_better else (lambda a, b: a < b)
    init_metric = evaluate_selection(ckpt, task, queries, head, val_set, config.eval_batch_size)
    best_metric, best = init_metric, copy.deepcopy(trainable)
    history = [(-1, init_metric)]
    stale = 0
    bs = config.batch_size if task.kind != "matching" else max(2, config.batch_size)
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        for i in range(0, len(order), bs):
            idx = order[i:i + bs]
            if task.kind == "matching" and len(idx) < 2:
                continue
            q, h = unpack(trainable)
            mixed = attention_mixup(q, ckpt.priors)
            loss, d_rows, head_grads = _batch_loss_grads(ckpt, task, mixed.rows, h, train_set.subset(idx))
            grads = {"q": attention_mixup_backward(ckpt.priors, mixed, d_rows), **head_grads}
            trainable, state = adam_step(trainable, grads, state, adam_cfg, config.lr)
        q, h = unpack(trainable)
        metric = evaluate_selection(ckpt, task, q, h, val_set, config.eval_batch_size)
        history.append((epoch, metric))
        log.info("selection epoch %d: val %.4f", epoch, metric)
        if better(metric, best_metric):
            best_metric, best, stale = metric, copy.deepcopy(trainable), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    q, h = unpack(best)
    return SelectionResult(q, h, best_metric, init_metric, history)


def read_task_file(path, task_kind: str) -> list[tuple]:
    """Parse ``id<TAB>value`` lines: a positive node id for matching, a class
    index for classification, a real target for regression."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise MultiplexError(f"{path}:{lineno}: expected two tab-separated fields")
            try:
                value = float(parts[1]) if task_kind == "regression" else int(parts[1])
                rows.append((int(parts[0]), value))
            except ValueError:
                raise MultiplexError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from None
    return rows


def task_data_from_rows(graph, vocab, rows: Sequence[tuple], task_kind: str, max_len: int) -> TaskData:
    from .text_pipeline import encode_corpus

    ids, lengths = encode_corpus(vocab, graph.texts, max_len)
    src = graph.positions([r[0] for r in rows])
    if task_kind == "matching":
        dst = graph.positions([r[1] for r in rows])
        return TaskData((ids[src], lengths[src]), targets=(ids[dst], lengths[dst]))
    dtype = np.float64 if task_kind == "regression" else np.int64
    return TaskData((ids[src], lengths[src]), labels=np.array([r[1] for r in rows], dtype=dtype))
