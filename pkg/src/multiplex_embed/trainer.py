"""Multi-relation contrastive training with Adam, clipping and warm-up."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import encoder as enc
from .checkpoint import Checkpoint
from .errors import ConfigError, NonFiniteError
from .graph_store import MultiplexGraph, sample_positive_pairs
from .text_pipeline import Vocabulary, encode_corpus

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RelationWeights:
    """One non-negative loss weight per relation, in relation order."""

    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ConfigError("relation weights must be finite and non-negative")
        object.__setattr__(self, "values", vals)

    @classmethod
    def uniform(cls, n: int) -> "RelationWeights":
        return cls((1.0,) * n)

    def __getitem__(self, i: int) -> float:
        return self.values[i]

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; the reference hyper-parameters (lr 5e-5, batch 512,
    40 epochs) target a much larger pretrained encoder."""

    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    warmup_epochs: float = 3
    dropout: float = 0.1
    seed: int = 0
    prior_init: str = "normal"
    max_len: int = 32
    cycles_per_epoch: int | None = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.lr <= 0 or self.clip_norm <= 0 or self.adam_eps <= 0:
            raise ConfigError("learning rate, clip norm and adam_eps must be > 0")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.warmup_epochs > max(self.epochs, 0):
            raise ConfigError("need 0 <= warmup_epochs <= epochs")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "OptimizerState":
        return cls(0, {k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})


def infonce_in_batch(scores) -> float:
    """Mean over rows of -log softmax(row)[diagonal], max-shifted for stability."""
    return enc.infonce_rows(np.asarray(scores, dtype=np.float64))[0]


def multi_relation_loss(per_relation_losses: Mapping, weights) -> float:
    total = 0.0
    for key, loss in per_relation_losses.items():
        try:
            w = weights[key]
        except (KeyError, IndexError):
            raise ConfigError(f"missing weight for relation {key!r}") from None
        total += float(w) * float(loss)
    return total


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))


def clip_gradient_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return dict(grads)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState,
              config: TrainConfig, lr: float) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update; returns new params and state."""
    step = state.step + 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1**step, 1.0 - b2**step
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_params[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        new_m[k], new_v[k] = m, v
    return new_params, OptimizerState(step, new_m, new_v)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, peak: float) -> float:
    """Linear ramp 0 -> peak over warm-up, then linear decay to 0 at ``total_steps``."""
    if step < warmup_steps:
        return peak * step / warmup_steps
    if total_steps <= warmup_steps:
        return peak
    return peak * max(0.0, (total_steps - step) / (total_steps - warmup_steps))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[tuple[int, str, float]]
    initial_losses: dict[str, float]

    def epoch_losses(self, epoch: int) -> dict[str, float]:
        return {name: loss for e, name, loss in self.history if e == epoch}


def format_log(history: Sequence[tuple[int, str, float]]) -> str:
    return "".join(f"{e}\t{name}\t{loss:.6f}\n" for e, name, loss in history)


def train(graph: MultiplexGraph, vocab: Vocabulary, encoder_config: enc.EncoderConfig,
          train_config: TrainConfig, weights: RelationWeights | None = None, out_path=None, *,
          relations: Sequence | None = None, shared_prior: bool = False,
          log_path=None, log_header: Sequence[str] = (), extra: dict | None = None) -> TrainResult:
    """Train the shared encoder and relation priors on every relation at once.

    Each epoch runs ``cycles_per_epoch`` round-robin cycles; a cycle draws
    one in-batch-negative batch per active relation and takes one Adam step
    on it. ``relations`` restricts training to a subset (the remaining
    prior rows stay at their initial values). ``shared_prior`` ties every
    relation to a single prior row group, which turns the model into a
    single-embedding ablation.
    """
    n_rel = len(graph.relations)
    weights = weights or RelationWeights.uniform(n_rel)
    if len(weights) != n_rel:
        raise ConfigError(f"need {n_rel} relation weights, got {len(weights)}")
    tc = train_config
    config = replace(encoder_config, dropout=tc.dropout)
    if config.vocab_size != len(vocab):
        raise ConfigError("encoder vocab_size does not match vocabulary")
    if tc.max_len + config.prior_tokens > config.max_positions:
        raise ConfigError("max_len + prior tokens exceeds max_positions")

    wanted = [graph.relation(r).id for r in relations] if relations is not None else list(range(n_rel))
    active = []
    for r in wanted:
        if len(graph.edges[r]) < tc.batch_size:
            log.warning("skipping relation %s: %d edges < batch size %d",
                        graph.relations[r].name, len(graph.edges[r]), tc.batch_size)
        else:
            active.append(r)
    if not active:
        raise ConfigError("no relation has enough edges for one batch")

    n_groups = 1 if shared_prior else n_rel
    groups = [0] * n_rel if shared_prior else list(range(n_rel))
    params, priors = enc.init_params(config, n_groups, tc.seed, tc.prior_init)
    ids_all, len_all = encode_corpus(vocab, graph.texts, tc.max_len)

    cycles = tc.cycles_per_epoch or max(1, max(math.ceil(len(graph.edges[r]) / tc.batch_size) for r in active))
    total_steps = tc.epochs * cycles * len(active)
    warmup_steps = int(round(tc.warmup_epochs * cycles * len(active)))

    def batch_arrays(r, epoch, cycle):
        pairs = sample_positive_pairs(graph, r, tc.batch_size, [tc.seed, epoch, cycle, r])
        src = graph.positions([p.src for p in pairs])
        dst = graph.positions([p.dst for p in pairs])
        return (ids_all[src], len_all[src]), (ids_all[dst], len_all[dst])

    trainable = dict(params)
    trainable["priors"] = priors.table
    state = OptimizerState.zeros_like(trainable)

    # step-0 loss per relation: initial parameters, the relation's first batch
    # and the dropout draw its first update will use
    initial = {}
    for i, r in enumerate(active):
        src, dst = batch_arrays(r, 0, 0)
        rng = np.random.default_rng([tc.seed, 7, i])
        loss, *_ = enc.contrastive_step(params, config, priors.table[groups[r]], priors.table[groups[r]],
                                        src, dst, 1.0, rng)
        initial[graph.relations[r].name] = loss

    history: list[tuple[int, str, float]] = []
    step = 0
    for epoch in range(tc.epochs):
        sums = {r: 0.0 for r in active}
        for cycle in range(cycles):
            for r in active:
                src, dst = batch_arrays(r, epoch, cycle)
                g = groups[r]
                rows = trainable["priors"][g]
                params_only = {k: v for k, v in trainable.items() if k != "priors"}
                rng = np.random.default_rng([tc.seed, 7, step])
                loss, grads, dps, dpd, _ = enc.contrastive_step(
                    params_only, config, rows, rows, src, dst, weights[r], rng)
                if not math.isfinite(loss):
                    raise NonFiniteError(f"non-finite loss at step {step} (relation {graph.relations[r].name})")
                prior_grad = np.zeros_like(trainable["priors"])
                prior_grad[g] = dps + dpd
                grads["priors"] = prior_grad
                grads = clip_gradient_norm(grads, tc.clip_norm)
                lr = lr_schedule(step, total_steps, warmup_steps, tc.lr)
                trainable, state = adam_step(trainable, grads, state, tc, lr)
                sums[r] += loss
                step += 1
        for r in active:
            history.append((epoch, graph.relations[r].name, sums[r] / cycles))
        log.info("epoch %d: %s", epoch, {graph.relations[r].name: round(sums[r] / cycles, 4) for r in active})

    table = trainable.pop("priors")
    ckpt = Checkpoint(config, trainable, enc.RelationPriorTable(table, tc.prior_init),
                      graph.relation_names, vocab, tc.max_len, groups, dict(extra or {}))
    if out_path is not None:
        ckpt.save(out_path)
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
            for line in log_header:
                fh.write(line.rstrip("\n") + "\n")
            fh.write(format_log(history))
    return TrainResult(ckpt, history, initial)
