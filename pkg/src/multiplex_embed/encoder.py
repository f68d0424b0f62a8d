"""Shared transformer encoder conditioned on relation prior tokens.

The input stream for a document with ``p`` tokens and ``s`` prior rows is::

    [prior_1 .. prior_s, CLS + pos_0, tok_1 + pos_1, ..., tok_{p-1} + pos_{p-1}]

Priors carry no position embedding. Blocks are pre-layer-norm with GELU
feed-forward layers, PAD keys are masked out of attention, and the output
is the final layer-normed hidden state at the CLS position (index ``s``).

Forward and backward passes are written out by hand in numpy; the backward
pass returns exact gradients for every encoder tensor and for the prior
rows that were fed in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, NonFiniteError
from .text_pipeline import TokenSequence, stack_sequences

INIT_STD = 0.02
LN_EPS = 1e-5
PRIOR_INIT_MODES = ("zero", "normal", "word")

EncoderParams = dict  # name -> np.ndarray, insertion order is canonical


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    layers: int = 2
    hidden: int = 32
    heads: int = 4
    ffn: int = 64
    max_positions: int = 261
    prior_tokens: int = 5
    dropout: float = 0.1
    prior_dim: int | None = None

    def __post_init__(self):
        for name in ("vocab_size", "layers", "hidden", "heads", "ffn", "max_positions", "prior_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide hidden dim ({self.hidden})")
        if self.prior_dim is not None and self.prior_dim != self.hidden:
            raise ConfigError("prior dim k must equal hidden dim d")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


@dataclass
class RelationPriorTable:
    """Prior-token embeddings, shape ``(n_relations, m, d)``."""

    table: np.ndarray
    init_mode: str = "normal"

    @property
    def n_relations(self) -> int:
        return self.table.shape[0]

    def rows(self, relation: int) -> np.ndarray:
        if not 0 <= relation < self.n_relations:
            raise ConfigError(f"unknown relation index {relation}; table has {self.n_relations}")
        return self.table[relation]

    def pool(self) -> np.ndarray:
        """All prior rows flattened to ``(n_relations * m, d)``, relation-major."""
        return self.table.reshape(-1, self.table.shape[-1])

    def copy(self) -> "RelationPriorTable":
        return RelationPriorTable(self.table.copy(), self.init_mode)


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.hidden, config.ffn
    shapes = {"tok_emb": (config.vocab_size, d), "pos_emb": (config.max_positions, d)}
    for l in range(config.layers):
        p = f"layers.{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "wq": (d, d), p + "bq": (d,),
            p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,),
            p + "wo": (d, d), p + "bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "w1": (d, f), p + "b1": (f,),
            p + "w2": (f, d), p + "b2": (d,),
        })
    shapes.update({"lnf.g": (d,), "lnf.b": (d,)})
    return shapes


def encoder_param_count(config: EncoderConfig) -> int:
    """T: number of shared encoder parameters (independent of |R|)."""
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def count_trainable(params: EncoderParams, priors: RelationPriorTable) -> int:
    return sum(a.size for a in params.values()) + priors.table.size


def init_params(config: EncoderConfig, n_relations: int, seed: int, prior_init: str = "normal",
                dtype=np.float64) -> tuple[EncoderParams, RelationPriorTable]:
    """Draw encoder weights N(0, 0.02^2) and initialise the prior table.

    Layer-norm gains start at 1 and every offset/bias at 0. ``prior_init``
    selects zero rows, N(0, 0.02^2) rows, or copies of randomly chosen
    token-embedding rows.
    """
    if prior_init not in PRIOR_INIT_MODES:
        raise ConfigError(f"prior_init must be one of {PRIOR_INIT_MODES}, got {prior_init!r}")
    if n_relations < 1:
        raise ConfigError("need at least one relation")
    rng = np.random.default_rng(seed)
    params: EncoderParams = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape, dtype=dtype)
        elif leaf.startswith("b") and len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = rng.normal(0.0, INIT_STD, size=shape).astype(dtype)
    m, d = config.prior_tokens, config.hidden
    prior_rng = np.random.default_rng([seed, 1])
    if prior_init == "zero":
        table = np.zeros((n_relations, m, d), dtype=dtype)
    elif prior_init == "normal":
        table = prior_rng.normal(0.0, INIT_STD, size=(n_relations, m, d)).astype(dtype)
    else:
        # skip PAD/CLS/UNK when the vocabulary has real words to copy
        lo = 3 if config.vocab_size > 3 else 0
        picks = prior_rng.integers(lo, config.vocab_size, size=(n_relations, m))
        table = params["tok_emb"][picks].copy()
    return params, RelationPriorTable(table, prior_init)


# ---------------------------------------------------------------------------
# elementary layers
# ---------------------------------------------------------------------------

_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_backward(dy, g, cache):
    xhat, rstd = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _outer(a, b):
    """Sum over batch and positions of a^T b for (N, T, i) and (N, T, j) inputs."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _dropout_mask(rng, shape, rate, dtype):
    if rng is None or rate == 0.0:
        return None
    return ((rng.random(shape) >= rate) / (1.0 - rate)).astype(dtype)


@dataclass
class ForwardCache:
    n_prior: int
    ids: np.ndarray
    key_mask: np.ndarray
    emb_mask: np.ndarray | None
    layers: list = field(default_factory=list)
    final: tuple | None = None
    final_x: np.ndarray | None = None

    def attention_shapes(self) -> list[tuple[int, ...]]:
        return [c["attn"].shape for c in self.layers]


def forward(params: EncoderParams, config: EncoderConfig, prior_rows: np.ndarray,
            ids: np.ndarray, lengths: np.ndarray, *, dropout_rng=None,
            keep_cache: bool = False):
    """Encode a batch.

    Parameters
    ----------
    prior_rows : array, shape (s, d) or (N, s, d)
        Prior rows prepended to each sequence (broadcast when 2-D).
    ids, lengths : int arrays, shapes (N, p) and (N,)
    dropout_rng : numpy Generator or None
        Dropout is active only when a generator is supplied.

    Returns
    -------
    h : array (N, d)
        CLS-position embeddings.
    cache : ForwardCache or None
    """
    dtype = params["tok_emb"].dtype
    ids = np.asarray(ids, dtype=np.int64)
    n, p = ids.shape
    prior_rows = np.asarray(prior_rows, dtype=dtype)
    if prior_rows.ndim == 2:
        prior_rows = np.broadcast_to(prior_rows, (n,) + prior_rows.shape)
    if prior_rows.ndim != 3 or prior_rows.shape[0] != n or prior_rows.shape[2] != config.hidden:
        raise ConfigError(f"prior rows must have shape (s, {config.hidden}) or (N, s, {config.hidden})")
    s = prior_rows.shape[1]
    if s < 1:
        raise ConfigError("need at least one prior row")
    if p > config.max_positions or s + p > config.max_positions:
        raise ConfigError(f"sequence of {p} tokens plus {s} priors exceeds max_positions={config.max_positions}")
    if np.any(ids < 0) or np.any(ids >= config.vocab_size):
        raise ConfigError("token id out of vocabulary range")
    T, d, H, dh = s + p, config.hidden, config.heads, config.head_dim
    rate = config.dropout if dropout_rng is not None else 0.0

    key_mask = np.ones((n, T), dtype=bool)
    key_mask[:, s:] = np.arange(p)[None, :] < np.asarray(lengths)[:, None]

    tokens = params["tok_emb"][ids] + params["pos_emb"][:p]
    emb_mask = _dropout_mask(dropout_rng, tokens.shape, rate, dtype)
    if emb_mask is not None:
        tokens = tokens * emb_mask
    x = np.concatenate([prior_rows, tokens], axis=1)

    cache = ForwardCache(s, ids, key_mask, emb_mask) if keep_cache else None
    neg_inf = np.where(key_mask, 0.0, -np.inf).astype(dtype)[:, None, None, :]
    scale = 1.0 / np.sqrt(dh)
    for l in range(config.layers):
        pre = f"layers.{l}."
        a, ln1 = _ln_forward(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        q = (a @ params[pre + "wq"] + params[pre + "bq"]).reshape(n, T, H, dh).transpose(0, 2, 1, 3)
        k = (a @ params[pre + "wk"] + params[pre + "bk"]).reshape(n, T, H, dh).transpose(0, 2, 1, 3)
        v = (a @ params[pre + "wv"] + params[pre + "bv"]).reshape(n, T, H, dh).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale + neg_inf
        scores = scores - scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(n, T, d)
        o = ctx @ params[pre + "wo"] + params[pre + "bo"]
        m1 = _dropout_mask(dropout_rng, o.shape, rate, dtype)
        if m1 is not None:
            o = o * m1
        x = x + o

        b_in, ln2 = _ln_forward(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        u = b_in @ params[pre + "w1"] + params[pre + "b1"]
        gu, tanh_u = _gelu(u)
        f = gu @ params[pre + "w2"] + params[pre + "b2"]
        m2 = _dropout_mask(dropout_rng, f.shape, rate, dtype)
        if m2 is not None:
            f = f * m2
        x = x + f
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite activations after encoder layer {l}")
        if keep_cache:
            cache.layers.append(dict(ln1=ln1, a=a, q=q, k=k, v=v, attn=attn, ctx=ctx, m1=m1,
                                     ln2=ln2, b_in=b_in, u=u, gu=gu, tanh_u=tanh_u, m2=m2))

    h, lnf = _ln_forward(x[:, s], params["lnf.g"], params["lnf.b"])
    if keep_cache:
        cache.final = lnf
    return h, cache


def backward(params: EncoderParams, config: EncoderConfig, cache: ForwardCache,
             dh_out: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Back-propagate ``dL/dh`` (N, d) through a cached forward pass.

    Returns gradients for every encoder tensor and ``dL/dprior_rows`` with
    shape (N, s, d).
    """
    grads = {name: np.zeros_like(a) for name, a in params.items()}
    s = cache.n_prior
    n, p = cache.ids.shape
    T, d, H, dh = s + p, config.hidden, config.heads, config.head_dim
    scale = 1.0 / np.sqrt(dh)

    dcls, grads["lnf.g"], grads["lnf.b"] = _ln_backward(dh_out, params["lnf.g"], cache.final)
    dx = np.zeros((n, T, d), dtype=dh_out.dtype)
    dx[:, s] = dcls

    for l in reversed(range(config.layers)):
        pre = f"layers.{l}."
        c = cache.layers[l]
        # feed-forward branch
        df = dx if c["m2"] is None else dx * c["m2"]
        grads[pre + "w2"] = _outer(c["gu"], df)
        grads[pre + "b2"] = df.sum(axis=(0, 1))
        du = (df @ params[pre + "w2"].T) * _gelu_grad(c["u"], c["tanh_u"])
        grads[pre + "w1"] = _outer(c["b_in"], du)
        grads[pre + "b1"] = du.sum(axis=(0, 1))
        db_in = du @ params[pre + "w1"].T
        dxi, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = _ln_backward(db_in, params[pre + "ln2.g"], c["ln2"])
        dx = dx + dxi
        # attention branch
        do = dx if c["m1"] is None else dx * c["m1"]
        grads[pre + "wo"] = _outer(c["ctx"], do)
        grads[pre + "bo"] = do.sum(axis=(0, 1))
        dctx = (do @ params[pre + "wo"].T).reshape(n, T, H, dh).transpose(0, 2, 1, 3)
        attn = c["attn"]
        dattn = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
        dq = dscores @ c["k"]
        dk = dscores.transpose(0, 1, 3, 2) @ c["q"]
        a = c["a"]
        da = np.zeros_like(a)
        for tag, dz in (("q", dq), ("k", dk), ("v", dv)):
            dz = dz.transpose(0, 2, 1, 3).reshape(n, T, d)
            grads[pre + "w" + tag] = _outer(a, dz)
            grads[pre + "b" + tag] = dz.sum(axis=(0, 1))
            da += dz @ params[pre + "w" + tag].T
        # a key bias shifts every score of a query equally; softmax ignores it
        grads[pre + "bk"] = np.zeros_like(grads[pre + "bk"])
        dxi, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = _ln_backward(da, params[pre + "ln1.g"], c["ln1"])
        dx = dx + dxi

    dprior = dx[:, :s]
    dtok = dx[:, s:]
    if cache.emb_mask is not None:
        dtok = dtok * cache.emb_mask
    np.add.at(grads["tok_emb"], cache.ids, dtok)
    grads["pos_emb"][:p] = dtok.sum(axis=0)
    return grads, dprior


# ---------------------------------------------------------------------------
# public encoding API
# ---------------------------------------------------------------------------

def encode_with_prior_rows(params: EncoderParams, config: EncoderConfig, prior_rows: np.ndarray,
                           seq: TokenSequence, train_mode: bool = False,
                           dropout_seed: int | None = None) -> np.ndarray:
    """Embed one sequence with caller-supplied prior rows of shape (s, d)."""
    prior_rows = np.asarray(prior_rows)
    if prior_rows.ndim != 2 or prior_rows.shape[1] != config.hidden or prior_rows.shape[0] < 1:
        raise ConfigError(f"prior rows must have shape (s>=1, {config.hidden}), got {prior_rows.shape}")
    ids, lengths = stack_sequences([seq])
    rng = np.random.default_rng(dropout_seed) if train_mode else None
    h, _ = forward(params, config, prior_rows, ids, lengths, dropout_rng=rng)
    return h[0]


def encode_conditioned(params: EncoderParams, config: EncoderConfig, priors: RelationPriorTable,
                       relation: int, seq: TokenSequence, train_mode: bool = False,
                       dropout_seed: int | None = None) -> np.ndarray:
    """h_{v|r}: embed one sequence with relation ``relation``'s prior rows prepended."""
    return encode_with_prior_rows(params, config, priors.rows(relation), seq, train_mode, dropout_seed)


def encode_batch(params: EncoderParams, config: EncoderConfig, prior_rows: np.ndarray,
                 ids: np.ndarray, lengths: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Inference-mode embeddings for many sequences sharing the same prior rows."""
    out = [forward(params, config, prior_rows, ids[i:i + chunk], lengths[i:i + chunk])[0]
           for i in range(0, len(ids), chunk)]
    return np.concatenate(out, axis=0) if out else np.empty((0, config.hidden))


def similarity(h_i, h_j) -> float:
    h_i, h_j = np.asarray(h_i), np.asarray(h_j)
    if h_i.shape != h_j.shape:
        raise ConfigError(f"dimension mismatch: {h_i.shape} vs {h_j.shape}")
    return float(np.dot(h_i, h_j))


def infonce_rows(scores: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean in-batch InfoNCE over rows and its gradient w.r.t. ``scores``."""
    scores = np.asarray(scores)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1] or scores.shape[0] < 2:
        raise ConfigError("scores must be a square matrix with B >= 2")
    if not np.all(np.isfinite(scores)):
        raise NonFiniteError("non-finite score matrix")
    b = scores.shape[0]
    shifted = scores - scores.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - np.diag(shifted)))
    probs = np.exp(shifted - lse[:, None])
    probs[np.arange(b), np.arange(b)] -= 1.0
    return loss, probs / b


def contrastive_step(params: EncoderParams, config: EncoderConfig, src_priors: np.ndarray,
                     dst_priors: np.ndarray, src: tuple[np.ndarray, np.ndarray],
                     dst: tuple[np.ndarray, np.ndarray], weight: float = 1.0,
                     dropout_rng=None):
    """Weighted in-batch InfoNCE over aligned (src, dst) id batches.

    Both sides are encoded in a single forward pass. Returns
    ``(raw_loss, param_grads, dprior_src, dprior_dst, h)``: the loss is the
    unweighted InfoNCE while all gradients carry ``weight``; prior
    gradients are summed over the batch.
    """
    (ids_s, len_s), (ids_d, len_d) = src, dst
    b = len(ids_s)
    ids = np.concatenate([ids_s, ids_d])
    lengths = np.concatenate([len_s, len_d])
    priors = np.concatenate([np.broadcast_to(src_priors, (b,) + src_priors.shape[-2:]),
                             np.broadcast_to(dst_priors, (b,) + dst_priors.shape[-2:])])
    h, cache = forward(params, config, priors, ids, lengths, dropout_rng=dropout_rng, keep_cache=True)
    scores = h[:b] @ h[b:].T
    loss, dscores = infonce_rows(scores)
    dscores = dscores * weight
    dh = np.concatenate([dscores @ h[b:], dscores.T @ h[:b]])
    grads, dprior = backward(params, config, cache, dh)
    return loss, grads, dprior[:b].sum(axis=0), dprior[b:].sum(axis=0), h


def batch_forward_backward(params: EncoderParams, config: EncoderConfig, priors: RelationPriorTable,
                           relation: int, batch: Sequence[tuple[TokenSequence, TokenSequence]],
                           w_r: float = 1.0, dropout_seed: int | None = None):
    """Weighted in-batch InfoNCE for one relation and its exact gradients.

    Returns ``(loss, param_grads, prior_grad)`` where ``prior_grad`` has the
    full table shape and is non-zero only in row group ``relation``.
    """
    if len(batch) < 2:
        raise ConfigError("batch size must be at least 2 for in-batch negatives")
    rows = priors.rows(relation)
    src = stack_sequences([a for a, _ in batch])
    dst = stack_sequences([b for _, b in batch])
    rng = np.random.default_rng(dropout_seed) if dropout_seed is not None else None
    loss, grads, dps, dpd, _ = contrastive_step(params, config, rows, rows, src, dst, w_r, rng)
    prior_grad = np.zeros_like(priors.table)
    prior_grad[relation] = dps + dpd
    return w_r * loss, grads, prior_grad


def _loss_only(params, config, prior_rows, batch):
    src = stack_sequences([a for a, _ in batch])
    dst = stack_sequences([b for _, b in batch])
    ids = np.concatenate([src[0], dst[0]])
    lengths = np.concatenate([src[1], dst[1]])
    h, _ = forward(params, config, prior_rows, ids, lengths)
    b = len(batch)
    scores = h[:b] @ h[b:].T
    # literal -log softmax, no max shift: the oracle must not share code with infonce_rows
    e = np.exp(scores)
    return -np.mean(np.log(np.diag(e) / e.sum(axis=1)))


def check_gradients(config: EncoderConfig, seed: int, batch: Sequence[tuple[TokenSequence, TokenSequence]],
                    epsilon: float = 1e-5, dtype=np.float64, n_relations: int = 2,
                    relation: int = 0, prior_init: str = "normal") -> float:
    """Max relative error between analytic and central-difference gradients.

    Analytic gradients are computed at ``dtype``. Every encoder parameter
    and every prior entry is then perturbed by ``+-epsilon`` and the loss
    re-evaluated in extended precision (``np.longdouble``) starting from
    the exact ``dtype`` values, so the finite-difference oracle is not
    limited by the rounding noise of the precision under test. The
    relative error of an entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if config.dropout:
        config = EncoderConfig(**{**config.__dict__, "dropout": 0.0})
    params, priors = init_params(config, n_relations, seed, prior_init, dtype=dtype)
    if count_trainable(params, priors) > 10_000:
        raise ConfigError("gradient check is limited to models with at most 10,000 parameters")
    loss, grads, prior_grad = batch_forward_backward(params, config, priors, relation, batch)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss")

    wide = {k: v.astype(np.longdouble) for k, v in params.items()}
    table = priors.table.astype(np.longdouble)
    eps = np.longdouble(epsilon)

    def loss_at():
        return _loss_only(wide, config, table[relation], batch)

    worst = 0.0
    targets = [(wide[name], grads[name]) for name in wide] + [(table, prior_grad)]
    for arr, analytic in targets:
        flat, gflat = arr.reshape(-1), analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_at()
            flat[i] = orig - eps
            down = loss_at()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError("non-finite loss during finite differencing")
            numeric = float((up - down) / (2 * eps))
            a = float(gflat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
