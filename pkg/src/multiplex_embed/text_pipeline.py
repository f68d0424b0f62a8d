"""Vocabulary construction and fixed-length token encoding."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError

PAD, CLS, UNK = 0, 1, 2
RESERVED = ("[PAD]", "[CLS]", "[UNK]")

_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation (underscores included)."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:3] != RESERVED:
            raise ConfigError("vocabulary must start with the reserved tokens")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})
        if len(self._index) != len(self.tokens):
            raise ConfigError("vocabulary tokens must be unique")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, tok in enumerate(self.tokens):
                fh.write(f"{i}\t{tok}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                line = line.rstrip("\n")
                if not line:
                    continue
                idx, _, tok = line.partition("\t")
                if int(idx) != lineno:
                    raise ConfigError(f"{path}: ids must be dense, got {idx} on line {lineno + 1}")
                tokens.append(tok)
        return cls(tuple(tokens))


def build_vocabulary(corpus: Iterable[str], min_freq: int = 1, max_size: int = 30000) -> Vocabulary:
    """Build a frequency-ordered vocabulary.

    Tokens with count >= ``min_freq`` are ranked by descending count, ties
    broken lexicographically, and truncated so the total size including the
    three reserved tokens is at most ``max_size``.
    """
    if max_size < 3:
        raise ConfigError("max_size must leave room for the 3 reserved tokens")
    counts: Counter[str] = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        counts.update(tokenize(text))
    if n_docs == 0:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(RESERVED + tuple(kept[: max_size - 3]))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    attn_len: int

    def __post_init__(self):
        if not self.ids or self.ids[0] != CLS:
            raise ConfigError("token sequence must start with CLS")
        if not 1 <= self.attn_len <= len(self.ids):
            raise ConfigError("attn_len out of range")

    @property
    def max_len(self) -> int:
        return len(self.ids)


def encode_text(vocab: Vocabulary, text: str, max_len: int = 32) -> TokenSequence:
    """CLS + token ids, prefix-truncated to ``max_len`` and right-padded with PAD."""
    if max_len < 2:
        raise ConfigError("max_len must be at least 2")
    body = [vocab.id_of(t) for t in tokenize(text)][: max_len - 1]
    ids = [CLS] + body
    attn_len = len(ids)
    ids.extend([PAD] * (max_len - attn_len))
    return TokenSequence(tuple(ids), attn_len)


def detokenize(vocab: Vocabulary, seq: TokenSequence) -> list[str]:
    return [vocab.tokens[i] for i in seq.ids[1 : seq.attn_len]]


def stack_sequences(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Pack sequences of equal ``max_len`` into (ids, lengths) arrays."""
    if not seqs:
        raise ConfigError("no sequences to stack")
    width = seqs[0].max_len
    if any(s.max_len != width for s in seqs):
        raise ConfigError("all sequences in a batch must share max_len")
    ids = np.array([s.ids for s in seqs], dtype=np.int64)
    lengths = np.array([s.attn_len for s in seqs], dtype=np.int64)
    return ids, lengths


def encode_corpus(vocab: Vocabulary, texts: Sequence[str], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    return stack_sequences([encode_text(vocab, t, max_len) for t in texts])
