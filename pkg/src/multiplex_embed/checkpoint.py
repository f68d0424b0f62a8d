"""Binary checkpoint of named arrays plus JSON metadata.

Layout::

    b"MXEMB01\\n" | uint64 header length | JSON header | raw array bytes

The header lists each array's name, dtype, shape and byte offset. Arrays
are written little-endian, C-ordered, in the order given. No timestamps or
environment data are stored, so saving the same state twice yields the
same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .encoder import EncoderConfig, EncoderParams, RelationPriorTable
from .errors import ConfigError, MultiplexError
from .text_pipeline import Vocabulary

MAGIC = b"MXEMB01\n"


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)  # not ascontiguousarray: that turns 0-d arrays into 1-d
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes(order="C")
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise MultiplexError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", data, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + hlen])
    body = start + hlen
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(data, dtype=dt, count=count, offset=body + e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
    return arrays, header["meta"]


@dataclass
class Checkpoint:
    """Trained encoder, prior table and everything needed to re-encode text.

    ``prior_groups[i]`` is the row group of the prior table used for
    relation ``relation_names[i]``; it is the identity except for models
    trained with one prior shared across relations.
    """

    config: EncoderConfig
    params: EncoderParams
    priors: RelationPriorTable
    relation_names: list[str]
    vocab: Vocabulary
    max_len: int = 32
    prior_groups: list[int] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.prior_groups:
            self.prior_groups = list(range(len(self.relation_names)))

    def relation_index(self, relation) -> int:
        """Row group of the prior table for a relation given by name or index."""
        if isinstance(relation, str):
            if relation not in self.relation_names:
                raise ConfigError(f"unknown relation {relation!r}; available: {', '.join(self.relation_names)}")
            relation = self.relation_names.index(relation)
        if not 0 <= int(relation) < len(self.relation_names):
            raise ConfigError(f"unknown relation {relation!r}; available: {', '.join(self.relation_names)}")
        return self.prior_groups[int(relation)]

    def prior_rows(self, relation) -> np.ndarray:
        return self.priors.rows(self.relation_index(relation))

    def save(self, path) -> None:
        arrays = dict(self.params)
        arrays["priors"] = self.priors.table
        meta = {
            "config": {k: v for k, v in self.config.__dict__.items()},
            "prior_init": self.priors.init_mode,
            "relation_names": list(self.relation_names),
            "prior_groups": list(self.prior_groups),
            "vocab": list(self.vocab.tokens),
            "max_len": self.max_len,
            "extra": self.extra,
        }
        save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise MultiplexError(f"missing checkpoint: {path}")
        arrays, meta = load_arrays(path)
        table = arrays.pop("priors")
        return cls(
            config=EncoderConfig(**meta["config"]),
            params=arrays,
            priors=RelationPriorTable(table, meta["prior_init"]),
            relation_names=list(meta["relation_names"]),
            vocab=Vocabulary(tuple(meta["vocab"])),
            max_len=int(meta["max_len"]),
            prior_groups=list(meta["prior_groups"]),
            extra=dict(meta.get("extra", {})),
        )

    def frozen_digest(self) -> str:
        """SHA-256 over the serialized encoder parameters and prior table."""
        h = hashlib.sha256()
        for name, arr in list(self.params.items()) + [("priors", self.priors.table)]:
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()
