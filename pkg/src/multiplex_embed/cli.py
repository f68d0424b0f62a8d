"""Command-line entry points: train, eval, infer, select, analyze-shift.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import encoder as enc
from .checkpoint import Checkpoint
from .errors import ConfigError, MultiplexError
from .eval_harness import relation_prec_at_1
from .graph_store import (format_matrix, induced_subgraph, load_graph, load_graph_dir,
                          shift_matrix, split_edges)
from .task_head import (SelectionConfig, TaskKind, attention_mixup, evaluate_selection, format_report,
                        read_task_file, relation_weight_report, task_data_from_rows, train_selection)
from .text_pipeline import build_vocabulary, encode_text
from .trainer import RelationWeights, TrainConfig, train

log = logging.getLogger("multiplex_embed")

ENCODER_KEYS = {"layers": int, "hidden": int, "heads": int, "ffn": int, "prior_tokens": int,
                "max_positions": int}
TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
OTHER_KEYS = {"graph": str, "nodes": str, "out_dir": str, "vocab_min_freq": int, "vocab_max_size": int,
              "weights": str, "holdout_fraction": float, "split_seed": int, "shared_prior": bool,
              "max_edges_per_relation": int}
_CASTS = {"int": int, "float": float, "str": str, "int | None": int}


class UsageError(ConfigError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _cast(key: str, value: str):
    if key.startswith("edges."):
        return value
    if key in ENCODER_KEYS:
        kind = ENCODER_KEYS[key]
    elif key in OTHER_KEYS:
        kind = OTHER_KEYS[key]
    elif key in TRAIN_KEYS:
        kind = _CASTS.get(TRAIN_KEYS[key], float)
    else:
        raise UsageError(f"unknown config key: {key}")
    try:
        if kind is bool:
            return _parse_bool(value)
        return kind(value)
    except ValueError:
        raise UsageError(f"bad value for {key}: {value!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{source}:{lineno}: expected key=value")
        key = key.strip()
        _cast(key, value.strip())
        out[key] = value.strip()
    return out


def build_run_config(config_path, overrides) -> tuple[dict, dict[str, str], dict[str, str]]:
    path = Path(config_path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    file_values = parse_config_text(path.read_text(encoding="utf-8"), str(path))
    flag_values = parse_config_text("\n".join(overrides or ()), "--set")
    raw = {**file_values, **flag_values}
    typed = {k: _cast(k, v) for k, v in raw.items()}
    base = path.parent
    for key in ["graph", "nodes"] + [k for k in typed if k.startswith("edges.")]:
        if key in typed:
            p = Path(typed[key])
            typed[key] = p if p.is_absolute() else base / p
            if not typed[key].exists():
                raise UsageError(f"path for {key} does not exist: {typed[key]}")
    if "graph" not in typed and "nodes" not in typed:
        raise UsageError("config must name a graph directory (graph=) or nodes= and edges.<name>= files")
    return typed, file_values, flag_values


def _load_graph_from_config(cfg: dict):
    kwargs = {}
    if "max_edges_per_relation" in cfg:
        kwargs["max_edges_per_relation"] = cfg["max_edges_per_relation"]
    if "graph" in cfg:
        return load_graph_dir(cfg["graph"], **kwargs)
    edges = {k[len("edges."):]: v for k, v in cfg.items() if k.startswith("edges.")}
    return load_graph(cfg["nodes"], edges, **kwargs)


def _require(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise UsageError(f"no such file or directory: {p}")


def cmd_train(args) -> int:
    cfg, file_values, flag_values = build_run_config(args.config, args.set)
    out_dir = Path(args.out or cfg.get("out_dir") or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    graph = _load_graph_from_config(cfg)
    holdout = cfg.get("holdout_fraction", 0.0)
    split_seed = cfg.get("split_seed", 0)
    train_graph = split_edges(graph, holdout, split_seed)[0] if holdout > 0 else graph
    vocab = build_vocabulary(graph.texts, cfg.get("vocab_min_freq", 1), cfg.get("vocab_max_size", 30000))
    vocab.save(out_dir / "vocab.tsv")
    tc = TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS if k in cfg})
    enc_kwargs = {k: cfg[k] for k in ENCODER_KEYS if k in cfg}
    enc_kwargs.setdefault("max_positions", max(261, tc.max_len + enc_kwargs.get("prior_tokens", 5)))
    ec = enc.EncoderConfig(vocab_size=len(vocab), dropout=tc.dropout, **enc_kwargs)
    if "weights" in cfg:
        weights = RelationWeights(tuple(float(w) for w in cfg["weights"].split(",")))
    else:
        weights = RelationWeights.uniform(len(graph.relations))
    manifest = ("#manifest\tfile:" + ";".join(f"{k}={v}" for k, v in file_values.items())
                + "\tflags:" + ";".join(f"{k}={v}" for k, v in flag_values.items()))
    train(train_graph, vocab, ec, tc, weights, out_dir / "checkpoint.bin",
          shared_prior=cfg.get("shared_prior", False), log_path=out_dir / "train.log",
          log_header=[manifest], extra={"holdout_fraction": holdout, "split_seed": split_seed})
    print(f"checkpoint\t{out_dir / 'checkpoint.bin'}")
    return 0


def cmd_eval(args) -> int:
    if args.batch_size < 2:
        raise UsageError("--batch-size must be at least 2")
    _require(args.checkpoint, args.graph)
    ckpt = Checkpoint.load(args.checkpoint)
    names = args.relation.split(",") if args.relation else list(ckpt.relation_names)
    for name in names:
        ckpt.relation_index(name)
    graph = load_graph_dir(args.graph)
    holdout = args.holdout_fraction if args.holdout_fraction is not None else ckpt.extra.get("holdout_fraction", 0.2)
    split_seed = args.split_seed if args.split_seed is not None else ckpt.extra.get("split_seed", 0)
    test_graph = split_edges(graph, holdout, split_seed)[1] if holdout > 0 else graph
    values = []
    for name in names:
        pairs = test_graph.edge_array(name)
        value = relation_prec_at_1(ckpt, test_graph, name, pairs, args.batch_size, split_seed)
        values.append(value)
        if len(names) > 1:
            print(f"PREC@1/{name}\t{value:.6f}")
    print(f"PREC@1\t{float(np.mean(values)):.6f}")
    return 0


def cmd_infer(args) -> int:
    _require(args.checkpoint, args.nodes_file)
    ckpt = Checkpoint.load(args.checkpoint)
    rel = ckpt.relation_index(args.relation)
    if args.nodes_file:
        rows = []
        with open(args.nodes_file, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line:
                    idx, _, text = line.partition("\t")
                    rows.append((idx, text))
    else:
        rows = [(str(i), t) for i, t in enumerate(args.text or [])]
    if not rows:
        raise UsageError("give --text or --nodes-file")
    out = open(args.out, "w", encoding="utf-8", newline="\n") if args.out else sys.stdout
    try:
        for idx, text in rows:
            seq = encode_text(ckpt.vocab, text, ckpt.max_len)
            h = enc.encode_conditioned(ckpt.params, ckpt.config, ckpt.priors, rel, seq)
            out.write(idx + "\t" + "\t".join(f"{x:.9g}" for x in h) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_select(args) -> int:
    _require(args.checkpoint, args.graph, args.train, args.val, args.test)
    ckpt = Checkpoint.load(args.checkpoint)
    graph = load_graph_dir(args.graph)
    kind = args.task_kind
    splits = {name: read_task_file(getattr(args, name), kind) for name in ("train", "val", "test")}
    if kind == "classification":
        n_classes = args.num_classes or 1 + max(v for rows in splits.values() for _, v in rows)
    else:
        n_classes = 0
    task = TaskKind(kind, n_classes)
    data = {name: task_data_from_rows(graph, ckpt.vocab, rows, kind, ckpt.max_len) for name, rows in splits.items()}
    sc = SelectionConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, patience=args.patience,
                         eval_batch_size=args.eval_batch_size, seed=args.seed)
    res = train_selection(ckpt, task, data["train"], data["val"], sc)
    metric = evaluate_selection(ckpt, task, res.queries, res.head, data["test"], sc.eval_batch_size)
    label = {"matching": "PREC@1", "classification": "Macro-F1", "regression": "RMSE"}[kind]
    report = relation_weight_report(attention_mixup(res.queries, ckpt.priors),
                                    _group_names(ckpt))
    if args.report:
        Path(args.report).write_text(format_report(report), encoding="utf-8")
    print(f"{label}\t{metric:.6f}")
    return 0


def _group_names(ckpt: Checkpoint) -> list[str]:
    groups: dict[int, list[str]] = {}
    for name, g in zip(ckpt.relation_names, ckpt.prior_groups):
        groups.setdefault(g, []).append(name)
    return ["+".join(groups[g]) for g in sorted(groups)]


def cmd_analyze_shift(args) -> int:
    _require(args.graph)
    graph = load_graph_dir(args.graph)
    if args.subsample is not None:
        if args.subsample > graph.n_nodes:
            raise UsageError(f"--subsample {args.subsample} exceeds |V|={graph.n_nodes}")
        graph = induced_subgraph(graph, args.subsample, args.seed)
    text = format_matrix(graph.relation_names, shift_matrix(graph))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multiplex-embed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train encoder and relation priors")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out in-batch PREC@1")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph", required=True, help="graph directory")
    p.add_argument("--relation", help="comma-separated relation names (default: all)")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--holdout-fraction", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="export relation-conditioned embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--relation", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--text", action="append")
    g.add_argument("--nodes-file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("select", help="learn to select source relations for a task")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--task-kind", required=True, choices=["matching", "classification", "regression"])
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--report")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--eval-batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("analyze-shift", help="Jaccard overlap matrix between relations")
    p.add_argument("--graph", required=True)
    p.add_argument("--subsample", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze_shift)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: usage errors exit 2, --help exits 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MultiplexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
