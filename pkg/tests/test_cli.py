import subprocess
import sys

import numpy as np
import pytest

from multiplex_embed.checkpoint import Checkpoint
from multiplex_embed.cli import main, parse_config_text
from multiplex_embed.errors import ConfigError
from multiplex_embed.graph_store import save_graph_dir

CONFIG = """\
# toy run
graph = graph
max_len = 12
max_positions = 15
layers = 1
hidden = 16
heads = 2
ffn = 32
prior_tokens = 3
epochs = 2
warmup_epochs = 0
batch_size = 8
holdout_fraction = 0.25
split_seed = 1
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, small_factor_graph):
    root = tmp_path_factory.mktemp("cli")
    save_graph_dir(small_factor_graph.graph, root / "graph")
    (root / "run.cfg").write_text(CONFIG)
    g = small_factor_graph.graph
    edges = g.edge_array("r0")
    for name, chunk in (("train", edges[:40]), ("val", edges[40:60]), ("test", edges[60:100])):
        (root / f"{name}.tsv").write_text("".join(f"{a}\t{b}\n" for a, b in chunk))
    ids = g.node_ids.tolist()
    (root / "one_class.tsv").write_text("".join(f"{i}\t0\n" for i in ids[:20]))
    assert main(["train", "--config", str(root / "run.cfg"), "--out", str(root / "run")]) == 0
    return root


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_train_outputs(workdir):
    run_dir = workdir / "run"
    assert {p.name for p in run_dir.iterdir()} >= {"checkpoint.bin", "vocab.tsv", "train.log"}
    ck = Checkpoint.load(run_dir / "checkpoint.bin")
    assert ck.extra == {"holdout_fraction": 0.25, "split_seed": 1}
    log = (run_dir / "train.log").read_text().splitlines()
    assert log[0].startswith("#manifest\tfile:graph=graph;max_len=12")
    assert log[0].endswith("\tflags:")
    assert len(log) == 1 + 2 * 3


def test_train_is_byte_deterministic(workdir, capsys):
    code, _, _ = run(capsys, "train", "--config", workdir / "run.cfg", "--out", workdir / "again")
    assert code == 0
    assert (workdir / "again/checkpoint.bin").read_bytes() == (workdir / "run/checkpoint.bin").read_bytes()
    assert (workdir / "again/train.log").read_bytes() == (workdir / "run/train.log").read_bytes()


def test_flag_overrides_file(workdir, capsys):
    code, _, _ = run(capsys, "train", "--config", workdir / "run.cfg", "--set", "epochs=1",
                     "--set", "seed=3", "--out", workdir / "over")
    assert code == 0
    log = (workdir / "over/train.log").read_text().splitlines()
    assert log[0].endswith("\tflags:epochs=1;seed=3")
    assert len(log) == 1 + 3


def test_missing_config_is_usage_error(capsys):
    code, _, err = run(capsys, "train")
    assert code == 2
    assert "usage:" in err and "--config" in err


def test_unknown_key(workdir, capsys):
    code, _, err = run(capsys, "train", "--config", workdir / "run.cfg", "--set", "learning_rate=0.1")
    assert code == 2
    assert "learning_rate" in err


def test_missing_path_in_config(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("graph=nowhere\n")
    code, _, err = run(capsys, "train", "--config", tmp_path / "c.cfg")
    assert code == 2 and "nowhere" in err


def test_config_parser():
    with pytest.raises(ConfigError):
        parse_config_text("epochs 3\n")
    assert parse_config_text("# c\n\nepochs=3\nedges.cites=x.tsv\n") == {"epochs": "3", "edges.cites": "x.tsv"}


def test_eval_prints_metric_and_is_deterministic(workdir, capsys):
    args = ["eval", "--checkpoint", workdir / "run/checkpoint.bin", "--graph", workdir / "graph",
            "--relation", "r1", "--batch-size", "8"]
    code, out1, _ = run(capsys, *args)
    _, out2, _ = run(capsys, *args)
    assert code == 0 and out1 == out2
    name, value = out1.strip().split("\t")
    assert name == "PREC@1" and 0.0 <= float(value) <= 1.0


def test_eval_errors(workdir, capsys):
    base = ["eval", "--checkpoint", workdir / "run/checkpoint.bin", "--graph", workdir / "graph"]
    code, _, err = run(capsys, *base, "--relation", "r0,venue")
    assert code == 2 and "r0, r1, r2" in err
    code, _, _ = run(capsys, *base, "--batch-size", "1")
    assert code == 2


def test_infer_rows(workdir, capsys, tmp_path):
    ck = workdir / "run/checkpoint.bin"
    code, out, _ = run(capsys, "infer", "--checkpoint", ck, "--relation", "r0", "--text", "f0c1 w3")
    assert code == 0
    fields = out.rstrip("\n").split("\t")
    assert len(fields) == 16 + 1
    code, out, _ = run(capsys, "infer", "--checkpoint", ck, "--relation", "r0", "--text", "")
    assert code == 0 and len(out.split("\t")) == 17
    a = tmp_path / "a.tsv"
    b = tmp_path / "b.tsv"
    run(capsys, "infer", "--checkpoint", ck, "--relation", "r0", "--text", "f0c1 f1c2 w3", "--out", a)
    run(capsys, "infer", "--checkpoint", ck, "--relation", "r2", "--text", "f0c1 f1c2 w3", "--out", b)
    va = np.array(a.read_text().split("\t")[1:], dtype=float)
    vb = np.array(b.read_text().split("\t")[1:], dtype=float)
    assert np.max(np.abs(va - vb)) > 1e-6


def test_infer_nodes_file(workdir, capsys, tmp_path):
    out = tmp_path / "emb.tsv"
    code, _, _ = run(capsys, "infer", "--checkpoint", workdir / "run/checkpoint.bin", "--relation", "r1",
                     "--nodes-file", workdir / "graph/nodes.tsv", "--out", out)
    assert code == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 60
    assert all(len(r.split("\t")) == 17 for r in rows)


def test_select_writes_report(workdir, capsys):
    args = ["select", "--checkpoint", workdir / "run/checkpoint.bin", "--graph", workdir / "graph",
            "--task-kind", "matching", "--train", workdir / "train.tsv", "--val", workdir / "val.tsv",
            "--test", workdir / "test.tsv", "--report", workdir / "report.tsv", "--epochs", "2",
            "--batch-size", "8", "--eval-batch-size", "8", "--lr", "0.03"]
    code, out1, _ = run(capsys, *args)
    report1 = (workdir / "report.tsv").read_text()
    code2, out2, _ = run(capsys, *args)
    assert code == code2 == 0
    assert out1 == out2 and report1 == (workdir / "report.tsv").read_text()
    assert out1.startswith("PREC@1\t")
    weights = {k: float(v) for k, v in (line.split("\t") for line in report1.splitlines())}
    assert list(weights) == ["r0", "r1", "r2"]
    assert sum(weights.values()) == pytest.approx(1.0, abs=1e-5)  # six printed decimals


def test_select_single_class_is_usage_error(workdir, capsys):
    f = workdir / "one_class.tsv"
    code, _, err = run(capsys, "select", "--checkpoint", workdir / "run/checkpoint.bin", "--graph",
                       workdir / "graph", "--task-kind", "classification", "--train", f, "--val", f, "--test", f)
    assert code == 2 and "2 classes" in err


def test_analyze_shift(workdir, capsys, tmp_path):
    out_a, out_b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    for out in (out_a, out_b):
        assert run(capsys, "analyze-shift", "--graph", workdir / "graph", "--subsample", 40, "--seed", 2,
                   "--out", out)[0] == 0
    assert out_a.read_bytes() == out_b.read_bytes()
    lines = out_a.read_text().splitlines()
    assert lines[0] == "r0\tr1\tr2"
    assert [lines[i + 1].split("\t")[i] for i in range(3)] == ["1.000000"] * 3
    code, _, err = run(capsys, "analyze-shift", "--graph", workdir / "graph", "--subsample", 61)
    assert code == 2 and "exceeds" in err


def test_runtime_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "ck.bin"
    bad.write_bytes(b"garbage")
    code, _, err = run(capsys, "infer", "--checkpoint", bad, "--relation", "r0", "--text", "x")
    assert code == 1 and err.startswith("error:")


def test_module_entry_point(workdir):
    proc = subprocess.run([sys.executable, "-m", "multiplex_embed", "analyze-shift", "--graph",
                           str(workdir / "graph")], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[0] == "r0\tr1\tr2"
