import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from mier import nn
from mier.cli import main
from mier.core import read_labels, read_predictions


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["bench", "synth", "--n", "150", "--records", "120", "--intents", "2",
                 "--seed", "1", "--out", str(d / "bench")]) == 0
    assert main(["embed", "--records", str(d / "bench/records.jsonl"),
                 "--pairs", str(d / "bench/pairs.jsonl"),
                 "--labels", str(d / "bench/labels.jsonl"), "--dim", "32",
                 "--fields", "title", "--out", str(d / "emb")]) == 0
    return d


def test_full_command_chain(workdir, capsys):
    d = workdir
    labels = str(d / "bench/labels.jsonl")
    emb = str(d / "emb/manifest.json")
    assert main(["train-baseline", "--mode", "in-parallel", "--embeddings", emb,
                 "--labels", labels, "--epochs", "5", "--hidden", "8",
                 "--out", str(d / "m/ip.ckpt"), "--pred", str(d / "pred/in-parallel.jsonl")]) == 0
    assert main(["train-baseline", "--mode", "naive", "--embeddings", emb, "--labels", labels,
                 "--epochs", "5", "--hidden", "8", "--out", str(d / "m/naive.ckpt"),
                 "--pred", str(d / "pred/naive.jsonl")]) == 0
    naive = read_predictions(d / "pred/naive.jsonl")
    assert np.array_equal(naive[:, 0], naive[:, 1])
    assert main(["embed", "--matchers", str(d / "m/ip.ckpt"), "--embeddings", emb,
                 "--out", str(d / "reps")]) == 0
    assert main(["graph", "--embeddings", str(d / "reps/manifest.json"), "--k", "2",
                 "--out", str(d / "graph")]) == 0
    assert "300 nodes" in capsys.readouterr().out
    assert main(["train-flexer", "--graph", str(d / "graph"), "--labels", labels,
                 "--h1", "8", "--out-dim", "4", "--epochs", "5", "--out", str(d / "fx"),
                 "--pred", str(d / "pred/flexer.jsonl")]) == 0
    assert (d / "fx/intent_1.ckpt").exists()
    assert main(["train-flexer", "--graph", str(d / "graph"), "--labels", labels,
                 "--intent", "1", "--h1", "8", "--epochs", "2", "--out",
                 str(d / "fx1/one.ckpt")]) == 0
    assert main(["eval", "--pred", str(d / "pred"), "--gold", labels,
                 "--intents", str(d / "bench/intents.json"), "--out",
                 str(d / "eval/report.json")]) == 0
    rep = json.loads((d / "eval/report.json").read_text())
    assert set(rep["methods"]) == {"in-parallel", "naive", "flexer"}
    assert "residual_error" in rep["methods"]["flexer"]
    capsys.readouterr()
    assert main(["report", str(d / "eval/report.json")]) == 0
    assert "Multiple intents" in capsys.readouterr().out


def test_profile_and_sweep(workdir, capsys):
    d = workdir
    assert main(["bench", "profile", "--labels", str(d / "bench/labels.jsonl"),
                 "--intents", str(d / "bench/intents.json"), "--json"]) == 0
    rates = json.loads(capsys.readouterr().out)
    assert set(rates) == {"equivalence", "brand"}
    grid = d / "grid.yaml"
    grid.write_text(yaml.safe_dump({"h1": [6], "k": [0, 2], "layers": [2]}))
    assert main(["train-baseline", "--embeddings", str(d / "emb/manifest.json"),
                 "--labels", str(d / "bench/labels.jsonl"), "--epochs", "3", "--hidden", "8",
                 "--out", str(d / "sw/ip.ckpt")]) == 0
    assert main(["embed", "--matchers", str(d / "sw/ip.ckpt"),
                 "--embeddings", str(d / "emb/manifest.json"), "--out", str(d / "sw/reps")]) == 0
    assert main(["sweep", "--embeddings", str(d / "sw/reps/manifest.json"),
                 "--labels", str(d / "bench/labels.jsonl"), "--grid", str(grid),
                 "--epochs", "2", "--out", str(d / "sweep")]) == 0
    rep = json.loads((d / "sweep/sweep.json").read_text())
    assert len(rep["grid"]) == 4 and set(rep["best"]) == {"0", "1"}


def test_bench_build(tmp_path):
    (tmp_path / "r.csv").write_text("id,title,brand\n1,nike air max,nike\n2,nike air zoom,nike\n"
                                    "3,puma air,puma\n")
    (tmp_path / "rules.yaml").write_text(yaml.safe_dump(
        {"intents": [{"name": "brand", "kind": "field_equality", "field": "brand"}]}))
    assert main(["bench", "build", "--records", str(tmp_path / "r.csv"),
                 "--rules", str(tmp_path / "rules.yaml"), "--out", str(tmp_path / "b")]) == 0
    assert read_labels(tmp_path / "b/labels.jsonl").n_pairs == 3


def test_exit_codes(tmp_path, monkeypatch):
    (tmp_path / "bad.yaml").write_text("run: {}\n")
    assert main(["pipeline", "--config", str(tmp_path / "bad.yaml")]) == 2
    assert main(["bench", "profile", "--labels", str(tmp_path / "none.jsonl")]) == 3
    (tmp_path / "rep.json").write_text("{}")
    assert main(["report", str(tmp_path / "rep.json")]) == 3

    def boom(*a, **k):
        raise nn.NumericError("non-finite values")

    monkeypatch.setattr("mier.benchmark.generate_synthetic", boom)
    assert main(["bench", "synth", "--out", str(tmp_path / "x")]) == 4


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "mier.cli", "--help"], capture_output=True,
                         text=True, check=True).stdout
    for cmd in ("bench", "embed", "train-baseline", "graph", "train-flexer", "sweep", "eval",
                "report", "pipeline"):
        assert cmd in out
