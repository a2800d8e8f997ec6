import csv
import subprocess
import sys

import numpy as np
import pytest

from quantlab.activations import read_dump
from quantlab.cli import main
from quantlab.psot import read_transform


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def gen(n=10, tokens=64):
    return main(["gen", "--dim", "64", "--tokens", str(tokens), "--samples", str(n),
                 "--outlier-rate", "0.01", "--outlier-gain", "20", "--seed", "7", "--out", "acts.actd"])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_gen_writes_samples(workdir):
    assert gen() == 0
    files = sorted(workdir.glob("acts_*.actd"))
    assert len(files) == 10
    assert read_dump(files[0]).data.shape == (64, 64)


def test_gen_refuses_overwrite(workdir):
    assert main(["gen", "--tokens", "4", "--dim", "4", "--out", "a.actd"]) == 0
    assert main(["gen", "--tokens", "4", "--dim", "4", "--out", "a.actd"]) == 2
    assert main(["gen", "--tokens", "4", "--dim", "4", "--out", "a.actd", "--force"]) == 0


def test_quantize_report(workdir, capsys):
    gen(1)
    assert main(["quantize", "--in", "acts.actd", "--bits", "4", "--scheme", "affine", "--report", "q.csv"]) == 0
    table = rows("q.csv")
    assert table[0] == ["token", "s", "z", "mse"] and len(table) == 65
    assert "mse" in capsys.readouterr().out


def test_metrics_and_bounds(workdir):
    gen(2)
    assert main(["metrics", "--in", "acts_*.actd", "--bits", "4", "--csv", "m.csv"]) == 0
    table = rows("m.csv")
    assert table[0][:2] == ["token", "lambda"] and table[-1][0] == "pooled" and len(table) == 130
    for cell in (c for r in table[1:] for c in r[1:]):
        float(cell)
    assert main(["bounds", "--family", "laplace", "--bits", "4", "--kappa-grid", "0.5:5:0.1", "--csv", "b.csv"]) == 0
    assert len(rows("b.csv")) == 47


def test_asot_psot_lac_chain(workdir):
    gen()
    assert main(["asot", "--in", "acts_*.actd", "--weights-out", "w.csv", "--curve-out", "eta.csv"]) == 0
    assert len(rows("w.csv")) == 641
    assert main(["psot", "--in", "acts_*.actd", "--weights", "w.csv", "--epochs", "2", "--out", "R.ortm",
                 "--trace", "t.csv", "--seed", "7"]) == 0
    assert read_transform("R.ortm").orthogonality_error() < 1e-8
    assert main(["lac", "--in", "acts_000.actd", "--transform", "R.ortm", "--grid", "5", "--out", "c.csv"]) == 0
    assert rows("c.csv")[0] == ["alpha", "beta", "mse"]


def test_asot_failure_exit_code(workdir):
    gen(3)
    assert main(["asot", "--in", "acts_*.actd", "--grid", "90:100:5", "--curve-out", "eta.csv"]) == 4
    assert len(rows("eta.csv")) == 4


def test_pipeline_and_report(workdir, capsys):
    args = ["pipeline", "--out", "run", "--seed", "1", "--set", "psot.epochs=2", "--set", "samples=8"]
    assert main(args) == 0
    assert main(args) == 2
    assert main(args + ["--force"]) == 0
    capsys.readouterr()
    assert main(["report", "--run", "run"]) == 0
    out = capsys.readouterr().out
    assert "psot+lac" in out


def test_config_error_exit(workdir, capsys):
    (workdir / "bad.cfg").write_text("bits = 4\n[psot]\ntemperature = -1\n")
    assert main(["pipeline", "--config", "bad.cfg", "--out", "r"]) == 2
    assert "line 3" in capsys.readouterr().err


def test_format_error_exit(workdir):
    (workdir / "junk.actd").write_bytes(b"JUNKJUNK")
    assert main(["quantize", "--in", "junk.actd"]) == 3


def test_missing_file_exit(workdir):
    assert main(["quantize", "--in", "nope.actd"]) == 2


def test_thread_env(workdir, monkeypatch):
    monkeypatch.setenv("QUANTLAB_THREADS", "1")
    assert main(["bounds"]) == 0
    monkeypatch.setenv("QUANTLAB_THREADS", "x")
    assert main(["bounds"]) == 2


def test_console_script_installed():
    out = subprocess.run([sys.executable, "-m", "quantlab.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "quantlab" in out.stdout
