import csv
import json

import pytest

from xnode.cli import main
from xnode.data import read_splits
from xnode.experiment import SUMMARY_COLUMNS, read_summary


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "xp.cfg").write_text("n = 60\nd = 6\nk = 4\nepochs = 8\nrecord_timing = false\n"
                                     "seeds = 1\nfolds = 3\n")
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(w, tag="a"):
    cfg = w / "xp.cfg"
    data = w / f"data_{tag}"
    assert run("synth", "--config", cfg, "--out", data) == 0
    assert run("build-graph", "--config", cfg, "--data", data, "--out", data / "g.txt") == 0
    assert run("extract-context", "--config", cfg, "--data", data, "--graph", data / "g.txt",
               "--out", data / "ctx.csv") == 0
    assert run("train", "--config", cfg, "--data", data, "--graph", data / "g.txt", "--contexts",
               data / "ctx.csv", "--out", data / "m.ckpt") == 0
    assert run("evaluate", "--config", cfg, "--data", data, "--graph", data / "g.txt", "--contexts",
               data / "ctx.csv", "--model", data / "m.ckpt", "--out", data / "summary.csv") == 0
    return data


def test_pipeline_outputs(workdir, capsys):
    data = pipeline(workdir)
    (row,) = read_summary(data / "summary.csv")
    assert row["method"] == "GCN + Reasoner" and 0 <= row["acc_mean"] <= 100
    with open(data / "summary.csv") as fh:
        assert tuple(next(csv.reader(fh))) == SUMMARY_COLUMNS
    with open(data / "m.ckpt.report.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 8

    args = ["--data", data, "--graph", data / "g.txt", "--contexts", data / "ctx.csv",
            "--model", data / "m.ckpt"]
    assert run("explain", *args, "--out", data / "e.jsonl") == 0
    lines = (data / "e.jsonl").read_text().splitlines()
    _, _, test = read_splits(data / "splits.csv")
    assert len(lines) == int(test.sum())
    assert all(json.loads(l)["provider"] == "offline-template" for l in lines)

    assert run("predict", *args, "--out", data / "pred.csv") == 0
    with open(data / "pred.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 60


def test_baseline_flag_and_binary_features(workdir):
    data = workdir / "bin"
    assert run("synth", "--n", 40, "--d", 5, "--binary", "--out", data) == 0
    assert (data / "features.bin").exists()
    assert run("build-graph", "--data", data, "--k", 3, "--out", data / "g.txt") == 0
    assert run("extract-context", "--data", data, "--graph", data / "g.txt", "--out", data / "c.csv") == 0
    assert run("train", "--data", data, "--graph", data / "g.txt", "--contexts", data / "c.csv",
               "--no-reasoner", "--backbone", "gin", "--epochs", 3, "--out", data / "m.ckpt") == 0
    assert run("evaluate", "--data", data, "--graph", data / "g.txt", "--contexts", data / "c.csv",
               "--model", data / "m.ckpt", "--out", data / "s.csv") == 0
    assert read_summary(data / "s.csv")[0]["method"] == "GIN"


def test_run_subcommand(workdir):
    assert run("run", "--config", workdir / "xp.cfg", "--out", workdir / "exp") == 0
    rows = read_summary(workdir / "exp" / "summary.csv")
    assert [r["method"] for r in rows] == ["GCN", "GCN + Reasoner"]


def test_exit_codes(workdir, capsys):
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 1
    assert run("build-graph", "--features", workdir / "missing.csv", "--k", 3,
               "--out", workdir / "g.txt") == 2
    assert run("build-graph", "--out", workdir / "g.txt") == 1
    assert "error" in capsys.readouterr().err
