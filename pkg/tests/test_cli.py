import csv
import json

import numpy as np
import pytest

from fslds import cli
from fslds.dataio import RecordingMeta, load_counts_csv, save_counts_csv
from fslds.model import SpikeCountMatrix

TINY = ["--set", "fit.epochs=3", "--set", "fit.hidden_dim=4", "--set", "fit.K=2"]


@pytest.fixture
def counts_file(tmp_path):
    y = SpikeCountMatrix(np.random.default_rng(0).poisson(2, (20, 4)))
    p = tmp_path / "c.csv"
    save_counts_csv(y, p)
    return p


def test_simulate_benchmark(tmp_path):
    assert cli.main(["simulate", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["simulate", "--out", str(tmp_path / "b")]) == 0
    y = load_counts_csv(tmp_path / "a" / "counts.csv")
    assert (y.T, y.M) == (1000, 16)
    for name in ("counts.csv", "traj.csv", "rates.csv", "scenario.json", "config_snapshot.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "figures" / "gates.svg").exists()


def test_simulate_errors(tmp_path, capsys):
    assert cli.main(["simulate"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"T": 3}')
    assert cli.main(["simulate", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "bad scenario" in capsys.readouterr().err


def test_simulate_seed_env(tmp_path, monkeypatch):
    monkeypatch.setenv("FSLDS_SEED", "5")
    assert cli.main(["simulate", "--out", str(tmp_path / "a")]) == 0
    assert json.loads((tmp_path / "a" / "scenario.json").read_text())["seed"] == 5
    monkeypatch.setenv("FSLDS_SEED", "x")
    assert cli.main(["simulate", "--out", str(tmp_path / "b")]) == 2


def test_config_resolution(tmp_path):
    cfg = cli.resolve_config()
    assert cfg["fit.n_restarts"] == 75 and cfg["analysis.min_frac"] == 0.05
    assert cli.resolve_config(preset="real")["fit.lr_main"] == 0.001
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"fit": {"K": 3}, "analysis.threshold": 0.6}))
    cfg = cli.resolve_config(p, ["fit.epochs=7", "fit.lr_main=1e-3"])
    assert (cfg["fit.K"], cfg["analysis.threshold"], cfg["fit.epochs"], cfg["fit.lr_main"]) == (3, 0.6, 7, 1e-3)
    p.write_text(json.dumps({"fit.colour": 1}))
    with pytest.raises(cli.InputError, match="unknown"):
        cli.resolve_config(p)
    with pytest.raises(cli.InputError):
        cli.resolve_config(None, ["nope=1"])
    with pytest.raises(cli.InputError):
        cli.resolve_config(None, ["fit.epochs=2.5"])


def test_fit_and_reproduce_from_snapshot(tmp_path, counts_file):
    out = tmp_path / "fit"
    assert cli.main(["fit", "--counts", str(counts_file), "--out", str(out), "--restarts", "1"] + TINY) == 0
    rows = list(csv.DictReader(open(out / "restarts.csv")))
    assert len(rows) == 1 and rows[0]["status"] == "ok"
    again = tmp_path / "fit2"
    assert cli.main(["fit", "--counts", str(counts_file), "--out", str(again),
                     "--config", str(out / "config_snapshot.json")]) == 0
    for name in ("params.bin", "posterior.csv", "elbo_trace.csv", "fit.json", "restarts.csv"):
        assert (out / name).read_bytes() == (again / name).read_bytes()


def test_fit_restart_table(tmp_path, counts_file):
    out = tmp_path / "fit"
    assert cli.main(["fit", "--counts", str(counts_file), "--out", str(out), "--restarts", "3"] + TINY) == 0
    rows = list(csv.DictReader(open(out / "restarts.csv")))
    assert [int(r["seed"]) for r in rows] == [0, 1, 2]


def test_fit_errors(tmp_path, counts_file):
    assert cli.main(["fit", "--counts", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["fit", "--counts", str(counts_file), "--out", str(tmp_path / "o"),
                     "--set", "fit.phi_end=2.0"]) == 2
    # a learning rate this large makes every restart diverge
    assert cli.main(["fit", "--counts", str(counts_file), "--out", str(tmp_path / "o"), "--restarts", "2",
                     "--set", "fit.lr_main=1e30", "--set", "fit.lr_theta_initial=1e30",
                     "--set", "fit.grad_clip=1e300"] + TINY) == 3


def test_concat_and_analyze(tmp_path, counts_file):
    cat, meta = tmp_path / "cat.csv", tmp_path / "meta.json"
    assert cli.main(["concat", "--counts"] + [str(counts_file)] * 4 + ["--out", str(cat), "--meta", str(meta)]) == 0
    m = RecordingMeta.load(meta)
    assert m.segment_boundaries == [20, 40, 60] and load_counts_csv(cat).T == 80
    fit = tmp_path / "fit"
    assert cli.main(["fit", "--counts", str(cat), "--out", str(fit), "--restarts", "1"] + TINY) == 0
    out = tmp_path / "an"
    assert cli.main(["analyze", "--fit", str(fit), "--out", str(out), "--segments", str(meta)]) == 0
    occ = list(csv.reader(open(out / "occupancy.csv")))
    assert len(occ) == 1 + 2
    cos = list(csv.reader(open(out / "cosine.csv")))
    assert np.array(cos[1:], float).shape == (4, 4)
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["active_per_segment"]) == 4
    assert json.loads((out / "config_snapshot.json").read_text())["analysis.min_frac"] == 0.05


def test_concat_single_and_mismatch(tmp_path, counts_file):
    out, meta = tmp_path / "one.csv", tmp_path / "m.json"
    assert cli.main(["concat", "--counts", str(counts_file), "--out", str(out), "--meta", str(meta)]) == 0
    assert out.read_bytes() == counts_file.read_bytes()
    assert RecordingMeta.load(meta).segment_boundaries == []
    other = tmp_path / "o.csv"
    save_counts_csv(SpikeCountMatrix(np.zeros((5, 3), int)), other)
    assert cli.main(["concat", "--counts", str(counts_file), str(other), "--out", str(out),
                     "--meta", str(meta)]) == 2


def test_analyze_missing_fit(tmp_path):
    assert cli.main(["analyze", "--fit", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 2
