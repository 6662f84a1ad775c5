import csv
import json

import numpy as np
import pytest

from stride_dgp import cli
from stride_dgp.archive import load_model
from stride_dgp.stride import stride_predict

FAST = ["--set", "search.starts=1", "--set", "search.grid_points=3", "--set", "search.sweeps=1",
        "--set", "search.golden_iters=8"]
FAST_STRIDE = ["--set", "stride.S=2", "--set", "stride.T=2", "--set", "stride.K=10",
               "--set", "stride.R=1", "--set", "stride.J=20", "--set", "stride.L=1"]


def records(out):
    return [json.loads(line) for line in (out / "report.jsonl").read_text().splitlines()]


@pytest.fixture
def data_csv(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(50, 2))
    y = np.sin(4 * X[:, 0]) + X[:, 1] ** 2 + 0.05 * rng.normal(size=50)
    path = tmp_path / "data.csv"
    np.savetxt(path, np.column_stack([X, y]), delimiter=",")
    return path


def test_toy1d_single_cell(tmp_path):
    out = tmp_path / "toy"
    code = cli.run(["toy1d", "--out", str(out), "--m", "20", "--L", "3", "--seeds", "1",
                    "--set", "toy.grid=101", "--set", "toy.K=5", "--set", "toy.T=1",
                    "--set", "toy.S=2", "--set", "toy.R=1", "--set", "toy.sparse_reopt_every=0"]
                   + FAST)
    assert code == 0
    recs = records(out)
    assert [r["method"] for r in recs] == ["gpr", "sparse_gpr", "stride"]
    assert all(r["seed"] == 0 and np.isfinite(r["smse"]) for r in recs)
    assert recs[2]["L"] == 3 and recs[2]["arch"] == "injective1d"
    assert (out / "curves" / "toy_m_stride_mean.csv").exists()
    assert (out / "curves" / "toy_L_gpr_std.csv").exists()


def test_benchmark_sparse_only(tmp_path, data_csv):
    out = tmp_path / "bench"
    assert cli.run(["benchmark", "--data", str(data_csv), "--out", str(out), "--set",
                    "methods=sparse_gpr", "--set", "m=5"] + FAST) == 0
    recs = records(out)
    assert len(recs) == 10 and sorted(r["fold"] for r in recs) == list(range(10))
    assert all(np.isfinite(r["smse"]) and np.isfinite(r["mnll"]) for r in recs)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["command"] == "benchmark" and summary["software_version"]


def strip_volatile(rec):
    return {k: v for k, v in rec.items() if k not in ("fit_seconds", "predict_seconds")}


def test_benchmark_is_reproducible_across_threads(tmp_path, data_csv):
    args = ["benchmark", "--data", str(data_csv), "--set", "folds=3", "--set", "m=4"] + FAST + FAST_STRIDE
    assert cli.run(args + ["--out", str(tmp_path / "a"), "--threads", "1"]) == 0
    assert cli.run(args + ["--out", str(tmp_path / "b"), "--threads", "3"]) == 0
    a, b = records(tmp_path / "a"), records(tmp_path / "b")
    assert [strip_volatile(r) for r in a] == [strip_volatile(r) for r in b]
    assert {r["method"] for r in a} == {"gpr", "sparse_gpr", "stride"}
    sa = json.loads((tmp_path / "a" / "summary.json").read_text())
    sb = json.loads((tmp_path / "b" / "summary.json").read_text())
    sa.pop("timestamp"), sb.pop("timestamp")
    assert sa == sb


def test_sweep_m_rows(tmp_path, data_csv):
    out = tmp_path / "sweep"
    assert cli.run(["sweep-m", "--data", str(data_csv), "--out", str(out), "--set",
                    "methods=sparse_gpr", "--set", "sweep.m=4,8", "--set", "sweep.repeats=2"]
                   + FAST) == 0
    assert len(records(out)) == 4
    rows = list(csv.reader((out / "curves" / "sweep_m_sparse_gpr_mean.csv").open()))
    assert rows[0] == ["m", "smse_mean"] and [r[0] for r in rows[1:]] == ["4", "8"]
    cells = json.loads((out / "summary.json").read_text())["cells"]
    assert {(c["method"], c["m"], c["count"]) for c in cells} == {("sparse_gpr", 4, 2), ("sparse_gpr", 8, 2)}


def test_fit_and_predict(tmp_path, data_csv, capsys):
    model_path = tmp_path / "model.npz"
    assert cli.run(["fit", "--data", str(data_csv), "--out", str(model_path), "--set", "m=6"]
                   + FAST + FAST_STRIDE) == 0
    rng = np.random.default_rng(1)
    Xs = rng.uniform(size=(7, 2))
    feats = tmp_path / "x.csv"
    np.savetxt(feats, Xs, delimiter=",")
    pred = tmp_path / "pred.csv"
    assert cli.run(["predict", "--model", str(model_path), "--data", str(feats), "--out", str(pred)]) == 0
    rows = list(csv.reader(pred.open()))
    assert rows[0] == ["x0", "x1", "mean", "variance"] and len(rows) == 8
    got = np.array([[float(v) for v in r[2:]] for r in rows[1:]])
    model = load_model(model_path)
    st = model.standardization
    Z = (Xs - np.array(st["feature_means"])) / np.array(st["feature_stds"])
    mean, var, _ = stride_predict(model, Z)
    assert np.array_equal(got[:, 0], mean * st["target_std"] + st["target_mean"])
    assert np.array_equal(got[:, 1], var * st["target_std"] ** 2)

    wrong = tmp_path / "wrong.csv"
    wrong.write_text("1,2,3\n")
    capsys.readouterr()
    assert cli.run(["predict", "--model", str(model_path), "--data", str(wrong), "--out",
                    str(tmp_path / "w.csv")]) == cli.EXIT_DATA
    assert "expected 2 feature columns, got 3" in capsys.readouterr().err

    empty = tmp_path / "empty.csv"
    empty.write_text("")
    out = tmp_path / "empty_pred.csv"
    assert cli.run(["predict", "--model", str(model_path), "--data", str(empty), "--out", str(out)]) == 0
    assert out.read_text().splitlines() == ["x0,x1,mean,variance"]


def test_exit_codes(tmp_path, data_csv, capsys):
    assert cli.run([]) == cli.EXIT_USAGE
    assert cli.run(["toy1d"]) == cli.EXIT_USAGE
    assert cli.run(["benchmark", "--data", str(data_csv), "--out", str(tmp_path),
                    "--set", "stride.S=0"]) == cli.EXIT_USAGE
    assert cli.run(["benchmark", "--data", str(data_csv), "--out", str(tmp_path),
                    "--set", "bogus=1"]) == cli.EXIT_USAGE
    assert cli.run(["benchmark", "--data", str(tmp_path / "none.csv"),
                    "--out", str(tmp_path / "o")]) == cli.EXIT_DATA
    assert cli.run(["predict", "--model", str(data_csv), "--data", str(data_csv),
                    "--out", str(tmp_path / "p.csv")]) == cli.EXIT_DATA
    assert cli.run(["fit", "--data", str(data_csv), "--out", str(tmp_path / "m.npz"),
                    "--threads", "0"]) == cli.EXIT_USAGE
    capsys.readouterr()
    assert cli.run(["benchmark", "--data", str(data_csv), "--out", str(tmp_path / "big"),
                    "--set", "methods=sparse_gpr"]) == cli.EXIT_DATA
    assert "m = 50 inducing points exceeds the 45 training rows" in capsys.readouterr().err


def test_numerical_failure_exit_code(tmp_path, data_csv, monkeypatch):
    def boom(*a, **k):
        raise np.linalg.LinAlgError("singular")

    monkeypatch.setattr(cli, "run_sparse", boom)
    out = tmp_path / "fail"
    assert cli.run(["benchmark", "--data", str(data_csv), "--out", str(out), "--set",
                    "methods=sparse_gpr", "--set", "folds=2", "--set", "m=5"] + FAST) == cli.EXIT_NUMERIC
    recs = records(out)
    assert len(recs) == 2 and all(r["status"] == "failed" and "LinAlgError" in r["error"] for r in recs)


def test_thread_env_var(monkeypatch):
    monkeypatch.setenv("STRIDE_THREADS", "4")
    assert cli.default_threads() == 4
    monkeypatch.setenv("STRIDE_THREADS", "zero")
    with pytest.raises(cli.UsageError):
        cli.default_threads()
    monkeypatch.delenv("STRIDE_THREADS")
    assert cli.default_threads() == 1


def test_derived_seeds_are_distinct():
    seeds = {cli.derive_seed(s, f) for s in range(5) for f in range(10)}
    assert len(seeds) == 50
