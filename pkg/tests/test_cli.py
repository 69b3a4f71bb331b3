import csv
import json
import time

import numpy as np
import pytest

from nngls import inference
from nngls.cli import main
from nngls.exceptions import NumericalError
from nngls.experiments import f2_friedman
from nngls.inference import predict
from nngls.io import read_dataset_csv
from nngls.trainer import TrainConfig, fit_nngls

SMALL = {"hidden_units": 8, "max_epochs": 30, "patience": 6}


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A simulated dataset and a CLI fit shared by the read-only tests."""
    d = tmp_path_factory.mktemp("cli")
    spec = write_json(d / "spec.json", {"f0": "f1_sine", "n": 100, "seed": 1})
    cfg = write_json(d / "cfg.json", SMALL)
    assert main(["simulate", "--spec", spec, "--out", str(d / "data.csv"), "--threads", "1"]) == 0
    assert main(["fit", "--data", str(d / "data.csv"), "--config", cfg, "--seed", "4",
                 "--out", str(d / "fit"), "--threads", "1"]) == 0
    return d


def test_simulate_shape_and_byte_identical(tmp_path):
    spec = write_json(tmp_path / "s.json", {"f0": "f1_sine", "n": 10})
    for k in (1, 2):
        assert main(["simulate", "--spec", spec, "--seed", "3", "--out", str(tmp_path / f"d{k}.csv")]) == 0
    rows = read_rows(tmp_path / "d1.csv")
    assert rows[0] == ["x1", "y", "s1", "s2"] and len(rows) == 11
    assert (tmp_path / "d1.csv").read_bytes() == (tmp_path / "d2.csv").read_bytes()
    assert (tmp_path / "d1_truth.csv").read_bytes() == (tmp_path / "d2_truth.csv").read_bytes()
    man = json.loads((tmp_path / "d1.csv.manifest.json").read_text())
    assert man["command"] == "simulate" and man["seed"] == 3 and "version" in man


def test_simulate_f2_truth_recomputes(tmp_path):
    spec = write_json(tmp_path / "s.json", {"f0": "f2_friedman", "n": 40, "seed": 2})
    assert main(["simulate", "--spec", spec, "--out", str(tmp_path / "d.csv")]) == 0
    ds = read_dataset_csv(tmp_path / "d.csv")
    truth = np.array([float(r[0]) for r in read_rows(tmp_path / "d_truth.csv")[1:]])
    np.testing.assert_allclose(truth, f2_friedman(ds.X), rtol=1e-15)


def test_fit_outputs(workdir):
    model = json.loads((workdir / "fit" / "model.json").read_text())
    assert {"theta", "W", "config", "split"} <= set(model)
    hist = read_rows(workdir / "fit" / "history.csv")
    assert hist[0] == ["epoch", "train_loss", "val_loss", "sigma2", "phi", "tau2"]
    assert (workdir / "fit" / "manifest.json").exists()


def test_fit_time_budget(tmp_path, workdir):
    t0 = time.perf_counter()
    assert main(["fit", "--data", str(workdir / "data.csv"), "--out", str(tmp_path / "f")]) == 0
    assert time.perf_counter() - t0 < 30


def test_fit_m0_is_ols_baseline(tmp_path, workdir):
    cfg = write_json(tmp_path / "c.json", SMALL)
    assert main(["fit", "--data", str(workdir / "data.csv"), "--config", cfg, "--m", "0",
                 "--out", str(tmp_path / "f")]) == 0
    model = json.loads((tmp_path / "f" / "model.json").read_text())
    assert model["dag"]["m"] == 0


def test_fit_missing_column(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("x1,s1,s2\n0.1,1,2\n0.2,3,4\n")
    assert main(["fit", "--data", str(p), "--out", str(tmp_path / "f")]) == 2
    assert "'y'" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, workdir):
    cfg = write_json(tmp_path / "c.json", {"learning_rat": 0.1})
    assert main(["fit", "--data", str(workdir / "data.csv"), "--config", cfg,
                 "--out", str(tmp_path / "f")]) == 2


def test_predict_roundtrip_matches_in_process(tmp_path, workdir):
    rng = np.random.default_rng(0)
    q = np.column_stack([rng.uniform(size=15), rng.uniform(0, 10, (15, 2))])
    qp = tmp_path / "q.csv"
    qp.write_text("x1,s1,s2\n" + "".join(",".join(repr(float(v)) for v in r) + "\n" for r in q))
    out = tmp_path / "pred.csv"
    assert main(["predict", "--model", str(workdir / "fit" / "model.json"), "--data",
                 str(workdir / "data.csv"), "--query", str(qp), "--out", str(out)]) == 0
    rows = read_rows(out)
    assert rows[0] == ["s1", "s2", "y_hat", "sigma0", "pi_lower", "pi_upper"]
    got = np.array(rows[1:], dtype=float)
    ds = read_dataset_csv(workdir / "data.csv")
    fit = fit_nngls(ds, TrainConfig(seed=4, **SMALL))
    ref = predict(fit, ds, q[:, :1], q[:, 1:])
    np.testing.assert_allclose(got[:, 2], ref.y_hat, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(got[:, 3], ref.sigma0, rtol=1e-12)


def test_predict_empty_query(tmp_path, workdir):
    qp = tmp_path / "q.csv"
    qp.write_text("x1,s1,s2\n")
    out = tmp_path / "pred.csv"
    assert main(["predict", "--model", str(workdir / "fit" / "model.json"), "--data",
                 str(workdir / "data.csv"), "--query", str(qp), "--out", str(out)]) == 0
    assert out.read_text() == "s1,s2,y_hat,sigma0,pi_lower,pi_upper\n"


def test_predict_malformed_model(tmp_path, workdir):
    bad = tmp_path / "m.json"
    bad.write_text("{not json")
    assert main(["predict", "--model", str(bad), "--data", str(workdir / "data.csv"),
                 "--query", str(workdir / "data.csv"), "--out", str(tmp_path / "p.csv")]) == 2


def test_bootstrap_two_replicates(tmp_path, workdir):
    out = tmp_path / "band.csv"
    assert main(["bootstrap", "--model", str(workdir / "fit" / "model.json"), "--data",
                 str(workdir / "data.csv"), "--B", "2", "--seed", "1", "--threads", "1",
                 "--out", str(out)]) == 0
    rows = read_rows(out)
    assert rows[0] == ["query_id", "lower", "upper"] and len(rows) == 101
    lo, hi = np.array([r[1:] for r in rows[1:]], dtype=float).T
    assert np.all(lo <= hi)


def test_bootstrap_failures_exit_3(tmp_path, workdir, monkeypatch):
    def boom(*a, **kw):
        raise NumericalError("forced")

    monkeypatch.setattr(inference, "fit_nngls", boom)
    assert main(["bootstrap", "--model", str(workdir / "fit" / "model.json"), "--data",
                 str(workdir / "data.csv"), "--B", "5", "--threads", "1",
                 "--out", str(tmp_path / "b.csv")]) == 3


def test_diagnose_endpoints(tmp_path, workdir):
    out = tmp_path / "diag"
    assert main(["diagnose", "--data", str(workdir / "data.csv"), "--sigma2", "1", "--phi", "2.1",
                 "--tau2", "0.01", "--m-list", "0,2,5,10,-1", "--out", str(out)]) == 0
    rows = np.array(read_rows(out / "discrepancy.csv")[1:], dtype=float)
    np.testing.assert_array_equal(rows[:, 0], [0, 2, 5, 10, 99])
    assert abs(rows[-1, 1]) < 1e-8
    assert np.all(np.diff(rows[:, 1]) <= 1e-9)
    assert read_rows(out / "semivariogram.csv")[0] == ["bin_center", "semivariance", "count"]


def test_diagnose_guard(tmp_path):
    spec = write_json(tmp_path / "s.json", {"f0": "f1_sine", "n": 2001, "seed": 0})
    assert main(["simulate", "--spec", spec, "--out", str(tmp_path / "d.csv")]) == 0
    assert main(["diagnose", "--data", str(tmp_path / "d.csv"), "--m-list", "0",
                 "--out", str(tmp_path / "o")]) == 2


def test_benchmark_smoke_and_determinism(tmp_path):
    grid = write_json(tmp_path / "g.json", {"scenarios": [
        {"id": "smoke", "f0": "f1_sine", "n": 150, "n_test": 50,
         "theta": {"sigma2": 1.0, "phi": 2.0, "tau2": 0.1}}]})
    cfg = write_json(tmp_path / "c.json", SMALL)
    t0 = time.perf_counter()
    for k in (1, 2):
        assert main(["benchmark", "--grid", grid, "--config", cfg, "--replicates", "2",
                     "--seed", "5", "--out", str(tmp_path / f"r{k}.csv")]) == 0
    assert time.perf_counter() - t0 < 240
    a, b = read_rows(tmp_path / "r1.csv"), read_rows(tmp_path / "r2.csv")
    # wall-clock rows are the only ones allowed to differ
    keep = lambda rows: [r for r in rows if r[2] != "runtime_seconds"]
    assert keep(a) == keep(b)
    assert {r[1] for r in a[1:]} == {"nngls", "nn_ols"}


def test_threads_env_and_bad_value(tmp_path, monkeypatch):
    spec = write_json(tmp_path / "s.json", {"f0": "f1_sine", "n": 10})
    monkeypatch.setenv("NNGLS_THREADS", "2")
    assert main(["simulate", "--spec", spec, "--out", str(tmp_path / "d.csv")]) == 0
    assert json.loads((tmp_path / "d.csv.manifest.json").read_text())["threads"] == 2
    monkeypatch.setenv("NNGLS_THREADS", "many")
    assert main(["simulate", "--spec", spec, "--out", str(tmp_path / "d.csv")]) == 2
