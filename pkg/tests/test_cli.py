import json
import subprocess
import sys

import numpy as np
import pytest

from logsae.cli import RunConfig, UserError, bundled_data, fit_from_dict, fit_to_dict, ingest, main
from logsae.ml_fit import fit_ml

CFG = str(bundled_data() / "example.yaml")


def _pipeline(out):
    assert main(["--config", CFG, "fit", "--out", str(out)]) == 0
    fit = str(out / "fit.json")
    assert main(["--config", CFG, "predict", "--fit", fit, "--out", str(out)]) == 0
    assert main(["--config", CFG, "mse", "--fit", fit, "--method", "both", "--out", str(out)]) == 0
    return {n: (out / n).read_bytes() for n in ("fit.json", "predictions.csv", "mse.csv", "provenance.json")}


def test_golden_run_reproducible(tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    assert a["fit.json"] == b["fit.json"]
    assert a["predictions.csv"] == b["predictions.csv"]
    assert a["mse.csv"] == b["mse.csv"]
    prov = json.loads(a["provenance.json"])
    assert prov["command"] == "mse" and prov["outputs"]["bootstrap"]["B"] == 200
    assert prov["outputs"]["median_rel_gap"] <= 0.15
    lines = a["mse.csv"].decode().splitlines()
    assert lines[0].startswith("area_id,n_d,N_d,tau_hat,mse_analytic")
    assert len(lines) == 51


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "logsae", "--config", CFG, "fit", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert set(json.loads((tmp_path / "fit.json").read_text())["beta_hat"]) == {"intercept", "x1"}


def _write(p, text):
    p.write_text(text)
    return str(p)


@pytest.fixture
def files(tmp_path):
    rng = np.random.default_rng(0)
    s = ["area_id,w,x1"]
    o = ["area_id,x1"]
    for d in range(12):
        for _ in range(4):
            s.append(f"a{d},{rng.lognormal(1, 0.5):.6f},{rng.uniform():.6f}")
        for _ in range(5):
            o.append(f"a{d},{rng.uniform():.6f}")
    return tmp_path, _write(tmp_path / "s.csv", "\n".join(s) + "\n"), _write(tmp_path / "o.csv", "\n".join(o) + "\n")


def test_ingest_good(files):
    _, s, o = files
    data = ingest(s, o)
    assert data.layout.D == 12 and data.layout.p == 2 and data.covariates == ("intercept", "x1")
    assert all(a.N_d == 9 for a in data.layout.areas)
    np.testing.assert_allclose(data.layout.y_s, np.log(data.w_s))


@pytest.mark.parametrize("text,match", [
    ("area_id,w,x1\na0,1.0,\n", r":2: missing value in column 'x1'"),
    ("area_id,w,x1\na0,1.0,0.3\na0,abc,0.1\n", r":3: column 'w' is not a number"),
    ("area_id,w,x1\na0,-2.0,0.3\n", r":2: w \+ k = -2\.0 must be positive"),
    ("area_id,w,x1\na0,1.0\n", r":2: expected 3 fields"),
    ("area_id,x1\na0,0.2\n", r"missing required column 'w'"),
])
def test_ingest_errors_name_the_line(files, text, match):
    tmp, _, o = files
    with pytest.raises(UserError, match=match):
        ingest(_write(tmp / "bad.csv", text), o)


def test_ingest_unknown_area_and_sizes(files):
    tmp, s, o = files
    with pytest.raises(UserError, match="not present in the sample"):
        ingest(s, _write(tmp / "o2.csv", "area_id,x1\nzz,0.5\n"))
    with pytest.raises(UserError, match="has N_d=10"):
        ingest(s, o, sizes_csv=_write(tmp / "n.csv", "area_id,N_d\na0,10\n"))
    ok = ingest(s, o, sizes_csv=_write(tmp / "n2.csv", "area_id,N_d\na0,9\n"))
    assert ok.layout.areas[0].N_d == 9
    with pytest.raises(UserError, match="covariate column 'x9'"):
        ingest(s, o, covariates=["x9"])


def test_shift_round_trip(files, tmp_path):
    _, s, o = files
    out0, out1 = tmp_path / "k0", tmp_path / "k1"
    assert main(["predict", "--sample", s, "--oos", o, "--out", str(out0)]) == 0
    # shifting w by -1500 and k by +1500 leaves log(w + k) unchanged
    rows = open(s).read().splitlines()
    shifted = [rows[0]] + [f"{a},{float(w) - 1500.0!r},{x}" for a, w, x in (r.split(",") for r in rows[1:])]
    s2 = _write(tmp_path / "s_shift.csv", "\n".join(shifted) + "\n")
    assert main(["predict", "--sample", s2, "--oos", o, "--shift", "1500", "--out", str(out1)]) == 0
    p0 = np.genfromtxt(out0 / "predictions.csv", delimiter=",", names=True, dtype=None, encoding=None)
    p1 = np.genfromtxt(out1 / "predictions.csv", delimiter=",", names=True, dtype=None, encoding=None)
    np.testing.assert_allclose(p1["prediction"] + 1500.0, p0["prediction"], rtol=1e-9)


def test_fit_serialisation_round_trip(files):
    _, s, o = files
    data = ingest(s, o)
    fit = fit_ml(data.layout)
    back = fit_from_dict(json.loads(json.dumps(fit_to_dict(fit, data.covariates))))
    np.testing.assert_array_equal(back.beta_hat, fit.beta_hat)
    assert back.theta_hat == fit.theta_hat and back.boundary_hit == fit.boundary_hit


def test_config_round_trip_and_validation():
    cfg = RunConfig.from_dict({"shift": 3.0, "bootstrap": {"B": 50}, "ml": {"tol": 1e-6}})
    again = RunConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    with pytest.raises(UserError, match="unknown config keys"):
        RunConfig.from_dict({"shfit": 1})
    with pytest.raises(UserError):
        RunConfig.from_dict({"bootstrap": {"C": 1}})
    bad = RunConfig.from_dict({"shift": -1.0})
    with pytest.raises(UserError, match="shift constant"):
        bad.validate()


def test_user_error_exit_code_and_json(files, capsys):
    tmp, _, o = files
    out = tmp / "err"
    bad = _write(tmp / "bad.csv", "area_id,w,x1\na0,1.0,\n")
    assert main(["fit", "--sample", bad, "--oos", o, "--out", str(out)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 1 and "missing value" in err["message"]
    assert json.loads((out / "error.json").read_text()) == err
    assert main(["fit", "--out", str(out)]) == 1
    assert main(["--config", str(tmp / "none.yaml"), "fit"]) == 1


def test_numeric_error_exit_code(files):
    tmp, s, o = files
    assert main(["fit", "--sample", s, "--oos", o, "--max-iter", "1", "--tol", "1e-30", "--out", str(tmp / "n")]) == 2
    assert json.loads((tmp / "n" / "error.json").read_text())["error"] == "NonConvergenceError"


def test_suggest_shift(files, capsys):
    tmp, s, _ = files
    assert main(["suggest-shift", "--sample", s, "--grid", "0,10,-100", "--out", str(tmp / "k")]) == 0
    lines = (tmp / "k" / "shift_skewness.csv").read_text().splitlines()
    assert lines[0] == "k,log_skewness" and len(lines) == 4
    assert lines[3].endswith("nan")
    assert "skewness=" in capsys.readouterr().out


def test_simulate_small(tmp_path):
    assert main(["simulate", "--D", "10", "--R", "2000", "--out", str(tmp_path)]) == 0
    prov = json.loads((tmp_path / "provenance.json").read_text())
    assert prov["outputs"]["bp_max_abs_z"] < 5
