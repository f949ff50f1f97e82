"""Command-line interface: fit, predict, mse, simulate, suggest-shift.

Settings come from an optional YAML file (``--config``) and are overridden by
flags. Every run writes ``provenance.json`` holding the resolved settings.
CSV floats use 17 significant digits. Exit codes: 0 ok, 1 user error,
2 numerical failure; on failure a JSON error object goes to stderr.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from importlib import metadata, resources
from pathlib import Path

import numpy as np
import yaml
from scipy.stats import skew

from .bootstrap import BootstrapConfig, bootstrap_mse
from .mcpe_exact import FORMS, m1_area_sums, mse_bp_area
from .mcpe_second_order import SingularFisherError
from .ml_fit import FitOptions, FitResult, NonConvergenceError, fit_ml
from .model_core import AreaFrame, ParameterSpaceError, PopulationLayout, RankDeficiencyError, Theta
from .mse_estimation import mse_estimates
from .predictors import ALPHA_MODES, eb2_predict
from .sim_oracle import desk_design, empirical_mse, census_design, silc_style_study

log = logging.getLogger("logsae")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2


class UserError(Exception):
    """Bad input or configuration (exit code 1)."""


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


# --- configuration ---------------------------------------------------------------------


@dataclass
class MLSettings:
    max_iter: int = 100
    tol: float = 1e-8


@dataclass
class BootstrapSettings:
    B: int = 200
    workers: int | None = None
    alpha: str = "full"


@dataclass
class SimulateSettings:
    D: int = 50
    n_d: int = 4
    N_d: int = 20
    beta: list = field(default_factory=lambda: [0.5, 0.2])
    theta: list = field(default_factory=lambda: [0.25, 0.5])
    R: int = 20000
    study: bool = False
    study_sizes: list = field(default_factory=lambda: [22, 15, 35, 48, 60, 80, 100, 150, 200, 300] * 3)


@dataclass
class RunConfig:
    command: str = ""
    sample: str | None = None
    oos: str | None = None
    sizes: str | None = None
    fit: str | None = None
    out: str = "."
    shift: float = 0.0
    intercept: bool = True
    covariates: list | None = None
    seed: int = 20240611
    method: str = "analytic"
    form: str = "derived"
    grid: list = field(default_factory=lambda: [0.0, 1.0, 10.0, 100.0, 1000.0])
    ml: MLSettings = field(default_factory=MLSettings)
    bootstrap: BootstrapSettings = field(default_factory=BootstrapSettings)
    simulate: SimulateSettings = field(default_factory=SimulateSettings)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UserError(f"unknown config keys: {sorted(unknown)}")
        nested = {"ml": MLSettings, "bootstrap": BootstrapSettings, "simulate": SimulateSettings}
        for key, typ in nested.items():
            sub = d.get(key) or {}
            if not isinstance(sub, dict):
                raise UserError(f"config section {key!r} must be a mapping")
            bad = set(sub) - {f.name for f in dataclasses.fields(typ)}
            if bad:
                raise UserError(f"unknown keys in {key!r}: {sorted(bad)}")
            d[key] = typ(**sub)
        return cls(**d)

    def validate(self) -> None:
        if not (self.shift >= 0 and math.isfinite(self.shift)):
            raise UserError(f"shift constant k must be finite and >= 0, got {self.shift}")
        if self.method not in ("analytic", "bootstrap", "both"):
            raise UserError(f"method must be analytic, bootstrap or both, got {self.method!r}")
        if self.form not in FORMS:
            raise UserError(f"form must be one of {FORMS}, got {self.form!r}")
        if self.bootstrap.alpha not in ALPHA_MODES:
            raise UserError(f"bootstrap alpha must be one of {ALPHA_MODES}, got {self.bootstrap.alpha!r}")
        if self.bootstrap.B < 1:
            raise UserError(f"bootstrap B must be >= 1, got {self.bootstrap.B}")

    def resolve_paths(self, base: Path) -> None:
        for name in ("sample", "oos", "sizes", "fit", "out"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, str((base / v).resolve()))


def bundled_data() -> Path:
    """Directory holding the bundled synthetic dataset (sample.csv, oos.csv, example.yaml)."""
    return Path(str(resources.files("logsae") / "data"))


# --- ingestion ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ingested:
    layout: PopulationLayout
    w_s: np.ndarray  # original scale
    covariates: tuple


def _read_csv(path: str) -> tuple[list[str], list[tuple[int, list[str]]]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise UserError(f"{path}: empty file")
            rows = [(reader.line_num, r) for r in reader if any(c.strip() for c in r)]
    except FileNotFoundError as exc:
        raise UserError(f"{path}: file not found") from exc
    return [h.strip() for h in header], rows


def _float_cell(path, line, col, raw) -> float:
    raw = raw.strip()
    if raw == "":
        raise UserError(f"{path}:{line}: missing value in column {col!r}")
    try:
        v = float(raw)
    except ValueError as exc:
        raise UserError(f"{path}:{line}: column {col!r} is not a number: {raw!r}") from exc
    if not math.isfinite(v):
        raise UserError(f"{path}:{line}: column {col!r} is not finite: {raw!r}")
    return v


def ingest(sample_csv: str, oos_csv: str, shift: float = 0.0, intercept: bool = True,
           covariates: list | None = None, sizes_csv: str | None = None) -> Ingested:
    """Build the layout from a sample file (area_id, w, x...) and an out-of-sample file (area_id, x...).

    y = log(w + k). Areas keep their order of first appearance in the sample
    file. An optional sizes file (area_id, N_d) is checked against
    n_d + out-of-sample rows.
    """
    hs, srows = _read_csv(sample_csv)
    ho, orows = _read_csv(oos_csv)
    for need, h, p in ((("area_id", "w"), hs, sample_csv), (("area_id",), ho, oos_csv)):
        for c in need:
            if c not in h:
                raise UserError(f"{p}: missing required column {c!r}")
    covs = [c for c in hs if c not in ("area_id", "w")] if covariates is None else list(covariates)
    for c in covs:
        if c not in hs:
            raise UserError(f"{sample_csv}: covariate column {c!r} not found")
        if c not in ho:
            raise UserError(f"{oos_csv}: covariate column {c!r} not found")
    if not covs and not intercept:
        raise UserError("no covariates and no intercept")

    def parse(path, header, rows, with_w):
        out: dict[str, list] = {}
        order = []
        idx = {c: header.index(c) for c in header}
        for line, r in rows:
            if len(r) != len(header):
                raise UserError(f"{path}:{line}: expected {len(header)} fields, found {len(r)}")
            aid = r[idx["area_id"]].strip()
            if aid == "":
                raise UserError(f"{path}:{line}: missing area_id")
            x = [_float_cell(path, line, c, r[idx[c]]) for c in covs]
            if intercept:
                x = [1.0] + x
            rec = [x]
            if with_w:
                w = _float_cell(path, line, "w", r[idx["w"]])
                if w + shift <= 0:
                    raise UserError(f"{path}:{line}: w + k = {w + shift} must be positive")
                rec.append(w)
            if aid not in out:
                out[aid] = []
                order.append(aid)
            out[aid].append(rec)
        return out, order

    samp, order = parse(sample_csv, hs, srows, True)
    oos, _ = parse(oos_csv, ho, orows, False)
    if not order:
        raise UserError(f"{sample_csv}: no data rows")
    unknown = [a for a in oos if a not in samp]
    if unknown:
        raise UserError(f"{oos_csv}: areas not present in the sample file: {unknown}")
    N_override = {}
    if sizes_csv is not None:
        hz, zrows = _read_csv(sizes_csv)
        if "area_id" not in hz or "N_d" not in hz:
            raise UserError(f"{sizes_csv}: needs columns area_id and N_d")
        for line, r in zrows:
            aid = r[hz.index("area_id")].strip()
            v = _float_cell(sizes_csv, line, "N_d", r[hz.index("N_d")])
            if v != int(v) or v < 1:
                raise UserError(f"{sizes_csv}:{line}: N_d must be a positive integer")
            N_override[aid] = int(v)
    areas, w_all = [], []
    p = len(covs) + int(intercept)
    for aid in order:
        X_s = np.array([rec[0] for rec in samp[aid]], float).reshape(-1, p)
        w = np.array([rec[1] for rec in samp[aid]], float)
        X_r = np.array([rec[0] for rec in oos.get(aid, [])], float).reshape(-1, p)
        N_d = X_s.shape[0] + X_r.shape[0]
        if aid in N_override and N_override[aid] != N_d:
            raise UserError(f"{sizes_csv}: area {aid!r} has N_d={N_override[aid]} but n_d + out-of-sample rows = {N_d}")
        areas.append(AreaFrame(aid, X_s, X_r, np.log(w + shift), N_d))
        w_all.append(w)
    try:
        layout = PopulationLayout(areas)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    return Ingested(layout, np.concatenate(w_all), tuple((["intercept"] if intercept else []) + covs))


# --- artifacts ---------------------------------------------------------------------------


def fit_to_dict(fit: FitResult, covariates) -> dict:
    return {
        "beta_hat": dict(zip(covariates, map(float, fit.beta_hat))),
        "theta_hat": {"sigma_u2": fit.theta_hat.sigma_u2, "sigma_e2": fit.theta_hat.sigma_e2},
        "fisher_information": fit.fisher_at_hat.tolist(),
        "loglik": fit.loglik,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "boundary_hit": fit.boundary_hit,
        "step_norm": fit.step_norm,
    }


def fit_from_dict(d: dict) -> FitResult:
    return FitResult(
        beta_hat=np.array(list(d["beta_hat"].values()), float),
        theta_hat=Theta(d["theta_hat"]["sigma_u2"], d["theta_hat"]["sigma_e2"]),
        fisher_at_hat=np.array(d["fisher_information"], float),
        loglik=float(d["loglik"]),
        iterations=int(d["iterations"]),
        converged=bool(d["converged"]),
        boundary_hit=bool(d["boundary_hit"]),
        step_norm=float(d["step_norm"]),
    )


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def _write_json(path: Path, obj) -> None:
    # json serializes floats with repr, the shortest string that round-trips exactly
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


# --- subcommands -------------------------------------------------------------------------


def _load_data(cfg: RunConfig) -> Ingested:
    if cfg.sample is None or cfg.oos is None:
        raise UserError(f"{cfg.command} needs --sample and --oos")
    return ingest(cfg.sample, cfg.oos, cfg.shift, cfg.intercept, cfg.covariates, cfg.sizes)


def _get_fit(cfg: RunConfig, data: Ingested) -> FitResult:
    if cfg.fit is not None:
        try:
            d = json.loads(Path(cfg.fit).read_text())
            fit = fit_from_dict(d)
        except (OSError, KeyError, ValueError) as exc:
            raise UserError(f"{cfg.fit}: cannot read fit: {exc}") from exc
        if fit.beta_hat.size != data.layout.p:
            raise UserError(f"{cfg.fit}: beta has {fit.beta_hat.size} entries, data has {data.layout.p} covariates")
        return fit
    return fit_ml(data.layout, options=FitOptions(max_iter=cfg.ml.max_iter, tol=cfg.ml.tol))


def cmd_fit(cfg: RunConfig, out: Path) -> dict:
    data = _load_data(cfg)
    fit = fit_ml(data.layout, options=FitOptions(max_iter=cfg.ml.max_iter, tol=cfg.ml.tol))
    _write_json(out / "fit.json", fit_to_dict(fit, data.covariates))
    return {"fit": str(out / "fit.json")}


def cmd_predict(cfg: RunConfig, out: Path) -> dict:
    data = _load_data(cfg)
    fit = _get_fit(cfg, data)
    pred = eb2_predict(fit, data.layout, w_s=data.w_s + cfg.shift)
    k = cfg.shift
    rows = []
    for a, ap in zip(data.layout.areas, pred.areas):
        rows.append(["area", a.area_id, "", a.n_d, a.N_d, ap.tau_hat - k])
    for u in pred.units(data.layout):
        rows.append(["unit", u.area_id, u.unit_index, "", "", u.w_tilde - k])
    _write_csv(out / "predictions.csv", ["level", "area_id", "unit_index", "n_d", "N_d", "prediction"], rows)
    return {"predictions": str(out / "predictions.csv")}


def cmd_mse(cfg: RunConfig, out: Path) -> dict:
    data = _load_data(cfg)
    fit = _get_fit(cfg, data)
    layout = data.layout
    pred = eb2_predict(fit, layout, w_s=data.w_s + cfg.shift)
    tau = pred.tau - cfg.shift
    D = layout.D
    nan = np.full(D, np.nan)
    an = boot = None
    if cfg.method in ("analytic", "both"):
        an = mse_estimates(fit, layout, cfg.form)
    if cfg.method in ("bootstrap", "both"):
        boot = bootstrap_mse(fit, layout, BootstrapConfig(B=cfg.bootstrap.B, seed=cfg.seed,
                                                          workers=cfg.bootstrap.workers, alpha=cfg.bootstrap.alpha))
    a_raw = np.array([e.mse_eb2 for e in an]) if an else nan
    b_est = boot.estimate if boot else nan
    b_se = boot.se if boot else nan

    def cv(m):
        return np.where(tau != 0, 100.0 * np.sqrt(np.maximum(m, 0.0)) / np.abs(tau), np.nan)

    gap = np.abs(b_est - a_raw) / np.abs(a_raw) if (an and boot) else nan
    rows = []
    for d, a in enumerate(layout.areas):
        rows.append([a.area_id, a.n_d, a.N_d, tau[d],
                     a_raw[d], max(a_raw[d], 0.0) if an else np.nan, cv(a_raw)[d],
                     int(a_raw[d] < 0) if an else "", int(fit.boundary_hit),
                     b_est[d], b_se[d], cv(b_est)[d], int(boot.unreliable) if boot else "", gap[d]])
    header = ["area_id", "n_d", "N_d", "tau_hat", "mse_analytic", "mse_analytic_clamped", "cv_analytic",
              "negative_flag", "boundary_flag", "mse_bootstrap", "se_bootstrap", "cv_bootstrap",
              "bootstrap_unreliable", "rel_gap"]
    _write_csv(out / "mse.csv", header, rows)
    summary = {"mse": str(out / "mse.csv")}
    if boot:
        summary["bootstrap"] = boot.provenance()
    if an and boot:
        summary["median_rel_gap"] = float(np.nanmedian(gap))
    return summary


def cmd_simulate(cfg: RunConfig, out: Path) -> dict:
    s = cfg.simulate
    summary: dict = {}
    if s.study:
        des = census_design(s.study_sizes, seed=cfg.seed)
        rows = silc_style_study(des, cfg.shift, B=cfg.bootstrap.B, seed=cfg.seed, workers=cfg.bootstrap.workers,
                                alpha=cfg.bootstrap.alpha)
        fields = [f.name for f in dataclasses.fields(rows[0])]
        _write_csv(out / "study.csv", fields, [[getattr(r, f) for f in fields] for r in rows])
        summary["study"] = str(out / "study.csv")
        return summary
    des = desk_design(s.D, s.n_d, s.N_d, s.beta, s.theta, s.R, cfg.seed)
    layout = des.layout()
    rows = []
    exact = {
        "bp": np.array([mse_bp_area(des.beta, des.theta, a, cfg.form) for a in layout.areas]),
        "eb1": m1_area_sums(des.beta, des.theta, layout, cfg.form),
    }
    for kind, ex in exact.items():
        emp = empirical_mse(des, kind, s.R, workers=cfg.bootstrap.workers)
        z = (emp.area_mse - ex) / emp.area_se
        for d, a in enumerate(layout.areas):
            rows.append([kind, a.area_id, emp.area_mse[d], emp.area_se[d], ex[d], z[d]])
        summary[f"{kind}_max_abs_z"] = float(np.max(np.abs(z)))
    _write_csv(out / "simulate.csv", ["predictor", "area_id", "empirical_mse", "mc_se", "closed_form", "z"], rows)
    summary["simulate"] = str(out / "simulate.csv")
    return summary


def cmd_suggest_shift(cfg: RunConfig, out: Path) -> dict:
    hs, rows = _read_csv(cfg.sample) if cfg.sample else (None, None)
    if hs is None:
        raise UserError("suggest-shift needs --sample")
    if "w" not in hs:
        raise UserError(f"{cfg.sample}: missing required column 'w'")
    w = np.array([_float_cell(cfg.sample, line, "w", r[hs.index("w")]) for line, r in rows])
    res = []
    for k in cfg.grid:
        if np.any(w + k <= 0):
            res.append([k, np.nan])
        else:
            res.append([k, float(skew(np.log(w + k)))])
    _write_csv(out / "shift_skewness.csv", ["k", "log_skewness"], res)
    for k, g in res:
        print(f"k={fmt(k)}\tskewness={fmt(g)}")
    return {"shift_skewness": str(out / "shift_skewness.csv")}


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "mse": cmd_mse, "simulate": cmd_simulate,
            "suggest-shift": cmd_suggest_shift}


# --- argument parsing --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="logsae", description="EB prediction under a log-transformed nested-error model")
    p.add_argument("--config", help="YAML settings file; flags override its values")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        if data:
            sp.add_argument("--sample", help="sample CSV: area_id, w, covariates")
            sp.add_argument("--oos", help="out-of-sample CSV: area_id, covariates")
            sp.add_argument("--sizes", help="optional CSV area_id, N_d checked against the data")
            sp.add_argument("--shift", type=float, help="k in y = log(w + k)")
            sp.add_argument("--intercept", action=argparse.BooleanOptionalAction, default=None)
            sp.add_argument("--covariates", help="comma-separated covariate columns (default: all others)")
            sp.add_argument("--max-iter", type=int, dest="max_iter")
            sp.add_argument("--tol", type=float)

    sp = sub.add_parser("fit", help="ML fit, writes fit.json")
    common(sp)
    for name in ("predict", "mse"):
        sp = sub.add_parser(name, help="EB predictions" if name == "predict" else "MSE of area-mean predictors")
        common(sp)
        sp.add_argument("--fit", help="fit.json from a previous run (default: refit)")
        if name == "mse":
            sp.add_argument("--method", choices=("analytic", "bootstrap", "both"))
            sp.add_argument("--form", choices=FORMS)
            sp.add_argument("--B", type=int, dest="B")
            sp.add_argument("--workers", type=int)
            sp.add_argument("--alpha", choices=ALPHA_MODES)
    sp = sub.add_parser("simulate", help="Monte Carlo check of closed forms, or a census-style study")
    common(sp, data=False)
    sp.add_argument("--R", type=int, dest="R")
    sp.add_argument("--D", type=int, dest="D")
    sp.add_argument("--study", action="store_true", default=None)
    sp.add_argument("--shift", type=float)
    sp.add_argument("--B", type=int, dest="B")
    sp.add_argument("--workers", type=int)
    sp = sub.add_parser("suggest-shift", help="log-scale skewness over a grid of shift constants")
    common(sp, data=False)
    sp.add_argument("--sample")
    sp.add_argument("--grid", help="comma-separated k values")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base = Path.cwd()
    raw: dict = {}
    if args.config:
        path = Path(args.config)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except FileNotFoundError as exc:
            raise UserError(f"{path}: config file not found") from exc
        except yaml.YAMLError as exc:
            raise UserError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise UserError(f"{path}: top level must be a mapping")
        base = path.resolve().parent
    try:
        cfg = RunConfig.from_dict(raw)
    except TypeError as exc:
        raise UserError(f"bad config: {exc}") from exc
    cfg.resolve_paths(base)
    cfg.command = args.command
    a = vars(args)
    for key in ("sample", "oos", "sizes", "fit", "out"):
        if a.get(key) is not None:
            setattr(cfg, key, str(Path(a[key]).resolve()))
    for key in ("shift", "intercept", "seed", "method", "form"):
        if a.get(key) is not None:
            setattr(cfg, key, a[key])
    if a.get("covariates") is not None:
        cfg.covariates = [c.strip() for c in a["covariates"].split(",") if c.strip()]
    if a.get("grid") is not None:
        try:
            cfg.grid = [float(v) for v in a["grid"].split(",")]
        except ValueError as exc:
            raise UserError(f"bad --grid: {a['grid']!r}") from exc
    for key in ("max_iter", "tol"):
        if a.get(key) is not None:
            setattr(cfg.ml, key, a[key])
    for key in ("B", "workers", "alpha"):
        if a.get(key) is not None:
            setattr(cfg.bootstrap, key, a[key])
    for key in ("R", "D", "study"):
        if a.get(key) is not None:
            setattr(cfg.simulate, key, a[key])
    cfg.validate()
    return cfg


def _fail(code: int, exc: BaseException, out: Path | None) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    text = json.dumps(err)
    print(text, file=sys.stderr)
    if out is not None and out.is_dir():
        (out / "error.json").write_text(text + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = None
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[cfg.command](cfg, out)
        _write_json(out / "provenance.json", {"command": cfg.command, "version": _version(), "config": cfg.to_dict(),
                                              "outputs": summary})
    except (UserError, RankDeficiencyError, ParameterSpaceError) as exc:
        return _fail(EXIT_USER, exc, out)
    except (NonConvergenceError, SingularFisherError, np.linalg.LinAlgError, FloatingPointError, RuntimeError) as exc:
        return _fail(EXIT_NUMERIC, exc, out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
