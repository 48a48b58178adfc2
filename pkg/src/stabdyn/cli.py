"""Command-line pipeline: gen-data, train, eval, report.

Configuration is an INI file (configparser syntax).  Sections and keys:

  [pvtol]        m, l, J, g
  [demo]         seed, N, dt_sample, n_validation, validation_seed and every
                 DemoScenario knob (n_rollouts, speed, kp, ...)
  [constraints]  extra, seed, lower, upper
  [features]     s_f, sigma_f, s_w, sigma_w, d_b, seed
  [train]        every TrainConfig field (lam, mu_f, mu_s, Nmax, ...)
  [eval]         every EvalConfig field plus goal and dump
  [paths]        dataset, constraints, validation

Values: integers and floats in Python syntax, booleans as true/false,
vectors as comma-separated numbers, strings verbatim.  Missing keys take
their defaults; unknown sections or keys are rejected.  Every output file
starts with '#' comment lines echoing the fully resolved configuration.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical
failure, 3 file-system error.
"""

from __future__ import annotations

import argparse
import base64
import configparser
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InfeasibleError, NumericError, ParameterError
from .features import LAYOUT_VERSION, PRNG_NAME, ConstantInputFeatureMap, MatrixFeatureMap, ScalarFeatureMap
from .learner import (
    TRACE_COLUMNS,
    TrainConfig,
    fraction_violated,
    read_nu_csv,
    read_trace_csv,
    regression_error,
    train_ccm,
    train_ridge,
    write_nu_csv,
    write_trace_csv,
)
from .model import DynamicsParams, LearnedModel, MetricParams, build_model
from .planner import (
    EvalConfig,
    batch_evaluate,
    sample_initial_conditions,
    write_cases_csv,
    write_series_csv,
    write_summary_csv,
)
from .pvtol import (
    N_INPUT,
    N_STATE,
    DemoScenario,
    PvtolDynamics,
    PvtolParams,
    StateBox,
    generate_demonstrations,
    read_constraints_csv,
    read_dataset_csv,
    sample_constraint_points,
    write_constraints_csv,
    write_dataset_csv,
)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
MODEL_FORMAT = "stabdyn-model"
MODEL_VERSION = 1
MODE_NAMES = {"nr": "N-R", "rr": "R-R", "ccmr": "CCM-R"}
MODE_MU_F = {"nr": 0.0, "rr": 1e-4, "ccmr": 1e-3}
MU_B = 1e-6


class ConfigError(ParameterError):
    pass


# configuration schema -------------------------------------------------------


def _fields(cls, skip=()) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in dataclasses.fields(cls) if f.name not in skip}


SCHEMA = {
    "pvtol": _fields(PvtolParams),
    "demo": {"seed": 0, "N": 100, "dt_sample": 0.1, "n_validation": 1000, "validation_seed": 1000, **_fields(DemoScenario, skip=("box",))},
    "constraints": {"extra": 500, "seed": 0, "lower": StateBox().lower, "upper": StateBox().upper},
    "features": {"s_f": 48, "sigma_f": 6.0, "s_w": 36, "sigma_w": 15.0, "d_b": N_INPUT, "seed": 0},
    "train": _fields(TrainConfig),
    "eval": {**_fields(EvalConfig), "goal": (0.0,) * N_STATE, "dump": ""},
    "paths": {"dataset": "", "constraints": "", "validation": ""},
}

# keys that must be > 0 or >= 0 (per section); other ranges are checked by the dataclasses
POSITIVE = {
    "demo": {"N", "dt_sample", "n_rollouts", "n_waypoints", "speed", "kp", "kd", "k_att", "k_rate", "tilt_limit", "dt_sim"},
    "features": {"s_f", "sigma_f", "s_w", "sigma_w", "d_b"},
    "eval": {"n_ic", "r_max", "t_base", "nodes", "dt", "threshold", "q_diag", "r_diag"},
}
NONNEGATIVE = {
    "demo": {"seed", "n_validation", "validation_seed", "goal_spread", "waypoint_spread", "duration_jitter", "initial_velocity", "initial_tilt", "max_retries", "start_radius"},
    "constraints": {"extra", "seed"},
    "features": {"seed"},
    "eval": {"ic_seed", "r_min", "t_per_meter", "phi_max", "v_max", "phi_dot_max"},
}


def _parse_value(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            vals = tuple(float(t) for t in text.split(",") if t.strip())
            if len(vals) != len(default):
                raise ConfigError(f"{where}: expected {len(default)} comma-separated numbers, got {len(vals)}")
            return vals
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from None


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(repr(float(t)) for t in v)
    return str(v)


@dataclasses.dataclass
class RunConfig:
    values: dict  # section -> key -> value
    explicit: set  # (section, key) pairs given in the file
    source: str = "<defaults>"

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def given(self, section: str, key: str) -> bool:
        return (section, key) in self.explicit

    # typed views ---------------------------------------------------------

    def pvtol(self) -> PvtolParams:
        return PvtolParams(**self["pvtol"])

    def scenario(self) -> DemoScenario:
        kw = {k: v for k, v in self["demo"].items() if k in SCHEMA["demo"] and k not in ("seed", "N", "dt_sample", "n_validation", "validation_seed")}
        return DemoScenario(**kw, box=self.box())

    def box(self) -> StateBox:
        return StateBox(self["constraints"]["lower"], self["constraints"]["upper"])

    def train(self) -> TrainConfig:
        return TrainConfig(**self["train"])

    def evaluation(self) -> EvalConfig:
        return EvalConfig(**{k: v for k, v in self["eval"].items() if k not in ("goal", "dump")})

    def echo(self, command: str) -> list:
        lines = [f"stabdyn {__version__} {command}", f"config {self.source}"]
        for sec, keys in SCHEMA.items():
            for key in keys:
                lines.append(f"[{sec}] {key} = {_fmt_value(self.values[sec][key])}")
        return lines


def _check_ranges(cfg: RunConfig) -> None:
    for sec, keys in POSITIVE.items():
        for key in keys:
            v = cfg[sec][key]
            if not np.all(np.asarray(v, dtype=float) > 0):
                raise ConfigError(f"[{sec}] {key} must be positive")
    for sec, keys in NONNEGATIVE.items():
        for key in keys:
            v = cfg[sec][key]
            if not np.all(np.asarray(v, dtype=float) >= 0):
                raise ConfigError(f"[{sec}] {key} must be non-negative")
    lo, hi = np.array(cfg["constraints"]["lower"]), np.array(cfg["constraints"]["upper"])
    if np.any(hi <= lo):
        raise ConfigError("[constraints] upper must exceed lower in every coordinate")
    if cfg["demo"]["start_radius"][1] < cfg["demo"]["start_radius"][0]:
        raise ConfigError("[demo] start_radius must be (inner, outer) with inner <= outer")
    ev = cfg["eval"]
    if ev["r_max"] < ev["r_min"]:
        raise ConfigError("[eval] r_max must be at least r_min")
    if ev["nodes"] < 3:
        raise ConfigError("[eval] nodes must be at least 3")
    if cfg["features"]["d_b"] < N_INPUT:
        raise ConfigError(f"[features] d_b must be at least {N_INPUT}")
    if cfg["demo"]["dt_sample"] < cfg["demo"]["dt_sim"]:
        raise ConfigError("[demo] dt_sample must not be shorter than dt_sim")
    _dump_requests(cfg)
    try:
        cfg.pvtol()
        cfg.train().validate()
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None) -> RunConfig:
    """Parse and validate a configuration file (None gives the defaults)."""
    values = {sec: dict(keys) for sec, keys in SCHEMA.items()}
    explicit = set()
    source = "<defaults>"
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None, default_section="\x00unused")
        cp.optionxform = str  # keys are case sensitive (N, J, L, ...)
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None
        for sec in cp.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"{path}: unknown section [{sec}] (allowed: {', '.join(SCHEMA)})")
            for key, text in cp.items(sec):
                if key not in SCHEMA[sec]:
                    raise ConfigError(f"{path}: unknown key '{key}' in [{sec}]")
                values[sec][key] = _parse_value(text, SCHEMA[sec][key], f"{path} [{sec}] {key}")
                explicit.add((sec, key))
        source = str(path)
    cfg = RunConfig(values, explicit, source)
    _check_ranges(cfg)
    return cfg


def _dump_requests(cfg: RunConfig) -> list:
    """[eval] dump: comma-separated 'model:ic' items; '*' as model means every model."""
    out = []
    for item in (t.strip() for t in cfg["eval"]["dump"].split(",")):
        if not item:
            continue
        name, sep, ic = item.rpartition(":")
        try:
            idx = int(ic)
        except ValueError:
            idx = -1
        if not sep or not name or not 0 <= idx < cfg["eval"]["n_ic"]:
            raise ConfigError(f"[eval] dump: bad item {item!r} (want model:ic with 0 <= ic < n_ic)")
        out.append((name, idx))
    return out


# model files ---------------------------------------------------------------------


def _pack(a) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _unpack(d, what: str) -> np.ndarray:
    try:
        if d["dtype"] != "<f8":
            raise ValueError(f"unsupported dtype {d['dtype']}")
        raw = base64.b64decode(d["data"].encode("ascii"), validate=True)
        return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParameterError(f"model file: bad array '{what}' ({exc})") from None


def model_to_dict(model: LearnedModel, meta: dict | None = None) -> dict:
    fm, wm, hm = model.f_map, model.w_map, model.w_hat_map
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "n": model.n,
        "m": model.m,
        "lambda": model.lam,
        "features": {
            "layout_version": LAYOUT_VERSION,
            "prng": PRNG_NAME,
            "f": {"s": fm.s, "sigma": fm.sigma, "seed": fm.seed},
            "w": {"s": wm.s, "sigma": wm.sigma, "seed": wm.seed, "active_dims": list(wm.active_dims)},
            "w_hat": {"s": hm.s, "sigma": hm.sigma, "seed": hm.seed, "active_dims": list(hm.active_dims)},
            "d_b": model.b_map.d,
        },
        "metric": {"offset": model.metric.offset, "w_lower": model.metric.w_lower, "w_upper": model.metric.w_upper},
        "arrays": {
            "alpha": _pack(model.dynamics.alpha),
            "betas": _pack(model.dynamics.betas),
            "theta": _pack(model.metric.theta),
            "f_omegas": _pack(fm.omegas),
            "w_omegas": _pack(wm.omegas),
            "w_hat_omegas": _pack(hm.omegas),
            "b_matrix": _pack(model.b_map.matrix),
        },
        "meta": meta or {},
    }


def model_from_dict(d: dict) -> tuple:
    """Inverse of model_to_dict; returns (model, meta)."""
    try:
        if d.get("format") != MODEL_FORMAT:
            raise ParameterError("model file: unknown format tag")
        if d.get("version") != MODEL_VERSION:
            raise ParameterError(f"model file: unsupported version {d.get('version')}")
        feat = d["features"]
        if feat["layout_version"] != LAYOUT_VERSION or feat["prng"] != PRNG_NAME:
            raise ParameterError("model file: feature layout or PRNG does not match this build")
        n, m = int(d["n"]), int(d["m"])
        arr = {k: _unpack(v, k) for k, v in d["arrays"].items()}
        f = feat["f"]
        f_map = MatrixFeatureMap(n, int(f["s"]), float(f["sigma"]), int(f["seed"]), arr["f_omegas"])
        maps = []
        for key in ("w", "w_hat"):
            g = feat[key]
            maps.append(ScalarFeatureMap(n, int(g["s"]), float(g["sigma"]), int(g["seed"]), tuple(g["active_dims"]), arr[f"{key}_omegas"]))
        b_map = ConstantInputFeatureMap(n, m, arr["b_matrix"])
        met = d["metric"]
        model = LearnedModel(
            f_map,
            b_map,
            maps[0],
            maps[1],
            DynamicsParams(arr["alpha"], arr["betas"]),
            MetricParams(float(met["offset"]), arr["theta"], float(met["w_lower"]), float(met["w_upper"])),
            float(d["lambda"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParameterError(f"model file: missing or malformed field ({exc})") from None
    shapes = {
        "f_omegas": (f_map.s, n),
        "alpha": (f_map.d,),
        "betas": (m, b_map.d),
        "theta": (model.layout.size, model.w_map.d),
        "w_hat_omegas": (model.w_hat_map.s, n),
        "b_matrix": (b_map.d, n),
    }
    for key, shape in shapes.items():
        if arr[key].shape != shape:
            raise ParameterError(f"model file: array '{key}' has shape {arr[key].shape}, expected {shape}")
    if model.w_hat_map.d != model.w_map.d:
        raise ParameterError("model file: w and w_hat feature counts differ")
    return model, d.get("meta", {})


def save_model(path, model: LearnedModel, meta: dict | None = None) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(model_to_dict(model, meta), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path) -> tuple:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParameterError(f"{path}: not a JSON model file ({exc})") from None
    try:
        return model_from_dict(d)
    except ParameterError as exc:
        raise ParameterError(f"{path}: {exc}") from None


# commands -------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out_dir) -> dict:
    """Write dataset.csv, validation.csv and constraints.csv into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    demo = cfg["demo"]
    params, sc = cfg.pvtol(), cfg.scenario()
    ds, _ = generate_demonstrations(params, demo["seed"], demo["N"], demo["dt_sample"], sc)
    cs = sample_constraint_points(ds, cfg["constraints"]["extra"], cfg.box(), cfg["constraints"]["seed"])
    header = cfg.echo("gen-data")
    paths = {"dataset": out / "dataset.csv", "constraints": out / "constraints.csv"}
    write_dataset_csv(paths["dataset"], ds, header)
    write_constraints_csv(paths["constraints"], cs, header)
    if demo["n_validation"] > 0:
        val, _ = generate_demonstrations(params, demo["validation_seed"], demo["n_validation"], demo["dt_sample"], sc)
        paths["validation"] = out / "validation.csv"
        write_dataset_csv(paths["validation"], val, header)
    return paths


def _model_for(cfg: RunConfig) -> LearnedModel:
    f = cfg["features"]
    return build_model(N_STATE, N_INPUT, cfg["train"]["lam"], f["s_f"], f["sigma_f"], f["s_w"], f["sigma_w"], f["d_b"], f["seed"])


def mode_config(cfg: RunConfig, mode: str, N: int) -> TrainConfig:
    """TrainConfig with the per-mode regularization defaults.

    nr always uses mu_f = 0; rr and ccmr take mu_f from the file when given.
    mu_w defaults to 1e-3 up to N = 500 and 1e-4 above.
    """
    if mode not in MODE_NAMES:
        raise ConfigError(f"unknown mode {mode!r} (choose from {', '.join(MODE_NAMES)})")
    tc = cfg.train()
    kw = {}
    if mode == "nr":
        if cfg.given("train", "mu_f") and tc.mu_f != 0:
            log.warning("mode nr ignores [train] mu_f = %g", tc.mu_f)
        kw["mu_f"] = 0.0
    elif not cfg.given("train", "mu_f"):
        kw["mu_f"] = MODE_MU_F[mode]
    if not cfg.given("train", "mu_b"):
        kw["mu_b"] = MU_B
    if not cfg.given("train", "mu_w"):
        kw["mu_w"] = 1e-3 if N <= 500 else 1e-4
    return dataclasses.replace(tc, **kw).validate()


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


METRICS_COLUMNS = ("name", "mode", "N", "train_err", "val_err", "frac_viol_train", "frac_viol_val", "iterations", "converged")


def _write_metrics(path, row: dict, header) -> None:
    def cell(v):
        if isinstance(v, (bool, np.bool_)):
            return str(int(v))
        if isinstance(v, (int, np.integer, str)):
            return str(v)
        return f"{float(v):.17g}"

    with open(path, "w", newline="\n") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        fh.write(",".join(cell(row[c]) for c in METRICS_COLUMNS) + "\n")


def cmd_train(cfg: RunConfig, mode: str, out_model, dataset_path, constraints_path=None, validation_path=None) -> dict:
    """Fit one model family and write the model file plus side files.

    Side files next to the model: <stem>.metrics.csv always; for ccmr also
    <stem>.trace.csv (one row per outer iteration) and <stem>.nu.csv (the
    final violation of every constraint point).
    """
    out_model = Path(out_model)
    ds = read_dataset_csv(dataset_path)
    val = read_dataset_csv(validation_path) if validation_path else None
    tc = mode_config(cfg, mode, len(ds))
    model = _model_for(cfg)
    header = cfg.echo(f"train --mode {mode}") + [
        f"input dataset {dataset_path}",
        f"input constraints {constraints_path or '-'}",
        f"input validation {validation_path or '-'}",
        f"effective mu_f {tc.mu_f!r} mu_b {tc.mu_b!r} mu_w {tc.mu_w!r}",
    ]
    paths = {"model": out_model, "metrics": _sibling(out_model, ".metrics.csv")}
    row = dict(name=MODE_NAMES[mode], mode=mode, N=len(ds), frac_viol_train=np.nan, frac_viol_val=np.nan, iterations=0, converged=True)
    if mode == "ccmr":
        if not constraints_path:
            raise ConfigError("mode ccmr needs a constraint-set file ([paths] constraints or --constraints)")
        cs = read_constraints_csv(constraints_path)
        paths["trace"] = _sibling(out_model, ".trace.csv")
        try:
            res = train_ccm(ds, cs, tc, model, validation=val)
        except (NumericError, InfeasibleError) as exc:
            write_trace_csv(paths["trace"], getattr(exc, "partial_trace", []), header + [f"aborted: {exc}"])
            raise
        write_trace_csv(paths["trace"], res.trace, header + [f"result {res.reason}"])
        paths["nu"] = _sibling(out_model, ".nu.csv")
        write_nu_csv(paths["nu"], cs.points, res.nu, cs.tags, header)
        fitted = res.model
        row.update(frac_viol_train=float(np.mean(res.nu > 0)) if len(res.nu) else 0.0, iterations=len(res.trace), converged=res.converged)
        if val is not None:
            row["frac_viol_val"] = fraction_violated(fitted, val.X, tc)
    else:
        fitted = model.with_dynamics(train_ridge(ds, model, tc.mu_f, tc.mu_b))
    row["train_err"] = regression_error(fitted, ds)
    row["val_err"] = regression_error(fitted, val) if val is not None else np.nan
    save_model(out_model, fitted, {"name": MODE_NAMES[mode], "mode": mode, "N": len(ds), "config": header})
    _write_metrics(paths["metrics"], row, header)
    return paths


def _model_names(paths) -> list:
    """Display names: the name stored in the file, made unique with #2, #3 ..."""
    names, seen = [], {}
    for p in paths:
        _, meta = load_model(p)
        base = str(meta.get("name") or Path(p).stem)
        seen[base] = seen.get(base, 0) + 1
        names.append(base if seen[base] == 1 else f"{base}#{seen[base]}")
    return names


def cmd_eval(cfg: RunConfig, model_paths, out_dir) -> dict:
    """Plan-and-track comparison over the shared initial conditions."""
    if not model_paths:
        raise ConfigError("eval needs at least one --model")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = _model_names(model_paths)
    models = {name: load_model(p)[0] for name, p in zip(names, model_paths)}
    ecfg = cfg.evaluation()
    ics = sample_initial_conditions(ecfg)
    keep = []
    for name, ic in _dump_requests(cfg):
        targets = names if name == "*" else [name]
        for t in targets:
            if t not in models:
                raise ConfigError(f"[eval] dump refers to unknown model {t!r} (have {', '.join(names)})")
            keep.append((t, ic))
    rep = batch_evaluate(models, ics, PvtolDynamics(cfg.pvtol()), ecfg, cfg["eval"]["goal"], keep)
    header = cfg.echo("eval") + [f"model {n} {p}" for n, p in zip(names, model_paths)]
    paths = {"cases": out / "cases.csv", "summary": out / "summary.csv"}
    write_cases_csv(paths["cases"], rep, header)
    write_summary_csv(paths["summary"], rep, header)
    for (name, ic), (traj, track) in sorted(rep.tracks.items()):
        if traj is None:
            log.warning("no trajectory for %s case %d; no series written", name, ic)
            continue
        safe = "".join(ch if ch.isalnum() or ch in "-_#" else "_" for ch in name)
        p = out / f"series_{safe}_{ic}.csv"
        write_series_csv(p, traj, track, header + [f"case {name} {ic}"])
        paths[f"series {name} {ic}"] = p
    return paths


def _read_metrics(path) -> dict:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if len(lines) != 2 or tuple(lines[0].split(",")) != METRICS_COLUMNS:
        raise ParameterError(f"{path}: not a metrics file")
    vals = lines[1].split(",")
    try:
        row = dict(zip(METRICS_COLUMNS, vals))
        for k in ("train_err", "val_err", "frac_viol_train", "frac_viol_val"):
            row[k] = float(row[k])
        for k in ("N", "iterations", "converged"):
            row[k] = int(row[k])
    except ValueError as exc:
        raise ParameterError(f"{path}: malformed metrics row ({exc})") from None
    return row


def _kind(path) -> str:
    with open(path) as fh:
        for ln in fh:
            if ln.strip() and not ln.startswith("#"):
                cols = tuple(ln.strip().split(","))
                break
        else:
            raise ParameterError(f"{path}: empty file")
    if cols == METRICS_COLUMNS:
        return "metrics"
    if cols[: len(TRACE_COLUMNS)] == TRACE_COLUMNS:
        return "trace"
    if "nu" in cols and cols[0] == "x1":
        return "nu"
    raise ParameterError(f"{path}: unrecognised input (expected a metrics, trace or violation file)")


TABLE_COLUMNS = ("name", "mode", "N", "train_err", "val_err", "frac_viol_train", "frac_viol_val", "iterations", "converged", "source")
CURVE_COLUMNS = TRACE_COLUMNS


def cmd_report(inputs, out_dir) -> dict:
    """Consolidate metrics, trace and violation files.

    table.csv has one row per metrics file (sorted by N then mode).  A
    violation file next to a metrics file (same stem) overrides the stored
    training fraction with a recount.  Each trace becomes curve_<stem>.csv.
    """
    if not inputs:
        raise ConfigError("report needs at least one input file")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics, traces, nus = {}, {}, {}
    for p in inputs:
        p = Path(p)
        kind = _kind(p)
        stem = p.name.split(".")[0]
        {"metrics": metrics, "trace": traces, "nu": nus}[kind][stem] = p
    rows = []
    for stem, p in metrics.items():
        row = _read_metrics(p)
        if stem in nus:
            nu = read_nu_csv(nus[stem])
            row["frac_viol_train"] = float(np.mean(nu > 0)) if len(nu) else 0.0
        row["source"] = p.name
        rows.append(row)
    order = {m: i for i, m in enumerate(MODE_NAMES)}
    rows.sort(key=lambda r: (r["N"], order.get(r["mode"], 99), r["source"]))
    header = [f"stabdyn {__version__} report"] + [f"input {Path(p).name}" for p in inputs]
    paths = {}
    if rows:
        paths["table"] = out / "table.csv"
        with open(paths["table"], "w", newline="\n") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            fh.write(",".join(TABLE_COLUMNS) + "\n")
            for r in rows:
                cells = [r[c] if isinstance(r[c], str) else (str(r[c]) if isinstance(r[c], int) else f"{r[c]:.17g}") for c in TABLE_COLUMNS]
                fh.write(",".join(cells) + "\n")
    for stem, p in sorted(traces.items()):
        data = read_trace_csv(p)
        paths[f"curve {stem}"] = q = out / f"curve_{stem}.csv"
        with open(q, "w", newline="\n") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            fh.write(",".join(CURVE_COLUMNS) + "\n")
            for r in data:
                fh.write(",".join(str(int(r[c])) if c in ("k", "active_size") else f"{r[c]:.17g}" for c in CURVE_COLUMNS) + "\n")
    return paths


# entry point ---------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stabdyn", description="Learn stabilizable PVTOL dynamics and evaluate tracking.")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for solver detail")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", help="generate demonstrations and constraint points")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output directory")
    p = sub.add_parser("train", help="fit one model family")
    p.add_argument("--config")
    p.add_argument("--mode", required=True, choices=sorted(MODE_NAMES))
    p.add_argument("--out", required=True, help="model file to write (JSON)")
    p.add_argument("--dataset")
    p.add_argument("--constraints")
    p.add_argument("--validation")
    p = sub.add_parser("eval", help="plan and track with one or more models")
    p.add_argument("--config")
    p.add_argument("--model", action="append", default=[], required=True)
    p.add_argument("--out", required=True, help="output directory")
    p = sub.add_parser("report", help="consolidate metrics, trace and violation files")
    p.add_argument("--config", help="accepted for uniformity; not used")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("inputs", nargs="*")
    return ap


def run(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)], format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            paths = cmd_report(args.inputs, args.out)
        else:
            cfg = load_config(args.config)
            if args.command == "gen-data":
                paths = cmd_gen_data(cfg, args.out)
            elif args.command == "train":
                dpath = args.dataset or cfg["paths"]["dataset"]
                if not dpath:
                    raise ConfigError("train needs --dataset or [paths] dataset")
                paths = cmd_train(
                    cfg,
                    args.mode,
                    args.out,
                    dpath,
                    args.constraints or cfg["paths"]["constraints"] or None,
                    args.validation or cfg["paths"]["validation"] or None,
                )
            else:
                paths = cmd_eval(cfg, args.model, args.out)
    except ParameterError as exc:  # includes ConfigError and malformed inputs
        print(f"stabdyn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, InfeasibleError, np.linalg.LinAlgError) as exc:
        print(f"stabdyn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"stabdyn: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    for key, p in paths.items():
        print(f"{key}: {p}")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
