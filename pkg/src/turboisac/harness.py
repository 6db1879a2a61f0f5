"""Sweep harness: config files, seeded Monte Carlo cells, result CSVs.

A sweep varies one system knob over a list of values and runs every
requested scheme on ``trials`` independent scenes per value. Cells are
seeded by counter: the scene and noise seeds of cell (value_index,
trial) derive from SeedSequence((root_seed, value_index, trial)), so
runs are reproducible, schemes within a cell see identical data, and
any cell can be regenerated in isolation.

Results go to ``results.csv`` (one row per scheme x value x trial, fixed
column order, appended incrementally so an interrupted run loses at most
one row). Turbo runs also append their per-iteration traces to
``traces.csv``. A ``run_config.json`` echo of the resolved configuration
and environment is written next to them.
"""

import csv
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields, asdict, replace

import numpy as np

from . import __version__
from .scene import SceneConfig, sample_scene, synthesize, _dbm_to_watt
from .turbo import TurboConfig, run_turbo_hymp, rmse_m, nmse_db

SWEEP_VARIABLES = (
    "power_dbm", "antennas", "pilot_len", "targets", "path_prob",
    "geometry_id", "threshold",
)
SCHEMES = ("turbo_hymp", "scheme_i", "scheme_iii", "bcrb", "se")
MC_SCHEMES = ("turbo_hymp", "scheme_i", "scheme_iii")

RESULT_COLUMNS = (
    "scheme", "sweep_variable", "sweep_value", "trial", "seed",
    "rmse_m", "pmd", "pfa", "nmse_db", "runtime_ms", "iters_used", "error",
)
TRACE_COLUMNS = (
    "sweep_variable", "sweep_value", "trial", "outer_iter",
    "rmse_m", "nmse_db", "mse_b_db",
)


class ConfigError(ValueError):
    """Configuration problem; the message names the offending key."""


@dataclass
class SweepSpec:
    """One sweep axis: which knob, which values, how many trials."""

    variable: str = "power_dbm"
    values: list = field(default_factory=lambda: [10.0])
    trials: int = 1
    schemes: tuple = ("turbo_hymp",)
    root_seed: int = 0

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ConfigError(
                f"unknown sweep variable '{self.variable}'; "
                f"choose from {SWEEP_VARIABLES}"
            )
        self.values = list(self.values)
        if not self.values:
            raise ConfigError("sweep key 'values' must be a nonempty list")
        if int(self.trials) < 1:
            raise ConfigError("sweep key 'trials' must be >= 1")
        self.trials = int(self.trials)
        self.schemes = tuple(self.schemes)
        for s in self.schemes:
            if s not in SCHEMES:
                raise ConfigError(
                    f"unknown scheme '{s}'; choose from {SCHEMES}"
                )
        self.root_seed = int(self.root_seed)


_SYSTEM_KEYS = {
    "n_users": ("n_users", int),
    "pilot_len": ("pilot_len", int),
    "n_antennas": ("n_antennas", int),
    "n_targets": ("n_targets", int),
    "activity_prob": ("activity_prob", float),
    "path_prob": ("path_prob", float),
    "power_dbm": ("power_w", _dbm_to_watt),
    "noise_dbm": ("noise_var", _dbm_to_watt),
    "c0_dbm": ("c0", _dbm_to_watt),
}
_GEOMETRY_KEYS = ("bs_pos", "target_prior_mean", "target_prior_cov", "area")
_TURBO_KEYS = tuple(f.name for f in fields(TurboConfig))
_SWEEP_KEYS = ("variable", "values", "trials", "schemes", "root_seed")
_SECTIONS = ("system", "geometry", "turbo", "sweep", "geometries")


def _watt_to_dbm(watt):
    return 10.0 * np.log10(watt / 1e-3)


def load_config(path):
    """Parse a JSON config into resolved simulation objects.

    Returns (scene_config, geometry, turbo_config, sweep_spec), where
    ``geometry`` is the dict of geometry overrides (possibly empty) plus
    any named geometry table used by geometry_id sweeps. Every key is
    optional; omitted keys fall back to the default operating point
    (K=500, L=200, N=8, M=3, Q=4, activity 0.2, path probability 0.9,
    P=10 dBm). Unknown sections or keys raise ConfigError naming them.
    """
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for section in raw:
        if section not in _SECTIONS:
            raise ConfigError(
                f"unknown section '{section}'; choose from {_SECTIONS}"
            )

    scene_kwargs = {}
    for key, value in raw.get("system", {}).items():
        if key not in _SYSTEM_KEYS:
            raise ConfigError(
                f"unknown system key '{key}'; choose from "
                f"{tuple(_SYSTEM_KEYS)}"
            )
        name, conv = _SYSTEM_KEYS[key]
        scene_kwargs[name] = conv(value)

    geometry = dict(raw.get("geometry", {}))
    for key in geometry:
        if key not in _GEOMETRY_KEYS:
            raise ConfigError(
                f"unknown geometry key '{key}'; choose from {_GEOMETRY_KEYS}"
            )
    for key in ("bs_pos", "target_prior_mean", "target_prior_cov"):
        if key in geometry:
            scene_kwargs[key] = np.asarray(geometry[key], dtype=float)
    if "area" in geometry:
        scene_kwargs["area"] = tuple(tuple(b) for b in geometry["area"])

    turbo_kwargs = {}
    for key, value in raw.get("turbo", {}).items():
        if key not in _TURBO_KEYS:
            raise ConfigError(
                f"unknown turbo key '{key}'; choose from {_TURBO_KEYS}"
            )
        turbo_kwargs[key] = value

    sweep_kwargs = {}
    for key, value in raw.get("sweep", {}).items():
        if key not in _SWEEP_KEYS:
            raise ConfigError(
                f"unknown sweep key '{key}'; choose from {_SWEEP_KEYS}"
            )
        sweep_kwargs[key] = value

    geometries = raw.get("geometries", {})
    if not isinstance(geometries, dict):
        raise ConfigError("section 'geometries' must map ids to geometry objects")
    for gid, geo in geometries.items():
        for key in geo:
            if key not in _GEOMETRY_KEYS:
                raise ConfigError(
                    f"unknown geometry key '{key}' in geometries['{gid}']"
                )
    if geometries:
        geometry["geometries"] = geometries

    try:
        scene_cfg = SceneConfig(**scene_kwargs)
        turbo_cfg = TurboConfig(**turbo_kwargs)
        sweep = SweepSpec(**sweep_kwargs)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if sweep.variable == "geometry_id":
        for v in sweep.values:
            if str(v) not in geometries:
                raise ConfigError(
                    f"sweep over geometry_id needs geometries['{v}']; "
                    "add it to the 'geometries' section"
                )
    return scene_cfg, geometry, turbo_cfg, sweep


def serialize_config(scene_cfg, geometry, turbo_cfg, sweep):
    """Inverse of load_config: a JSON-ready dict that parses back equal."""
    system = {
        "n_users": scene_cfg.n_users,
        "pilot_len": scene_cfg.pilot_len,
        "n_antennas": scene_cfg.n_antennas,
        "n_targets": scene_cfg.n_targets,
        "activity_prob": scene_cfg.activity_prob,
        "path_prob": scene_cfg.path_prob,
        "power_dbm": _watt_to_dbm(scene_cfg.power_w),
        "noise_dbm": _watt_to_dbm(scene_cfg.noise_var),
        "c0_dbm": _watt_to_dbm(scene_cfg.c0),
    }
    geo = {
        "bs_pos": np.asarray(scene_cfg.bs_pos).tolist(),
        "target_prior_mean": np.asarray(scene_cfg.target_prior_mean).tolist(),
        "target_prior_cov": np.asarray(scene_cfg.target_prior_cov).tolist(),
        "area": [list(b) for b in scene_cfg.area],
    }
    turbo = asdict(turbo_cfg)
    out = {
        "system": system,
        "geometry": geo,
        "turbo": turbo,
        "sweep": {
            "variable": sweep.variable,
            "values": list(sweep.values),
            "trials": sweep.trials,
            "schemes": list(sweep.schemes),
            "root_seed": sweep.root_seed,
        },
    }
    table = geometry.get("geometries") if geometry else None
    if table:
        out["geometries"] = table
    return out


def apply_sweep_value(scene_cfg, turbo_cfg, variable, value, geometries=None):
    """New (scene_config, turbo_config) with one sweep value applied."""
    if variable == "power_dbm":
        return replace(scene_cfg, power_w=_dbm_to_watt(float(value))), turbo_cfg
    if variable == "antennas":
        return replace(scene_cfg, n_antennas=int(value)), turbo_cfg
    if variable == "pilot_len":
        return replace(scene_cfg, pilot_len=int(value)), turbo_cfg
    if variable == "path_prob":
        return replace(scene_cfg, path_prob=float(value)), turbo_cfg
    if variable == "threshold":
        return scene_cfg, replace(turbo_cfg, lambda_thre=float(value))
    if variable == "targets":
        m = int(value)
        prior = np.asarray(scene_cfg.target_prior_mean, dtype=float)
        if m > prior.shape[0]:
            raise ConfigError(
                f"sweep value targets={m} exceeds the {prior.shape[0]} rows "
                "of geometry key 'target_prior_mean'"
            )
        return replace(scene_cfg, n_targets=m,
                       target_prior_mean=prior[:m].copy()), turbo_cfg
    if variable == "geometry_id":
        table = geometries or {}
        key = str(value)
        if key not in table:
            raise ConfigError(
                f"geometry_id '{value}' not found in section 'geometries'"
            )
        geo = table[key]
        kwargs = {}
        for name in ("bs_pos", "target_prior_mean", "target_prior_cov"):
            if name in geo:
                kwargs[name] = np.asarray(geo[name], dtype=float)
        if "area" in geo:
            kwargs["area"] = tuple(tuple(b) for b in geo["area"])
        if "n_targets" not in kwargs and "target_prior_mean" in kwargs:
            kwargs["n_targets"] = kwargs["target_prior_mean"].shape[0]
        return replace(scene_cfg, **kwargs), turbo_cfg
    raise ConfigError(f"unknown sweep variable '{variable}'")


def cell_seeds(root_seed, value_index, trial):
    """Scene and noise seeds of one sweep cell (counter-mode split)."""
    state = np.random.SeedSequence(
        (int(root_seed), int(value_index), int(trial))
    ).generate_state(2)
    return int(state[0]), int(state[1])


def _run_scheme(scheme, scene, y, turbo_cfg):
    """One scheme on one realization; returns (metrics dict, trace rows)."""
    from . import baselines

    if scheme == "turbo_hymp":
        est = run_turbo_hymp(scene, y, turbo_cfg)
    elif scheme == "scheme_i":
        est = baselines.scheme_i(scene, y)
    elif scheme == "scheme_iii":
        est = baselines.scheme_iii(scene, y)
    else:
        raise ValueError(f"not a Monte Carlo scheme: '{scheme}'")

    from .turbo import detection_rates

    pmd, pfa = detection_rates(scene.active, est.activity_decisions)
    mask = scene.active & est.activity_decisions
    metrics = {
        "rmse_m": rmse_m(scene.target_pos, est.pos_mean),
        "pmd": pmd,
        "pfa": pfa,
        "nmse_db": nmse_db(scene.channel, est.channels, mask),
        "iters_used": est.iters_used,
    }
    trace = est.trace if scheme == "turbo_hymp" else []
    return metrics, trace


def run_cell(scheme, scene_cfg, turbo_cfg, sweep, value_index, trial,
             geometries=None):
    """Execute one (scheme, value, trial) cell; never raises on cell errors.

    Returns (result row, trace rows). Failures inside the scheme are
    recorded in the row's error column with empty metrics so a sweep
    survives individual blowups.
    """
    value = sweep.values[value_index]
    seed_scene, seed_noise = cell_seeds(sweep.root_seed, value_index, trial)
    row = {
        "scheme": scheme,
        "sweep_variable": sweep.variable,
        "sweep_value": value,
        "trial": trial,
        "seed": seed_scene,
        "rmse_m": "", "pmd": "", "pfa": "", "nmse_db": "",
        "runtime_ms": "", "iters_used": "", "error": "",
    }
    trace_rows = []
    t0 = time.perf_counter()
    try:
        cfg_v, turbo_v = apply_sweep_value(
            scene_cfg, turbo_cfg, sweep.variable, value, geometries)
        scene = sample_scene(cfg_v, seed_scene)
        y = synthesize(scene, seed_noise)
        metrics, trace = _run_scheme(scheme, scene, y, turbo_v)
        row.update(metrics)
        for rec in trace:
            trace_rows.append({
                "sweep_variable": sweep.variable,
                "sweep_value": value,
                "trial": trial,
                "outer_iter": rec["outer_iter"],
                "rmse_m": rec["rmse_m"],
                "nmse_db": rec["nmse_db"],
                "mse_b_db": rec["mse_b_db"],
            })
    except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["runtime_ms"] = round(1e3 * (time.perf_counter() - t0), 3)
    return row, trace_rows


def _completed_keys(results_path):
    """Keys of rows already present in a results file (for resume)."""
    done = set()
    if not os.path.exists(results_path):
        return done
    with open(results_path, newline="") as fh:
        for row in csv.DictReader(fh):
            done.add((row["scheme"], row["sweep_value"], row["trial"]))
    return done


def _environment_stamp():
    return {
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": sys.version.split()[0],
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }


def run_sweep(scene_cfg, turbo_cfg, sweep, out_dir, geometry=None,
              resume=False, workers=1, progress=None):
    """Run all sweep cells, appending rows to out_dir/results.csv.

    Rows are flushed as they complete, so an interrupted run can be
    restarted with ``resume=True`` and will skip every cell already on
    disk (error rows included; delete them from the CSV to retry).
    Turbo traces accumulate in traces.csv. Returns a dict with the
    number of rows written and the number of failed cells.

    ``workers`` > 1 distributes cells over a process pool; rows are
    still written by this process in completion order, which can differ
    from the sequential order (resume and summaries key on cell
    identity, not file position).
    """
    geometry = geometry or {}
    geometries = geometry.get("geometries")
    os.makedirs(out_dir, exist_ok=True)
    results_path = os.path.join(out_dir, "results.csv")
    traces_path = os.path.join(out_dir, "traces.csv")

    echo = serialize_config(scene_cfg, geometry, turbo_cfg, sweep)
    echo["environment"] = _environment_stamp()
    with open(os.path.join(out_dir, "run_config.json"), "w") as fh:
        json.dump(echo, fh, indent=2)

    done = _completed_keys(results_path) if resume else set()
    if not resume:
        for path, cols in ((results_path, RESULT_COLUMNS),
                           (traces_path, TRACE_COLUMNS)):
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(cols)
    else:
        for path, cols in ((results_path, RESULT_COLUMNS),
                           (traces_path, TRACE_COLUMNS)):
            if not os.path.exists(path):
                with open(path, "w", newline="") as fh:
                    csv.writer(fh).writerow(cols)

    mc_schemes = [s for s in sweep.schemes if s in MC_SCHEMES]
    cells = []
    for value_index in range(len(sweep.values)):
        for trial in range(sweep.trials):
            for scheme in mc_schemes:
                key = (scheme, str(sweep.values[value_index]), str(trial))
                if key in done:
                    continue
                cells.append((scheme, value_index, trial))

    written = 0
    failures = 0
    t0 = time.perf_counter()

    def _emit(row, trace_rows):
        nonlocal written, failures
        with open(results_path, "a", newline="") as fh:
            csv.DictWriter(fh, fieldnames=RESULT_COLUMNS).writerow(row)
        if trace_rows:
            with open(traces_path, "a", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
                for tr in trace_rows:
                    writer.writerow(tr)
        written += 1
        if row["error"]:
            failures += 1
        if progress is not None:
            progress(
                f"[{written}/{len(cells)}] {row['scheme']} "
                f"{row['sweep_variable']}={row['sweep_value']} "
                f"trial {row['trial']} "
                f"{'ERROR ' + row['error'] if row['error'] else 'ok'} "
                f"({time.perf_counter() - t0:.1f}s)"
            )

    if workers > 1 and len(cells) > 1:
        import multiprocessing as mp

        args = [(scheme, scene_cfg, turbo_cfg, sweep, vi, tr, geometries)
                for scheme, vi, tr in cells]
        with mp.Pool(workers) as pool:
            for row, trace_rows in pool.imap_unordered(_run_cell_star, args):
                _emit(row, trace_rows)
    else:
        for scheme, value_index, trial in cells:
            row, trace_rows = run_cell(
                scheme, scene_cfg, turbo_cfg, sweep, value_index, trial,
                geometries)
            _emit(row, trace_rows)

    return {"rows_written": written, "failures": failures,
            "results_path": results_path, "traces_path": traces_path}


def _run_cell_star(args):
    return run_cell(*args)


SUMMARY_METRICS = ("rmse_m", "pmd", "pfa", "nmse_db")
SUMMARY_COLUMNS = (
    ("scheme", "sweep_variable", "sweep_value", "n_trials", "n_errors")
    + tuple(f"{m}_{s}" for m in SUMMARY_METRICS
            for s in ("mean", "median", "std", "ci95"))
    + ("runtime_ms_mean", "iters_used_mean")
)


def summarize(results_path):
    """Aggregate a results file per (scheme, sweep value).

    Returns summary rows with mean, median, standard deviation and the
    normal-approximation 95% confidence half width of each metric over
    the non-error trials, in sweep order. RMSE aggregation keeps the
    per-trial root form, matching how the sweeps are reported.
    """
    groups = {}
    order = []
    with open(results_path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["scheme"], row["sweep_value"])
            if key not in groups:
                groups[key] = {"rows": [], "errors": 0,
                               "variable": row["sweep_variable"]}
                order.append(key)
            if row["error"]:
                groups[key]["errors"] += 1
            else:
                groups[key]["rows"].append(row)

    out = []
    for key in order:
        scheme, value = key
        g = groups[key]
        summary = {
            "scheme": scheme,
            "sweep_variable": g["variable"],
            "sweep_value": value,
            "n_trials": len(g["rows"]),
            "n_errors": g["errors"],
        }
        for metric in SUMMARY_METRICS:
            vals = np.array([float(r[metric]) for r in g["rows"]
                             if r[metric] != ""])
            if vals.size == 0:
                for stat in ("mean", "median", "std", "ci95"):
                    summary[f"{metric}_{stat}"] = ""
                continue
            summary[f"{metric}_mean"] = float(np.mean(vals))
            summary[f"{metric}_median"] = float(np.median(vals))
            summary[f"{metric}_std"] = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
            summary[f"{metric}_ci95"] = (
                1.96 * summary[f"{metric}_std"] / np.sqrt(vals.size)
                if vals.size > 1 else 0.0
            )
        for extra in ("runtime_ms", "iters_used"):
            vals = np.array([float(r[extra]) for r in g["rows"]
                             if r[extra] != ""])
            summary[f"{extra}_mean"] = float(np.mean(vals)) if vals.size else ""
        out.append(summary)
    return out


def equal_error_point(summary_rows, scheme):
    """Equal-error operating point from a threshold sweep summary.

    Linearly interpolates the crossing of mean P_MD and mean P_FA as
    functions of the swept value. Raises ValueError when the scheme has
    no rows or the curves never cross inside the sweep.
    """
    rows = [r for r in summary_rows
            if r["scheme"] == scheme and r["pmd_mean"] != ""]
    if not rows:
        raise ValueError(f"no rows for scheme '{scheme}'")
    rows = sorted(rows, key=lambda r: float(r["sweep_value"]))
    x = np.array([float(r["sweep_value"]) for r in rows])
    diff = np.array([r["pmd_mean"] - r["pfa_mean"] for r in rows])
    sign = np.sign(diff)
    for i in range(len(x) - 1):
        if sign[i] == 0:
            return {"value": float(x[i]),
                    "rate": float(rows[i]["pmd_mean"])}
        if sign[i] * sign[i + 1] < 0:
            frac = diff[i] / (diff[i] - diff[i + 1])
            value = x[i] + frac * (x[i + 1] - x[i])
            pmd = rows[i]["pmd_mean"] + frac * (
                rows[i + 1]["pmd_mean"] - rows[i]["pmd_mean"])
            return {"value": float(value), "rate": float(pmd)}
    if sign[-1] == 0:
        return {"value": float(x[-1]), "rate": float(rows[-1]["pmd_mean"])}
    raise ValueError(
        f"P_MD and P_FA of scheme '{scheme}' do not cross on this sweep")


def write_summary_csv(path, summary_rows):
    """Persist summarize() output with the fixed column order."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for row in summary_rows:
            writer.writerow({c: row.get(c, "") for c in SUMMARY_COLUMNS})


def bounds_rows(scene_cfg, turbo_cfg, sweep, geometry=None, n_samples=1000,
                se_trials=10, n_mc=10000, progress=None):
    """Bound and prediction rows for the sweep: BCRB per value, SE trace.

    BCRB rows carry (sweep_value, bcrb_m2) with the bound averaged over
    ``n_samples`` prior draws. When 'se' is among the sweep schemes, the
    per-iteration state-evolution prediction of the coefficient MSE at
    the base operating point is appended as (se_iter, se_tau_b_db) rows,
    calibrated against ``se_trials`` matched simulations.
    """
    from .bounds import bcrb_position, se_vs_montecarlo_report

    geometry = geometry or {}
    geometries = geometry.get("geometries")
    rows = []
    if "bcrb" in sweep.schemes:
        for value_index, value in enumerate(sweep.values):
            cfg_v, _ = apply_sweep_value(
                scene_cfg, turbo_cfg, sweep.variable, value, geometries)
            seed_scene, _ = cell_seeds(sweep.root_seed, value_index, 0)
            scene = sample_scene(cfg_v, seed_scene)
            rows.append({
                "sweep_value": value,
                "bcrb_m2": bcrb_position(scene, n_samples=n_samples,
                                         seed=sweep.root_seed),
            })
            if progress is not None:
                progress(f"bcrb {sweep.variable}={value} done")
    if "se" in sweep.schemes:
        report = se_vs_montecarlo_report(
            scene_cfg, turbo_cfg, trials=se_trials, seed=sweep.root_seed,
            n_mc=n_mc)
        for rec in report:
            rows.append({
                "se_iter": rec["outer_iter"],
                "se_tau_b_db": rec["se_mse_b_db"],
            })
        if progress is not None:
            progress(f"se prediction over {len(report)} iterations done")
    return rows
