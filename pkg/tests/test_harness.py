"""Tests for the sweep harness: config parsing, cell seeding, CSV runs."""

import csv
import json
import os

import numpy as np
import pytest

from turboisac.harness import (
    RESULT_COLUMNS,
    TRACE_COLUMNS,
    ConfigError,
    SweepSpec,
    apply_sweep_value,
    cell_seeds,
    equal_error_point,
    load_config,
    run_cell,
    run_sweep,
    serialize_config,
    summarize,
    write_summary_csv,
)
from turboisac.scene import SceneConfig, _dbm_to_watt
from turboisac.turbo import TurboConfig


def tiny_config_dict():
    """A sweep small enough to run in well under a second per cell."""
    return {
        "system": {
            "n_users": 8,
            "pilot_len": 16,
            "n_antennas": 2,
            "n_targets": 1,
            "power_dbm": 10.0,
        },
        "geometry": {
            "bs_pos": [[0.0, 0.0], [100.0, 0.0]],
            "target_prior_mean": [[50.0, 40.0]],
        },
        "turbo": {"iter_out": 4, "gamp_iters": 8},
        "sweep": {
            "variable": "power_dbm",
            "values": [5.0, 10.0],
            "trials": 3,
            "schemes": ["turbo_hymp", "scheme_i"],
            "root_seed": 3,
        },
    }


def write_config(tmp_path, cfg):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestLoadConfig:
    def test_empty_config_gives_default_operating_point(self, tmp_path):
        """An empty file resolves to K=500, L=200, N=8, M=3, Q=4,
        activity 0.2, path probability 0.9, P=10 dBm."""
        path = write_config(tmp_path, {})
        scene_cfg, geometry, turbo_cfg, sweep = load_config(path)
        assert scene_cfg.n_users == 500
        assert scene_cfg.pilot_len == 200
        assert scene_cfg.n_antennas == 8
        assert scene_cfg.n_targets == 3
        assert scene_cfg.n_bs == 4
        assert scene_cfg.activity_prob == pytest.approx(0.2)
        assert scene_cfg.path_prob == pytest.approx(0.9)
        assert scene_cfg.power_w == pytest.approx(0.01)
        assert turbo_cfg == TurboConfig()
        assert sweep.trials == 1

    def test_dbm_keys_convert_to_watts(self, tmp_path):
        """power_dbm 10 is 10 mW; noise_dbm -109 matches the default."""
        path = write_config(tmp_path, {"system": {"power_dbm": 10.0,
                                                  "noise_dbm": -109.0}})
        scene_cfg, _, _, _ = load_config(path)
        assert scene_cfg.power_w == pytest.approx(1e-3 * 10 ** (10 / 10))
        assert scene_cfg.noise_var == pytest.approx(_dbm_to_watt(-109.0))

    def test_unknown_section_named_in_error(self, tmp_path):
        path = write_config(tmp_path, {"systems": {}})
        with pytest.raises(ConfigError, match="systems"):
            load_config(path)

    def test_unknown_system_key_named_in_error(self, tmp_path):
        path = write_config(tmp_path, {"system": {"n_user": 10}})
        with pytest.raises(ConfigError, match="n_user"):
            load_config(path)

    def test_unknown_turbo_key_named_in_error(self, tmp_path):
        path = write_config(tmp_path, {"turbo": {"itermax": 5}})
        with pytest.raises(ConfigError, match="itermax"):
            load_config(path)

    def test_unknown_sweep_key_named_in_error(self, tmp_path):
        path = write_config(tmp_path, {"sweep": {"value": [1]}})
        with pytest.raises(ConfigError, match="value"):
            load_config(path)

    def test_geometry_sweep_requires_named_geometry(self, tmp_path):
        """Sweeping geometry_id without a matching geometries entry names
        the missing id."""
        path = write_config(tmp_path, {
            "sweep": {"variable": "geometry_id", "values": ["ring"]},
        })
        with pytest.raises(ConfigError, match="ring"):
            load_config(path)

    def test_invalid_json_reported(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="JSON"):
            load_config(str(path))

    def test_round_trip_identity(self, tmp_path):
        """serialize_config output parses back to equal objects."""
        path = write_config(tmp_path, tiny_config_dict())
        scene_cfg, geometry, turbo_cfg, sweep = load_config(path)
        path2 = tmp_path / "echo.json"
        path2.write_text(json.dumps(
            serialize_config(scene_cfg, geometry, turbo_cfg, sweep)))
        sc2, ge2, tc2, sw2 = load_config(str(path2))
        assert sc2.n_users == scene_cfg.n_users
        assert sc2.pilot_len == scene_cfg.pilot_len
        assert sc2.power_w == pytest.approx(scene_cfg.power_w)
        assert sc2.noise_var == pytest.approx(scene_cfg.noise_var)
        np.testing.assert_allclose(sc2.bs_pos, scene_cfg.bs_pos)
        np.testing.assert_allclose(sc2.target_prior_mean,
                                   scene_cfg.target_prior_mean)
        assert tc2 == turbo_cfg
        assert sw2.variable == sweep.variable
        assert sw2.values == sweep.values
        assert sw2.trials == sweep.trials
        assert sw2.schemes == sweep.schemes
        assert sw2.root_seed == sweep.root_seed


class TestSweepSpec:
    def test_empty_values_rejected(self):
        with pytest.raises(ConfigError, match="values"):
            SweepSpec(values=[])

    def test_zero_trials_rejected(self):
        with pytest.raises(ConfigError, match="trials"):
            SweepSpec(trials=0)

    def test_unknown_variable_rejected(self):
        with pytest.raises(ConfigError, match="snr"):
            SweepSpec(variable="snr")

    def test_unknown_scheme_rejected(self):
        with pytest.raises(ConfigError, match="scheme_ii"):
            SweepSpec(schemes=("scheme_ii",))


class TestApplySweepValue:
    def test_power_sets_watts(self):
        cfg, _ = apply_sweep_value(SceneConfig(), TurboConfig(),
                                   "power_dbm", 20.0)
        assert cfg.power_w == pytest.approx(0.1)

    def test_antennas_pilot_len_path_prob(self):
        cfg, _ = apply_sweep_value(SceneConfig(), TurboConfig(), "antennas", 16)
        assert cfg.n_antennas == 16
        cfg, _ = apply_sweep_value(SceneConfig(), TurboConfig(), "pilot_len", 64)
        assert cfg.pilot_len == 64
        cfg, _ = apply_sweep_value(SceneConfig(), TurboConfig(), "path_prob", 0.5)
        assert cfg.path_prob == pytest.approx(0.5)

    def test_threshold_touches_turbo_only(self):
        base = SceneConfig()
        scene_cfg, turbo_cfg = apply_sweep_value(
            base, TurboConfig(), "threshold", 0.7)
        assert turbo_cfg.lambda_thre == pytest.approx(0.7)
        assert scene_cfg is base

    def test_targets_slices_prior_rows(self):
        cfg, _ = apply_sweep_value(SceneConfig(), TurboConfig(), "targets", 2)
        assert cfg.n_targets == 2
        assert np.asarray(cfg.target_prior_mean).shape == (2, 2)

    def test_targets_beyond_prior_rows_rejected(self):
        with pytest.raises(ConfigError, match="target_prior_mean"):
            apply_sweep_value(SceneConfig(), TurboConfig(), "targets", 9)

    def test_geometry_id_swaps_stations(self):
        geos = {"two": {"bs_pos": [[0, 0], [10, 0]],
                        "target_prior_mean": [[5.0, 5.0]]}}
        cfg, _ = apply_sweep_value(SceneConfig(), TurboConfig(),
                                   "geometry_id", "two", geometries=geos)
        assert cfg.n_bs == 2
        assert cfg.n_targets == 1


class TestCellSeeds:
    def test_deterministic_and_distinct(self):
        """Same cell gives the same pair; any coordinate change gives a
        different pair."""
        base = cell_seeds(7, 2, 5)
        assert base == cell_seeds(7, 2, 5)
        others = [cell_seeds(8, 2, 5), cell_seeds(7, 3, 5), cell_seeds(7, 2, 6)]
        assert all(o != base for o in others)
        assert base[0] != base[1]


class TestRunSweep:
    def test_row_count_and_schema(self, tmp_path):
        """2 values x 3 trials x 2 schemes gives 12 rows in the fixed
        column order."""
        path = write_config(tmp_path, tiny_config_dict())
        scene_cfg, geometry, turbo_cfg, sweep = load_config(path)
        out = str(tmp_path / "out")
        report = run_sweep(scene_cfg, turbo_cfg, sweep, out, geometry=geometry)
        assert report["rows_written"] == 12
        assert report["failures"] == 0
        with open(os.path.join(out, "results.csv"), newline="") as fh:
            header = fh.readline().strip().split(",")
        assert tuple(header) == RESULT_COLUMNS
        rows = read_rows(os.path.join(out, "results.csv"))
        assert len(rows) == 12
        keys = {(r["scheme"], r["sweep_value"], r["trial"]) for r in rows}
        assert len(keys) == 12
        assert all(r["error"] == "" for r in rows)
        assert all(float(r["rmse_m"]) >= 0 for r in rows)

    def test_rerun_is_deterministic_modulo_runtime(self, tmp_path):
        path = write_config(tmp_path, tiny_config_dict())
        scene_cfg, geometry, turbo_cfg, sweep = load_config(path)
        run_sweep(scene_cfg, turbo_cfg, sweep, str(tmp_path / "a"),
                  geometry=geometry)
        run_sweep(scene_cfg, turbo_cfg, sweep, str(tmp_path / "b"),
                  geometry=geometry)

        def strip(rows):
            return [{k: v for k, v in r.items() if k != "runtime_ms"}
                    for r in rows]

        a = strip(read_rows(str(tmp_path / "a" / "results.csv")))
        b = strip(read_rows(str(tmp_path / "b" / "results.csv")))
        assert a == b

    def test_resume_completes_without_duplicates(self, tmp_path):
        """Truncating the results file and resuming fills in exactly the
        missing cells."""
        path = write_config(tmp_path, tiny_config_dict())
        scene_cfg, geometry, turbo_cfg, sweep = load_config(path)
        out = str(tmp_path / "out")
        run_sweep(scene_cfg, turbo_cfg, sweep, out, geometry=geometry)
        results = os.path.join(out, "results.csv")
        full = read_rows(results)
        with open(results) as fh:
            lines = fh.readlines()
        with open(results, "w") as fh:
            fh.writelines(lines[:5])  # header + 4 rows
        report = run_sweep(scene_cfg, turbo_cfg, sweep, out,
                           geometry=geometry, resume=True)
        assert report["rows_written"] == 8
        rows = read_rows(results)
        keys = [(r["scheme"], r["sweep_value"], r["trial"]) for r in rows]
        assert len(keys) == 12 and len(set(keys)) == 12

        def strip(rows):
            return sorted(
                tuple(sorted((k, v) for k, v in r.items() if k != "runtime_ms"))
                for r in rows)

        assert strip(rows) == strip(full)

    def test_failing_cells_become_error_rows(self, tmp_path, monkeypatch):
        """A scheme that raises produces an error row naming the exception
        and the sweep still finishes the remaining cells."""
        import turboisac.baselines as baselines

        def boom(scene, y, params=None):
            raise RuntimeError("synthetic failure")

        monkeypatch.setattr(baselines, "scheme_i", boom)
        path = write_config(tmp_path, tiny_config_dict())
        scene_cfg, geometry, turbo_cfg, sweep = load_config(path)
        out = str(tmp_path / "out")
        report = run_sweep(scene_cfg, turbo_cfg, sweep, out, geometry=geometry)
        assert report["rows_written"] == 12
        assert report["failures"] == 6
        rows = read_rows(os.path.join(out, "results.csv"))
        bad = [r for r in rows if r["scheme"] == "scheme_i"]
        good = [r for r in rows if r["scheme"] == "turbo_hymp"]
        assert all("RuntimeError: synthetic failure" in r["error"] for r in bad)
        assert all(r["rmse_m"] == "" for r in bad)
        assert all(r["error"] == "" and r["rmse_m"] != "" for r in good)

    def test_traces_written_for_turbo_only(self, tmp_path):
        path = write_config(tmp_path, tiny_config_dict())
        scene_cfg, geometry, turbo_cfg, sweep = load_config(path)
        out = str(tmp_path / "out")
        run_sweep(scene_cfg, turbo_cfg, sweep, out, geometry=geometry)
        traces = read_rows(os.path.join(out, "traces.csv"))
        assert traces, "turbo runs must leave per-iteration traces"
        assert tuple(traces[0].keys()) == TRACE_COLUMNS
        iters = [int(t["outer_iter"]) for t in traces
                 if t["sweep_value"] == "10.0" and t["trial"] == "0"]
        assert iters == list(range(1, len(iters) + 1))

    def test_run_config_echo_written(self, tmp_path):
        path = write_config(tmp_path, tiny_config_dict())
        scene_cfg, geometry, turbo_cfg, sweep = load_config(path)
        out = str(tmp_path / "out")
        run_sweep(scene_cfg, turbo_cfg, sweep, out, geometry=geometry)
        with open(os.path.join(out, "run_config.json")) as fh:
            echo = json.load(fh)
        assert echo["system"]["n_users"] == 8
        assert "environment" in echo and "numpy_version" in echo["environment"]


class TestRunCell:
    def test_same_cell_same_seed_across_schemes(self, tmp_path):
        """Schemes inside one cell share the scene seed, so comparisons
        are paired."""
        path = write_config(tmp_path, tiny_config_dict())
        scene_cfg, geometry, turbo_cfg, sweep = load_config(path)
        row_a, _ = run_cell("turbo_hymp", scene_cfg, turbo_cfg, sweep, 0, 1)
        row_b, _ = run_cell("scheme_i", scene_cfg, turbo_cfg, sweep, 0, 1)
        assert row_a["seed"] == row_b["seed"]


class TestSummarize:
    def make_results(self, tmp_path, rows):
        path = str(tmp_path / "results.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
            writer.writeheader()
            for r in rows:
                base = {c: "" for c in RESULT_COLUMNS}
                base.update(r)
                writer.writerow(base)
        return path

    def row(self, **kwargs):
        base = dict(scheme="turbo_hymp", sweep_variable="power_dbm",
                    sweep_value=10.0, trial=0, seed=1, rmse_m=1.0, pmd=0.0,
                    pfa=0.0, nmse_db=-10.0, runtime_ms=5.0, iters_used=3,
                    error="")
        base.update(kwargs)
        return base

    def test_single_row_stats(self, tmp_path):
        """One trial: mean and median equal the value, spread is zero."""
        path = self.make_results(tmp_path, [self.row(rmse_m=2.5)])
        out = summarize(path)
        assert len(out) == 1
        assert out[0]["rmse_m_mean"] == pytest.approx(2.5)
        assert out[0]["rmse_m_median"] == pytest.approx(2.5)
        assert out[0]["rmse_m_std"] == 0.0
        assert out[0]["rmse_m_ci95"] == 0.0

    def test_known_mean_and_ci(self, tmp_path):
        """Four trials at 1,2,3,4: mean 2.5, ci95 = 1.96*std/sqrt(4)."""
        rows = [self.row(trial=t, rmse_m=v)
                for t, v in enumerate([1.0, 2.0, 3.0, 4.0])]
        path = self.make_results(tmp_path, rows)
        out = summarize(path)
        std = np.std([1, 2, 3, 4], ddof=1)
        assert out[0]["n_trials"] == 4
        assert out[0]["rmse_m_mean"] == pytest.approx(2.5)
        assert out[0]["rmse_m_ci95"] == pytest.approx(1.96 * std / 2.0)

    def test_ci_shrinks_with_sample_size(self, tmp_path):
        """Quadrupling the trial count halves the confidence interval,
        up to sampling noise, for draws of fixed variance."""
        rng = np.random.default_rng(0)
        small = [self.row(trial=t, rmse_m=float(v))
                 for t, v in enumerate(rng.normal(5.0, 1.0, size=64))]
        big = [self.row(sweep_value=20.0, trial=t, rmse_m=float(v))
               for t, v in enumerate(rng.normal(5.0, 1.0, size=256))]
        path = self.make_results(tmp_path, small + big)
        out = summarize(path)
        by_value = {r["sweep_value"]: r for r in out}
        ratio = by_value["10.0"]["rmse_m_ci95"] / by_value["20.0"]["rmse_m_ci95"]
        assert ratio == pytest.approx(2.0, rel=0.25)

    def test_error_rows_counted_not_averaged(self, tmp_path):
        rows = [self.row(trial=0, rmse_m=1.0),
                self.row(trial=1, rmse_m="", pmd="", pfa="", nmse_db="",
                         runtime_ms="", iters_used="",
                         error="RuntimeError: boom")]
        path = self.make_results(tmp_path, rows)
        out = summarize(path)
        assert out[0]["n_trials"] == 1
        assert out[0]["n_errors"] == 1
        assert out[0]["rmse_m_mean"] == pytest.approx(1.0)

    def test_summary_csv_round_trip(self, tmp_path):
        path = self.make_results(
            tmp_path, [self.row(trial=t, rmse_m=1.0 + t) for t in range(3)])
        out = summarize(path)
        dest = str(tmp_path / "summary.csv")
        write_summary_csv(dest, out)
        back = read_rows(dest)
        assert len(back) == 1
        assert float(back[0]["rmse_m_mean"]) == pytest.approx(2.0)

    def test_equal_error_crossing_interpolated(self, tmp_path):
        """With pmd = theta and pfa = 1 - theta the curves cross at 0.5."""
        rows = []
        for i, th in enumerate([0.2, 0.4, 0.6, 0.8]):
            rows.append(self.row(sweep_variable="threshold", sweep_value=th,
                                 trial=0, pmd=th, pfa=1.0 - th))
        path = self.make_results(tmp_path, rows)
        out = summarize(path)
        pt = equal_error_point(out, "turbo_hymp")
        assert pt["value"] == pytest.approx(0.5)
        assert pt["rate"] == pytest.approx(0.5)

    def test_equal_error_requires_crossing(self, tmp_path):
        rows = [self.row(sweep_variable="threshold", sweep_value=th, trial=0,
                         pmd=0.1 + th / 10, pfa=0.05)
                for th in [0.5, 0.6]]
        path = self.make_results(tmp_path, rows)
        out = summarize(path)
        with pytest.raises(ValueError, match="cross"):
            equal_error_point(out, "turbo_hymp")
