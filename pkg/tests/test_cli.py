"""Tests for the command line front end."""

import csv
import json
import os

import pytest

from turboisac import cli


def tiny_config(tmp_path, **sweep_overrides):
    cfg = {
        "system": {"n_users": 8, "pilot_len": 16, "n_antennas": 2,
                   "n_targets": 1, "power_dbm": 10.0},
        "geometry": {"bs_pos": [[0.0, 0.0], [100.0, 0.0]],
                     "target_prior_mean": [[50.0, 40.0]]},
        "turbo": {"iter_out": 3, "gamp_iters": 8},
        "sweep": {"variable": "power_dbm", "values": [10.0], "trials": 2,
                  "schemes": ["turbo_hymp"], "root_seed": 1},
    }
    cfg["sweep"].update(sweep_overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestSimulate:
    def test_writes_outputs_and_exits_zero(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        out = str(tmp_path / "out")
        code = cli.main(["simulate", "--config", cfg, "--out", out])
        assert code == 0
        assert len(read_rows(os.path.join(out, "results.csv"))) == 2
        assert os.path.exists(os.path.join(out, "traces.csv"))
        assert os.path.exists(os.path.join(out, "run_config.json"))
        assert "wrote 2 rows" in capsys.readouterr().out

    def test_failed_cell_gives_nonzero_exit(self, tmp_path, monkeypatch):
        """Exit status is zero only when every cell succeeded."""
        import turboisac.baselines as baselines

        monkeypatch.setattr(
            baselines, "scheme_i",
            lambda scene, y, params=None: (_ for _ in ()).throw(
                RuntimeError("boom")))
        cfg = tiny_config(tmp_path, schemes=["turbo_hymp", "scheme_i"])
        out = str(tmp_path / "out")
        code = cli.main(["simulate", "--config", cfg, "--out", out])
        assert code == 1
        rows = read_rows(os.path.join(out, "results.csv"))
        assert sum(1 for r in rows if r["error"]) == 2

    def test_config_error_exit_two(self, tmp_path, capsys):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"system": {"bogus_key": 1}}))
        code = cli.main(["simulate", "--config", str(path),
                         "--out", str(tmp_path / "out")])
        assert code == 2
        assert "bogus_key" in capsys.readouterr().err

    def test_missing_config_exit_two(self, tmp_path, capsys):
        code = cli.main(["simulate", "--config", str(tmp_path / "nope.json"),
                         "--out", str(tmp_path / "out")])
        assert code == 2
        assert "nope.json" in capsys.readouterr().err

    def test_resume_flag_skips_existing(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        out = str(tmp_path / "out")
        assert cli.main(["simulate", "--config", cfg, "--out", out]) == 0
        capsys.readouterr()
        assert cli.main(["simulate", "--config", cfg, "--out", out,
                         "--resume"]) == 0
        assert "wrote 0 rows" in capsys.readouterr().out
        assert len(read_rows(os.path.join(out, "results.csv"))) == 2


class TestSummarize:
    def test_prints_table_and_writes_csv(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        out = str(tmp_path / "out")
        cli.main(["simulate", "--config", cfg, "--out", out])
        capsys.readouterr()
        code = cli.main(["summarize", "--in",
                         os.path.join(out, "results.csv")])
        assert code == 0
        printed = capsys.readouterr().out
        assert "turbo_hymp" in printed and "rmse_m_mean" in printed
        rows = read_rows(os.path.join(out, "summary.csv"))
        assert len(rows) == 1
        assert rows[0]["n_trials"] == "2"

    def test_empty_results_exit_one(self, tmp_path, capsys):
        path = tmp_path / "results.csv"
        path.write_text("scheme,sweep_variable,sweep_value,trial,seed,"
                        "rmse_m,pmd,pfa,nmse_db,runtime_ms,iters_used,error\n")
        code = cli.main(["summarize", "--in", str(path)])
        assert code == 1
        assert "no rows" in capsys.readouterr().err


class TestBounds:
    def test_writes_bounds_csv(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path, schemes=["bcrb"], values=[5.0, 10.0])
        out = str(tmp_path / "out")
        code = cli.main(["bounds", "--config", cfg, "--out", out,
                         "--samples", "50"])
        assert code == 0
        rows = read_rows(os.path.join(out, "bounds.csv"))
        assert len(rows) == 2
        assert all(float(r["bcrb_m2"]) > 0 for r in rows)
        assert {r["sweep_value"] for r in rows} == {"5.0", "10.0"}

    def test_no_bound_schemes_exit_one(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path, schemes=["turbo_hymp"])
        code = cli.main(["bounds", "--config", cfg,
                         "--out", str(tmp_path / "out")])
        assert code == 1
        assert "nothing to do" in capsys.readouterr().err
