"""End-to-end subcommand runs through main(), exit codes, and artifacts."""

import json
import os

import pytest

from spdectrl.cli import main


def _gain_sweep_config():
    """Small config whose spike moves only the additive gain (slope ~ 0.93)."""
    eye = [[1.0 if i == j else 0.0 for j in range(4)] for i in range(4)]
    return {
        "name": "gain-spike-unit",
        "n": 4, "m": 1, "horizon": 1.0, "n_steps": 64, "n_paths": 400, "seed": 5,
        "scheme": "semi_implicit",
        "nu": [1.0, 1.2, 1.4, 1.6],
        "operator": {"strength": 0.5, "wobble": 0.2},
        "covariance": {"spectrum": "dyadic", "modulation": "decaying"},
        "control_set": [[0.0], [0.5], [1.0]],
        "base_intervals": [0, 0, 0, 0],
        "coefficients": {
            "a": {"c0": -0.2, "cv": [0.0]},
            "b": {"c0": 0.3, "cv": [0.0]},
            "sigma": {"c0": 0.25, "cv": [0.0]},
            "g": {"c0": 0.2, "cv": [0.5]},
            "ell": {"c0": 0.5, "cv": [0.0]},
            "b_dir": [0.8, 0.6, 0.4, 0.2],
            "sigma_dir": [0.5, -0.3, 0.2, 0.1],
            "g_pattern": eye,
            "ell_dir": [1.0, 1.0, 1.0, 1.0],
            "terminal_weight": [1.0, 1.0, 1.0, 1.0],
            "x0": [1.0, 0.8, 0.6, 0.4],
        },
        "scaling": {"t0": 0.25, "eps": [0.015625, 0.03125, 0.0625], "index": 2,
                    "n_paths": 400, "chunk_paths": 200},
    }


def _run_dirs(out):
    return [d for d in sorted(os.listdir(out)) if os.path.isdir(os.path.join(out, d))]


def _record(out):
    (d,) = _run_dirs(out)
    with open(os.path.join(out, d, "record.json"), "r", encoding="utf-8") as fh:
        return d, json.load(fh)


class TestSimulate:
    def test_zero_preset_passes(self, tmp_path, capsys):
        out = str(tmp_path / "out")
        rc = main(["simulate", "--config", "zero", "--out", out])
        captured = capsys.readouterr().out
        assert rc == 0
        assert captured.count("[PASS]") == 4
        run_hash, record = _record(out)
        assert record["config_hash"] == run_hash
        assert record["commands"]["simulate"]["passed"] is True
        assert os.path.isfile(os.path.join(out, run_hash, "stats.csv"))

    def test_stats_are_byte_identical_across_runs(self, tmp_path):
        out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
        for out in (out_a, out_b):
            assert main(["simulate", "--config", "zero", "--out", out,
                         "--paths", "500"]) == 0
        (ha,), (hb,) = _run_dirs(out_a), _run_dirs(out_b)
        assert ha == hb
        bytes_a = open(os.path.join(out_a, ha, "stats.csv"), "rb").read()
        bytes_b = open(os.path.join(out_b, hb, "stats.csv"), "rb").read()
        assert bytes_a == bytes_b

    def test_overrides_move_the_run_directory(self, tmp_path):
        out = str(tmp_path / "out")
        assert main(["simulate", "--config", "zero", "--out", out, "--paths", "200"]) == 0
        assert main(["simulate", "--config", "zero", "--out", out, "--paths", "300"]) == 0
        dirs = _run_dirs(out)
        assert len(dirs) == 2
        for d in dirs:
            with open(os.path.join(out, d, "record.json")) as fh:
                rec = json.load(fh)
            assert rec["config"]["n_paths"] in (200, 300)

    def test_unknown_config_exits_2(self, tmp_path):
        rc = main(["simulate", "--config", "not-a-preset", "--out", str(tmp_path)])
        assert rc == 2

    def test_stats_match_library_recomputation(self, tmp_path):
        import numpy as np
        import spdectrl as sp

        cfg = _gain_sweep_config()
        path = tmp_path / "gain.json"
        path.write_text(json.dumps(cfg))
        out = str(tmp_path / "out")
        assert main(["simulate", "--config", str(path), "--out", out]) == 0

        prob = sp.build_problem(cfg)
        noise = sp.sample_paths(prob.cov, prob.grid, prob.n_paths, prob.seed)
        ens = sp.integrate(prob.coeffs, prob.family, prob.base_control, noise)
        mean_sq = np.sum(ens.states ** 2, axis=2).mean(axis=0)
        cost = sp.integrate_cost(prob.coeffs, prob.family, prob.base_control, noise)

        run_hash, _ = _record(out)
        with open(os.path.join(out, run_hash, "stats.csv")) as fh:
            lines = fh.read().splitlines()[1:]
        values = {}
        for line in lines:
            quantity, t, value, _ = line.split(",")
            values[(quantity, float(t))] = float(value)
        for k, t in enumerate(prob.grid.times):
            assert values[("E|x|2", float(t))] == mean_sq[k]
        assert values[("J", 1.0)] == cost["J"]


class TestAdjoint:
    def test_scalar_preset_passes(self, tmp_path, capsys):
        out = str(tmp_path / "out")
        rc = main(["adjoint", "--config", "scalar-closed-form", "--out", out,
                   "--paths", "300"])
        assert rc == 0
        assert "[PASS] residual_orthogonality" in capsys.readouterr().out
        run_hash, record = _record(out)
        payload = record["commands"]["adjoint"]
        assert payload["passed"] is True
        assert "duality_inner" not in payload  # no spike section in this preset
        assert os.path.isfile(os.path.join(out, run_hash, "adjoint_summary.csv"))

    def test_zero_preset_yields_all_zero_summary(self, tmp_path):
        out = str(tmp_path / "out")
        assert main(["adjoint", "--config", "zero", "--out", out, "--paths", "200"]) == 0
        run_hash, record = _record(out)
        assert record["commands"]["adjoint"]["y_sq_t0"] == 0.0
        with open(os.path.join(out, run_hash, "adjoint_summary.csv")) as fh:
            lines = fh.read().splitlines()[1:]
        for line in lines[:-1]:
            _, y_sq, zq_sq, nres_sq = line.split(",")
            assert float(y_sq) == 0.0
            assert float(zq_sq) == 0.0
            assert float(nres_sq) == 0.0
        assert float(lines[-1].split(",")[1]) == 0.0  # terminal y row

    def test_file_config_with_spike_reports_duality(self, tmp_path, capsys):
        cfg = _gain_sweep_config()
        cfg["spike"] = {"t0": 0.25, "eps": 0.125, "index": 2}
        path = tmp_path / "gain.json"
        path.write_text(json.dumps(cfg))
        out = str(tmp_path / "out")
        rc = main(["adjoint", "--config", str(path), "--out", out, "--paths", "500"])
        captured = capsys.readouterr().out
        assert rc == 0, captured
        assert "[PASS] duality_inner" in captured
        assert "[PASS] duality_tail" in captured
        _, record = _record(out)
        payload = record["commands"]["adjoint"]
        assert payload["checks"]["duality_inner"] is True
        assert payload["duality_inner"]["consistent_3se"] is True


class TestCheckMp:
    def test_mp_preset(self, tmp_path, capsys):
        out = str(tmp_path / "out")
        rc = main(["check-mp", "--config", "mp-n4-U3", "--out", out, "--paths", "500"])
        captured = capsys.readouterr().out
        assert rc == 0, captured
        assert "[PASS] optimal_margins_clean" in captured
        assert "[PASS] falsified_detected" in captured
        run_hash, record = _record(out)
        payload = record["commands"]["check-mp"]
        assert payload["best_indices"] == [0, 2, 0, 2]
        assert payload["n_violations_optimal"] == 0
        assert payload["n_violations_in_window"] >= 1
        run_dir = os.path.join(out, run_hash)
        assert os.path.isfile(os.path.join(run_dir, "margins.csv"))
        assert os.path.isfile(os.path.join(run_dir, "margins_falsified.csv"))
        for ui in range(3):
            assert os.path.isfile(os.path.join(run_dir, "plots", f"margins_u{ui}.dat"))
            assert os.path.isfile(os.path.join(run_dir, "plots", f"margins_falsified_u{ui}.dat"))

    def test_config_without_mp_section_exits_2(self, tmp_path):
        rc = main(["check-mp", "--config", "zero", "--out", str(tmp_path / "out")])
        assert rc == 2

    def test_singleton_control_set_skips_falsification(self, tmp_path, capsys):
        cfg = _gain_sweep_config()
        cfg["control_set"] = [[0.7]]
        cfg["mp"] = {"n_intervals": 4}
        path = tmp_path / "single.json"
        path.write_text(json.dumps(cfg))
        out = str(tmp_path / "out")
        rc = main(["check-mp", "--config", str(path), "--out", out, "--paths", "200"])
        captured = capsys.readouterr().out
        assert rc == 0, captured
        assert "falsification skipped" in captured
        assert "falsified_detected" not in captured
        run_hash, record = _record(out)
        payload = record["commands"]["check-mp"]
        assert payload["best_indices"] == [0, 0, 0, 0]
        assert payload["n_evaluations"] == 1
        assert payload["falsified_interval"] is None
        assert payload["checks"] == {"optimal_margins_clean": True}
        run_dir = os.path.join(out, run_hash)
        assert os.path.isfile(os.path.join(run_dir, "margins.csv"))
        assert not os.path.exists(os.path.join(run_dir, "margins_falsified.csv"))


class TestSpikeSweep:
    def test_gain_config_sweep(self, tmp_path, capsys):
        path = tmp_path / "gain.json"
        path.write_text(json.dumps(_gain_sweep_config()))
        out = str(tmp_path / "out")
        rc = main(["spike-sweep", "--config", str(path), "--out", out])
        captured = capsys.readouterr().out
        assert rc == 0, captured
        assert "[PASS] slope_in_band" in captured
        assert "[PASS] remainder_trend" in captured
        run_hash, record = _record(out)
        payload = record["commands"]["spike-sweep"]
        assert 0.85 <= payload["slope"] <= 1.15
        assert len(payload["vi"]["remainder"]) == 3
        run_dir = os.path.join(out, run_hash)
        with open(os.path.join(run_dir, "scaling.csv")) as fh:
            lines = fh.read().splitlines()
        assert lines[0] == ("eps,sup_xi_sq,stderr,envelope,envelope_ok,"
                            "vi_total,vi_stderr,vi_remainder,vi_remainder_stderr")
        assert len(lines) == 4
        assert os.path.isfile(os.path.join(run_dir, "plots", "scaling_loglog.dat"))

    def test_degenerate_spike_reports_zeros_and_passes(self, tmp_path, capsys):
        cfg = _gain_sweep_config()
        cfg["scaling"]["index"] = 0  # spike value equals the base control
        path = tmp_path / "noop.json"
        path.write_text(json.dumps(cfg))
        out = str(tmp_path / "out")
        rc = main(["spike-sweep", "--config", str(path), "--out", out])
        captured = capsys.readouterr().out
        assert rc == 0, captured
        assert "slope check skipped" in captured
        assert "slope_in_band" not in captured
        _, record = _record(out)
        payload = record["commands"]["spike-sweep"]
        assert payload["degenerate"] is True
        assert payload["sup_xi_sq"] == [0.0, 0.0, 0.0]
        assert payload["vi"]["total"] == [0.0, 0.0, 0.0]
        assert payload["remainder_trend_slope"] is None
        assert payload["passed"] is True

    def test_config_without_scaling_section_exits_2(self, tmp_path):
        rc = main(["spike-sweep", "--config", "zero", "--out", str(tmp_path / "out")])
        assert rc == 2


class TestReport:
    def test_empty_directory_exits_2(self, tmp_path):
        rc = main(["report", "--out", str(tmp_path)])
        assert rc == 2

    def test_missing_directory_exits_2(self, tmp_path):
        rc = main(["report", "--out", str(tmp_path / "nope")])
        assert rc == 2

    def test_lists_finished_runs(self, tmp_path, capsys):
        out = str(tmp_path / "out")
        assert main(["simulate", "--config", "zero", "--out", out]) == 0
        assert main(["adjoint", "--config", "zero", "--out", out]) == 0
        capsys.readouterr()
        rc = main(["report", "--out", out])
        captured = capsys.readouterr().out
        assert rc == 0
        lines = captured.strip().splitlines()
        assert len(lines) == 3  # header + two command rows
        assert "zero" in lines[1]
        assert lines[1].endswith("yes") and lines[2].endswith("yes")
