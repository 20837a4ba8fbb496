import json
import math
import os
import subprocess
import sys

import pytest

from fedtl.errors import ParameterError
from fedtl.experiment import CSV_COLUMNS, ExperimentConfig, fit_rate_slopes, run_sweep

MEAN_CONFIG = {
    "family": "mean",
    "n0": 600,
    "K": 2,
    "A": [1, 2],
    "h": 0.0,
    "epsilon": 1.0,
    "delta": 1e-5,
    "tilde_c": 3.0,
    "replications": 2,
    "master_seed": 42,
}


def _mask_seconds(csv_text: str) -> str:
    lines = csv_text.splitlines()
    out = [lines[0], lines[1]]
    idx = lines[1].split(",").index("seconds")
    for ln in lines[2:]:
        parts = ln.split(",")
        parts[idx] = "X"
        out.append(",".join(parts))
    return "\n".join(out)


class TestExperimentConfig:
    def test_from_dict_roundtrip(self):
        cfg = ExperimentConfig.from_dict(MEAN_CONFIG)
        again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
        assert again == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ParameterError):
            ExperimentConfig.from_dict({**MEAN_CONFIG, "bogus": 1})

    def test_sweep_field_validation(self):
        with pytest.raises(ParameterError):
            ExperimentConfig.from_dict({**MEAN_CONFIG, "sweep": {"master_seed": [1, 2, 3, 4]}})

    def test_noise_mode_unreachable_from_config(self):
        with pytest.raises(ParameterError):
            ExperimentConfig.from_dict({**MEAN_CONFIG, "estimator": {"noise_mode": "off"}})

    def test_grid_product(self):
        cfg = ExperimentConfig.from_dict({**MEAN_CONFIG, "sweep": {"n0": [100, 200], "epsilon": [1, 2, 4]}})
        assert len(cfg.grid()) == 6


class TestRunSweep:
    def test_single_point_row_count_and_schema(self):
        cfg = ExperimentConfig.from_dict({**MEAN_CONFIG, "replications": 1})
        result = run_sweep(cfg)
        assert len(result.rows) == 1
        lines = result.csv_text.splitlines()
        assert lines[0].startswith("# fedtl-") and "config=" in lines[0]
        assert lines[1] == ",".join(CSV_COLUMNS)
        assert len(lines) == 3
        assert result.ledger_clean

    def test_row_count_grid_times_reps(self):
        cfg = ExperimentConfig.from_dict(
            {**MEAN_CONFIG, "replications": 3, "sweep": {"epsilon": [1.0, 2.0]}}
        )
        result = run_sweep(cfg)
        assert len(result.rows) == 6

    def test_deterministic_modulo_seconds(self):
        cfg = ExperimentConfig.from_dict(MEAN_CONFIG)
        a = run_sweep(cfg)
        b = run_sweep(cfg)
        assert _mask_seconds(a.csv_text) == _mask_seconds(b.csv_text)

    def test_thread_count_does_not_change_results(self):
        cfg = ExperimentConfig.from_dict({**MEAN_CONFIG, "replications": 4})
        old = os.environ.get("FEDTL_THREADS")
        try:
            os.environ["FEDTL_THREADS"] = "1"
            a = run_sweep(cfg)
            os.environ["FEDTL_THREADS"] = "4"
            b = run_sweep(cfg)
        finally:
            if old is None:
                os.environ.pop("FEDTL_THREADS", None)
            else:
                os.environ["FEDTL_THREADS"] = old
        assert _mask_seconds(a.csv_text) == _mask_seconds(b.csv_text)

    def test_errors_positive_and_ledger_ok(self):
        cfg = ExperimentConfig.from_dict(MEAN_CONFIG)
        for row in run_sweep(cfg).rows:
            assert row["err_federated"] >= 0 and math.isfinite(row["err_federated"])
            assert row["ledger_ok"] == 1


class TestFitRateSlopes:
    def _csv(self, ns, errs):
        lines = ["# comment", ",".join(CSV_COLUMNS)]
        for n, e in zip(ns, errs):
            row = {c: "0" for c in CSV_COLUMNS}
            row.update(family="mean", n=str(n), epsilon="1", err_federated=f"{e:.17g}",
                       err_target_only=f"{e:.17g}", branch="aggregate")
            lines.append(",".join(row[c] for c in CSV_COLUMNS))
        return "\n".join(lines)

    def test_exact_power_law(self):
        ns = [100, 200, 400, 800, 1600]
        errs = [5.0 / math.sqrt(n) for n in ns]
        slope, stderr = fit_rate_slopes(self._csv(ns, errs), "n")
        assert slope == pytest.approx(-0.5, abs=1e-9)
        assert stderr < 1e-9

    def test_insufficient_grid(self):
        ns = [100, 200, 400]
        errs = [1.0, 0.7, 0.5]
        with pytest.raises(ParameterError):
            fit_rate_slopes(self._csv(ns, errs), "n")

    def test_bad_axis(self):
        with pytest.raises(ParameterError):
            fit_rate_slopes(self._csv([1, 2, 3, 4], [1, 1, 1, 1]), "d")


def _run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "fedtl.cli", *args],
        capture_output=True, text=True,
    )


class TestCli:
    def test_bad_config_exits_2(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        proc = _run_cli("simulate", str(p))
        assert proc.returncode == 2

    def test_unknown_field_exits_2(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({**MEAN_CONFIG, "mystery": True}))
        proc = _run_cli("simulate", str(p))
        assert proc.returncode == 2

    def test_simulate_and_validate_roundtrip(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(MEAN_CONFIG))
        out = tmp_path / "rows.csv"
        tr = tmp_path / "transcript.log"
        proc = _run_cli("simulate", str(cfg_path), "--output", str(out), "--transcript", str(tr))
        assert proc.returncode == 0, proc.stderr
        assert out.exists() and tr.exists()
        ok = _run_cli("validate-transcript", str(tr), "--epsilon", "1.0", "--delta", "1e-5")
        assert ok.returncode == 0 and "ok:" in ok.stdout

    def test_validate_flags_tampering(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(MEAN_CONFIG))
        tr = tmp_path / "transcript.log"
        _run_cli("simulate", str(cfg_path), "--transcript", str(tr), "--output", str(tmp_path / "o.csv"))
        lines = tr.read_text().splitlines()
        parts = lines[1].split(",")
        parts[6] = f"{float(parts[6]) / 2:.17g}"  # halve a noise scale
        lines[1] = ",".join(parts)
        tr.write_text("\n".join(lines) + "\n")
        proc = _run_cli("validate-transcript", str(tr), "--epsilon", "1.0", "--delta", "1e-5")
        assert proc.returncode == 3
        assert "violation" in proc.stdout

    def test_validate_empty_file_exits_2(self, tmp_path):
        p = tmp_path / "empty.log"
        p.write_text("")
        proc = _run_cli("validate-transcript", str(p), "--epsilon", "1", "--delta", "1e-5")
        assert proc.returncode == 2

    def test_rates_subcommand(self, tmp_path):
        cfg = {**MEAN_CONFIG, "replications": 5, "epsilon": 100.0,
               "sweep": {"n0": [400, 800, 1600, 3200]}}
        cfg_path = tmp_path / "sweep.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "sweep.csv"
        proc = _run_cli("sweep", str(cfg_path), "--output", str(out))
        assert proc.returncode == 0, proc.stderr
        rates = _run_cli("rates", str(out), "--axis", "n", "--column", "err_target_only")
        assert rates.returncode == 0
        assert "slope" in rates.stdout

    def test_version(self):
        proc = _run_cli("--version")
        assert proc.returncode == 0 and "fedtl" in proc.stdout


class TestFederatedWins:
    def test_federated_beats_target_only_on_most_rows(self):
        # h = 0, many informative sources, sampling-dominated: the weighted
        # average should beat the target-only estimate on most replications
        cfg = ExperimentConfig.from_dict(dict(
            family="mean", n0=2000, K=9, h=0.0, epsilon=100.0, delta=1e-5,
            tilde_c=3.0, replications=50, master_seed=77,
        ))
        rows = run_sweep(cfg).rows
        wins = sum(r["err_federated"] <= r["err_target_only"] for r in rows)
        assert wins >= 0.6 * len(rows)


class TestFailedCells:
    def test_aborted_runs_reported_not_violations(self):
        # privacy so strict the range subroutine cannot release an interval:
        # rows carry branch=failed, infinite errors, ledger_ok=0, but the
        # sweep is not flagged as a ledger violation
        cfg = ExperimentConfig.from_dict(dict(
            family="mean", n0=40, K=0, epsilon=0.05, delta=1e-5,
            tilde_c=3.0, replications=2, master_seed=13,
        ))
        result = run_sweep(cfg)
        for row in result.rows:
            assert row["branch"] == "failed"
            assert math.isinf(row["err_federated"])
            assert row["ledger_ok"] == 0
        assert result.ledger_clean


class TestCalibratedSweep:
    def test_calibrate_keyword_resolves_deterministically(self):
        cfg = dict(
            family="mean", n0=1500, K=3, A=[1, 2], h=0.0, epsilon=1.0, delta=1e-5,
            tilde_c="calibrate", replications=2, master_seed=21,
            calibration={"reps": 30},
        )
        a = run_sweep(ExperimentConfig.from_dict(cfg))
        b = run_sweep(ExperimentConfig.from_dict(cfg))
        assert _mask_seconds(a.csv_text) == _mask_seconds(b.csv_text)
        assert all(r["ledger_ok"] for r in a.rows)
