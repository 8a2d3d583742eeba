"""
Tests for report serialization and validation.
"""
import json

import numpy as np
import pandas as pd
import pytest

from src.monitoring.run_report import (
    IterationRecord,
    LadderStepRecord,
    MeasureReport,
    ReportWriter,
    RunReport,
    RunStatus,
    to_plain,
)


def iteration(n, residual):
    return IterationRecord(n=n, gamma_n=1e-2, N_n=4.0, residual=residual, residual_high=residual,
                           zeta_norm=0.0, zeta_ratio=0.0, step_norm=0.0, kam_steps=1,
                           min_melnikov_ratio=float("nan"), triangular_residual=0.0, refine_steps=0)


def ladder_step(outer, nu):
    record = dict(nu=nu, N_scale=4.0, remainder=1e-3, remainder_high=1e-2, pattern_bound=1.0,
                  homological_residual=1e-12, min_melnikov_ratio=3.0, block_drift=1e-4,
                  generator_norm=1e-3, symplectic_residual=1e-14, self_adjoint_residual=0.0)
    return LadderStepRecord.from_ladder(outer, record)


@pytest.fixture
def run_report():
    return RunReport(command="solve", config={"eps": 1e-4}, omega=[1.0, 2.0],
                     converged=True, iterations=[iteration(0, 1e-3), iteration(1, 1e-7)],
                     ladder=[ladder_step(0, 0), ladder_step(0, 1)], final={"residual": 1e-7})


class TestToPlain:
    """Test cases for to_plain."""

    def test_numpy_values(self):
        payload = to_plain({"a": np.float64(1.5), "b": np.int32(3), "c": np.array([1.0, 2.0]),
                            "d": np.bool_(True)})
        assert payload == {"a": 1.5, "b": 3, "c": [1.0, 2.0], "d": True}
        assert type(payload["b"]) is int

    def test_non_finite_become_null(self):
        assert to_plain([float("nan"), np.inf, 1.0]) == [None, None, 1.0]

    def test_complex(self):
        assert to_plain(np.array([1 + 2j])) == {"real": [1.0], "imag": [2.0]}
        assert to_plain(3j) == {"real": 0.0, "imag": 3.0}

    def test_enum_and_dataclass(self):
        assert to_plain(RunStatus.EXCLUDED) == "excluded"
        assert to_plain(iteration(0, 1.0))["min_melnikov_ratio"] is None


class TestReportWriter:
    """Test cases for ReportWriter."""

    def test_write_run_report(self, tmp_path, run_report):
        written = ReportWriter().write(run_report, str(tmp_path / "solve.json"))

        names = sorted(p.name for p in written)
        assert names == ["solve.json", "solve_ladder.csv", "solve_residuals.csv"]
        payload = json.loads((tmp_path / "solve.json").read_text())
        assert payload["schema_version"] == "1.0"
        assert payload["iterations"][1]["residual"] == pytest.approx(1e-7)
        frame = pd.read_csv(tmp_path / "solve_residuals.csv")
        assert list(frame["n"]) == [0, 1]

    def test_output_is_stable(self, tmp_path, run_report):
        writer = ReportWriter(write_csv=False)
        writer.write(run_report, str(tmp_path / "a.json"))
        writer.write(run_report, str(tmp_path / "b.json"))
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_measure_sweep_csv(self, tmp_path):
        rows = [{"parameter": "gamma", "value": g, "gamma": g, "condition": "total", "fraction": f,
                 "excluded": 0, "n": 10, "ci_low": 0.0, "ci_high": 1.0}
                for g, f in [(1e-2, 0.2), (1e-3, 0.1)]]
        report = MeasureReport(config={}, fractions={"total": {"fraction": 0.2}}, sweep=rows)
        ReportWriter().write(report, str(tmp_path / "measure.json"))

        frame = pd.read_csv(tmp_path / "measure_sweep.csv")
        assert list(frame["value"]) == [1e-3, 1e-2]

    def test_invalid_report_is_rejected(self, tmp_path):
        report = RunReport(command="bogus", config={})
        with pytest.raises(ValueError, match="Report validation error"):
            ReportWriter().write(report, str(tmp_path / "bad.json"))
        assert not (tmp_path / "bad.json").exists()
