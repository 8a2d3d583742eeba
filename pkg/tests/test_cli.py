"""
Tests for the kamtor command line.
"""
import argparse
import json

import numpy as np
import pytest
import yaml

from src.cli.main import (
    COMMANDS,
    EXIT_ERROR,
    EXIT_EXCLUDED,
    EXIT_OK,
    main,
    parse_omega,
    parse_sweep,
    run_pipeline,
)
from src.lattice.spectral import IndexSets
from src.model.hamiltonian import tangential_frequencies
from src.monitoring.run_report import DEFAULT_SCHEMA, ReportKind


def write_config(tmp_path, **overrides):
    data = {
        "S": [-1, 0, 1],
        "K_normal": 3,
        "L_angle": 2,
        "eps": 0.0,
        "gamma": 1e-2,
        "tau": 3.0,
        "kam": {"s0": 1, "sigma": 2, "target_rel": 1e-8, "floor_rel": 1e-11, "max_steps": 8},
        "nash_moser": {"tol_NM": 1e-9, "max_outer": 6},
        "measure": {"n_samples": 256},
        "stability": {"horizon": 50.0, "n_samples": 2, "n_times": 20},
        "runtime": {"log_level": "WARNING"},
    }
    data.update(overrides)
    path = tmp_path / "run.yml"
    path.write_text(yaml.dump(data), encoding="utf-8")
    return str(path)


def read_report(path):
    return json.loads(path.read_text(encoding="utf-8"))


class TestArguments:
    """Test cases for the argument parsers."""

    def test_parse_sweep(self):
        sweep = parse_sweep("gamma=1e-3:1e-1:8")
        assert sweep.parameter == "gamma"
        assert sweep.start == pytest.approx(1e-3)
        assert sweep.stop == pytest.approx(1e-1)
        assert sweep.num == 8

    @pytest.mark.parametrize("text", ["gamma", "gamma=1:2", "delta=1e-3:1e-1:8", "gamma=1e-3:1e-1:1"])
    def test_parse_sweep_rejects(self, text):
        with pytest.raises(argparse.ArgumentTypeError, match="Invalid sweep"):
            parse_sweep(text)

    def test_parse_omega(self):
        assert parse_omega("1.5, 2,3e-1") == [1.5, 2.0, 0.3]
        with pytest.raises(argparse.ArgumentTypeError):
            parse_omega("1.0,x")

    def test_commands_are_report_kinds(self):
        assert set(COMMANDS) == {kind.value for kind in ReportKind}
        schema = json.loads(DEFAULT_SCHEMA.read_text())
        assert set(schema["properties"]["command"]["enum"]) == set(COMMANDS)

    def test_unknown_command(self):
        with pytest.raises(ValueError, match="Unknown command"):
            run_pipeline(None, "bogus")


class TestCommands:
    """Test cases for running the subcommands end to end."""

    def test_solve_unperturbed(self, tmp_path):
        out = tmp_path / "report.json"
        status = main(["solve", "--config", write_config(tmp_path), "--out", str(out)])

        assert status == EXIT_OK
        report = read_report(out)
        assert report["command"] == "solve"
        assert report["status"] == "ok"
        assert report["converged"] is True
        assert report["iterations"][0]["residual"] < 1e-10
        assert report["size_audit"]["y_norm"] == 0.0
        assert (tmp_path / "report_residuals.csv").exists()

    def test_solve_is_reproducible(self, tmp_path):
        config = write_config(tmp_path)
        first, second = tmp_path / "a.json", tmp_path / "b.json"
        assert main(["solve", "--config", config, "--out", str(first), "--seed", "3"]) == EXIT_OK
        assert main(["solve", "--config", config, "--out", str(second), "--seed", "3"]) == EXIT_OK
        assert first.read_bytes() == second.read_bytes()

    def test_resonant_frequency_is_excluded(self, tmp_path):
        index_sets = IndexSets((-1, 0, 1), K_normal=3, L_angle=2)
        # equal actions at -1 and 1 give omega . (1, 0, -1) = 0
        omega = tangential_frequencies(np.array([0.4, 0.3, 0.4]), index_sets)
        out = tmp_path / "excluded.json"
        status = main(["solve", "--config", write_config(tmp_path, eps=1e-4),
                       "--omega", ",".join(repr(float(v)) for v in omega), "--out", str(out)])

        assert status == EXIT_EXCLUDED
        report = read_report(out)
        assert report["status"] == "excluded"
        assert report["exclusion"]["error"] == "DiophantineViolation"
        assert report["exclusion"]["exclusion"] is True
        ell = report["exclusion"]["details"]["ell"]
        assert abs(np.dot(ell, omega)) < 1e-9

    def test_reduce(self, tmp_path):
        out = tmp_path / "reduce.json"
        status = main(["reduce", "--config", write_config(tmp_path), "--out", str(out)])

        assert status == EXIT_OK
        report = read_report(out)
        assert report["command"] == "reduce"
        assert "normal_form" in report["final"]
        assert report["final"]["Mbar_condition"] < 1e8

    def test_stability(self, tmp_path):
        out = tmp_path / "stability.json"
        status = main(["stability", "--config", write_config(tmp_path), "--out", str(out)])

        assert status == EXIT_OK
        stability = read_report(out)["stability"]
        assert stability["frame_bound"] == pytest.approx(1.0)
        assert stability["sup_ratio"] <= 1.0 + 1e-12

    def test_measure_sweep(self, tmp_path):
        out = tmp_path / "measure.json"
        status = main(["measure", "--config", write_config(tmp_path), "--out", str(out),
                       "--sweep", "gamma=1e-3:1e-1:4", "--threads", "2"])

        assert status == EXIT_OK
        report = read_report(out)
        assert report["command"] == "measure"
        assert set(report["fractions"]) == {"diophantine", "first", "second_plus", "second_minus", "total"}
        totals = [row["fraction"] for row in report["sweep"] if row["condition"] == "total"]
        assert len(totals) == 4
        assert all(a <= b for a, b in zip(totals[:-1], totals[1:]))
        assert (tmp_path / "measure_sweep.csv").exists()

    def test_invalid_config(self, tmp_path):
        out = tmp_path / "bad.json"
        status = main(["solve", "--config", write_config(tmp_path, gamma=0.5), "--out", str(out)])

        assert status == EXIT_ERROR
        assert not out.exists()

    def test_no_convergence_is_an_error(self, tmp_path):
        out = tmp_path / "stalled.json"
        config = write_config(tmp_path, eps=1e-4, nash_moser={"max_outer": 0})
        status = main(["solve", "--config", config, "--out", str(out)])

        assert status == EXIT_ERROR
        report = read_report(out)
        assert report["status"] == "failed"
        assert report["error"]["error"] == "NoConvergence"
