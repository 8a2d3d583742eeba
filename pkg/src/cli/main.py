"""
kamtor command line: solve, reduce, measure and stability runs driven by a YAML config.

Exit status is 0 on success, 2 when the frequency is excluded by a diophantine or
Melnikov condition and 1 on any other failure. A report is written in every case.
"""
import argparse
import logging
import sys
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from dotenv import load_dotenv

from ..core.config_loader import ConfigLoader, SolverConfig, SweepConfig, resolve_threads
from ..core.exceptions import KamError
from ..measure.nonresonance import ConditionSuite, FrequencyBox, measure_estimate
from ..model.hamiltonian import FrequencyModel, Perturbation, TorusEmbedding, xi_of_omega
from ..monitoring.run_report import (
    LadderStepRecord,
    MeasureReport,
    ReportKind,
    ReportWriter,
    RunReport,
    RunStatus,
)
from ..newton.nash_moser import (
    bundle_at_solution,
    default_omega,
    index_sets_from_config,
    nash_moser_solve,
    stability_check,
    torus_size_audit,
    torus_size_sweep,
)
from ..newton.right_inverse import build_bundle
from ..reduction.kam import MelnikovParams

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_EXCLUDED = 2

COMMANDS = tuple(kind.value for kind in ReportKind)
Report = Union[RunReport, MeasureReport]


def parse_sweep(text: str) -> SweepConfig:
    """``gamma=1e-3:1e-1:8`` -> SweepConfig(parameter, start, stop, num)."""
    try:
        parameter, spec = text.split("=", 1)
        start, stop, num = spec.split(":")
        return SweepConfig(parameter=parameter.strip(), start=float(start), stop=float(stop), num=int(num))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"Invalid sweep '{text}': expected name=start:stop:num ({e})")


def parse_omega(text: str) -> List[float]:
    try:
        return [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Invalid omega '{text}': expected comma separated numbers")


def register_commands(sub: argparse._SubParsersAction) -> None:
    """Register the four run subcommands on a subparsers group."""
    helps = {
        "solve": "Compute the invariant torus at a frequency",
        "reduce": "Reduce the linearized operator at the unperturbed torus",
        "measure": "Monte-Carlo measure of the excluded frequencies",
        "stability": "Solve, then propagate the linearized flow around the torus",
    }
    for command in COMMANDS:
        cmd = sub.add_parser(command, help=helps[command])
        cmd.add_argument("--config", type=str, required=True, help="YAML solver configuration")
        cmd.add_argument("--out", type=str, default=f"{command}.json", help="Report path")
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--threads", type=int, default=None,
                         help="Worker threads (falls back to KAMTOR_THREADS, then the config)")
        if command != "measure":
            cmd.add_argument("--omega", type=parse_omega, default=None,
                             help="Tangential frequency, comma separated, one entry per site of S")
        if command == "measure":
            cmd.add_argument("--sweep", type=parse_sweep, default=None, help="e.g. gamma=1e-3:1e-1:8")
        if command == "solve":
            cmd.add_argument("--size-sweep", type=parse_sweep, default=None,
                             help="Re-solve along eps=start:stop:num and fit the torus size exponents")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kamtor", description="Quasi-periodic invariant tori for dNLS")
    sub = parser.add_subparsers(dest="command", required=True)
    register_commands(sub)
    return parser


def load_run_config(path: str, omega: Optional[Sequence[float]] = None, seed: Optional[int] = None,
                    sweep: Optional[SweepConfig] = None) -> SolverConfig:
    """Load the YAML config and apply the command-line overrides through validation again."""
    loader = ConfigLoader()
    loader.load_config(path)
    data = loader.effective_config()
    if omega is not None:
        data["omega"] = list(omega)
    if seed is not None:
        data["runtime"]["seed"] = seed
    if sweep is not None:
        data["measure"]["sweep"] = sweep.model_dump()
    return loader.load_dict(data)


def _context(config: SolverConfig):
    tol = config.tolerances
    model = FrequencyModel.from_config(config.frequency_model, tol.fd_step)
    P = Perturbation.from_config(config.perturbation, config.eps, tol.tol_alias)
    index_sets = index_sets_from_config(config)
    omega = default_omega(config, index_sets, model)
    return model, P, index_sets, omega


def run_solve(config: SolverConfig, threads: int = 1,
              size_sweep: Optional[SweepConfig] = None) -> RunReport:
    model, P, _, omega = _context(config)
    result = nash_moser_solve(omega, config, P, model, threads)
    audit = torus_size_audit(result, config, model)
    if size_sweep is not None:
        eps_values = np.geomspace(size_sweep.start, size_sweep.stop, size_sweep.num)
        audit["sweep"] = torus_size_sweep(config, omega, eps_values, threads)
    return RunReport(
        command=ReportKind.SOLVE.value,
        config=config.model_dump(mode="json"),
        omega=omega.tolist(),
        converged=result.converged,
        iterations=result.records,
        ladder=result.ladder,
        final=result.final,
        size_audit=audit,
    )


def run_reduce(config: SolverConfig, threads: int = 1) -> RunReport:
    """KAM ladder of the linearized operator at the unperturbed torus iota = 0."""
    model, P, index_sets, omega = _context(config)
    tol = config.tolerances
    box = (config.action_box.lower, config.action_box.upper)
    xi = xi_of_omega(omega, index_sets, model, box, tol.newton_tol, tol.max_newton)
    params = MelnikovParams(config.gamma, float(config.tau))
    bundle = build_bundle(TorusEmbedding.zeros(index_sets), np.zeros(index_sets.dim), omega, xi,
                          params, P, model, config.kam, tol, config.N0, threads)
    final = bundle.as_dict()
    final["normal_form"] = bundle.reduction.N_inf.as_dict()
    final["xi"] = xi.xi.tolist()
    return RunReport(
        command=ReportKind.REDUCE.value,
        config=config.model_dump(mode="json"),
        omega=omega.tolist(),
        converged=True,
        ladder=[LadderStepRecord.from_ladder(0, r.as_dict()) for r in bundle.reduction.records],
        final=final,
    )


def run_stability(config: SolverConfig, threads: int = 1) -> RunReport:
    model, P, _, omega = _context(config)
    result = nash_moser_solve(omega, config, P, model, threads)
    audit = torus_size_audit(result, config, model)
    if not audit["first_melnikov_unperturbed"]:
        logger.warning(f"Frequency fails the unperturbed first Melnikov condition: "
                       f"{audit['first_melnikov_witness']}")
    bundle = bundle_at_solution(result, config, P, model, threads)
    stab = config.stability
    report = stability_check(result.iota, bundle, stab.horizon, stab.n_samples, stab.n_times,
                             config.runtime.seed)
    return RunReport(
        command=ReportKind.STABILITY.value,
        config=config.model_dump(mode="json"),
        omega=omega.tolist(),
        converged=result.converged,
        iterations=result.records,
        final=result.final,
        stability=report.as_dict(),
        size_audit=audit,
    )


def run_measure(config: SolverConfig, threads: int = 1) -> MeasureReport:
    measure = config.measure
    box = FrequencyBox.from_config(config)
    suite = ConditionSuite.from_config(config)
    sweep = measure.sweep
    values = np.geomspace(sweep.start, sweep.stop, sweep.num) if sweep is not None else None
    return measure_estimate(
        box,
        suite,
        n_samples=measure.n_samples,
        seed=config.runtime.seed,
        sweep=values,
        parameter=sweep.parameter if sweep is not None else "gamma",
        linkage_exponent=measure.linkage_exponent,
        sampler=measure.sampler,
        threads=threads,
        config=config.model_dump(mode="json"),
    )


def run_pipeline(config: SolverConfig, command: str, threads: int = 1,
                 size_sweep: Optional[SweepConfig] = None) -> Report:
    """Dispatch one subcommand; solver errors propagate to the caller."""
    try:
        kind = ReportKind(command)
    except ValueError:
        raise ValueError(f"Unknown command: {command}") from None
    if kind is ReportKind.SOLVE:
        return run_solve(config, threads, size_sweep)
    if kind is ReportKind.REDUCE:
        return run_reduce(config, threads)
    if kind is ReportKind.STABILITY:
        return run_stability(config, threads)
    return run_measure(config, threads)


def failure_report(command: str, config: Dict[str, Any], error: Exception) -> RunReport:
    if isinstance(error, KamError):
        payload = error.to_dict()
        if error.is_exclusion:
            return RunReport(command=command, config=config, status=RunStatus.EXCLUDED.value,
                             exclusion=payload)
        return RunReport(command=command, config=config, status=RunStatus.FAILED.value, error=payload)
    return RunReport(command=command, config=config, status=RunStatus.FAILED.value,
                     error={"error": type(error).__name__, "message": str(error)})


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)

    try:
        config = load_run_config(args.config, getattr(args, "omega", None), args.seed,
                                 getattr(args, "sweep", None))
    except (ValueError, FileNotFoundError) as e:
        logging.basicConfig(level=logging.INFO)
        logger.error(f"Could not load configuration: {e}")
        return EXIT_ERROR

    logging.basicConfig(level=config.runtime.log_level.upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    threads = resolve_threads(args.threads, config)
    writer = ReportWriter(write_csv=config.runtime.write_csv)
    logger.info(f"kamtor {args.command} with {threads} thread(s)")

    status = EXIT_OK
    try:
        report = run_pipeline(config, args.command, threads, getattr(args, "size_sweep", None))
    except KamError as e:
        status = EXIT_EXCLUDED if e.is_exclusion else EXIT_ERROR
        if e.is_exclusion:
            logger.warning(f"Frequency excluded: {e}")
        else:
            logger.error(f"Solver failed: {e}")
        report = failure_report(args.command, config.model_dump(mode="json"), e)
    except (ValueError, ArithmeticError) as e:
        status = EXIT_ERROR
        logger.error(f"Run failed: {e}")
        report = failure_report(args.command, config.model_dump(mode="json"), e)

    try:
        writer.write(report, args.out)
    except (OSError, ValueError) as e:
        logger.error(f"Could not write report: {e}")
        return EXIT_ERROR
    return status


if __name__ == "__main__":
    sys.exit(main())
