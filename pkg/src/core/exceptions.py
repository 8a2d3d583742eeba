"""
Error hierarchy for the torus solver.

Every numerical failure raises a subclass of KamError. Subclasses flagged with
``is_exclusion`` signal that the requested frequency lies outside the admissible
set, which the CLI reports with exit status 2 instead of 1.
"""
from typing import Any, Dict, Optional, Tuple


class KamError(ValueError):
    """Base class for solver failures carrying a structured payload."""

    is_exclusion: bool = False

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.details: Dict[str, Any] = details or {}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": type(self).__name__,
            "message": str(self),
            "exclusion": self.is_exclusion,
            "details": self.details,
        }


class DiophantineViolation(KamError):
    is_exclusion = True

    def __init__(self, ell: Tuple[int, ...], value: float, bound: float):
        super().__init__(
            f"Diophantine bound violated at l={ell}: |omega.l|={value:.3e} < {bound:.3e}",
            {"ell": list(ell), "value": value, "bound": bound},
        )
        self.ell = ell


class NonzeroMean(KamError):
    def __init__(self, mean: float, tolerance: float, where: str = "field"):
        super().__init__(
            f"Nonzero mean in {where}: {mean:.3e} > {tolerance:.3e}",
            {"mean": mean, "tolerance": tolerance, "where": where},
        )


class OutOfRange(KamError):
    pass


class NoConvergence(KamError):
    pass


class SqrtDomain(KamError):
    def __init__(self, site: int, value: float):
        super().__init__(
            f"Action xi + y became non-positive at site {site}: {value:.3e}",
            {"site": site, "value": value},
        )


class AliasOverflow(KamError):
    def __init__(self, spill: float, tolerance: float):
        super().__init__(
            f"Nonlinearity spills past the collocation margin: {spill:.3e} > {tolerance:.3e}",
            {"spill": spill, "tolerance": tolerance},
        )


class ChartSingular(KamError):
    def __init__(self, condition: float, cap: float):
        super().__init__(
            f"Angle Jacobian is ill-conditioned: cond={condition:.3e} > {cap:.3e}",
            {"condition": condition, "cap": cap},
        )


class StructureViolation(KamError):
    def __init__(self, residual: float, tolerance: float, what: str = "operator"):
        super().__init__(
            f"Hamiltonian structure violated for {what}: {residual:.3e} > {tolerance:.3e}",
            {"residual": residual, "tolerance": tolerance, "what": what},
        )


class ExpDivergence(KamError):
    def __init__(self, tail: float, tolerance: float, order: int):
        super().__init__(
            f"Exponential series did not converge at order {order}: tail {tail:.3e} > {tolerance:.3e}",
            {"tail": tail, "tolerance": tolerance, "order": order},
        )


class InvalidMelnikovTriple(KamError):
    """Raised for the triple (0, j, j) with sign '-', whose operator is singular."""


class MelnikovViolation(KamError):
    is_exclusion = True

    def __init__(
        self,
        ell: Tuple[int, ...],
        j: int,
        k: int,
        sign: str,
        margin: float,
        threshold: float,
        level: Optional[int] = None,
    ):
        where = f" at level {level}" if level is not None else ""
        super().__init__(
            f"Second Melnikov condition ({sign}) violated{where} for l={ell}, j={j}, k={k}: "
            f"{margin:.3e} < {threshold:.3e}",
            {
                "ell": list(ell),
                "j": j,
                "k": k,
                "sign": sign,
                "margin": margin,
                "threshold": threshold,
                "level": level,
            },
        )
        self.ell = ell
        self.j = j
        self.k = k
        self.sign = sign


class FirstMelnikovViolation(KamError):
    is_exclusion = True

    def __init__(self, ell: Tuple[int, ...], j: int, margin: float, threshold: float):
        super().__init__(
            f"First Melnikov condition violated for l={ell}, j={j}: {margin:.3e} < {threshold:.3e}",
            {"ell": list(ell), "j": j, "margin": margin, "threshold": threshold},
        )
        self.ell = ell
        self.j = j


class ContractionFailure(KamError):
    def __init__(self, step: int, norm: float, bound: float):
        super().__init__(
            f"KAM remainder failed to contract at step {step}: {norm:.3e} > {bound:.3e}",
            {"step": step, "norm": norm, "bound": bound},
        )


class MaxSteps(KamError):
    pass


class MbarSingular(KamError):
    def __init__(self, condition: float, cap: float):
        super().__init__(
            f"Averaged twist matrix is singular: cond={condition:.3e} > {cap:.3e}",
            {"condition": condition, "cap": cap},
        )


class SmallnessGate(KamError):
    def __init__(self, value: float, threshold: float, what: str):
        super().__init__(
            f"Smallness condition '{what}' fails: {value:.3e} >= {threshold:.3e}",
            {"value": value, "threshold": threshold, "what": what},
        )
