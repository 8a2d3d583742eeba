"""
KAM reduction of L0 = omega . d_phi + N0 + R0 to a constant 2x2-block normal form.

Each step solves the homological equation

    -(omega . d_phi) Psi - [N, Psi] + Pi_N R = R_nf

mode by mode with 4x4 small-divisor operators acting on 2x2 blocks, conjugates
by exp(-Psi) on the angle grid and moves R_nf into the normal form. Operators
are carried on the full collocation spectrum so no content of the grid values
escapes the remainder norm.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg
import scipy.stats

from ..core.config_loader import KamConfig, ToleranceConfig
from ..core.exceptions import (
    ContractionFailure,
    FirstMelnikovViolation,
    InvalidMelnikovTriple,
    MaxSteps,
    MelnikovViolation,
    SmallnessGate,
)
from ..lattice.spectral import (
    IndexSets,
    SequenceField,
    SiteKind,
    bracket,
    box_remainder_norm,
)
from ..linearization.transforms import (
    LinHamOperator,
    SymplecticTransform,
    TransformKind,
    TransformStack,
    box_omega_derivative,
    hamiltonian_structure_residual,
    normal_form_mask,
)
from ..model.hamiltonian import FOUR_PI2

logger = logging.getLogger(__name__)

CHI = 1.5

# 2x2 complex matrix; self-adjoint when it is a normal-form block
Block2x2 = np.ndarray

SIGNS = ("+", "-")


@dataclass(frozen=True)
class MelnikovParams:
    gamma: float
    tau: float

    @property
    def alpha(self) -> float:
        return 6.0 * self.tau + 4.0

    @property
    def beta(self) -> float:
        return self.alpha + 1.0

    @property
    def C0(self) -> float:
        return 2.0 * self.tau + 2.0 + self.alpha

    def at_gamma(self, gamma: float) -> "MelnikovParams":
        return MelnikovParams(gamma, self.tau)


# ---------------------------------------------------------------------------
# Block normal forms
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class BlockNormalForm:
    """The 2x2 blocks [N]_k, k in the positive normal sites, of N = J diag(N1, conj(N1))."""
    blocks: np.ndarray          # (p, 2, 2)
    sites_plus: Tuple[int, ...]
    omega: np.ndarray

    @classmethod
    def from_operator(cls, matrix: np.ndarray, index_sets: IndexSets, omega: np.ndarray) -> "BlockNormalForm":
        """Read the blocks off the zz-quadrant of a constant operator J A."""
        n = index_sets.n_normal
        N1 = -1j * matrix[:n, :n]
        p = len(index_sets.normal_plus)
        blocks = np.stack([N1[2 * i:2 * i + 2, 2 * i:2 * i + 2] for i in range(p)]) if p else np.zeros((0, 2, 2))
        return cls(blocks.astype(complex), index_sets.normal_plus, np.asarray(omega, dtype=float))

    @classmethod
    def diagonal(cls, values: np.ndarray, sites_plus, omega: np.ndarray) -> "BlockNormalForm":
        """Blocks diag(n_{-k}, n_k) from values ordered like the normal sites."""
        values = np.asarray(values, dtype=float).reshape(-1, 2)
        blocks = np.zeros((len(values), 2, 2), dtype=complex)
        blocks[:, 0, 0] = values[:, 0]
        blocks[:, 1, 1] = values[:, 1]
        return cls(blocks, tuple(sites_plus), np.asarray(omega, dtype=float))

    @property
    def n_blocks(self) -> int:
        return self.blocks.shape[0]

    def block(self, k: int) -> Block2x2:
        return self.blocks[self.sites_plus.index(abs(k))]

    def normal_matrix(self) -> np.ndarray:
        """N1 as an (n, n) block-diagonal matrix."""
        return scipy.linalg.block_diag(*self.blocks) if self.n_blocks else np.zeros((0, 0), dtype=complex)

    def as_matrix(self) -> np.ndarray:
        """J diag(N1, conj(N1)) on doubled coordinates."""
        N1 = self.normal_matrix()
        zero = np.zeros_like(N1)
        return np.block([[1j * N1, zero], [zero, -1j * np.conj(N1)]])

    def eigenvalues(self) -> np.ndarray:
        """(p, 2) real eigenvalues, lambda^- <= lambda^+, from trace and determinant."""
        a = self.blocks[:, 0, 0].real
        d = self.blocks[:, 1, 1].real
        b = self.blocks[:, 0, 1]
        half_gap = np.sqrt(((a - d) / 2.0) ** 2 + np.abs(b) ** 2)
        mid = (a + d) / 2.0
        return np.stack([mid - half_gap, mid + half_gap], axis=-1)

    def self_adjoint_residual(self) -> float:
        if not self.n_blocks:
            return 0.0
        return float(np.max(np.abs(self.blocks - np.conj(np.swapaxes(self.blocks, -1, -2)))))

    def with_blocks(self, blocks: np.ndarray) -> "BlockNormalForm":
        return BlockNormalForm(blocks, self.sites_plus, self.omega)

    def __add__(self, other: "BlockNormalForm") -> "BlockNormalForm":
        return self.with_blocks(self.blocks + other.blocks)

    def as_dict(self) -> Dict[str, Any]:
        return {
            "sites": list(self.sites_plus),
            "eigenvalues": self.eigenvalues().tolist(),
            "self_adjoint_residual": self.self_adjoint_residual(),
        }


# ---------------------------------------------------------------------------
# Operators on the collocation spectrum
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SpectralOperator:
    """Operator-valued Fourier coefficients (G, 2n, 2n) over the full collocation box."""
    spectrum: np.ndarray
    index_sets: IndexSets

    @classmethod
    def from_grid(cls, values: np.ndarray, index_sets: IndexSets) -> "SpectralOperator":
        return cls(index_sets.box_spectrum(values), index_sets)

    @cached_property
    def norm1(self) -> np.ndarray:
        return np.abs(self.index_sets.box_lattice).sum(axis=1)

    def grid(self) -> np.ndarray:
        return self.index_sets.box_values(self.spectrum)

    def zero_mode(self) -> np.ndarray:
        return self.spectrum[0]

    def truncate(self, N_cut: float) -> "SpectralOperator":
        keep = self.norm1 <= N_cut
        return SpectralOperator(self.spectrum * keep[:, None, None], self.index_sets)

    def remainder_norm(self, s: float, sigma: float) -> float:
        return box_remainder_norm(self.spectrum, self.index_sets, s, sigma)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.spectrum), initial=0.0))

    def __sub__(self, other: "SpectralOperator") -> "SpectralOperator":
        return SpectralOperator(self.spectrum - other.spectrum, self.index_sets)


def constant_operator(matrix: np.ndarray, index_sets: IndexSets) -> SpectralOperator:
    spectrum = np.zeros((index_sets.grid_points,) + matrix.shape, dtype=complex)
    spectrum[0] = matrix
    return SpectralOperator(spectrum, index_sets)


def split_normal_form(total: SpectralOperator, omega: np.ndarray) -> Tuple[BlockNormalForm, SpectralOperator]:
    """N (l = 0 diagonal blocks of the zz and z_bar z_bar quadrants) and R = total - N."""
    index_sets = total.index_sets
    N_matrix = total.zero_mode() * normal_form_mask(index_sets)
    N = BlockNormalForm.from_operator(N_matrix, index_sets, omega)
    return N, total - constant_operator(N.as_matrix(), index_sets)


# ---------------------------------------------------------------------------
# Melnikov conditions
# ---------------------------------------------------------------------------

def melnikov_operator(Nj: Block2x2, Nk: Block2x2, sign: str) -> np.ndarray:
    """P -> Nj P + P conj(Nk) (sign '+') or Nj P - P Nk (sign '-') as a 4x4 matrix on row-major P."""
    eye = np.eye(2)
    if sign == "+":
        return np.kron(Nj, eye) + np.kron(eye, np.conj(Nk).T)
    if sign == "-":
        return np.kron(Nj, eye) - np.kron(eye, Nk.T)
    raise ValueError(f"Unknown Melnikov sign: {sign}")


def second_melnikov_threshold(gamma: float, tau: float, ell_norm1, j: int, k: int, sign: str):
    weight = j * j + k * k if sign == "+" else j * j - k * k
    return gamma * bracket(weight) / bracket(ell_norm1) ** tau


@dataclass
class MelnikovVerdict:
    ok: bool
    ell: Tuple[int, ...]
    j: int
    k: int
    sign: str
    min_eigenvalue: float
    threshold: float

    @property
    def inverse_norm(self) -> float:
        return np.inf if self.min_eigenvalue == 0 else 1.0 / self.min_eigenvalue

    @property
    def ratio(self) -> float:
        return np.inf if self.threshold == 0 else self.min_eigenvalue / self.threshold

    def as_dict(self) -> Dict[str, Any]:
        return {
            "ok": self.ok,
            "ell": list(self.ell),
            "j": self.j,
            "k": self.k,
            "sign": self.sign,
            "min_eigenvalue": self.min_eigenvalue,
            "threshold": self.threshold,
        }


def melnikov_check(N: BlockNormalForm, ell, j: int, k: int, sign: str,
                   gamma: float, tau: float) -> MelnikovVerdict:
    """Second Melnikov condition for (l, j, k) from the spectrum of the self-adjoint 4x4 operator."""
    ell = tuple(int(e) for e in ell)
    if sign == "-" and j == k and not any(ell):
        raise InvalidMelnikovTriple(f"L-(0, {j}, {j}) has a zero eigenvalue", {"j": j})
    od = float(np.dot(N.omega, ell))
    operator = od * np.eye(4) + melnikov_operator(N.block(j), N.block(k), sign)
    eigenvalues = np.linalg.eigvalsh(0.5 * (operator + operator.conj().T))
    min_eig = float(np.min(np.abs(eigenvalues)))
    threshold = float(second_melnikov_threshold(gamma, tau, sum(abs(e) for e in ell), j, k, sign))
    return MelnikovVerdict(min_eig >= threshold, ell, j, k, sign, min_eig, threshold)


@dataclass
class ScreenResult:
    min_ratio: float
    worst: Optional[MelnikovVerdict]
    checked: int

    def as_dict(self) -> Dict[str, Any]:
        return {
            "min_ratio": self.min_ratio,
            "checked": self.checked,
            "worst": self.worst.as_dict() if self.worst else None,
        }


def _screen_lattice(index_sets: IndexSets, N_cut: Optional[float]) -> np.ndarray:
    lattice = index_sets.box_lattice
    if N_cut is None:
        return lattice
    return lattice[np.abs(lattice).sum(axis=1) <= N_cut]


def melnikov_screen(
    N: BlockNormalForm,
    index_sets: IndexSets,
    gamma: float,
    tau: float,
    N_cut: Optional[float] = None,
    level: Optional[int] = None,
    raise_on_violation: bool = True,
    lattice: Optional[np.ndarray] = None,
) -> ScreenResult:
    """
    Second Melnikov conditions over every stored l with |l|_1 <= N_cut, every pair
    of positive normal sites and both signs, except (0, j, j) with sign '-'.
    """
    lattice = _screen_lattice(index_sets, N_cut) if lattice is None else lattice
    od = lattice @ N.omega
    norm1 = np.abs(lattice).sum(axis=1)
    is_zero = norm1 == 0
    sites = N.sites_plus
    worst: Optional[MelnikovVerdict] = None
    min_ratio = np.inf
    checked = 0
    for p, j in enumerate(sites):
        for q, k in enumerate(sites):
            for sign in SIGNS:
                base = melnikov_operator(N.blocks[p], N.blocks[q], sign)
                mu = np.linalg.eigvalsh(0.5 * (base + base.conj().T))
                margins = np.min(np.abs(od[:, None] + mu[None, :]), axis=1)
                thresholds = second_melnikov_threshold(gamma, tau, norm1, j, k, sign)
                ratios = margins / thresholds
                if sign == "-" and p == q:
                    ratios = np.where(is_zero, np.inf, ratios)
                checked += int(np.sum(np.isfinite(ratios)))
                i = int(np.argmin(ratios)) if ratios.size else -1
                if i >= 0 and ratios[i] < min_ratio:
                    min_ratio = float(ratios[i])
                    worst = MelnikovVerdict(bool(ratios[i] >= 1.0), tuple(int(e) for e in lattice[i]),
                                            j, k, sign, float(margins[i]), float(thresholds[i]))
    if worst is not None and not worst.ok and raise_on_violation:
        logger.info(f"Melnikov screen failed at l={worst.ell}, j={worst.j}, k={worst.k}, sign={worst.sign}")
        raise MelnikovViolation(worst.ell, worst.j, worst.k, worst.sign,
                                worst.min_eigenvalue, worst.threshold, level)
    return ScreenResult(min_ratio, worst, checked)


def first_melnikov_screen(
    N: BlockNormalForm,
    index_sets: IndexSets,
    gamma: float,
    tau: float,
    N_cut: Optional[float] = None,
    raise_on_violation: bool = True,
    lattice: Optional[np.ndarray] = None,
) -> ScreenResult:
    """|(omega . l + [N]_j)^{-1}| <= <l>^tau / (2 gamma j^2) over the stored l and positive sites."""
    lattice = _screen_lattice(index_sets, N_cut) if lattice is None else lattice
    od = lattice @ N.omega
    norm1 = np.abs(lattice).sum(axis=1)
    eigenvalues = N.eigenvalues()
    worst: Optional[MelnikovVerdict] = None
    min_ratio = np.inf
    checked = 0
    for p, j in enumerate(N.sites_plus):
        margins = np.min(np.abs(od[:, None] + eigenvalues[p][None, :]), axis=1)
        thresholds = 2.0 * gamma * j * j / bracket(norm1) ** tau
        ratios = margins / thresholds
        checked += ratios.size
        i = int(np.argmin(ratios)) if ratios.size else -1
        if i >= 0 and ratios[i] < min_ratio:
            min_ratio = float(ratios[i])
            worst = MelnikovVerdict(bool(ratios[i] >= 1.0), tuple(int(e) for e in lattice[i]),
                                    j, j, "first", float(margins[i]), float(thresholds[i]))
    if worst is not None and not worst.ok and raise_on_violation:
        raise FirstMelnikovViolation(worst.ell, worst.j, worst.min_eigenvalue, worst.threshold)
    return ScreenResult(min_ratio, worst, checked)


# ---------------------------------------------------------------------------
# Homological equation
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class HomologicalSolution:
    Psi: SpectralOperator
    increment: BlockNormalForm
    residual: float


def _quadrant_data(N1: np.ndarray, od: np.ndarray):
    """(shift, left block, right block, factor) per quadrant of i omega.l Psi + [N, Psi] = Q."""
    conj = np.conj(N1)
    return {
        (0, 0): (od, N1, -N1, -1j),
        (0, 1): (od, N1, conj, -1j),
        (1, 0): (-od, conj, N1, 1j),
        (1, 1): (-od, conj, -conj, 1j),
    }


def homological_residual(Psi: SpectralOperator, R_proj: SpectralOperator, N: BlockNormalForm,
                         increment: BlockNormalForm, floor: float = 0.0) -> float:
    """max |-(omega . d) Psi - [N, Psi] + Pi_N R - R_nf| relative to max(max |R|, floor)."""
    index_sets = Psi.index_sets
    n = index_sets.n_normal
    od = index_sets.box_lattice @ N.omega
    N_matrix = N.as_matrix()
    lhs = (-1j * od[:, None, None] * Psi.spectrum
           - (np.matmul(N_matrix, Psi.spectrum) - np.matmul(Psi.spectrum, N_matrix))
           + R_proj.spectrum)
    lhs[0] -= increment.as_matrix()
    # l = 0 z_bar z_bar blocks mirror the zz ones; only the structure defect of R remains there
    for p in range(N.n_blocks):
        sl = slice(n + 2 * p, n + 2 * p + 2)
        lhs[0, sl, sl] = 0.0
    scale = max(R_proj.max_abs(), floor)
    return float(np.max(np.abs(lhs))) / scale if scale > 0 else float(np.max(np.abs(lhs), initial=0.0))


def _singular_mode(ops: np.ndarray, active: np.ndarray, R: SpectralOperator, j: int, k: int,
                   sign: str, params: MelnikovParams) -> MelnikovViolation:
    """Witness for a homological block that could not be inverted."""
    smallest = np.linalg.svd(ops, compute_uv=False)[:, -1]
    i = int(np.argmin(smallest))
    mode = int(active[i])
    ell = tuple(int(e) for e in R.index_sets.box_lattice[mode])
    threshold = float(second_melnikov_threshold(params.gamma, params.tau, R.norm1[mode], j, k, sign))
    return MelnikovViolation(ell, j, k, sign, float(smallest[i]), threshold)


def homological_solve(
    R: SpectralOperator,
    N: BlockNormalForm,
    N_cut: float,
    params: MelnikovParams,
    tol_hom: float = 1e-10,
    threads: int = 1,
    floor: float = 0.0,
) -> HomologicalSolution:
    """
    Psi on |l|_1 <= N_cut with -(omega . d) Psi - [N, Psi] + Pi_N R = R_nf, where R_nf is
    the l = 0 diagonal-block part of the zz-quadrant of R and [Psi^(1)(0)]_j^j = 0.

    A block that cannot be inverted raises MelnikovViolation with the offending mode.
    """
    index_sets = R.index_sets
    n = index_sets.n_normal
    pairs = N.n_blocks
    R_proj = R.truncate(N_cut)
    od = index_sets.box_lattice @ N.omega
    active = np.flatnonzero(R.norm1 <= N_cut)
    Q = R_proj.spectrum.copy()

    increment_blocks = np.zeros((pairs, 2, 2), dtype=complex)
    for p in range(pairs):
        sl = slice(2 * p, 2 * p + 2)
        increment_blocks[p] = -1j * Q[0, sl, sl]
    increment = N.with_blocks(increment_blocks)
    Q[0] -= increment.as_matrix()

    Psi = np.zeros_like(Q)
    eye4 = np.eye(4)

    def solve_quadrant(key):
        qa, qb = key
        shift, left, right, factor = _quadrant_data(N.blocks, od)[key]
        out = []
        for p in range(pairs):
            for q in range(pairs):
                rows = slice(qa * n + 2 * p, qa * n + 2 * p + 2)
                cols = slice(qb * n + 2 * q, qb * n + 2 * q + 2)
                base = np.kron(left[p], np.eye(2)) + np.kron(np.eye(2), right[q].T)
                ops = shift[active, None, None] * eye4 + base
                rhs = (factor * Q[active, rows, cols]).reshape(len(active), 4)
                if qa == qb and p == q:
                    # the l = 0 diagonal blocks of the decoupled quadrants carry R_nf
                    ops = ops.copy()
                    zero = active == 0
                    ops[zero] = eye4
                    rhs[zero] = 0.0
                try:
                    solution = np.linalg.solve(ops, rhs[..., None])[..., 0]
                except np.linalg.LinAlgError:
                    sign = "-" if qa == qb else "+"
                    raise _singular_mode(ops, active, R, N.sites_plus[p], N.sites_plus[q],
                                         sign, params) from None
                out.append((rows, cols, solution.reshape(len(active), 2, 2)))
        return out

    keys = [(0, 0), (0, 1), (1, 0), (1, 1)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(solve_quadrant, keys))
    else:
        results = [solve_quadrant(key) for key in keys]
    for blocks in results:
        for rows, cols, solution in blocks:
            Psi[active, rows, cols] = solution

    Psi_op = SpectralOperator(Psi, index_sets)
    residual = homological_residual(Psi_op, R_proj, N, increment, floor)
    if residual > tol_hom:
        logger.warning(f"Homological residual {residual:.3e} exceeds {tol_hom:.1e}")
    return HomologicalSolution(Psi_op, increment, residual)


def generator_transform(Psi: SpectralOperator, omega: np.ndarray, tol_exp: float = 1e-13,
                        order_cap: int = 30) -> SymplecticTransform:
    """exp(-Psi) with its exact omega-derivative from the spectrum."""
    index_sets = Psi.index_sets
    od = index_sets.box_lattice @ np.asarray(omega, dtype=float)
    X = -Psi.grid()
    X_dot = -index_sets.box_values(1j * od[:, None, None] * Psi.spectrum)
    return SymplecticTransform(TransformKind.EXP_OF_FIELD, X, X_dot, index_sets,
                               tol_exp=tol_exp, order_cap=order_cap)


# ---------------------------------------------------------------------------
# The ladder
# ---------------------------------------------------------------------------

@dataclass
class LadderRecord:
    nu: int
    N_scale: float
    remainder: float
    remainder_high: float
    pattern_bound: float
    homological_residual: float
    min_melnikov_ratio: float
    block_drift: float
    generator_norm: float
    symplectic_residual: float
    self_adjoint_residual: float

    def as_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


@dataclass(eq=False)
class KamLadderState:
    nu: int
    N_nu: BlockNormalForm
    R_nu: SpectralOperator
    N_scale: float
    zeroth: np.ndarray
    stack: TransformStack = field(default_factory=TransformStack)
    norms_log: List[LadderRecord] = field(default_factory=list)

    @property
    def index_sets(self) -> IndexSets:
        return self.R_nu.index_sets


@dataclass
class LadderSettings:
    """Everything kam_step needs besides the state."""
    params: MelnikovParams
    s0: float
    sigma: float
    R0_high: float
    slack_kam: float = 4.0
    tol_hom: float = 1e-10
    tol_exp: float = 1e-13
    order_cap: int = 30
    tol_struct: float = 1e-9
    threads: int = 1
    residual_floor: float = 0.0

    @classmethod
    def from_config(cls, params: MelnikovParams, kam: KamConfig, tol: ToleranceConfig,
                    R0_high: float, threads: int = 1, residual_floor: float = 0.0) -> "LadderSettings":
        s0 = kam.s0 if kam.s0 is not None else 2
        return cls(params, float(s0), float(kam.sigma), R0_high, kam.slack_kam, tol.tol_hom,
                   tol.tol_exp, tol.exp_order_cap, tol.tol_struct, threads, residual_floor)


def kam_step(state: KamLadderState, settings: LadderSettings) -> KamLadderState:
    """One conjugation L_nu -> exp(Psi) L_nu exp(-Psi) and the normal-form update."""
    index_sets = state.index_sets
    N, R = state.N_nu, state.R_nu
    params = settings.params
    screen = melnikov_screen(N, index_sets, params.gamma, params.tau, state.N_scale, level=state.nu)
    solution = homological_solve(R, N, state.N_scale, params, settings.tol_hom, settings.threads,
                                settings.residual_floor)
    transform = generator_transform(solution.Psi, N.omega, settings.tol_exp, settings.order_cap)
    zeroth = transform.conjugate(state.zeroth)

    N_next = N + solution.increment
    total = SpectralOperator.from_grid(zeroth, index_sets)
    R_next = total - constant_operator(N_next.as_matrix(), index_sets)

    remainder = R_next.remainder_norm(settings.s0, settings.sigma)
    remainder_high = R_next.remainder_norm(settings.s0 + params.beta, settings.sigma)
    previous = R.remainder_norm(settings.s0, settings.sigma)
    pattern = settings.R0_high * state.N_scale ** (-params.alpha)
    if remainder > settings.slack_kam * max(pattern, previous):
        raise ContractionFailure(state.nu, remainder, settings.slack_kam * max(pattern, previous))
    if remainder > settings.slack_kam * pattern:
        logger.warning(f"KAM step {state.nu}: remainder {remainder:.3e} above the decay pattern {pattern:.3e}")

    k = np.asarray(N.sites_plus, dtype=float)
    drift = solution.increment.blocks
    block_drift = float(np.max(np.linalg.norm(drift, ord=2, axis=(1, 2)) * k, initial=0.0))
    record = LadderRecord(
        nu=state.nu,
        N_scale=state.N_scale,
        remainder=remainder,
        remainder_high=remainder_high,
        pattern_bound=pattern,
        homological_residual=solution.residual,
        min_melnikov_ratio=screen.min_ratio,
        block_drift=block_drift,
        generator_norm=transform.generator_norm(),
        symplectic_residual=transform.symplectic_residual(),
        self_adjoint_residual=N_next.self_adjoint_residual(),
    )
    logger.info(f"KAM step {state.nu}: |R D| {previous:.3e} -> {remainder:.3e}")
    return KamLadderState(state.nu + 1, N_next, R_next, state.N_scale ** CHI, zeroth,
                          state.stack.then(transform), state.norms_log + [record])


@dataclass
class EigenvalueFit:
    """lambda_k^(+-) - 4 pi^2 k^2 = c + rho^(+-) / k by least squares."""
    c: float
    rho_minus: float
    rho_plus: float
    max_scaled_deviation: float

    def as_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


def fit_eigenvalue_asymptotics(N: BlockNormalForm) -> EigenvalueFit:
    if not N.n_blocks:
        return EigenvalueFit(0.0, 0.0, 0.0, 0.0)
    k = np.asarray(N.sites_plus, dtype=float)
    shifted = N.eigenvalues() - FOUR_PI2 * k[:, None] ** 2
    p = len(k)
    design = np.zeros((2 * p, 3))
    design[:, 0] = 1.0
    design[:p, 1] = 1.0 / k
    design[p:, 2] = 1.0 / k
    target = np.concatenate([shifted[:, 0], shifted[:, 1]])
    coeffs, *_ = scipy.linalg.lstsq(design, target)
    c = float(coeffs[0])
    deviation = float(np.max(np.abs(shifted - c) * k[:, None]))
    return EigenvalueFit(c, float(coeffs[1]), float(coeffs[2]), deviation)


@dataclass(eq=False)
class KamReduction:
    """N_inf with the composed conjugation Phi_inf and the ladder trace."""
    N_inf: BlockNormalForm
    stack: TransformStack
    L_inf: np.ndarray
    index_sets: IndexSets
    records: List[LadderRecord]
    report: Dict[str, Any]

    @property
    def steps(self) -> int:
        return len(self.records)

    def forward(self) -> np.ndarray:
        return self.stack.forward(self.index_sets)

    def inverse(self) -> np.ndarray:
        return self.stack.inverse(self.index_sets)


def ladder_decay_fit(records: List[LadderRecord], alpha: float) -> Dict[str, Any]:
    """Fit log |R_{nu+1} D| against log N_nu; the negated slope is the observed decay exponent."""
    points = [(np.log(r.N_scale), np.log(r.remainder)) for r in records if r.remainder > 0]
    if len(points) < 2:
        return {"decay_exponent": None, "alpha": alpha, "points": len(points)}
    x, y = np.array(points).T
    fit = scipy.stats.linregress(x, y)
    return {"decay_exponent": float(-fit.slope), "alpha": alpha, "points": len(points)}


def conjugation_audit(L0_zeroth: np.ndarray, stack: TransformStack, N_inf: BlockNormalForm,
                      index_sets: IndexSets, s: float, sigma: float) -> Tuple[float, float]:
    """
    |Phi_inf^{-1} L0 Phi_inf - (omega . d + N_inf)| evaluated twice: through the stored
    sequence of conjugations and through the interpolated composed frame.
    """
    target = constant_operator(N_inf.as_matrix(), index_sets)
    sequential = SpectralOperator.from_grid(stack.conjugate(L0_zeroth), index_sets) - target
    forward = stack.forward(index_sets)
    inverse = stack.inverse(index_sets)
    log_derivative = np.matmul(inverse, box_omega_derivative(index_sets, forward, N_inf.omega))
    composed = np.matmul(inverse, np.matmul(L0_zeroth, forward)) + log_derivative
    interpolated = SpectralOperator.from_grid(composed, index_sets) - target
    return sequential.remainder_norm(s, sigma), interpolated.remainder_norm(s, sigma)


def reduce_to_limit(
    L0: LinHamOperator,
    params: MelnikovParams,
    kam: Optional[KamConfig] = None,
    tol: Optional[ToleranceConfig] = None,
    N0: int = 4,
    max_steps: Optional[int] = None,
    threads: int = 1,
) -> KamReduction:
    """Iterate kam_step until |R D|_{s0, sigma-1} is below target."""
    kam = kam or KamConfig(s0=2)
    tol = tol or ToleranceConfig()
    s0 = float(kam.s0 if kam.s0 is not None else 2)
    sigma = float(kam.sigma)
    max_steps = kam.max_steps if max_steps is None else max_steps
    index_sets = L0.index_sets
    omega = np.asarray(L0.omega, dtype=float)

    structure = hamiltonian_structure_residual(L0.zeroth)
    if structure > tol.tol_struct * (1.0 + float(np.max(np.abs(L0.zeroth), initial=0.0))):
        logger.warning(f"L0 structure residual {structure:.3e} before the ladder")

    total = SpectralOperator.from_grid(L0.zeroth, index_sets)
    N, R = split_normal_form(total, omega)
    R0_low = R.remainder_norm(s0, sigma)
    R0_high = R.remainder_norm(s0 + params.beta, sigma)
    N0_norm = constant_operator(N.as_matrix(), index_sets).remainder_norm(s0, sigma)
    target = max(kam.target_rel * R0_low, kam.floor_rel * N0_norm)

    gate = R0_high * float(N0) ** params.C0 / params.gamma
    if gate > 1.0:
        if kam.enforce_gate:
            raise SmallnessGate(gate, 1.0, "gamma^-1 N0^C0 |R0 D|")
        logger.warning(f"KAM smallness gate not met: {gate:.3e} > 1")

    # homological residuals are measured against at least the convergence floor
    residual_floor = kam.floor_rel * float(np.max(np.abs(N.as_matrix()), initial=0.0))
    settings = LadderSettings.from_config(params, kam, tol, R0_high, threads, residual_floor)
    state = KamLadderState(0, N, R, float(N0), L0.zeroth)
    remainder = R0_low
    while remainder > target:
        if state.nu >= max_steps:
            raise MaxSteps(
                f"KAM ladder stopped after {state.nu} steps with |R D| = {remainder:.3e} > {target:.3e}",
                {"steps": state.nu, "remainder": remainder, "target": target},
            )
        state = kam_step(state, settings)
        remainder = state.norms_log[-1].remainder

    N_inf = state.N_nu
    sequential, interpolated = conjugation_audit(L0.zeroth, state.stack, N_inf, index_sets, s0, sigma)
    bound = max(target, remainder) * (1.0 + kam.slack_kam)
    if sequential > bound:
        logger.warning(f"Conjugation audit {sequential:.3e} exceeds {bound:.3e}")
    fit = fit_eigenvalue_asymptotics(N_inf)
    report = {
        "steps": state.nu,
        "target": target,
        "initial_remainder": R0_low,
        "initial_remainder_high": R0_high,
        "final_remainder": remainder,
        "smallness_gate": gate,
        "conjugation_audit": sequential,
        "interpolated_audit": interpolated,
        "eigenvalue_fit": fit.as_dict(),
        "decay_fit": ladder_decay_fit(state.norms_log, params.alpha),
        "normal_form": N_inf.as_dict(),
        "ladder": [record.as_dict() for record in state.norms_log],
    }
    logger.info(f"KAM ladder finished after {state.nu} steps, |R D| = {remainder:.3e}")
    return KamReduction(N_inf, state.stack, state.zeroth, index_sets, state.norms_log, report)


# ---------------------------------------------------------------------------
# Inverse of the reduced operator
# ---------------------------------------------------------------------------

def linf_apply(N_inf: BlockNormalForm, h: SequenceField) -> SequenceField:
    """(omega . d_phi + N_inf) h on a doubled field."""
    od = h.index_sets.omega_dot(N_inf.omega)
    coeffs = 1j * od[:, None] * h.coeffs + h.coeffs @ N_inf.as_matrix().T
    return h.with_coeffs(coeffs)


def linf_inverse(N_inf: BlockNormalForm, g: SequenceField, gamma: Optional[float] = None,
                 tau: Optional[float] = None) -> SequenceField:
    """
    Solve (omega . d_phi + N_inf) h = g mode by mode with 2x2 solves; with gamma and tau
    given, the first Melnikov bound is enforced on every stored (l, j).
    """
    index_sets = g.index_sets
    if g.kind is not SiteKind.DOUBLED:
        raise ValueError("linf_inverse expects a doubled field")
    if gamma is not None and tau is not None:
        first_melnikov_screen(N_inf, index_sets, gamma, tau, lattice=index_sets.lattice)
    n = index_sets.n_normal
    od = index_sets.omega_dot(N_inf.omega)
    eye = np.eye(2)
    h = np.zeros_like(g.coeffs)
    for p in range(N_inf.n_blocks):
        block = N_inf.blocks[p]
        z_cols = slice(2 * p, 2 * p + 2)
        zb_cols = slice(n + 2 * p, n + 2 * p + 2)
        # (i omega.l + i N) h_z = g_z and (i omega.l - i conj(N)) h_zbar = g_zbar
        ops_z = 1j * (od[:, None, None] * eye + block)
        ops_zb = 1j * (od[:, None, None] * eye - np.conj(block))
        h[:, z_cols] = np.linalg.solve(ops_z, g.coeffs[:, z_cols, None])[..., 0]
        h[:, zb_cols] = np.linalg.solve(ops_zb, g.coeffs[:, zb_cols, None])[..., 0]
    return g.with_coeffs(h)
