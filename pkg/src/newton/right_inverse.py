"""
Approximate right inverse of the linearized torus operator.

In the symplectic chart around the isotropic torus the linearized equations
are triangular up to terms that vanish at an exact solution:

    omega.d psi - K20 u - K11 W             = g1
    omega.d u + (d theta)^T zeta            = g2
    (omega.d + J2 K02) W + C u              = g3,   C = J2 K11^T

The second row fixes zeta and the oscillating part of u, the average of the
first row fixes the mean of u through the averaged twist matrix, the third
row is inverted through the reduction stack and the first row gives psi.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from ..core.config_loader import KamConfig, ToleranceConfig
from ..core.exceptions import MbarSingular
from ..geometry.torus import GammaChart, TaylorCoefficients, gamma_chart, isotropize, taylor_K
from ..lattice.spectral import IndexSets, SequenceField, SiteKind, omega_dvphi_inverse, sobolev_norm
from ..linearization.transforms import (
    LinHamOperator,
    ReductionChain,
    TransformStack,
    j_diag,
    reduce_to_constant_diagonal,
)
from ..model.hamiltonian import (
    ActionVector,
    FrequencyModel,
    Perturbation,
    ResidualTriple,
    TorusEmbedding,
    residual_F,
)
from ..reduction.kam import (
    KamReduction,
    MelnikovParams,
    first_melnikov_screen,
    linf_inverse,
    melnikov_screen,
    reduce_to_limit,
)

logger = logging.getLogger(__name__)


def field_norm(*fields: SequenceField) -> float:
    return float(np.sqrt(sum(sobolev_norm(f, 0, 0) ** 2 for f in fields)))


def _tangential(values: np.ndarray, index_sets: IndexSets) -> SequenceField:
    return SequenceField.from_grid(np.real(values), index_sets.tangential, SiteKind.TANGENTIAL_REAL, index_sets)


def _doubled(values: np.ndarray, index_sets: IndexSets) -> SequenceField:
    return SequenceField.from_grid(values, index_sets.normal, SiteKind.DOUBLED, index_sets)


def _constant(vector: np.ndarray, index_sets: IndexSets) -> SequenceField:
    out = SequenceField.zeros(index_sets, index_sets.tangential, SiteKind.TANGENTIAL_REAL)
    out.coeffs[index_sets.zero_index] = vector
    return out


@dataclass
class RefinementTrace:
    steps: int
    residual: float


@dataclass(eq=False)
class NormalInverse:
    """L_omega^{-1} = Phi L_inf^{-1} Phi^{-1} with iterative refinement against L_omega."""
    L_omega: LinHamOperator
    stack: TransformStack
    reduction: KamReduction
    tol_tri: float = 1e-9
    max_refine: int = 8
    trace: List[RefinementTrace] = field(default_factory=list)

    @property
    def index_sets(self) -> IndexSets:
        return self.L_omega.index_sets

    def sandwich(self, g: SequenceField) -> SequenceField:
        index_sets = self.index_sets
        reduced = _doubled(self.stack.apply_inverse(g.grid()), index_sets)
        h = linf_inverse(self.reduction.N_inf, reduced)
        return _doubled(self.stack.apply(h.grid()), index_sets)

    def __call__(self, g: SequenceField) -> SequenceField:
        scale = field_norm(g)
        if scale == 0.0:
            return g.with_coeffs(np.zeros_like(g.coeffs))
        W = self.sandwich(g)
        r = g - self.L_omega.apply(W)
        residual = field_norm(r) / scale
        steps = 0
        while residual > 0.1 * self.tol_tri and steps < self.max_refine:
            W = W + self.sandwich(r)
            r = g - self.L_omega.apply(W)
            residual = field_norm(r) / scale
            steps += 1
        if residual > self.tol_tri:
            logger.warning(f"Normal inverse stalled after {steps} refinements at {residual:.3e}")
        self.trace.append(RefinementTrace(steps, residual))
        return W


@dataclass(eq=False)
class RightInverseBundle:
    """Everything the triangular solve needs at one outer iterate."""
    K: TaylorCoefficients
    chain: ReductionChain
    reduction: KamReduction
    Mbar: np.ndarray
    chart: GammaChart
    omega: np.ndarray
    params: MelnikovParams
    normal_inverse: NormalInverse
    coupling: np.ndarray                 # (G, 2n, d) grid values of C
    coupling_columns: List[SequenceField]
    tol: ToleranceConfig = field(default_factory=ToleranceConfig)
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def index_sets(self) -> IndexSets:
        return self.K.index_sets

    @property
    def stack(self) -> TransformStack:
        return self.normal_inverse.stack

    @property
    def L_omega(self) -> LinHamOperator:
        return self.chain.L_omega

    def apply_coupling(self, upsilon: SequenceField) -> SequenceField:
        return _doubled(np.einsum('gka,ga->gk', self.coupling, upsilon.grid()), self.index_sets)

    def apply_K20(self, upsilon: SequenceField) -> SequenceField:
        return _tangential(np.einsum('gab,gb->ga', self.K.K20, upsilon.grid()), self.index_sets)

    def apply_K11(self, W: SequenceField) -> SequenceField:
        return _tangential(np.einsum('gak,gk->ga', self.K.K11, W.grid()), self.index_sets)

    def apply_twist(self, upsilon: SequenceField) -> SequenceField:
        """M_omega u = K20 u - K11 L_omega^{-1} C u."""
        return self.apply_K20(upsilon) - self.apply_K11(self.normal_inverse(self.apply_coupling(upsilon)))

    def as_dict(self) -> Dict[str, Any]:
        return {
            "Mbar": self.Mbar.tolist(),
            "Mbar_condition": float(np.linalg.cond(self.Mbar)),
            "ladder": self.reduction.report,
            "seed": self.chain.seed.as_dict(),
            **self.diagnostics,
        }


def coupling_matrix(K: TaylorCoefficients) -> np.ndarray:
    """C = J2 K11^T on the grid: the z row carries i d_u d_wbar K, the z_bar row -i d_u d_w K."""
    n = K.A1.shape[-1]
    K11_T = np.swapaxes(K.K11, -1, -2)
    swapped = np.concatenate([K11_T[:, n:], K11_T[:, :n]], axis=1)
    return j_diag(n)[None, :, None] * swapped


def build_bundle(
    iota: TorusEmbedding,
    zeta: np.ndarray,
    omega: np.ndarray,
    xi: ActionVector,
    params: MelnikovParams,
    P: Optional[Perturbation] = None,
    model: Optional[FrequencyModel] = None,
    kam: Optional[KamConfig] = None,
    tol: Optional[ToleranceConfig] = None,
    N0: int = 4,
    threads: int = 1,
    level: Optional[int] = None,
) -> RightInverseBundle:
    """isotropize, chart, Taylor coefficients, the explicit transformations and the KAM ladder."""
    kam = kam or KamConfig(s0=2)
    tol = tol or ToleranceConfig()
    omega = np.asarray(omega, dtype=float)
    index_sets = iota.index_sets
    s0 = float(kam.s0 if kam.s0 is not None else 2)

    iso = isotropize(iota, tol_iso=tol.tol_iso, chart_cond_cap=tol.chart_cond_cap)
    chart = gamma_chart(iso, tol.chart_cond_cap)
    chart_residual = chart.symplectic_residual()
    if chart_residual > tol.tol_struct * (1.0 + iota.norm(s0, 0)):
        logger.warning(f"Chart differential symplectic residual {chart_residual:.3e}")
    K = taylor_K(chart, xi, P, zeta, model)

    chain = reduce_to_constant_diagonal(K, omega, params.gamma, params.tau, float(kam.sigma), s0,
                                        tol.tol_exp, tol.exp_order_cap, tol.tol_struct)
    reduction = reduce_to_limit(chain.L0, params, kam, tol, N0=N0, threads=threads)
    ball = index_sets.lattice
    second = melnikov_screen(reduction.N_inf, index_sets, params.gamma, params.tau, level=level, lattice=ball)
    first = first_melnikov_screen(reduction.N_inf, index_sets, params.gamma, params.tau, lattice=ball)

    stack = chain.stack.then(*reduction.stack.transforms)
    normal_inverse = NormalInverse(chain.L_omega, stack, reduction, tol.tol_tri, tol.max_refine)
    coupling = coupling_matrix(K)
    d = index_sets.dim
    columns = []
    Mbar = np.zeros((d, d))
    for a in range(d):
        e_a = np.zeros((index_sets.grid_points, d))
        e_a[:, a] = 1.0
        W_a = normal_inverse(_doubled(np.einsum('gka,ga->gk', coupling, e_a), index_sets))
        columns.append(W_a)
        twist = np.mean(K.K20[:, :, a], axis=0) - _tangential(
            np.einsum('gak,gk->ga', K.K11, W_a.grid()), index_sets).mean().real
        Mbar[:, a] = twist
    condition = float(np.linalg.cond(Mbar))
    if not np.isfinite(condition) or condition > tol.mbar_cond_cap:
        raise MbarSingular(condition, tol.mbar_cond_cap)

    diagnostics = {
        "chart_symplectic_residual": chart_residual,
        "isotropy_closedness": iso.closedness_residual,
        "transform_symplectic_residual": stack.symplectic_residual(),
        "second_melnikov_ratio": second.min_ratio,
        "first_melnikov_ratio": first.min_ratio,
    }
    logger.info(f"Right inverse ready: {reduction.steps} KAM steps, cond(Mbar) = {condition:.3e}")
    return RightInverseBundle(K, chain, reduction, Mbar, chart, omega, params, normal_inverse,
                              coupling, columns, tol, diagnostics)


@dataclass(eq=False)
class TriangularSolution:
    psi: SequenceField
    upsilon: SequenceField
    W: SequenceField
    zeta: np.ndarray
    upsilon_mean: np.ndarray
    upsilon_oscillation: SequenceField
    residual: float = 0.0

    @property
    def w(self) -> SequenceField:
        """The w-part of the doubled normal unknown."""
        n = self.W.coeffs.shape[1] // 2
        index_sets = self.W.index_sets
        return SequenceField(self.W.coeffs[:, :n], index_sets.normal, SiteKind.NORMAL_COMPLEX, index_sets)


def _zero_mean(g: SequenceField) -> SequenceField:
    out = g.with_coeffs(g.coeffs.copy())
    out.coeffs[g.index_sets.zero_index] = 0.0
    return out


def solve_triangular(g1: SequenceField, g2: SequenceField, g3: SequenceField,
                     bundle: RightInverseBundle) -> TriangularSolution:
    """Solve the triangular system for (psi, u, W, zeta) in the order zeta, u_osc, u_mean, W, psi."""
    index_sets = bundle.index_sets
    omega = bundle.omega
    gamma, tau = bundle.params.gamma, bundle.params.tau

    zeta = g2.mean().real
    dtheta = bundle.chart.dtheta
    twisted = _tangential(np.einsum('gba,b->ga', dtheta, zeta), index_sets)
    upsilon_osc = omega_dvphi_inverse(_zero_mean(g2 - twisted), omega, tau, gamma)

    W_g3 = bundle.normal_inverse(g3)
    W_osc = bundle.normal_inverse(bundle.apply_coupling(upsilon_osc))
    average = (g1.mean().real
               + bundle.apply_K11(W_g3).mean().real
               + (bundle.apply_K20(upsilon_osc) - bundle.apply_K11(W_osc)).mean().real)
    upsilon_mean = -np.linalg.solve(bundle.Mbar, average)

    W = W_g3 - W_osc
    for a, column in enumerate(bundle.coupling_columns):
        W = W - column * upsilon_mean[a]
    upsilon = upsilon_osc + _constant(upsilon_mean, index_sets)

    rhs = g1 + bundle.apply_K20(upsilon) + bundle.apply_K11(W)
    mean_defect = float(np.max(np.abs(rhs.mean()), initial=0.0))
    logger.debug(f"triangular solve: first-row mean defect {mean_defect:.3e}")
    psi = omega_dvphi_inverse(_zero_mean(rhs), omega, tau, gamma)

    solution = TriangularSolution(psi, upsilon, W, zeta, upsilon_mean, upsilon_osc)
    solution.residual = triangular_residual(solution, (g1, g2, g3), bundle)
    if solution.residual > bundle.tol.tol_tri:
        logger.warning(f"Triangular residual {solution.residual:.3e} exceeds {bundle.tol.tol_tri:.1e}")
    return solution


def triangular_operator(solution: TriangularSolution,
                        bundle: RightInverseBundle) -> Tuple[SequenceField, SequenceField, SequenceField]:
    """The three rows of the triangular system applied to a solution."""
    index_sets = bundle.index_sets
    omega = bundle.omega
    row1 = (solution.psi.omega_derivative(omega)
            - bundle.apply_K20(solution.upsilon) - bundle.apply_K11(solution.W))
    row2 = (solution.upsilon.omega_derivative(omega)
            + _tangential(np.einsum('gba,b->ga', bundle.chart.dtheta, solution.zeta), index_sets))
    row3 = bundle.L_omega.apply(solution.W) + bundle.apply_coupling(solution.upsilon)
    return row1, row2, row3


def triangular_residual(solution: TriangularSolution, g: Tuple[SequenceField, SequenceField, SequenceField],
                        bundle: RightInverseBundle) -> float:
    rows = triangular_operator(solution, bundle)
    scale = field_norm(*g)
    error = field_norm(*(row - rhs for row, rhs in zip(rows, g)))
    return error / scale if scale > 0 else error


@dataclass(eq=False)
class TangentUpdate:
    iota: TorusEmbedding
    zeta: np.ndarray
    solution: TriangularSolution


def chart_rows(E: ResidualTriple, chart: GammaChart,
               index_sets: IndexSets) -> Tuple[SequenceField, SequenceField, SequenceField]:
    """dGamma^{-1} applied to a residual, split into the three rows of the triangular system."""
    psi, upsilon, w = chart.pull(E.E_theta.grid(), E.E_y.grid(), E.E_z.grid())
    g3 = _doubled(np.concatenate([w, np.conj(w)], axis=-1), index_sets)
    return _tangential(psi, index_sets), _tangential(upsilon, index_sets), g3


def approximate_right_inverse(E: ResidualTriple, bundle: RightInverseBundle) -> TangentUpdate:
    """T g = dGamma o (triangular solve) o dGamma^{-1} g."""
    index_sets = bundle.index_sets
    g1, g2, g3 = chart_rows(E, bundle.chart, index_sets)
    solution = solve_triangular(g1, g2, g3, bundle)
    theta, y, z = bundle.chart.push(solution.psi.grid(), solution.upsilon.grid(), solution.w.grid())
    iota = TorusEmbedding(
        _tangential(theta, index_sets),
        _tangential(y, index_sets),
        SequenceField.from_grid(z, index_sets.normal, SiteKind.NORMAL_COMPLEX, index_sets),
    )
    return TangentUpdate(iota, solution.zeta.copy(), solution)


def _triple_norm(E: ResidualTriple) -> float:
    return field_norm(E.E_theta, E.E_y, E.E_z)


def inverse_defect(
    bundle: RightInverseBundle,
    iota: TorusEmbedding,
    zeta: np.ndarray,
    g: ResidualTriple,
    xi: ActionVector,
    P: Optional[Perturbation] = None,
    model: Optional[FrequencyModel] = None,
    fd_step: Optional[float] = None,
) -> float:
    """||dF . T g - g|| / ||g|| with dF by central differences along T g."""
    fd_step = bundle.tol.fd_step if fd_step is None else fd_step
    scale = _triple_norm(g)
    if scale == 0.0:
        return 0.0
    update = approximate_right_inverse(g, bundle)
    size = max(update.iota.norm(0, 0), float(np.linalg.norm(update.zeta)), 1e-300)
    h = fd_step * max(1.0, iota.norm(0, 0)) / size
    omega = bundle.omega
    zeta = np.asarray(zeta, dtype=float)
    plus = residual_F(iota + update.iota * h, zeta + h * update.zeta, omega, xi, P, model)
    minus = residual_F(iota - update.iota * h, zeta - h * update.zeta, omega, xi, P, model)
    dF = [(a - b) * (0.5 / h) for a, b in zip((plus.E_theta, plus.E_y, plus.E_z),
                                              (minus.E_theta, minus.E_y, minus.E_z))]
    defect = field_norm(*(a - b for a, b in zip(dF, (g.E_theta, g.E_y, g.E_z))))
    return defect / scale
