"""
Linearized normal operator and its conjugation to constant coefficients.

Operators act on doubled normal coordinates W = (z, z_bar). A linear
Hamiltonian operator is omega . d_phi + M(phi), with M sampled on the angle
grid as (G, 2n, 2n) matrices; its lattice projection (an OperatorMap) feeds
norms and the KAM ladder. Transformations are time-one flows exp(X(phi)) and
conjugations are computed pointwise:

    Phi^{-1} (omega . d + M) Phi = omega . d + Phi^{-1} M Phi + Phi^{-1} (omega . d Phi)

with the last term given by the dexp series, so no derivative of Phi is ever
taken on the grid.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Dict, Optional, Tuple

import numpy as np

from ..core.exceptions import ExpDivergence, StructureViolation
from ..geometry.torus import TaylorCoefficients
from ..lattice.spectral import (
    IndexSets,
    OperatorMap,
    SequenceField,
    SiteKind,
    dd_weight,
    omega_dvphi_inverse,
    remainder_norm,
)
from ..model.hamiltonian import FOUR_PI2

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Matrix building blocks on the normal sites
# ---------------------------------------------------------------------------

def j_diag(n: int) -> np.ndarray:
    """Diagonal of J = diag(i, -i) on doubled coordinates."""
    return np.concatenate([1j * np.ones(n), -1j * np.ones(n)])


def j2_matrix(n: int) -> np.ndarray:
    """J2 = i [[0, I], [-I, 0]]."""
    zero, eye = np.zeros((n, n)), np.eye(n)
    return 1j * np.block([[zero, eye], [-eye, zero]])


def x_harmonics(grid_size: int) -> np.ndarray:
    """Signed x-harmonics in FFT order."""
    return np.rint(np.fft.fftfreq(grid_size) * grid_size).astype(int)


def inverse_dx(hat: np.ndarray) -> np.ndarray:
    """d_x^{-1} on x-spectra: exp(2 pi i j x) -> exp(2 pi i j x)/(2 pi i j), constants -> 0."""
    m = x_harmonics(hat.shape[-1]).astype(float)
    divisor = 2j * np.pi * np.where(m != 0, m, 1.0)
    return np.where(m != 0, hat / divisor, 0.0)


def dx(hat: np.ndarray) -> np.ndarray:
    m = x_harmonics(hat.shape[-1])
    return 2j * np.pi * m * hat


def toeplitz_block(hat: np.ndarray, sites) -> np.ndarray:
    """Multiplication by a function of x on z-coordinates: [a, b] -> hat[b - a]."""
    s = np.asarray(sites)
    return hat[..., (s[None, :] - s[:, None]) % hat.shape[-1]]


def hankel_block(hat: np.ndarray, sites) -> np.ndarray:
    """Multiplication from z_bar- to z-coordinates: [a, b] -> hat[-a - b]."""
    s = np.asarray(sites)
    return hat[..., (-s[None, :] - s[:, None]) % hat.shape[-1]]


def multiplication_operator(q1_hat: np.ndarray, q2_hat: np.ndarray, sites) -> np.ndarray:
    """F [[q1, q2], [q2_bar, q1]] F^{-1} on the normal sites, shape (G, 2n, 2n)."""
    Q1 = toeplitz_block(q1_hat, sites)
    Q2 = hankel_block(q2_hat, sites)
    top = np.concatenate([Q1, Q2], axis=-1)
    bottom = np.concatenate([np.conj(Q2), np.conj(Q1)], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def _max_norm(M: np.ndarray) -> float:
    if M.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(M, ord=2, axis=(-2, -1)), initial=0.0))


def expm_series(X: np.ndarray, tol_exp: float = 1e-13, order_cap: int = 30) -> np.ndarray:
    """exp(X) for a batch of matrices by the truncated power series."""
    eye = np.broadcast_to(np.eye(X.shape[-1], dtype=complex), X.shape)
    result = eye.copy()
    term = eye.copy()
    for order in range(1, order_cap + 1):
        term = np.matmul(term, X) / order
        result = result + term
        tail = _max_norm(term)
        if tail <= tol_exp * (1.0 + _max_norm(result)):
            return result
    raise ExpDivergence(tail, tol_exp, order_cap)


def dexp_series(X: np.ndarray, dX: np.ndarray, tol_exp: float = 1e-13, order_cap: int = 30) -> np.ndarray:
    """exp(-X) d exp(X) = sum_n (-ad_X)^n dX / (n+1)!."""
    result = dX.copy()
    term = dX.copy()
    for order in range(1, order_cap + 1):
        term = -(np.matmul(X, term) - np.matmul(term, X)) / (order + 1)
        result = result + term
        tail = _max_norm(term)
        if tail <= tol_exp * (1.0 + _max_norm(result)):
            return result
    raise ExpDivergence(tail, tol_exp, order_cap)


def hamiltonian_structure_residual(M: np.ndarray) -> float:
    """Distance of J^{-1} M from [[A1, A2], [A2_bar, A1_bar]] with A1 = A1^*, A2 = A2^t."""
    n = M.shape[-1] // 2
    A = M * np.conj(j_diag(n))[:, None]
    A1, A2 = A[..., :n, :n], A[..., :n, n:]
    lower_left, lower_right = A[..., n:, :n], A[..., n:, n:]
    residuals = [
        np.abs(A1 - np.conj(np.swapaxes(A1, -1, -2))),
        np.abs(A2 - np.swapaxes(A2, -1, -2)),
        np.abs(lower_left - np.conj(A2)),
        np.abs(lower_right - np.conj(A1)),
    ]
    return float(max(np.max(r, initial=0.0) for r in residuals))


def normal_form_mask(index_sets: IndexSets) -> np.ndarray:
    """(2n, 2n) mask of the (z, z_bar)-decoupled blocks coupling only the pair {-k, k}."""
    normal = np.abs(np.asarray(index_sets.normal))
    pair = normal[:, None] == normal[None, :]
    zero = np.zeros_like(pair)
    return np.block([[pair, zero], [zero, pair]])


def normal_form_part(A: OperatorMap) -> OperatorMap:
    """l = 0, 2x2-block-diagonal, (z, z_bar)-decoupled part."""
    blocks = np.zeros_like(A.blocks)
    zero = A.index_sets.zero_index
    blocks[zero] = A.blocks[zero] * normal_form_mask(A.index_sets)
    return A.with_blocks(blocks)


def box_omega_derivative(index_sets: IndexSets, values: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """omega . d_phi of the trigonometric interpolant of grid values."""
    od = index_sets.box_lattice @ np.asarray(omega, dtype=float)
    spec = index_sets.box_spectrum(values)
    spec = spec * (1j * od).reshape((-1,) + (1,) * (values.ndim - 1))
    return index_sets.box_values(spec)


# ---------------------------------------------------------------------------
# Operators and transformations
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class NormalDecomposition:
    """D^2 + Omega(phi) + eps Q(phi) plus remainder for the linearized normal operator."""
    D2: np.ndarray              # (n,) 4 pi^2 k^2
    Omega: np.ndarray           # (G, n) omega_k(I(phi)) - 4 pi^2 k^2
    eps_q1_hat: np.ndarray      # (G, Nx)
    eps_q2_hat: np.ndarray      # (G, Nx)
    R0: np.ndarray              # (G, 2n, 2n)
    omega_flat: np.ndarray      # (n,) omega_k(xi, 0)
    action_shift: np.ndarray    # (G,)
    remainder_norm: float = 0.0


@dataclass(eq=False)
class LinHamOperator:
    omega: np.ndarray
    zeroth: np.ndarray          # (G, 2n, 2n) grid values of N + R
    index_sets: IndexSets
    transport: bool = True
    decomposition: Optional[NormalDecomposition] = None
    diagnostics: Dict[str, float] = field(default_factory=dict)

    @cached_property
    def total(self) -> OperatorMap:
        return OperatorMap.from_grid(self.zeroth, self.index_sets)

    @cached_property
    def N_part(self) -> OperatorMap:
        return normal_form_part(self.total)

    @cached_property
    def R_part(self) -> OperatorMap:
        return self.total - self.N_part

    @property
    def n_normal(self) -> int:
        return self.zeroth.shape[-1] // 2

    def structure_residual(self) -> float:
        return hamiltonian_structure_residual(self.zeroth)

    def check_structure(self, tol_struct: float, what: str = "linearized operator") -> float:
        residual = self.structure_residual()
        scale = 1.0 + _max_norm(self.zeroth)
        if residual > tol_struct * scale:
            raise StructureViolation(residual, tol_struct * scale, what=what)
        return residual

    def remainder_norm(self, s: float, sigma: float) -> float:
        return remainder_norm(self.R_part, s, sigma)

    def apply(self, W: SequenceField) -> SequenceField:
        """(omega . d_phi + M) W for a doubled field."""
        product = np.einsum('gij,gj->gi', self.zeroth, W.grid())
        return W.omega_derivative(self.omega) + W.with_coeffs(self.index_sets.from_grid(product))

    def with_zeroth(self, zeroth: np.ndarray, **diagnostics: float) -> "LinHamOperator":
        merged = dict(self.diagnostics)
        merged.update(diagnostics)
        return replace(self, zeroth=zeroth, diagnostics=merged)


class TransformKind(Enum):
    EXP_OF_FIELD = "exp_of_field"
    GAUGE_DIAG = "gauge_diag"


@dataclass(eq=False)
class SymplecticTransform:
    """Phi(phi) = exp(X(phi)) with X Hamiltonian; X_dot holds omega . d_phi X on the grid."""
    kind: TransformKind
    generator: np.ndarray
    generator_dot: np.ndarray
    index_sets: IndexSets
    phases: Optional[SequenceField] = None
    tol_exp: float = 1e-13
    order_cap: int = 30

    @classmethod
    def identity(cls, index_sets: IndexSets) -> "SymplecticTransform":
        D = 2 * index_sets.n_normal
        zero = np.zeros((index_sets.grid_points, D, D), dtype=complex)
        return cls(TransformKind.EXP_OF_FIELD, zero, zero.copy(), index_sets)

    @classmethod
    def from_operator_map(cls, generator: OperatorMap, omega: np.ndarray,
                          tol_exp: float = 1e-13, order_cap: int = 30) -> "SymplecticTransform":
        od = generator.index_sets.omega_dot(omega)
        dot = generator.with_blocks(1j * od[:, None, None] * generator.blocks)
        return cls(TransformKind.EXP_OF_FIELD, generator.grid(), dot.grid(), generator.index_sets,
                   tol_exp=tol_exp, order_cap=order_cap)

    @classmethod
    def from_grid(cls, generator: np.ndarray, omega: np.ndarray, index_sets: IndexSets,
                  tol_exp: float = 1e-13, order_cap: int = 30) -> "SymplecticTransform":
        dot = box_omega_derivative(index_sets, generator, omega)
        return cls(TransformKind.EXP_OF_FIELD, generator, dot, index_sets,
                   tol_exp=tol_exp, order_cap=order_cap)

    @cached_property
    def forward(self) -> np.ndarray:
        if self.kind is TransformKind.GAUGE_DIAG:
            return np.exp(np.diagonal(self.generator, axis1=-2, axis2=-1))[..., :, None] * np.eye(
                self.generator.shape[-1])
        return expm_series(self.generator, self.tol_exp, self.order_cap)

    @cached_property
    def inverse(self) -> np.ndarray:
        if self.kind is TransformKind.GAUGE_DIAG:
            return np.exp(-np.diagonal(self.generator, axis1=-2, axis2=-1))[..., :, None] * np.eye(
                self.generator.shape[-1])
        return expm_series(-self.generator, self.tol_exp, self.order_cap)

    @cached_property
    def log_derivative(self) -> np.ndarray:
        """Phi^{-1} (omega . d_phi Phi)."""
        if self.kind is TransformKind.GAUGE_DIAG:
            return self.generator_dot
        return dexp_series(self.generator, self.generator_dot, self.tol_exp, self.order_cap)

    def conjugate(self, M: np.ndarray) -> np.ndarray:
        """Zeroth-order part of Phi^{-1} (omega . d + M) Phi."""
        return np.matmul(self.inverse, np.matmul(M, self.forward)) + self.log_derivative

    def unconjugate(self, M: np.ndarray) -> np.ndarray:
        """Zeroth-order part of Phi (omega . d + M) Phi^{-1}."""
        back = np.matmul(self.forward, np.matmul(M - self.log_derivative, self.inverse))
        return back

    def apply(self, W: np.ndarray) -> np.ndarray:
        return np.einsum('gij,gj->gi', self.forward, W)

    def apply_inverse(self, W: np.ndarray) -> np.ndarray:
        return np.einsum('gij,gj->gi', self.inverse, W)

    def symplectic_residual(self) -> float:
        n = self.generator.shape[-1] // 2
        J2 = j2_matrix(n)
        Phi = self.forward
        pulled = np.matmul(np.swapaxes(Phi, -1, -2), np.matmul(J2, Phi))
        return float(np.max(np.abs(pulled - J2), initial=0.0))

    def generator_norm(self) -> float:
        return _max_norm(self.generator)

    def conjugate_operator(self, L: LinHamOperator, tol_struct: Optional[float] = None,
                           what: str = "conjugated operator") -> LinHamOperator:
        out = L.with_zeroth(self.conjugate(L.zeroth))
        if tol_struct is not None:
            out.check_structure(tol_struct, what)
        return out


def conjugacy_residual(previous: LinHamOperator, following: LinHamOperator,
                       transform: SymplecticTransform) -> float:
    """Relative size of Phi L_next Phi^{-1} - L_prev on the grid."""
    recovered = transform.unconjugate(following.zeroth)
    scale = max(1.0, _max_norm(previous.zeroth))
    return _max_norm(recovered - previous.zeroth) / scale


# ---------------------------------------------------------------------------
# Assembly and the three explicit transformations
# ---------------------------------------------------------------------------

def _x_data(K: TaylorCoefficients) -> Tuple[np.ndarray, np.ndarray]:
    G = K.A1.shape[0]
    if K.q1_hat is None or K.eps == 0.0:
        return np.zeros((G, 1), dtype=complex), np.zeros((G, 1), dtype=complex)
    return K.eps * K.q1_hat, K.eps * K.q2_hat


def assemble_frakL(
    K: TaylorCoefficients,
    omega: np.ndarray,
    s: float = 0.0,
    sigma: float = 2.0,
    tol_struct: float = 1e-9,
) -> LinHamOperator:
    """
    L_omega = omega . d_phi + J2 K02 and its split into J (D^2 + Omega + eps Q)
    plus the remainder R0, whose one-smoothing norm is recorded.
    """
    index_sets = K.index_sets
    normal = index_sets.normal
    n = len(normal)
    zeroth = K.hamiltonian_blocks()
    L = LinHamOperator(np.asarray(omega, dtype=float), zeroth, index_sets)
    L.check_structure(tol_struct, "frak L")

    D2 = FOUR_PI2 * np.asarray(normal, dtype=float) ** 2
    Omega = K.omega_normal - D2[None, :]
    eps_q1_hat, eps_q2_hat = _x_data(K)
    Q = multiplication_operator(eps_q1_hat, eps_q2_hat, normal)
    diagonal = np.concatenate([D2[None, :] + Omega] * 2, axis=-1)
    main = j_diag(n)[:, None] * (diagonal[..., None] * np.eye(2 * n) + Q)
    R0 = zeroth - main
    r0_norm = remainder_norm(OperatorMap.from_grid(R0, index_sets), s, sigma)
    decomposition = NormalDecomposition(D2, Omega, eps_q1_hat, eps_q2_hat, R0,
                                        K.omega_normal_flat, K.action_shift, r0_norm)
    logger.debug(f"frak L assembled: |R0 D| = {r0_norm:.3e}")
    return replace(L, decomposition=decomposition, diagnostics={"R0_norm": r0_norm})


def offdiagonal_weight(M: np.ndarray, index_sets: IndexSets) -> float:
    """max over phi of |<k> M_{z, z_bar}|, the coupling block weighted by <k>."""
    n = M.shape[-1] // 2
    weight = np.maximum(1.0, np.abs(np.asarray(index_sets.normal, dtype=float)))
    block = M[..., :n, n:] * weight[:, None]
    return _max_norm(block)


def phi1_generator(eps_q2_hat: np.ndarray, sites) -> np.ndarray:
    """X1 = -J F A1 F^{-1} with a1 = -(i/2) eps q2."""
    a1_hat = -0.5j * eps_q2_hat
    inv_dd = 1.0 / dd_weight(sites)
    B = inv_dd[:, None] * hankel_block(a1_hat, sites) * inv_dd[None, :]
    zero = np.zeros_like(B)
    A = np.concatenate([np.concatenate([zero, B], axis=-1),
                        np.concatenate([np.conj(B), zero], axis=-1)], axis=-2)
    return -j_diag(len(sites))[:, None] * A


def phi1_commutator_remainder(eps_q2_hat: np.ndarray, sites) -> np.ndarray:
    """
    R^II with [J D^2, J F A1 F^{-1}] = J F [[0, 2i a1], [-2i a1_bar, 0]] F^{-1} - R^II, where
    R = -2 <<D>>^-1 a1 <<D>>^-1 - [a1, <<D>>] <<D>>^-1 - <<D>>^-1 [<<D>>, a1].
    """
    a1_hat = -0.5j * eps_q2_hat
    dd = dd_weight(sites)
    Ma = hankel_block(a1_hat, sites)
    B = Ma / (dd[:, None] * dd[None, :])
    comm_left = (Ma * dd[None, :] - dd[:, None] * Ma) / dd[None, :]
    comm_right = (dd[:, None] * Ma - Ma * dd[None, :]) / dd[:, None]
    R = -2.0 * B - comm_left - comm_right
    zero = np.zeros_like(R)
    return np.concatenate([np.concatenate([zero, R], axis=-1),
                           np.concatenate([np.conj(R), zero], axis=-1)], axis=-2)


def transform_phi1(
    L: LinHamOperator,
    eps_q2_hat: Optional[np.ndarray] = None,
    tol_exp: float = 1e-13,
    order_cap: int = 30,
    tol_struct: float = 1e-9,
) -> Tuple[LinHamOperator, SymplecticTransform]:
    """Remove the (z, z_bar) coupling of eps Q up to a one-smoothing remainder."""
    index_sets = L.index_sets
    if eps_q2_hat is None:
        eps_q2_hat = L.decomposition.eps_q2_hat
    X = phi1_generator(eps_q2_hat, index_sets.normal)
    transform = SymplecticTransform.from_grid(X, L.omega, index_sets, tol_exp, order_cap)
    before = offdiagonal_weight(L.zeroth, index_sets)
    L1 = transform.conjugate_operator(L, tol_struct, "first transformation")
    after = offdiagonal_weight(L1.zeroth, index_sets)
    L1 = L1.with_zeroth(L1.zeroth, offdiag_before_phi1=before, offdiag_after_phi1=after)
    logger.info(f"Phi1 applied: coupling weight {before:.3e} -> {after:.3e}")
    return L1, transform


def phi2_profile(eps_q1_hat: np.ndarray) -> np.ndarray:
    """a2 = (1/4) d_x^{-1} (eps q1 - av(eps q1)), as an x-spectrum."""
    centered = eps_q1_hat.copy()
    centered[..., 0] = 0.0
    return 0.25 * inverse_dx(centered)


def phi2_generator(eps_q1_hat: np.ndarray, sites) -> np.ndarray:
    """X2 = -J F A2 F^{-1}, A2 = D <<D>>^-2 a2 + a2 D <<D>>^-2 on each diagonal block."""
    a2_hat = phi2_profile(eps_q1_hat)
    s = np.asarray(sites, dtype=float)
    d = (-2.0 * np.pi * s) / dd_weight(sites) ** 2
    Ma = toeplitz_block(a2_hat, sites)
    T = d[:, None] * Ma + Ma * d[None, :]
    zero = np.zeros_like(T)
    A = np.concatenate([np.concatenate([T, zero], axis=-1),
                        np.concatenate([zero, np.conj(T)], axis=-1)], axis=-2)
    return -j_diag(len(sites))[:, None] * A


def transform_phi2(
    L1: LinHamOperator,
    eps_q1_hat: Optional[np.ndarray] = None,
    tol_exp: float = 1e-13,
    order_cap: int = 30,
    tol_struct: float = 1e-9,
) -> Tuple[LinHamOperator, SymplecticTransform]:
    """Make the zeroth-order diagonal x-independent up to a one-smoothing remainder."""
    index_sets = L1.index_sets
    if eps_q1_hat is None:
        eps_q1_hat = L1.decomposition.eps_q1_hat
    X = phi2_generator(eps_q1_hat, index_sets.normal)
    transform = SymplecticTransform.from_grid(X, L1.omega, index_sets, tol_exp, order_cap)
    L2 = transform.conjugate_operator(L1, tol_struct, "second transformation")
    logger.info(f"Phi2 applied: |X2| = {transform.generator_norm():.3e}")
    return L2, transform


@dataclass(eq=False)
class BlockSeed:
    """[[omega_k]] + eps [[q1]] = omega_k(xi, 0) + c_eps + r_k / k on the normal sites."""
    sites: Tuple[int, ...]
    diagonal: np.ndarray
    omega_flat: np.ndarray
    c_eps: float
    r: np.ndarray

    def as_dict(self) -> Dict[str, object]:
        return {
            "sites": list(self.sites),
            "diagonal": self.diagonal.tolist(),
            "c_eps": self.c_eps,
            "r": self.r.tolist(),
        }


def transform_phi3(
    L2: LinHamOperator,
    omega: np.ndarray,
    gamma: float,
    tau: float,
    tol_struct: float = 1e-9,
) -> Tuple[LinHamOperator, SymplecticTransform, BlockSeed]:
    """Gauge away the phi-dependence of the diagonal: Phi3 = diag(exp(-i beta_k), exp(i beta_k))."""
    index_sets = L2.index_sets
    decomposition = L2.decomposition
    normal = index_sets.normal
    n = len(normal)

    local = decomposition.D2[None, :] + decomposition.Omega + decomposition.eps_q1_hat[:, :1].real
    average = np.mean(local, axis=0)
    rhs = SequenceField.from_grid(local - average[None, :], normal, SiteKind.TANGENTIAL_REAL, index_sets)
    rhs.coeffs[index_sets.zero_index] = 0.0
    beta = omega_dvphi_inverse(rhs, omega, tau, gamma)
    beta_dot = beta.omega_derivative(omega)

    X = np.zeros((index_sets.grid_points, 2 * n, 2 * n), dtype=complex)
    X_dot = np.zeros_like(X)
    diag = np.arange(2 * n)
    X[:, diag, diag] = np.concatenate([-1j * beta.grid(), 1j * beta.grid()], axis=-1)
    X_dot[:, diag, diag] = np.concatenate([-1j * beta_dot.grid(), 1j * beta_dot.grid()], axis=-1)
    transform = SymplecticTransform(TransformKind.GAUGE_DIAG, X, X_dot, index_sets, phases=beta)
    L3 = transform.conjugate_operator(L2, tol_struct, "gauge transformation")

    c_eps = float(4.0 * np.mean(decomposition.action_shift) + np.mean(decomposition.eps_q1_hat[:, 0].real))
    seed = BlockSeed(
        sites=tuple(normal),
        diagonal=average,
        omega_flat=decomposition.omega_flat,
        c_eps=c_eps,
        r=np.asarray(normal, dtype=float) * (average - decomposition.omega_flat - c_eps),
    )
    logger.info(f"Phi3 applied: c_eps = {c_eps:.3e}, max |beta| = {np.max(np.abs(beta.grid()), initial=0.0):.3e}")
    return L3, transform, seed


@dataclass(eq=False)
class TransformStack:
    """Composition Phi_1 o Phi_2 o ... applied left to right."""
    transforms: Tuple[SymplecticTransform, ...] = ()

    def __len__(self) -> int:
        return len(self.transforms)

    def then(self, *more: SymplecticTransform) -> "TransformStack":
        return TransformStack(self.transforms + tuple(more))

    def forward(self, index_sets: Optional[IndexSets] = None) -> np.ndarray:
        if not self.transforms:
            return SymplecticTransform.identity(index_sets).forward
        out = self.transforms[0].forward
        for transform in self.transforms[1:]:
            out = np.matmul(out, transform.forward)
        return out

    def inverse(self, index_sets: Optional[IndexSets] = None) -> np.ndarray:
        if not self.transforms:
            return SymplecticTransform.identity(index_sets).inverse
        out = self.transforms[-1].inverse
        for transform in reversed(self.transforms[:-1]):
            out = np.matmul(out, transform.inverse)
        return out

    def conjugate(self, M: np.ndarray) -> np.ndarray:
        for transform in self.transforms:
            M = transform.conjugate(M)
        return M

    def unconjugate(self, M: np.ndarray) -> np.ndarray:
        for transform in reversed(self.transforms):
            M = transform.unconjugate(M)
        return M

    def apply(self, W: np.ndarray) -> np.ndarray:
        for transform in reversed(self.transforms):
            W = transform.apply(W)
        return W

    def apply_inverse(self, W: np.ndarray) -> np.ndarray:
        for transform in self.transforms:
            W = transform.apply_inverse(W)
        return W

    def symplectic_residual(self) -> float:
        return max([t.symplectic_residual() for t in self.transforms], default=0.0)


@dataclass(eq=False)
class ReductionChain:
    """L0 together with the transformations that produced it from L_omega."""
    L_omega: LinHamOperator
    L0: LinHamOperator
    stack: TransformStack
    seed: BlockSeed

    @property
    def transforms(self) -> Tuple[SymplecticTransform, ...]:
        return self.stack.transforms

    def forward(self) -> np.ndarray:
        """Phi1 Phi2 Phi3 on the grid."""
        return self.stack.forward()

    def inverse(self) -> np.ndarray:
        return self.stack.inverse()


def reduce_to_constant_diagonal(
    K: TaylorCoefficients,
    omega: np.ndarray,
    gamma: float,
    tau: float,
    sigma: float = 2.0,
    s: float = 0.0,
    tol_exp: float = 1e-13,
    order_cap: int = 30,
    tol_struct: float = 1e-9,
) -> ReductionChain:
    """assemble_frakL followed by the three explicit transformations."""
    L = assemble_frakL(K, omega, s, sigma, tol_struct)
    L1, phi1 = transform_phi1(L, tol_exp=tol_exp, order_cap=order_cap, tol_struct=tol_struct)
    L2, phi2 = transform_phi2(L1, tol_exp=tol_exp, order_cap=order_cap, tol_struct=tol_struct)
    L3, phi3, seed = transform_phi3(L2, omega, gamma, tau, tol_struct)
    L3 = L3.with_zeroth(L3.zeroth, R0_after_norm=L3.remainder_norm(s, sigma))
    return ReductionChain(L, L3, TransformStack((phi1, phi2, phi3)), seed)
