"""
Index sets, Fourier fields over the angle lattice, weighted norms and smoothing projectors.

A field stores Fourier coefficients on the l1 ball |l|_1 <= L_angle. Pointwise
operations go through the tensor grid of ``angle_grid`` points per angle and
come back by projection onto the ball.
"""
import itertools
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from ..core.exceptions import DiophantineViolation, NonzeroMean

logger = logging.getLogger(__name__)


def bracket(x: np.ndarray) -> np.ndarray:
    """<x> = max(1, |x|) elementwise."""
    return np.maximum(1.0, np.abs(np.asarray(x, dtype=float)))


def dd_weight(sites: Sequence[int]) -> np.ndarray:
    """<<j>> = (1 + (2 pi j)^2)^(1/2)."""
    j = np.asarray(sites, dtype=float)
    return np.sqrt(1.0 + (2.0 * np.pi * j) ** 2)


class IndexSets:
    """Tangential/normal site sets, the angle lattice and its collocation grid."""

    def __init__(self, tangential: Sequence[int], K_normal: int, L_angle: int,
                 angle_grid: Optional[int] = None):
        S = tuple(sorted(set(int(k) for k in tangential)))
        if 0 not in S or tuple(sorted(-k for k in S)) != S:
            raise ValueError(f"Tangential sites must contain 0 and satisfy S = -S, got {S}")
        if K_normal <= max(abs(k) for k in S):
            raise ValueError("K_normal must exceed max |k| over the tangential sites")
        if L_angle < 1:
            raise ValueError("L_angle must be positive")
        M = angle_grid if angle_grid is not None else 2 * L_angle + 1
        if M < 2 * L_angle + 1 or M % 2 == 0:
            raise ValueError("angle_grid must be odd and at least 2*L_angle+1")

        self.tangential: Tuple[int, ...] = S
        self.K_normal = int(K_normal)
        self.L_angle = int(L_angle)
        self.angle_grid = int(M)
        self.dim = len(S)

        plus = [k for k in range(1, K_normal + 1) if k not in S]
        self.normal_plus: Tuple[int, ...] = tuple(plus)
        self.normal: Tuple[int, ...] = tuple(s for k in plus for s in (-k, k))
        self.all_sites: Tuple[int, ...] = tuple(range(-K_normal, K_normal + 1))

        position = {k: i for i, k in enumerate(self.all_sites)}
        self.tangential_positions = np.array([position[k] for k in S], dtype=int)
        self.normal_positions = np.array([position[k] for k in self.normal], dtype=int)

        cube = itertools.product(range(-L_angle, L_angle + 1), repeat=self.dim)
        lattice = np.array([ell for ell in cube if sum(abs(e) for e in ell) <= L_angle], dtype=int)
        self.lattice = lattice.reshape(-1, self.dim)
        self.norm1 = np.abs(self.lattice).sum(axis=1)
        self.zero_index = int(np.flatnonzero(self.norm1 == 0)[0])
        lookup = {tuple(ell): i for i, ell in enumerate(self.lattice)}
        self.neg_index = np.array([lookup[tuple(-ell)] for ell in self.lattice], dtype=int)
        self._lookup = lookup

        self.box_index = tuple(self.lattice[:, a] % M for a in range(self.dim))
        freqs = np.rint(np.fft.fftfreq(M) * M).astype(int)
        mesh = np.meshgrid(*([freqs] * self.dim), indexing='ij')
        self.box_lattice = np.stack([m.ravel() for m in mesh], axis=-1)
        nodes = 2.0 * np.pi * np.arange(M) / M
        phi = np.meshgrid(*([nodes] * self.dim), indexing='ij')
        self.grid_phi = np.stack([p.ravel() for p in phi], axis=-1)
        self.grid_points = M ** self.dim

    @property
    def n_ell(self) -> int:
        return self.lattice.shape[0]

    @property
    def n_normal(self) -> int:
        return len(self.normal)

    def index_of(self, ell: Sequence[int]) -> int:
        return self._lookup[tuple(int(e) for e in ell)]

    def ell_bracket(self) -> np.ndarray:
        return bracket(self.norm1)

    def omega_dot(self, omega: np.ndarray) -> np.ndarray:
        return self.lattice @ np.asarray(omega, dtype=float)

    # -- transforms between lattice coefficients and grid values --------------

    def to_grid(self, coeffs: np.ndarray) -> np.ndarray:
        """Lattice coefficients (n_ell, ...) -> grid values (G, ...)."""
        tail = coeffs.shape[1:]
        M, d = self.angle_grid, self.dim
        box = np.zeros((M,) * d + tail, dtype=complex)
        box[self.box_index] = coeffs
        values = np.fft.ifftn(box, axes=tuple(range(d))) * (M ** d)
        return values.reshape((self.grid_points,) + tail)

    def box_spectrum(self, values: np.ndarray) -> np.ndarray:
        """Grid values (G, ...) -> full box spectrum (G, ...) indexed like box_lattice."""
        tail = values.shape[1:]
        M, d = self.angle_grid, self.dim
        spec = np.fft.fftn(values.reshape((M,) * d + tail), axes=tuple(range(d))) / (M ** d)
        return spec.reshape((self.grid_points,) + tail)

    def box_values(self, spectrum: np.ndarray) -> np.ndarray:
        tail = spectrum.shape[1:]
        M, d = self.angle_grid, self.dim
        values = np.fft.ifftn(spectrum.reshape((M,) * d + tail), axes=tuple(range(d))) * (M ** d)
        return values.reshape((self.grid_points,) + tail)

    def from_grid(self, values: np.ndarray) -> np.ndarray:
        """Grid values (G, ...) -> lattice coefficients (n_ell, ...)."""
        tail = values.shape[1:]
        M, d = self.angle_grid, self.dim
        spec = np.fft.fftn(values.reshape((M,) * d + tail), axes=tuple(range(d))) / (M ** d)
        return spec[self.box_index]

    def evaluate(self, coeffs: np.ndarray, phi: np.ndarray) -> np.ndarray:
        """Trigonometric sum at arbitrary angles phi (T, d) -> (T, ...)."""
        phase = np.exp(1j * (np.atleast_2d(phi) @ self.lattice.T))
        return np.tensordot(phase, coeffs, axes=(1, 0))

    def symmetrize_real(self, coeffs: np.ndarray) -> np.ndarray:
        """Projection onto coefficients of real-valued functions."""
        return 0.5 * (coeffs + np.conj(coeffs[self.neg_index]))


class SiteKind(Enum):
    TANGENTIAL_REAL = "tangential-real"
    NORMAL_COMPLEX = "normal-complex"
    DOUBLED = "doubled"


@dataclass(eq=False)
class SequenceField:
    """Fourier coefficients (n_ell, n_columns) over a site set."""
    coeffs: np.ndarray
    sites: Tuple[int, ...]
    kind: SiteKind
    index_sets: IndexSets

    @classmethod
    def zeros(cls, index_sets: IndexSets, sites: Sequence[int], kind: SiteKind) -> "SequenceField":
        width = 2 * len(sites) if kind is SiteKind.DOUBLED else len(sites)
        return cls(np.zeros((index_sets.n_ell, width), dtype=complex), tuple(sites), kind, index_sets)

    @classmethod
    def from_grid(cls, values: np.ndarray, sites: Sequence[int], kind: SiteKind,
                  index_sets: IndexSets) -> "SequenceField":
        coeffs = index_sets.from_grid(values)
        if kind is SiteKind.TANGENTIAL_REAL:
            coeffs = index_sets.symmetrize_real(coeffs)
        return cls(coeffs, tuple(sites), kind, index_sets)

    def with_coeffs(self, coeffs: np.ndarray) -> "SequenceField":
        return replace(self, coeffs=coeffs)

    def grid(self) -> np.ndarray:
        values = self.index_sets.to_grid(self.coeffs)
        if self.kind is SiteKind.TANGENTIAL_REAL:
            return values.real
        return values

    def mean(self) -> np.ndarray:
        return self.coeffs[self.index_sets.zero_index].copy()

    def dphi(self, axis: int) -> "SequenceField":
        return self.with_coeffs(1j * self.index_sets.lattice[:, axis][:, None] * self.coeffs)

    def omega_derivative(self, omega: np.ndarray) -> "SequenceField":
        od = self.index_sets.omega_dot(omega)
        return self.with_coeffs(1j * od[:, None] * self.coeffs)

    def conj_field(self) -> "SequenceField":
        """Coefficients of the pointwise complex conjugate."""
        return self.with_coeffs(np.conj(self.coeffs[self.index_sets.neg_index]))

    def column_weights(self, sigma: float) -> np.ndarray:
        w = bracket(self.sites) ** sigma
        return np.concatenate([w, w]) if self.kind is SiteKind.DOUBLED else w

    def __add__(self, other: "SequenceField") -> "SequenceField":
        return self.with_coeffs(self.coeffs + other.coeffs)

    def __sub__(self, other: "SequenceField") -> "SequenceField":
        return self.with_coeffs(self.coeffs - other.coeffs)

    def __mul__(self, scalar: complex) -> "SequenceField":
        return self.with_coeffs(self.coeffs * scalar)

    __rmul__ = __mul__


@dataclass(eq=False)
class OperatorMap:
    """Operator-valued Fourier coefficients (n_ell, 2n, 2n) on doubled normal coordinates."""
    blocks: np.ndarray
    sites: Tuple[int, ...]
    index_sets: IndexSets
    weight_sigma: int = 0

    @classmethod
    def zeros(cls, index_sets: IndexSets, weight_sigma: int = 0) -> "OperatorMap":
        D = 2 * index_sets.n_normal
        return cls(np.zeros((index_sets.n_ell, D, D), dtype=complex), index_sets.normal,
                   index_sets, weight_sigma)

    @classmethod
    def constant(cls, index_sets: IndexSets, matrix: np.ndarray, weight_sigma: int = 0) -> "OperatorMap":
        op = cls.zeros(index_sets, weight_sigma)
        op.blocks[index_sets.zero_index] = matrix
        return op

    @classmethod
    def from_grid(cls, values: np.ndarray, index_sets: IndexSets, weight_sigma: int = 0) -> "OperatorMap":
        return cls(index_sets.from_grid(values), index_sets.normal, index_sets, weight_sigma)

    @property
    def dimension(self) -> int:
        return self.blocks.shape[-1]

    def with_blocks(self, blocks: np.ndarray) -> "OperatorMap":
        return replace(self, blocks=blocks)

    def grid(self) -> np.ndarray:
        return self.index_sets.to_grid(self.blocks)

    def zero_mode(self) -> np.ndarray:
        return self.blocks[self.index_sets.zero_index].copy()

    def __add__(self, other: "OperatorMap") -> "OperatorMap":
        return self.with_blocks(self.blocks + other.blocks)

    def __sub__(self, other: "OperatorMap") -> "OperatorMap":
        return self.with_blocks(self.blocks - other.blocks)

    def __mul__(self, scalar: complex) -> "OperatorMap":
        return self.with_blocks(self.blocks * scalar)

    __rmul__ = __mul__


def sobolev_norm(u: SequenceField, s: float, sigma: float) -> float:
    """||u||_{s,sigma}^2 = sum |u_n(l)|^2 <n>^{2 sigma} <l>^{2 s}."""
    w_ell = u.index_sets.ell_bracket() ** s
    w_n = u.column_weights(sigma)
    weighted = np.abs(u.coeffs) * w_ell[:, None] * w_n[None, :]
    return float(np.sqrt(np.sum(weighted ** 2)))


def _weighted_operator_norm(blocks: np.ndarray, ell_norm1: np.ndarray, sites: Sequence[int],
                            s: float, sigma: float, right_weight: Optional[np.ndarray]) -> float:
    w = bracket(sites) ** sigma
    w = np.concatenate([w, w])
    blocks = blocks * (w[:, None] / w[None, :])
    if right_weight is not None:
        blocks = blocks * right_weight[None, None, :]
    active = np.flatnonzero(np.any(blocks != 0, axis=(1, 2)))
    if active.size == 0:
        return 0.0
    spectral = np.linalg.norm(blocks[active], ord=2, axis=(1, 2))
    w_ell = bracket(ell_norm1[active]) ** s
    return float(np.sqrt(np.sum((spectral * w_ell) ** 2)))


def operator_norm(A: OperatorMap, s: float, sigma: float,
                  right_weight: Optional[np.ndarray] = None) -> float:
    """|A|_{s,sigma} from weighted spectral norms; ``right_weight`` multiplies A on the right."""
    return _weighted_operator_norm(A.blocks, A.index_sets.norm1, A.sites, s, sigma, right_weight)


def doubled_dd(index_sets: IndexSets) -> np.ndarray:
    w = dd_weight(index_sets.normal)
    return np.concatenate([w, w])


def remainder_norm(A: OperatorMap, s: float, sigma: float) -> float:
    """|A D|_{s,sigma-1}, the one-smoothing norm used along the reduction."""
    return operator_norm(A, s, sigma - 1, right_weight=doubled_dd(A.index_sets))


Projectable = Union[SequenceField, OperatorMap]


def _mask(index_sets: IndexSets, N: float) -> np.ndarray:
    return index_sets.norm1 <= N


def smooth_project(x: Projectable, N: float) -> Projectable:
    """Pi_N: drop every Fourier mode with |l|_1 > N."""
    if N < 1:
        raise ValueError("Smoothing cutoff must be at least 1")
    keep = _mask(x.index_sets, N)
    if isinstance(x, OperatorMap):
        return x.with_blocks(x.blocks * keep[:, None, None])
    return x.with_coeffs(x.coeffs * keep[:, None])


def smooth_project_perp(x: Projectable, N: float) -> Projectable:
    """Pi_N^perp = Id - Pi_N."""
    if N < 1:
        raise ValueError("Smoothing cutoff must be at least 1")
    drop = ~_mask(x.index_sets, N)
    if isinstance(x, OperatorMap):
        return x.with_blocks(x.blocks * drop[:, None, None])
    return x.with_coeffs(x.coeffs * drop[:, None])


def diophantine_check(index_sets: IndexSets, omega: np.ndarray, gamma: float, tau: float) -> None:
    """Raise DiophantineViolation at the first stored l with |omega.l| < gamma/|l|^tau."""
    od = np.abs(index_sets.omega_dot(omega))
    nz = index_sets.norm1 > 0
    bound = np.zeros_like(od)
    bound[nz] = gamma / index_sets.norm1[nz].astype(float) ** tau
    bad = np.flatnonzero(nz & (od < bound))
    if bad.size:
        i = bad[np.argmin(od[bad] / bound[bad])]
        raise DiophantineViolation(tuple(int(e) for e in index_sets.lattice[i]), float(od[i]), float(bound[i]))


def omega_dvphi_inverse(g: SequenceField, omega: np.ndarray, tau: float, gamma: float,
                        tol_mean_rel: float = 1e-12) -> SequenceField:
    """Solve omega . d_phi f = g for zero-mean f."""
    index_sets = g.index_sets
    diophantine_check(index_sets, omega, gamma, tau)
    mean = float(np.max(np.abs(g.coeffs[index_sets.zero_index]), initial=0.0))
    scale = float(np.sqrt(np.sum(np.abs(g.coeffs) ** 2)))
    if mean > tol_mean_rel * scale:
        raise NonzeroMean(mean, tol_mean_rel * scale)
    od = index_sets.omega_dot(omega)
    divisor = 1j * od
    divisor[index_sets.zero_index] = 1.0
    coeffs = g.coeffs / divisor[:, None]
    coeffs[index_sets.zero_index] = 0.0
    return g.with_coeffs(coeffs)


def box_remainder_norm(spectrum: np.ndarray, index_sets: IndexSets, s: float, sigma: float) -> float:
    """remainder_norm for operators given on the full collocation spectrum (G, 2n, 2n)."""
    norm1 = np.abs(index_sets.box_lattice).sum(axis=1)
    return _weighted_operator_norm(spectrum, norm1, index_sets.normal, s, sigma - 1,
                                   doubled_dd(index_sets))
