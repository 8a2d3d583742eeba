"""
Truncated normal-form Hamiltonian, its frequency map, the semilinear
perturbation and the residual operator of the invariant-torus equation.

Coordinates follow one convention throughout: tangential sites carry
w_k = sqrt(xi_k + y_k) exp(-i theta_k), normal sites carry w_k = z_k, and the
physical field is u(x) = -sum_k w_k exp(-2 pi i k x) with
zeta1 = sqrt(2) Re u, zeta2 = -sqrt(2) Im u.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core.config_loader import FrequencyModelConfig, PerturbationConfig
from ..core.exceptions import AliasOverflow, NoConvergence, OutOfRange, SqrtDomain
from ..lattice.spectral import (
    IndexSets,
    SequenceField,
    SiteKind,
    smooth_project,
    sobolev_norm,
)

logger = logging.getLogger(__name__)

FOUR_PI2 = 4.0 * np.pi ** 2


# ---------------------------------------------------------------------------
# Actions and frequencies
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ActionVector:
    """Tangential actions xi over S and normal actions over the normal sites."""
    xi: np.ndarray
    I_normal: Optional[np.ndarray] = None

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        if not np.all(np.isfinite(self.xi)) or np.any(self.xi <= 0):
            raise OutOfRange(f"Tangential actions must be positive and finite, got {self.xi}",
                             {"xi": self.xi.tolist()})
        if self.I_normal is not None:
            self.I_normal = np.asarray(self.I_normal, dtype=float)

    def full(self, index_sets: IndexSets) -> np.ndarray:
        """Actions over every site in [-K, K]."""
        I = np.zeros(len(index_sets.all_sites))
        I[index_sets.tangential_positions] = self.xi
        if self.I_normal is not None:
            I[index_sets.normal_positions] = self.I_normal
        return I


@dataclass
class LinearCorrection:
    """r_k(I) = c * sum_j I_j, identical for every site."""
    c: float

    def __call__(self, sites: np.ndarray, I: np.ndarray) -> np.ndarray:
        total = np.sum(I, axis=-1, keepdims=True)
        return self.c * total * np.ones(len(sites))

    def jacobian(self, sites: np.ndarray, I: np.ndarray) -> np.ndarray:
        n = len(sites)
        return np.full(I.shape[:-1] + (n, n), self.c)


CorrectionHook = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class FrequencyModel:
    """
    omega_k(I) = 4 pi^2 k^2 + 4 sum_j I_j - 2 I_k + r_k(I)/k.

    The quartic part is always present. ``correction`` maps (sites, I[..., n])
    to r(I)[..., n]; it is skipped at k = 0. When the hook has no ``jacobian``
    method its derivative is taken by central differences.
    """
    correction: Optional[CorrectionHook] = None
    fd_step: float = 1e-6

    @classmethod
    def from_config(cls, config: Optional[FrequencyModelConfig] = None, fd_step: float = 1e-6) -> "FrequencyModel":
        if config is None or config.correction.kind == "none":
            return cls(fd_step=fd_step)
        return cls(correction=LinearCorrection(config.correction.c), fd_step=fd_step)

    @property
    def is_quartic(self) -> bool:
        return self.correction is None

    @staticmethod
    def _inverse_sites(sites: np.ndarray) -> np.ndarray:
        k = np.asarray(sites, dtype=float)
        inv = np.zeros_like(k)
        inv[k != 0] = 1.0 / k[k != 0]
        return inv

    def frequencies(self, I: np.ndarray, sites: Sequence[int]) -> np.ndarray:
        I = np.asarray(I, dtype=float)
        k = np.asarray(sites, dtype=float)
        omega = FOUR_PI2 * k ** 2 + 4.0 * np.sum(I, axis=-1, keepdims=True) - 2.0 * I
        if self.correction is not None:
            omega = omega + self.correction(np.asarray(sites), I) * self._inverse_sites(sites)
        return omega

    def jacobian(self, I: np.ndarray, sites: Sequence[int]) -> np.ndarray:
        """d omega_k / d I_j, shape (..., n, n)."""
        I = np.asarray(I, dtype=float)
        n = len(sites)
        jac = np.broadcast_to(4.0 - 2.0 * np.eye(n), I.shape[:-1] + (n, n)).copy()
        if self.correction is None:
            return jac
        hook_jacobian = getattr(self.correction, "jacobian", None)
        if hook_jacobian is not None:
            dr = hook_jacobian(np.asarray(sites), I)
        else:
            dr = np.empty(I.shape[:-1] + (n, n))
            for j in range(n):
                step = np.zeros(n)
                step[j] = self.fd_step
                plus = self.correction(np.asarray(sites), I + step)
                minus = self.correction(np.asarray(sites), I - step)
                dr[..., :, j] = (plus - minus) / (2.0 * self.fd_step)
        return jac + dr * self._inverse_sites(sites)[:, None]

    def energy(self, I: np.ndarray, sites: Sequence[int]) -> np.ndarray:
        """Quartic normal-form energy; the correction has no potential and is left out."""
        I = np.asarray(I, dtype=float)
        k = np.asarray(sites, dtype=float)
        total = np.sum(I, axis=-1)
        return np.sum(FOUR_PI2 * k ** 2 * I, axis=-1) + 2.0 * total ** 2 - np.sum(I ** 2, axis=-1)


def frequencies(I: ActionVector, index_sets: IndexSets, model: Optional[FrequencyModel] = None) -> np.ndarray:
    """Frequencies over ``index_sets.all_sites``."""
    model = model or FrequencyModel()
    return model.frequencies(I.full(index_sets), index_sets.all_sites)


def tangential_frequencies(xi: np.ndarray, index_sets: IndexSets,
                           model: Optional[FrequencyModel] = None) -> np.ndarray:
    """omega^nls(xi, 0) restricted to S."""
    model = model or FrequencyModel()
    return frequencies(ActionVector(xi), index_sets, model)[index_sets.tangential_positions]


def frequency_jacobian(I: ActionVector, index_sets: IndexSets,
                       model: Optional[FrequencyModel] = None) -> np.ndarray:
    """(d omega_k / d I_j) over S x S."""
    model = model or FrequencyModel()
    full = model.jacobian(I.full(index_sets), index_sets.all_sites)
    t = index_sets.tangential_positions
    return full[np.ix_(t, t)]


def kolmogorov_det(I: ActionVector, index_sets: IndexSets, model: Optional[FrequencyModel] = None) -> float:
    """Determinant of the tangential frequency Jacobian; -(-2)^|S| (2|S|-1) for the quartic model."""
    return float(np.linalg.det(frequency_jacobian(I, index_sets, model)))


def xi_of_omega(
    omega: np.ndarray,
    index_sets: IndexSets,
    model: Optional[FrequencyModel] = None,
    action_box: Optional[Tuple[float, float]] = None,
    newton_tol: float = 1e-12,
    max_newton: int = 50,
) -> ActionVector:
    """
    Invert the tangential frequency map omega^nls(., 0) by Newton's method.

    The starting point is the exact inverse of the quartic map, so quartic
    models converge without further steps.
    """
    model = model or FrequencyModel()
    omega = np.asarray(omega, dtype=float)
    S = np.asarray(index_sets.tangential, dtype=float)
    n = len(S)
    quartic = 4.0 * np.ones((n, n)) - 2.0 * np.eye(n)
    xi = np.linalg.solve(quartic, omega - FOUR_PI2 * S ** 2)
    scale = max(1.0, float(np.max(np.abs(omega))))

    def leave_check(candidate: np.ndarray, step: int) -> None:
        if np.any(candidate <= 0):
            raise OutOfRange(
                f"Newton iterate {step} left the positive cone: min xi = {candidate.min():.3e}",
                {"step": step, "xi": candidate.tolist()},
            )
        if action_box is not None:
            lower, upper = action_box
            if np.any(candidate < lower) or np.any(candidate > upper):
                raise OutOfRange(
                    f"Newton iterate {step} left the action box [{lower}, {upper}]",
                    {"step": step, "xi": candidate.tolist(), "box": [lower, upper]},
                )

    leave_check(xi, 0)
    for step in range(max_newton + 1):
        residual = tangential_frequencies(xi, index_sets, model) - omega
        err = float(np.max(np.abs(residual)))
        if err <= newton_tol * scale:
            logger.debug(f"xi_of_omega converged after {step} Newton steps, residual {err:.3e}")
            return ActionVector(xi)
        if step == max_newton:
            break
        jac = frequency_jacobian(ActionVector(xi), index_sets, model)
        xi = xi - np.linalg.solve(jac, residual)
        leave_check(xi, step + 1)
    raise NoConvergence(
        f"xi_of_omega did not converge in {max_newton} Newton steps",
        {"residual": err, "max_newton": max_newton},
    )


# ---------------------------------------------------------------------------
# Perturbation
# ---------------------------------------------------------------------------

@dataclass
class PerturbationTerm:
    """coeff * trig(2 pi harmonic x) * zeta1**power1 * zeta2**power2."""
    coeff: float
    harmonic: int = 0
    trig: str = "cos"
    power1: int = 0
    power2: int = 0

    def profile(self, x: np.ndarray) -> np.ndarray:
        arg = 2.0 * np.pi * self.harmonic * x
        return np.cos(arg) if self.trig == "cos" else np.sin(arg)


def _power(z: np.ndarray, exponent: int, order: int) -> np.ndarray:
    """order-th derivative of z**exponent."""
    if order > exponent:
        return np.zeros_like(z)
    factor = 1.0
    for m in range(order):
        factor *= exponent - m
    return factor * z ** (exponent - order)


@dataclass(eq=False)
class PerturbationData:
    """The perturbation and its Wirtinger data on a batch of phase points."""
    value: np.ndarray          # (B,)
    grad: np.ndarray           # (B, n) dP/dw_bar
    q1: np.ndarray             # (B, Nx) d_zeta d_zetabar p, real
    q2: np.ndarray             # (B, Nx) d_zetabar^2 p
    spill: float

    @property
    def grid_size(self) -> int:
        return self.q1.shape[-1]

    def q1_hat(self) -> np.ndarray:
        return np.fft.fft(self.q1, axis=-1) / self.grid_size

    def q2_hat(self) -> np.ndarray:
        return np.fft.fft(self.q2, axis=-1) / self.grid_size

    def hessian_wbar_w(self, sites: Sequence[int]) -> np.ndarray:
        """d^2 P / dw_bar_a dw_b = q1_hat[b - a]."""
        s = np.asarray(sites)
        return self.q1_hat()[:, (s[None, :] - s[:, None]) % self.grid_size]

    def hessian_wbar_wbar(self, sites: Sequence[int]) -> np.ndarray:
        """d^2 P / dw_bar_a dw_bar_b = q2_hat[-a - b]."""
        s = np.asarray(sites)
        return self.q2_hat()[:, (-s[None, :] - s[:, None]) % self.grid_size]


@dataclass
class Perturbation:
    """P(u) = eps-free integral of p(x, zeta1, zeta2) over one period, evaluated on grid_size points."""
    terms: List[PerturbationTerm]
    grid_size: int
    eps: float = 0.0
    tol_alias: float = 1e-10

    @classmethod
    def from_config(cls, config: PerturbationConfig, eps: float, tol_alias: float = 1e-10) -> "Perturbation":
        terms = [PerturbationTerm(t.coeff, t.harmonic, t.trig, t.power1, t.power2) for t in config.terms]
        return cls(terms, int(config.grid_size), float(eps), tol_alias)

    @property
    def x_grid(self) -> np.ndarray:
        return np.arange(self.grid_size) / self.grid_size

    @property
    def degree(self) -> int:
        return max([t.power1 + t.power2 for t in self.terms] + [0])

    def with_eps(self, eps: float) -> "Perturbation":
        return Perturbation(self.terms, self.grid_size, eps, self.tol_alias)

    def derivatives(self, zeta1: np.ndarray, zeta2: np.ndarray) -> Dict[str, np.ndarray]:
        """p and its partial derivatives up to order two on the x-grid."""
        x = self.x_grid
        out = {key: np.zeros_like(zeta1) for key in ("p", "1", "2", "11", "12", "22")}
        orders = {"p": (0, 0), "1": (1, 0), "2": (0, 1), "11": (2, 0), "12": (1, 1), "22": (0, 2)}
        for term in self.terms:
            weight = term.coeff * term.profile(x)
            for key, (o1, o2) in orders.items():
                out[key] = out[key] + weight * _power(zeta1, term.power1, o1) * _power(zeta2, term.power2, o2)
        return out

    def physical_field(self, w: np.ndarray, sites: Sequence[int]) -> np.ndarray:
        """u on the x-grid from the complex site coordinates, shape (B, Nx)."""
        Nx = self.grid_size
        v = np.zeros(w.shape[:-1] + (Nx,), dtype=complex)
        v[..., np.asarray(sites) % Nx] = w
        return -np.fft.fft(v, axis=-1)

    def evaluate(self, w: np.ndarray, sites: Sequence[int], K_normal: Optional[int] = None) -> PerturbationData:
        w = np.atleast_2d(w)
        Nx = self.grid_size
        u = self.physical_field(w, sites)
        zeta1 = np.sqrt(2.0) * u.real
        zeta2 = -np.sqrt(2.0) * u.imag
        d = self.derivatives(zeta1, zeta2)
        f = (d["1"] - 1j * d["2"]) / np.sqrt(2.0)
        q1 = 0.5 * (d["11"] + d["22"])
        q2 = 0.5 * (d["11"] - 2j * d["12"] - d["22"])

        K = K_normal if K_normal is not None else int(np.max(np.abs(sites)))
        spectrum = np.fft.fft(f, axis=-1) / Nx
        modes = np.abs(np.rint(np.fft.fftfreq(Nx) * Nx))
        energy = float(np.sum(np.abs(spectrum) ** 2))
        top = float(np.sum(np.abs(spectrum[..., modes >= Nx // 2 - K]) ** 2))
        spill = top / energy if energy > 0 else 0.0
        if spill > self.tol_alias:
            raise AliasOverflow(spill, self.tol_alias)

        grad = -np.fft.ifft(f, axis=-1)[..., np.asarray(sites) % Nx]
        value = np.mean(d["p"], axis=-1)
        return PerturbationData(value=value, grad=grad, q1=q1, q2=q2, spill=spill)


# ---------------------------------------------------------------------------
# Hamiltonian field on phase points
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class HamiltonianGradient:
    d_theta: np.ndarray   # (B, d)
    d_y: np.ndarray       # (B, d)
    d_zbar: np.ndarray    # (B, n)


@dataclass(eq=False)
class HamiltonianHessian:
    """Second derivatives in the (y, z, z_bar) directions; A1 = H_{z_bar z}, A2 = H_{z_bar z_bar}."""
    yy: np.ndarray        # (B, d, d)
    yz: np.ndarray        # (B, d, n)
    yzbar: np.ndarray     # (B, d, n)
    A1: np.ndarray        # (B, n, n)
    A2: np.ndarray        # (B, n, n)
    pert: Optional[PerturbationData] = None


class HamiltonianField:
    """H_eps = H^nls(xi + y, |z|^2) + eps P evaluated on batches of phase points."""

    def __init__(self, index_sets: IndexSets, xi: ActionVector,
                 model: Optional[FrequencyModel] = None,
                 perturbation: Optional[Perturbation] = None):
        self.index_sets = index_sets
        self.xi = xi
        self.model = model or FrequencyModel()
        self.perturbation = perturbation
        self._t = index_sets.tangential_positions
        self._n = index_sets.normal_positions

    @property
    def eps(self) -> float:
        return self.perturbation.eps if self.perturbation is not None else 0.0

    @property
    def active(self) -> bool:
        return self.perturbation is not None and self.eps != 0.0

    def coordinates(self, theta: np.ndarray, y: np.ndarray, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(w, I) over all sites for a batch of phase points."""
        theta, y, z = np.atleast_2d(theta), np.atleast_2d(y), np.atleast_2d(z)
        I_t = self.xi.xi[None, :] + y
        if np.any(I_t <= 0):
            b, a = np.unravel_index(np.argmin(I_t), I_t.shape)
            raise SqrtDomain(int(self.index_sets.tangential[a]), float(I_t[b, a]))
        B = theta.shape[0]
        n_all = len(self.index_sets.all_sites)
        w = np.zeros((B, n_all), dtype=complex)
        I = np.zeros((B, n_all))
        w[:, self._t] = np.sqrt(I_t) * np.exp(-1j * theta)
        w[:, self._n] = z
        I[:, self._t] = I_t
        I[:, self._n] = np.abs(z) ** 2
        return w, I

    def perturbation_data(self, theta, y, z) -> Optional[PerturbationData]:
        if not self.active:
            return None
        w, _ = self.coordinates(theta, y, z)
        return self.perturbation.evaluate(w, self.index_sets.all_sites, self.index_sets.K_normal)

    def energy(self, theta, y, z) -> np.ndarray:
        w, I = self.coordinates(theta, y, z)
        value = self.model.energy(I, self.index_sets.all_sites)
        if self.active:
            data = self.perturbation.evaluate(w, self.index_sets.all_sites, self.index_sets.K_normal)
            value = value + self.eps * data.value
        return value

    def gradient(self, theta, y, z) -> HamiltonianGradient:
        w, I = self.coordinates(theta, y, z)
        z = np.atleast_2d(z)
        omega = self.model.frequencies(I, self.index_sets.all_sites)
        d_theta = np.zeros(I[:, self._t].shape)
        d_y = omega[:, self._t].copy()
        d_zbar = omega[:, self._n] * z
        if self.active:
            data = self.perturbation.evaluate(w, self.index_sets.all_sites, self.index_sets.K_normal)
            g_t = data.grad[:, self._t]
            w_t = w[:, self._t]
            d_theta = d_theta + self.eps * 2.0 * np.real(np.conj(g_t) * (-1j * w_t))
            d_y = d_y + self.eps * np.real(np.conj(g_t) * w_t) / I[:, self._t]
            d_zbar = d_zbar + self.eps * data.grad[:, self._n]
        return HamiltonianGradient(d_theta, d_y, d_zbar)

    def hessian(self, theta, y, z) -> HamiltonianHessian:
        w, I = self.coordinates(theta, y, z)
        z = np.atleast_2d(z)
        t, n = self._t, self._n
        sites = self.index_sets.all_sites
        omega = self.model.frequencies(I, sites)
        jac = self.model.jacobian(I, sites)
        if not self.model.is_quartic:
            jac = 0.5 * (jac + np.swapaxes(jac, -1, -2))

        yy = jac[:, t][:, :, t].copy()
        jac_tn = jac[:, t][:, :, n]
        yz = jac_tn * np.conj(z)[:, None, :]
        yzbar = jac_tn * z[:, None, :]
        jac_nn = jac[:, n][:, :, n]
        A1 = z[:, :, None] * jac_nn * np.conj(z)[:, None, :]
        A1 = A1 + np.einsum('bk,kj->bkj', omega[:, n], np.eye(len(n)))
        A2 = z[:, :, None] * jac_nn * z[:, None, :]

        data = None
        if self.active:
            data = self.perturbation.evaluate(w, sites, self.index_sets.K_normal)
            eps = self.eps
            B1 = data.hessian_wbar_w(sites)
            B2 = data.hessian_wbar_wbar(sites)
            P_ww = np.conj(B2)
            P_wwbar = np.conj(B1)
            I_t = I[:, t]
            w_t = w[:, t]
            g_t = data.grad[:, t]
            v = w_t / (2.0 * I_t)
            yy_p = 2.0 * np.real(
                v[:, :, None] * P_ww[:, t][:, :, t] * v[:, None, :]
                + v[:, :, None] * P_wwbar[:, t][:, :, t] * np.conj(v)[:, None, :]
            )
            diag = 2.0 * np.real(np.conj(g_t) * (-w_t / (4.0 * I_t ** 2)))
            yy_p = yy_p + np.einsum('ba,ac->bac', diag, np.eye(len(t)))
            yz_p = v[:, :, None] * P_ww[:, t][:, :, n] + np.conj(v)[:, :, None] * B1[:, t][:, :, n]
            yy = yy + eps * yy_p
            yz = yz + eps * yz_p
            yzbar = yzbar + eps * np.conj(yz_p)
            A1 = A1 + eps * B1[:, n][:, :, n]
            A2 = A2 + eps * B2[:, n][:, :, n]
        return HamiltonianHessian(yy, yz, yzbar, A1, A2, data)


# ---------------------------------------------------------------------------
# Embeddings and the residual operator
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TorusEmbedding:
    """Periodic part (Theta, y, z) of phi -> (phi + Theta, y, z)."""
    Theta: SequenceField
    y: SequenceField
    z: SequenceField

    @classmethod
    def zeros(cls, index_sets: IndexSets) -> "TorusEmbedding":
        S = index_sets.tangential
        return cls(
            SequenceField.zeros(index_sets, S, SiteKind.TANGENTIAL_REAL),
            SequenceField.zeros(index_sets, S, SiteKind.TANGENTIAL_REAL),
            SequenceField.zeros(index_sets, index_sets.normal, SiteKind.NORMAL_COMPLEX),
        )

    @property
    def index_sets(self) -> IndexSets:
        return self.Theta.index_sets

    def grid_state(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(theta, y, z) at every collocation point; theta includes phi."""
        theta = self.index_sets.grid_phi + self.Theta.grid()
        return theta, self.y.grid(), self.z.grid()

    def norm(self, s: float, sigma: float) -> float:
        return float(np.sqrt(
            sobolev_norm(self.Theta, s, 0) ** 2
            + sobolev_norm(self.y, s, 0) ** 2
            + sobolev_norm(self.z, s, sigma) ** 2
        ))

    def truncated(self, N: float) -> "TorusEmbedding":
        return TorusEmbedding(smooth_project(self.Theta, N), smooth_project(self.y, N), smooth_project(self.z, N))

    def __add__(self, other: "TorusEmbedding") -> "TorusEmbedding":
        return TorusEmbedding(self.Theta + other.Theta, self.y + other.y, self.z + other.z)

    def __sub__(self, other: "TorusEmbedding") -> "TorusEmbedding":
        return TorusEmbedding(self.Theta - other.Theta, self.y - other.y, self.z - other.z)

    def __mul__(self, scalar: float) -> "TorusEmbedding":
        return TorusEmbedding(self.Theta * scalar, self.y * scalar, self.z * scalar)

    __rmul__ = __mul__


@dataclass(eq=False)
class ResidualTriple:
    E_theta: SequenceField
    E_y: SequenceField
    E_z: SequenceField
    zeta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def as_embedding(self) -> TorusEmbedding:
        return TorusEmbedding(self.E_theta, self.E_y, self.E_z)

    def norm(self, s: float, sigma: float) -> float:
        return self.as_embedding().norm(s, sigma)


def residual_F(
    iota: TorusEmbedding,
    zeta: np.ndarray,
    omega: np.ndarray,
    xi: ActionVector,
    P: Optional[Perturbation] = None,
    model: Optional[FrequencyModel] = None,
) -> ResidualTriple:
    """F_omega(iota, zeta) = (omega.d theta - H_y, omega.d y + H_theta + zeta, omega.d z + i H_zbar)."""
    index_sets = iota.index_sets
    omega = np.asarray(omega, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    hamiltonian = HamiltonianField(index_sets, xi, model, P)
    grad = hamiltonian.gradient(*iota.grid_state())

    S, normal = index_sets.tangential, index_sets.normal
    zero = index_sets.zero_index
    H_y = SequenceField.from_grid(grad.d_y, S, SiteKind.TANGENTIAL_REAL, index_sets)
    H_theta = SequenceField.from_grid(grad.d_theta, S, SiteKind.TANGENTIAL_REAL, index_sets)
    H_zbar = SequenceField.from_grid(grad.d_zbar, normal, SiteKind.NORMAL_COMPLEX, index_sets)

    E_theta = iota.Theta.omega_derivative(omega) - H_y
    E_theta.coeffs[zero] += omega
    E_y = iota.y.omega_derivative(omega) + H_theta
    E_y.coeffs[zero] += zeta
    E_z = iota.z.omega_derivative(omega) + H_zbar * 1j
    return ResidualTriple(E_theta, E_y, E_z, zeta.copy())


def embedding_jacobians(iota: TorusEmbedding) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Grid values of d_phi theta (G, d, d), d_phi y (G, d, d) and d_phi z (G, n, d); [g, b, a] = d_a (.)_b."""
    d = iota.index_sets.dim
    dtheta = np.stack([iota.Theta.dphi(a).grid() for a in range(d)], axis=-1) + np.eye(d)[None]
    dy = np.stack([iota.y.dphi(a).grid() for a in range(d)], axis=-1)
    dz = np.stack([iota.z.dphi(a).grid() for a in range(d)], axis=-1)
    return dtheta, dy, dz


def zeta_compatibility(iota: TorusEmbedding, E: ResidualTriple) -> np.ndarray:
    """Average of -(d theta)^T E_y + (d y)^T E_theta - i (d z)^T conj(E_z) + i (d z_bar)^T E_z."""
    dtheta, dy, dz = embedding_jacobians(iota)
    Ey, Et, Ez = E.E_y.grid(), E.E_theta.grid(), E.E_z.grid()
    integrand = (
        - np.einsum('gba,gb->ga', dtheta, Ey)
        + np.einsum('gba,gb->ga', dy, Et)
        - 1j * np.einsum('gka,gk->ga', dz, np.conj(Ez))
        + 1j * np.einsum('gka,gk->ga', np.conj(dz), Ez)
    )
    return np.real(np.mean(integrand, axis=0))
