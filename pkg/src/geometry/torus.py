"""
Isotropic correction of approximate tori, the symplectic chart around an
isotropic torus and the Taylor coefficients of the Hamiltonian in that chart.

Everything here is evaluated at collocation points of the angle grid and
projected back onto the l1 lattice when a SequenceField is needed.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from ..core.exceptions import ChartSingular, NonzeroMean, StructureViolation
from ..lattice.spectral import IndexSets, OperatorMap, SequenceField, SiteKind, omega_dvphi_inverse
from ..model.hamiltonian import (
    ActionVector,
    FrequencyModel,
    HamiltonianField,
    Perturbation,
    ResidualTriple,
    TorusEmbedding,
    embedding_jacobians,
)

logger = logging.getLogger(__name__)


def full_symplectic_form(d: int, n: int) -> np.ndarray:
    """Matrix of the symplectic form on (theta, y, z, z_bar) coordinates."""
    D = 2 * d + 2 * n
    form = np.zeros((D, D), dtype=complex)
    form[:d, d:2 * d] = np.eye(d)
    form[d:2 * d, :d] = -np.eye(d)
    form[2 * d:2 * d + n, 2 * d + n:] = 1j * np.eye(n)
    form[2 * d + n:, 2 * d:2 * d + n] = -1j * np.eye(n)
    return form


def symplectic_pairing(first: Tuple[np.ndarray, np.ndarray, np.ndarray],
                       second: Tuple[np.ndarray, np.ndarray, np.ndarray]) -> np.ndarray:
    """Lambda[X1, X2] for tangent vectors (theta, y, z) with z_bar = conj(z); last axis is summed."""
    t1, y1, z1 = first
    t2, y2, z2 = second
    return (np.sum(t1 * y2, axis=-1) - np.sum(y1 * t2, axis=-1)
            + 1j * (np.sum(z1 * np.conj(z2), axis=-1) - np.sum(np.conj(z1) * z2, axis=-1)))


def liouville_form(iota: TorusEmbedding) -> np.ndarray:
    """Grid values of a = -(d theta)^T y + i (d z_bar)^T z, shape (G, d)."""
    dtheta, _, dz = embedding_jacobians(iota)
    _, y, z = iota.grid_state()
    return (-np.einsum('gba,gb->ga', dtheta, y)
            + 1j * np.einsum('gka,gk->ga', np.conj(dz), z))


def isotropy_residual(iota: TorusEmbedding) -> float:
    """Max over the grid of (d theta)^T d y - (d y)^T d theta + i (d z)^T d z_bar - i (d z_bar)^T d z."""
    dtheta, dy, dz = embedding_jacobians(iota)
    form = (np.einsum('gba,gbc->gac', dtheta, dy) - np.einsum('gba,gbc->gac', dy, dtheta)
            + 1j * np.einsum('gka,gkc->gac', dz, np.conj(dz))
            - 1j * np.einsum('gka,gkc->gac', np.conj(dz), dz))
    return float(np.max(np.abs(form), initial=0.0))


def _checked_inverse(dtheta: np.ndarray, cond_cap: float) -> np.ndarray:
    cond = float(np.max(np.linalg.cond(dtheta)))
    if not np.isfinite(cond) or cond > cond_cap:
        raise ChartSingular(cond, cond_cap)
    return np.linalg.inv(dtheta)


@dataclass(eq=False)
class IsotropicEmbedding:
    base: TorusEmbedding
    y_iso: SequenceField
    A_coeffs: Dict[Tuple[int, int], SequenceField]
    rho: SequenceField
    closedness_residual: float
    method: str = "curl"
    method_gap: Optional[float] = None

    @property
    def embedding(self) -> TorusEmbedding:
        return TorusEmbedding(self.base.Theta, self.y_iso, self.base.z)

    @property
    def index_sets(self) -> IndexSets:
        return self.base.index_sets

    def isotropy_residual(self) -> float:
        return isotropy_residual(self.embedding)


def _curl_and_hodge(index_sets: IndexSets, a: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    """Box spectra of A_kj = d_k a_j - d_j a_k and of the co-closed part r of a."""
    m = index_sets.box_lattice.astype(float)
    a_hat = index_sets.box_spectrum(a)
    A_hat = 1j * (m[:, :, None] * a_hat[:, None, :] - m[:, None, :] * a_hat[:, :, None])
    m2 = np.sum(m ** 2, axis=1)
    safe = np.where(m2 > 0, m2, 1.0)
    r_hat = a_hat - m * (np.sum(m * a_hat, axis=1) / safe)[:, None]
    r_hat[m2 == 0] = 0.0
    closed = a_hat - r_hat
    curl = 1j * (m[:, :, None] * closed[:, None, :] - m[:, None, :] * closed[:, :, None])
    scale = max(1.0, float(np.max(np.abs(a_hat), initial=0.0)))
    return A_hat, r_hat, float(np.max(np.abs(curl), initial=0.0)) / scale


def _transport_two_form(iota: TorusEmbedding, E: ResidualTriple, omega: np.ndarray,
                        gamma: float, tau: float, tol_iso: float) -> np.ndarray:
    """Lattice coefficients (n_ell, d, d) of A_kj from omega.d A_kj = Lambda[d_k E, d_j i] + Lambda[d_k i, d_j E]."""
    index_sets = iota.index_sets
    d = index_sets.dim
    dtheta, dy, dz = embedding_jacobians(iota)
    dE_t = np.stack([E.E_theta.dphi(a).grid() for a in range(d)], axis=-1)
    dE_y = np.stack([E.E_y.dphi(a).grid() for a in range(d)], axis=-1)
    dE_z = np.stack([E.E_z.dphi(a).grid() for a in range(d)], axis=-1)

    A = np.zeros((index_sets.n_ell, d, d), dtype=complex)
    for k in range(d):
        for j in range(k + 1, d):
            source = (symplectic_pairing((dE_t[..., k], dE_y[..., k], dE_z[..., k]),
                                         (dtheta[..., j], dy[..., j], dz[..., j]))
                      + symplectic_pairing((dtheta[..., k], dy[..., k], dz[..., k]),
                                           (dE_t[..., j], dE_y[..., j], dE_z[..., j])))
            g = SequenceField.from_grid(source.real[:, None], (0,), SiteKind.TANGENTIAL_REAL, index_sets)
            mean = abs(g.coeffs[index_sets.zero_index, 0])
            bound = tol_iso * (1.0 + float(np.sqrt(np.sum(np.abs(g.coeffs) ** 2))))
            if mean > bound:
                raise NonzeroMean(float(mean), bound, where=f"two-form source ({k}, {j})")
            g.coeffs[index_sets.zero_index] = 0.0
            solved = omega_dvphi_inverse(g, omega, tau, gamma)
            A[:, k, j] = solved.coeffs[:, 0]
            A[:, j, k] = -solved.coeffs[:, 0]
    return A


def isotropize(
    iota: TorusEmbedding,
    E: Optional[ResidualTriple] = None,
    omega: Optional[np.ndarray] = None,
    gamma: Optional[float] = None,
    tau: Optional[float] = None,
    method: str = "curl",
    tol_iso: float = 1e-9,
    chart_cond_cap: float = 1e6,
) -> IsotropicEmbedding:
    """
    Replace y by y + (d theta)^{-T} r, r being the co-closed part of the pulled
    back Liouville form, so that the corrected torus is isotropic.

    ``method="curl"`` takes the two-form from the Liouville coefficients
    directly. ``method="transport"`` integrates it along the flow from the
    residual E, which needs omega, gamma and tau, and reports the gap to the
    curl construction.
    """
    if method not in ("curl", "transport"):
        raise ValueError(f"Unknown isotropy method: {method}")
    index_sets = iota.index_sets
    S = index_sets.tangential
    d = index_sets.dim
    dtheta, _, _ = embedding_jacobians(iota)
    inv = _checked_inverse(dtheta, chart_cond_cap)

    a = liouville_form(iota)
    A_hat, r_hat, closedness = _curl_and_hodge(index_sets, a)
    scale = 1.0 + iota.norm(0, 0)
    if closedness > tol_iso * scale:
        raise StructureViolation(closedness, tol_iso * scale, what="closed part of the Liouville form")

    r_lattice = index_sets.from_grid(index_sets.box_values(r_hat).real)
    A_lattice = index_sets.from_grid(index_sets.box_values(A_hat).real)
    method_gap = None
    if method == "transport":
        if E is None or omega is None or gamma is None or tau is None:
            raise ValueError("transport isotropy needs E, omega, gamma and tau")
        A_transport = _transport_two_form(iota, E, omega, gamma, tau, tol_iso)
        lat = index_sets.lattice.astype(float)
        l2 = np.sum(lat ** 2, axis=1)
        safe = np.where(l2 > 0, l2, 1.0)
        r_transport = np.einsum('lj,lkj->lk', 1j * lat, A_transport) / safe[:, None]
        r_transport[l2 == 0] = 0.0
        method_gap = float(np.max(np.abs(r_transport - r_lattice), initial=0.0))
        logger.debug(f"isotropy transport/curl gap {method_gap:.3e}")
        r_lattice, A_lattice = r_transport, A_transport

    rho = SequenceField(index_sets.symmetrize_real(r_lattice), S, SiteKind.TANGENTIAL_REAL, index_sets)
    r_grid = rho.grid()
    correction = np.einsum('gba,gb->ga', inv, r_grid)
    y_iso = SequenceField.from_grid(iota.y.grid() + correction, S, SiteKind.TANGENTIAL_REAL, index_sets)

    A_coeffs = {}
    for k in range(d):
        for j in range(d):
            coeffs = index_sets.symmetrize_real(A_lattice[:, k, j][:, None])
            A_coeffs[(S[k], S[j])] = SequenceField(coeffs, (S[k],), SiteKind.TANGENTIAL_REAL, index_sets)

    logger.debug(f"isotropize[{method}]: |r| = {np.max(np.abs(r_grid), initial=0.0):.3e}, "
                 f"closedness {closedness:.3e}")
    return IsotropicEmbedding(iota, y_iso, A_coeffs, rho, closedness, method, method_gap)


@dataclass(eq=False)
class GammaChart:
    """
    Gamma(psi, v, w) = (theta(psi), y_iso(psi) + (d theta)^{-T} v + Y_w w + conj(Y_w w), z(psi) + w)
    evaluated at the collocation points of the trivial torus (psi = phi, v = 0, w = 0).
    """
    iso: IsotropicEmbedding
    dtheta: np.ndarray       # (G, d, d)
    dtheta_inv: np.ndarray   # (G, d, d)
    dy_iso: np.ndarray       # (G, d, d)
    dz: np.ndarray           # (G, n, d)
    Y_w: np.ndarray          # (G, d, n)

    @property
    def dims(self) -> Tuple[int, int]:
        return self.dtheta.shape[-1], self.dz.shape[1]

    def point(self, upsilon: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gamma(phi, upsilon, w) on the grid."""
        theta, y_iso, z = self.iso.embedding.grid_state()
        Yw = np.einsum('gak,gk->ga', self.Y_w, w)
        y = y_iso + np.einsum('gba,gb->ga', self.dtheta_inv, upsilon) + 2.0 * Yw.real
        return theta, y, z + w

    def push(self, psi: np.ndarray, upsilon: np.ndarray, w: np.ndarray):
        """dGamma applied to grid tangent vectors (psi, upsilon, w)."""
        theta = np.einsum('gba,ga->gb', self.dtheta, psi)
        Yw = np.einsum('gak,gk->ga', self.Y_w, w)
        y = (np.einsum('gba,ga->gb', self.dy_iso, psi)
             + np.einsum('gab,ga->gb', self.dtheta_inv, upsilon) + 2.0 * Yw.real)
        z = np.einsum('gka,ga->gk', self.dz, psi) + w
        return theta, y, z

    def pull(self, theta: np.ndarray, y: np.ndarray, z: np.ndarray):
        """dGamma^{-1} applied to grid tangent vectors."""
        psi = np.einsum('gab,gb->ga', self.dtheta_inv, theta)
        w = z - np.einsum('gka,ga->gk', self.dz, psi)
        Yw = np.einsum('gak,gk->ga', self.Y_w, w)
        rest = y - np.einsum('gba,ga->gb', self.dy_iso, psi) - 2.0 * Yw.real
        upsilon = np.einsum('gba,gb->ga', self.dtheta, rest)
        return psi, upsilon, w

    def d_gamma(self) -> np.ndarray:
        """Matrix of dGamma on (theta, y, z, z_bar), shape (G, D, D)."""
        d, n = self.dims
        G = self.dtheta.shape[0]
        D = 2 * d + 2 * n
        out = np.zeros((G, D, D), dtype=complex)
        t, y, z, zb = slice(0, d), slice(d, 2 * d), slice(2 * d, 2 * d + n), slice(2 * d + n, D)
        out[:, t, t] = self.dtheta
        out[:, y, t] = self.dy_iso
        out[:, y, y] = np.swapaxes(self.dtheta_inv, -1, -2)
        out[:, y, z] = self.Y_w
        out[:, y, zb] = np.conj(self.Y_w)
        out[:, z, t] = self.dz
        out[:, z, z] = np.eye(n)
        out[:, zb, t] = np.conj(self.dz)
        out[:, zb, zb] = np.eye(n)
        return out

    def d_gamma_inv(self) -> np.ndarray:
        return np.linalg.inv(self.d_gamma())

    def symplectic_residual(self) -> float:
        d, n = self.dims
        form = full_symplectic_form(d, n)
        dG = self.d_gamma()
        pulled = np.einsum('gji,jk,gkl->gil', dG, form, dG)
        return float(np.max(np.abs(pulled - form[None]), initial=0.0))

    def check_symplectic(self, tol_struct: float) -> float:
        residual = self.symplectic_residual()
        if residual > tol_struct:
            raise StructureViolation(residual, tol_struct, what="chart differential")
        return residual


def gamma_chart(iso: IsotropicEmbedding, chart_cond_cap: float = 1e6) -> GammaChart:
    emb = iso.embedding
    dtheta, dy_iso, dz = embedding_jacobians(emb)
    inv = _checked_inverse(dtheta, chart_cond_cap)
    inv_T = np.swapaxes(inv, -1, -2)
    # Y_w = i (d theta)^{-T} (d z_bar)^T
    Y_w = 1j * np.einsum('gab,gkb->gak', inv_T, np.conj(dz))
    return GammaChart(iso, dtheta, inv, dy_iso, dz, Y_w)


@dataclass(eq=False)
class TaylorCoefficients:
    """
    Second order expansion of K = H o Gamma + zeta . theta at the trivial
    torus, all arrays sampled on the angle grid. W = (w, w_bar) doubles the
    normal directions; A1 = d^2 K / dw_bar dw, A2 = d^2 K / dw_bar dw_bar.
    """
    index_sets: IndexSets
    K00: np.ndarray     # (G,)
    K10: np.ndarray     # (G, d)
    K01: np.ndarray     # (G, 2n)
    K20: np.ndarray     # (G, d, d)
    K11: np.ndarray     # (G, d, 2n)
    A1: np.ndarray      # (G, n, n)
    A2: np.ndarray      # (G, n, n)
    eps: float = 0.0
    q1_hat: Optional[np.ndarray] = None   # (G, Nx) x-spectrum of q1 along the torus, without eps
    q2_hat: Optional[np.ndarray] = None
    omega_normal: Optional[np.ndarray] = None      # (G, n) normal frequencies along the torus
    omega_normal_flat: Optional[np.ndarray] = None # (n,) normal frequencies at (xi, 0)
    action_shift: Optional[np.ndarray] = None      # (G,) sum of y plus sum of |z|^2

    def K02(self) -> np.ndarray:
        """[[d_w grad_w, d_wbar grad_w], [d_w grad_wbar, d_wbar grad_wbar]] = [[A2bar, A1bar], [A1, A2]]."""
        top = np.concatenate([np.conj(self.A2), np.conj(self.A1)], axis=-1)
        bottom = np.concatenate([self.A1, self.A2], axis=-1)
        return np.concatenate([top, bottom], axis=-2)

    def hamiltonian_blocks(self) -> np.ndarray:
        """J2 K02 = J [[A1, A2], [A2bar, A1bar]] with J = diag(i, -i)."""
        top = np.concatenate([1j * self.A1, 1j * self.A2], axis=-1)
        bottom = np.concatenate([-1j * np.conj(self.A2), -1j * np.conj(self.A1)], axis=-1)
        return np.concatenate([top, bottom], axis=-2)

    def K02_map(self) -> OperatorMap:
        return OperatorMap.from_grid(self.hamiltonian_blocks(), self.index_sets)

    def K20_field(self) -> np.ndarray:
        """Lattice coefficients of K20, shape (n_ell, d, d)."""
        return self.index_sets.from_grid(self.K20)

    def structure_residual(self) -> float:
        a1 = np.max(np.abs(self.A1 - np.conj(np.swapaxes(self.A1, -1, -2))), initial=0.0)
        a2 = np.max(np.abs(self.A2 - np.swapaxes(self.A2, -1, -2)), initial=0.0)
        k20 = np.max(np.abs(self.K20 - np.swapaxes(self.K20, -1, -2)), initial=0.0)
        return float(max(a1, a2, k20))


def taylor_K(
    chart: GammaChart,
    xi: ActionVector,
    P: Optional[Perturbation] = None,
    zeta: Optional[np.ndarray] = None,
    model: Optional[FrequencyModel] = None,
) -> TaylorCoefficients:
    """Taylor coefficients of H_eps o Gamma at (phi, 0, 0) by the chain rule through the chart."""
    iso = chart.iso
    index_sets = iso.index_sets
    d, n = chart.dims
    zeta = np.zeros(d) if zeta is None else np.asarray(zeta, dtype=float)
    hamiltonian = HamiltonianField(index_sets, xi, model, P)
    theta, y, z = iso.embedding.grid_state()

    value = hamiltonian.energy(theta, y, z) + theta @ zeta
    grad = hamiltonian.gradient(theta, y, z)
    hess = hamiltonian.hessian(theta, y, z)

    inv = chart.dtheta_inv
    Yw = chart.Y_w
    Ywb = np.conj(Yw)
    K10 = np.einsum('gab,gb->ga', inv, grad.d_y)
    grad_wbar = grad.d_zbar + np.einsum('gak,ga->gk', Ywb, grad.d_y)
    K01 = np.concatenate([np.conj(grad_wbar), grad_wbar], axis=-1)

    K20 = np.einsum('gab,gbc,gdc->gad', inv, hess.yy, inv)
    K11_w = np.einsum('gab,gbk->gak', inv, np.einsum('gbc,gck->gbk', hess.yy, Yw) + hess.yz)
    K11 = np.concatenate([K11_w, np.conj(K11_w)], axis=-1)

    cross_w = np.einsum('gak,gaj->gkj', hess.yzbar, Yw)
    A1 = (hess.A1
          + np.einsum('gak,gab,gbj->gkj', Ywb, hess.yy, Yw)
          + cross_w
          + np.conj(np.swapaxes(cross_w, -1, -2)))
    cross_wb = np.einsum('gak,gaj->gkj', hess.yzbar, Ywb)
    A2 = (hess.A2
          + np.einsum('gak,gab,gbj->gkj', Ywb, hess.yy, Ywb)
          + cross_wb
          + np.swapaxes(cross_wb, -1, -2))

    q1_hat = q2_hat = None
    if hess.pert is not None:
        q1_hat = hess.pert.q1_hat()
        q2_hat = hess.pert.q2_hat()
    _, I = hamiltonian.coordinates(theta, y, z)
    sites = index_sets.all_sites
    omega_normal = hamiltonian.model.frequencies(I, sites)[:, index_sets.normal_positions]
    I_flat = np.zeros((1, len(sites)))
    I_flat[0, index_sets.tangential_positions] = xi.xi
    omega_flat = hamiltonian.model.frequencies(I_flat, sites)[0, index_sets.normal_positions]
    action_shift = np.sum(y, axis=-1) + np.sum(np.abs(z) ** 2, axis=-1)
    return TaylorCoefficients(index_sets, value, K10, K01, K20, K11, A1, A2, hamiltonian.eps,
                              q1_hat, q2_hat, omega_normal, omega_flat, action_shift)
