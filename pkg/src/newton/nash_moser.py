"""
Newton-Nash-Moser iteration for the invariant torus of frequency omega.

Each outer step rebuilds the right inverse at the current torus with the
Melnikov level gamma_n = gamma (1 + 2^-n), applies it to the truncated
residual and truncates the correction again:

    S_{n+1} = S_n - Pi_{N_n} T_n Pi_{N_n} F(S_n),   N_n = N0^(chi^n)
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.stats

from ..core.config_loader import SolverConfig
from ..core.exceptions import NoConvergence, SmallnessGate
from ..lattice.spectral import IndexSets, SequenceField, SiteKind, bracket, smooth_project, sobolev_norm
from ..model.hamiltonian import (
    ActionVector,
    FrequencyModel,
    Perturbation,
    ResidualTriple,
    TorusEmbedding,
    frequencies,
    residual_F,
    tangential_frequencies,
    xi_of_omega,
    zeta_compatibility,
)
from ..monitoring.run_report import IterationRecord, LadderStepRecord
from ..reduction.kam import MelnikovParams, linf_inverse
from .right_inverse import RightInverseBundle, approximate_right_inverse, build_bundle

logger = logging.getLogger(__name__)

GOLDEN = 0.5 * (np.sqrt(5.0) - 1.0)


def index_sets_from_config(config: SolverConfig) -> IndexSets:
    return IndexSets(config.S, config.K_normal, config.L_angle, config.angle_grid)


def default_omega(config: SolverConfig, index_sets: IndexSets,
                  model: Optional[FrequencyModel] = None) -> np.ndarray:
    """Configured omega, or the unperturbed frequency at a golden-ratio point of the action box."""
    if config.omega is not None:
        return np.asarray(config.omega, dtype=float)
    box = config.action_box
    # equal actions at k and -k would give omega_-k = omega_k
    fractions = np.mod(GOLDEN * np.arange(1, index_sets.dim + 1), 1.0)
    xi = box.lower + (box.upper - box.lower) * fractions
    return tangential_frequencies(xi, index_sets, model)


def truncated_residual(E: ResidualTriple, N: float) -> ResidualTriple:
    return ResidualTriple(smooth_project(E.E_theta, N), smooth_project(E.E_y, N),
                          smooth_project(E.E_z, N), E.zeta.copy())


def outer_gamma(gamma: float, n: int) -> float:
    return gamma * (1.0 + 2.0 ** (-n))


def outer_cutoff(N0: float, chi: float, n: int) -> float:
    return float(N0) ** (chi ** n)


def log_residual_ratios(residuals: Sequence[float]) -> List[float]:
    """log r_{n+1} / log r_n over consecutive positive residuals below one."""
    ratios = []
    for previous, current in zip(residuals[:-1], residuals[1:]):
        if 0.0 < previous < 1.0 and 0.0 < current < 1.0:
            ratios.append(float(np.log(current) / np.log(previous)))
    return ratios


@dataclass(eq=False)
class NashMoserResult:
    iota: TorusEmbedding
    zeta: np.ndarray
    xi: ActionVector
    omega: np.ndarray
    converged: bool
    records: List[IterationRecord] = field(default_factory=list)
    ladder: List[LadderStepRecord] = field(default_factory=list)
    final: Dict[str, Any] = field(default_factory=dict)
    bundle: Optional[RightInverseBundle] = None

    @property
    def index_sets(self) -> IndexSets:
        return self.iota.index_sets

    @property
    def residual(self) -> float:
        return self.records[-1].residual if self.records else float("nan")


def _decay_fit(records: List[IterationRecord], N0: float, chi: float) -> Dict[str, Any]:
    """Fit log ||F(S_n)|| against log N_{n-1}; the negated slope is the observed decay exponent."""
    points = [(np.log(outer_cutoff(N0, chi, r.n - 1)), np.log(r.residual))
              for r in records if r.n >= 1 and r.residual > 0]
    if len(points) < 3:
        return {"decay_exponent": None, "points": len(points)}
    x, y = np.array(points).T
    fit = scipy.stats.linregress(x, y)
    return {"decay_exponent": float(-fit.slope), "stderr": float(fit.stderr), "points": len(points)}


def nash_moser_solve(
    omega: np.ndarray,
    config: SolverConfig,
    P: Optional[Perturbation] = None,
    model: Optional[FrequencyModel] = None,
    threads: int = 1,
) -> NashMoserResult:
    """Solve F_omega(iota, zeta) = 0 from (iota, zeta) = (0, 0)."""
    tol = config.tolerances
    kam = config.kam
    nm = config.nash_moser
    omega = np.asarray(omega, dtype=float)
    index_sets = index_sets_from_config(config)
    model = model or FrequencyModel.from_config(config.frequency_model, tol.fd_step)
    P = P or Perturbation.from_config(config.perturbation, config.eps, tol.tol_alias)
    box = (config.action_box.lower, config.action_box.upper)
    xi = xi_of_omega(omega, index_sets, model, box, tol.newton_tol, tol.max_newton)
    s0 = float(kam.s0)
    params = MelnikovParams(config.gamma, float(config.tau))

    gate = config.eps * config.gamma ** -4 if config.eps > 0 else 0.0
    if gate >= nm.delta2:
        if nm.enforce_gate:
            raise SmallnessGate(gate, nm.delta2, "eps gamma^-4")
        logger.warning(f"Nash-Moser smallness gate not met: eps gamma^-4 = {gate:.3e} >= {nm.delta2:.1e}")

    iota = TorusEmbedding.zeros(index_sets)
    zeta = np.zeros(index_sets.dim)
    E = residual_F(iota, zeta, omega, xi, P, model)
    records: List[IterationRecord] = []
    ladder: List[LadderStepRecord] = []
    bundle: Optional[RightInverseBundle] = None
    converged = False

    for n in range(nm.max_outer + 1):
        residual = E.norm(s0, 0)
        residual_high = E.norm(s0 + nm.beta1, 0)
        zeta_norm = float(np.linalg.norm(zeta))
        gamma_n = outer_gamma(config.gamma, n)
        N_n = outer_cutoff(config.N0, nm.chi, n)
        logger.info(f"NM iterate {n}: |F|_s0 = {residual:.3e}, |zeta| = {zeta_norm:.3e}")
        step_stats = dict(step_norm=0.0, kam_steps=0, min_melnikov_ratio=float("nan"),
                          triangular_residual=0.0, refine_steps=0)
        if residual <= nm.tol_NM:
            converged = True
        elif n < nm.max_outer:
            bundle = build_bundle(iota, zeta, omega, xi, params.at_gamma(gamma_n), P, model,
                                  kam, tol, config.N0, threads, level=n)
            update = approximate_right_inverse(truncated_residual(E, N_n), bundle)
            step = update.iota.truncated(N_n)
            iota = iota - step
            zeta = zeta - update.zeta
            trace = bundle.normal_inverse.trace
            step_stats = dict(
                step_norm=step.norm(s0, 0),
                kam_steps=bundle.reduction.steps,
                min_melnikov_ratio=float(bundle.diagnostics["second_melnikov_ratio"]),
                triangular_residual=update.solution.residual,
                refine_steps=max((t.steps for t in trace), default=0),
            )
            ladder.extend(LadderStepRecord.from_ladder(n, r.as_dict()) for r in bundle.reduction.records)

        records.append(IterationRecord(
            n=n, gamma_n=gamma_n, N_n=N_n, residual=residual, residual_high=residual_high,
            zeta_norm=zeta_norm, zeta_ratio=zeta_norm / residual if residual > 0 else 0.0,
            **step_stats,
        ))
        if converged or n == nm.max_outer:
            break
        E = residual_F(iota, zeta, omega, xi, P, model)

    if not converged:
        raise NoConvergence(
            f"Nash-Moser did not reach {nm.tol_NM:.1e} in {nm.max_outer} outer iterations",
            {"records": [asdict(r) for r in records], "residual": records[-1].residual},
        )

    residuals = [r.residual for r in records]
    final = {
        "outer_iterations": records[-1].n,
        "residual": residuals[-1],
        "zeta": zeta.tolist(),
        "zeta_compatibility": float(np.linalg.norm(zeta_compatibility(iota, E))),
        "xi": xi.xi.tolist(),
        "torus_norm": iota.norm(s0, 0),
        "smallness_gate": gate,
        "log_residual_ratios": log_residual_ratios(residuals),
        "decay_fit": _decay_fit(records, config.N0, nm.chi),
        "constants": {"eta1": nm.eta1, "alpha1": nm.alpha1, "kappa1": nm.kappa1, "beta1": nm.beta1},
    }
    if bundle is not None:
        final["normal_form"] = bundle.reduction.N_inf.as_dict()
    logger.info(f"Nash-Moser converged after {records[-1].n} iterations, |F| = {residuals[-1]:.3e}")
    return NashMoserResult(iota, zeta, xi, omega, True, records, ladder, final, bundle)


def bundle_at_solution(result: NashMoserResult, config: SolverConfig,
                       P: Optional[Perturbation] = None, model: Optional[FrequencyModel] = None,
                       threads: int = 1) -> RightInverseBundle:
    """Right-inverse data at the converged torus, with the base Melnikov level gamma."""
    tol = config.tolerances
    model = model or FrequencyModel.from_config(config.frequency_model, tol.fd_step)
    P = P or Perturbation.from_config(config.perturbation, config.eps, tol.tol_alias)
    params = MelnikovParams(config.gamma, float(config.tau))
    return build_bundle(result.iota, result.zeta, result.omega, result.xi, params, P, model,
                        config.kam, tol, config.N0, threads)


# ---------------------------------------------------------------------------
# Linear stability
# ---------------------------------------------------------------------------

@dataclass
class StabilityReport:
    horizon: float
    n_samples: int
    sup_ratio: float
    sup_ratio_short: float
    frame_bound: float
    block_norm_drift: float
    spectrum_imag_max: float
    per_sample: List[float] = field(default_factory=list)
    eigenvalues: List[List[float]] = field(default_factory=list)
    torus_norm: float = 0.0

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


def interpolate_frame(values: np.ndarray, index_sets: IndexSets, phi: np.ndarray) -> np.ndarray:
    """Trigonometric interpolation of grid values (G, ...) at angles phi (T, d)."""
    spectrum = index_sets.box_spectrum(values)
    phase = np.exp(1j * (np.atleast_2d(phi) @ index_sets.box_lattice.T))
    return np.tensordot(phase, spectrum, axes=(1, 0))


def normal_form_rotation(N1: np.ndarray, times: np.ndarray) -> np.ndarray:
    """exp(-t N_inf) on doubled coordinates, from the eigenbasis of the self-adjoint N1."""
    hermitian = 0.5 * (N1 + N1.conj().T)
    lam, Q = scipy.linalg.eigh(hermitian)
    phases = np.exp(-1j * np.outer(times, lam))
    E = np.einsum('ij,tj,kj->tik', Q, phases, Q.conj())
    n = N1.shape[0]
    out = np.zeros((len(times), 2 * n, 2 * n), dtype=complex)
    out[:, :n, :n] = E
    out[:, n:, n:] = np.conj(E)
    return out


def stability_check(
    iota: TorusEmbedding,
    bundle: RightInverseBundle,
    horizon: float = 1000.0,
    n_samples: int = 4,
    n_times: int = 400,
    seed: int = 0,
) -> StabilityReport:
    """
    Propagate the linearized flow around the torus,

        d/dt u = 0,   d/dt W + L(phi0 + omega t) W + C u = 0,

    through the reduction frame W = Phi U, where U obeys d/dt U = -N_inf U - g with
    g = Phi^-1 C u. The particular solution h = -L_inf^-1 g turns this into
    U(t) = exp(-N_inf t)(U(0) - h(phi0)) + h(phi0 + omega t).
    """
    index_sets = bundle.index_sets
    omega = bundle.omega
    N_inf = bundle.reduction.N_inf
    d, n = index_sets.dim, index_sets.n_normal
    rng = np.random.default_rng(seed)
    times = np.linspace(0.0, horizon, n_times)
    short = times <= horizon / 10.0
    rotation = normal_form_rotation(N_inf.normal_matrix(), times)

    forward = bundle.stack.forward(index_sets)
    inverse = bundle.stack.inverse(index_sets)
    frame_bound = float(np.max(np.linalg.norm(forward, ord=2, axis=(1, 2)))
                        * np.max(np.linalg.norm(inverse, ord=2, axis=(1, 2))))

    ratios, ratios_short = [], []
    block_drift = 0.0
    for sample in range(n_samples):
        phi0 = rng.uniform(0.0, 2.0 * np.pi, size=d)
        w0 = rng.normal(size=n) + 1j * rng.normal(size=n)
        w0 /= np.linalg.norm(w0)
        V0 = np.concatenate([w0, np.conj(w0)])
        upsilon0 = np.zeros(d) if sample == 0 else 0.1 * rng.normal(size=d)

        g_grid = np.einsum('gij,gj->gi', inverse, np.einsum('gka,a->gk', bundle.coupling, upsilon0))
        g = SequenceField.from_grid(g_grid, index_sets.normal, SiteKind.DOUBLED, index_sets)
        h = linf_inverse(N_inf, g) * -1.0

        phi_t = phi0[None, :] + np.outer(times, omega)
        frames = interpolate_frame(forward, index_sets, phi_t)
        U0 = interpolate_frame(inverse, index_sets, phi0[None, :])[0] @ V0
        h_t = index_sets.evaluate(h.coeffs, phi_t)
        U_t = np.einsum('tij,j->ti', rotation, U0 - h_t[0]) + h_t
        V_t = np.einsum('tij,tj->ti', frames, U_t)

        scale = np.linalg.norm(V0) + np.linalg.norm(upsilon0)
        norms = np.linalg.norm(V_t, axis=1) / scale
        ratios.append(float(np.max(norms)))
        ratios_short.append(float(np.max(norms[short])))
        if sample == 0:
            U_norms = np.linalg.norm(U_t, axis=1)
            block_drift = float(np.max(np.abs(U_norms - U_norms[0])) / U_norms[0])

    blocks = N_inf.blocks
    imag = float(np.max(np.abs(np.linalg.eigvals(blocks).imag), initial=0.0)) if N_inf.n_blocks else 0.0
    report = StabilityReport(
        horizon=horizon,
        n_samples=n_samples,
        sup_ratio=max(ratios, default=0.0),
        sup_ratio_short=max(ratios_short, default=0.0),
        frame_bound=frame_bound,
        block_norm_drift=block_drift,
        spectrum_imag_max=imag,
        per_sample=ratios,
        eigenvalues=N_inf.eigenvalues().tolist(),
        torus_norm=iota.norm(0, 0),
    )
    logger.info(f"Stability: sup ratio {report.sup_ratio:.4f}, frame bound {frame_bound:.4f}")
    return report


# ---------------------------------------------------------------------------
# Size of the torus
# ---------------------------------------------------------------------------

@dataclass
class FirstMelnikovCheck:
    ok: bool
    min_ratio: float
    witness: Optional[Dict[str, Any]] = None


def first_melnikov_unperturbed(omega: np.ndarray, index_sets: IndexSets, xi: ActionVector,
                               gamma: float, tau: float,
                               model: Optional[FrequencyModel] = None) -> FirstMelnikovCheck:
    """|omega.l + omega_k^nls(xi, 0)| >= gamma k^2 / <l>^tau over the stored l and every normal k."""
    omega_k = frequencies(ActionVector(xi.xi), index_sets, model)[index_sets.normal_positions]
    k = np.asarray(index_sets.normal, dtype=float)
    od = index_sets.omega_dot(omega)
    divisor = np.abs(od[:, None] + omega_k[None, :])
    bound = gamma * k[None, :] ** 2 / bracket(index_sets.norm1)[:, None] ** tau
    ratio = divisor / bound
    i, j = np.unravel_index(np.argmin(ratio), ratio.shape)
    min_ratio = float(ratio[i, j])
    witness = None
    if min_ratio < 1.0:
        witness = {"ell": index_sets.lattice[i].tolist(), "k": int(index_sets.normal[j]),
                   "value": float(divisor[i, j]), "bound": float(bound[i, j])}
    return FirstMelnikovCheck(min_ratio >= 1.0, min_ratio, witness)


def torus_size_audit(result: NashMoserResult, config: SolverConfig,
                     model: Optional[FrequencyModel] = None) -> Dict[str, Any]:
    """||y||_s0, ||z||_{s0, sigma} and ||Theta||_s0 against the eps/gamma scale."""
    iota = result.iota
    s0, sigma = float(config.kam.s0), float(config.kam.sigma)
    y_norm = sobolev_norm(iota.y, s0, 0)
    z_norm = sobolev_norm(iota.z, s0, sigma)
    theta_norm = sobolev_norm(iota.Theta, s0, 0)
    scale = config.eps / config.gamma
    melnikov = first_melnikov_unperturbed(result.omega, result.index_sets, result.xi,
                                          config.gamma, float(config.tau), model)
    return {
        "eps": config.eps,
        "gamma": config.gamma,
        "y_norm": y_norm,
        "z_norm": z_norm,
        "theta_norm": theta_norm,
        "y_over_scale": y_norm / scale if scale > 0 else 0.0,
        "z_over_scale": z_norm / scale if scale > 0 else 0.0,
        "theta_over_scale2": theta_norm * config.gamma / scale if scale > 0 else 0.0,
        "first_melnikov_unperturbed": melnikov.ok,
        "first_melnikov_ratio": melnikov.min_ratio,
        "first_melnikov_witness": melnikov.witness,
    }


def torus_size_sweep(config: SolverConfig, omega: np.ndarray, eps_values: Sequence[float],
                     threads: int = 1) -> Dict[str, Any]:
    """Solve at each eps and fit the eps-exponents of ||y|| and ||z|| on log-log axes."""
    rows = []
    model = FrequencyModel.from_config(config.frequency_model, config.tolerances.fd_step)
    for eps in eps_values:
        run_config = config.model_copy(update={"eps": float(eps)})
        result = nash_moser_solve(omega, run_config, model=model, threads=threads)
        rows.append(torus_size_audit(result, run_config, model))
    fits = {}
    for key in ("y_norm", "z_norm", "theta_norm"):
        points = [(np.log(r["eps"]), np.log(r[key])) for r in rows if r["eps"] > 0 and r[key] > 0]
        if len(points) >= 2:
            x, y = np.array(points).T
            fits[key] = float(scipy.stats.linregress(x, y).slope)
        else:
            fits[key] = None
    return {"rows": rows, "exponents": fits}
