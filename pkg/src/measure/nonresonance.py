"""
Diophantine and Melnikov checks over a frequency box, with Monte-Carlo
estimates of the excluded measure.

Every condition is stored as a normalized margin nu: a frequency is excluded
at level gamma exactly when nu < gamma (nu < gamma_* for the diophantine
family), so a whole sweep is read off one pass over the samples.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.stats

from ..core.config_loader import SolverConfig
from ..lattice.spectral import IndexSets, bracket
from ..model.hamiltonian import FrequencyModel
from ..monitoring.run_report import MeasureReport
from ..reduction.kam import BlockNormalForm

logger = logging.getLogger(__name__)

CONDITIONS = ("diophantine", "first", "second_plus", "second_minus")
CONFIDENCE = 0.95
WITNESS_LOG_SIZE = 20
CHUNK_BUDGET = 2_000_000


@dataclass(eq=False)
class FrequencyBox:
    """Image of the action box [lower, upper]^S under xi -> omega^nls(xi, 0)."""
    index_sets: IndexSets
    lower: float
    upper: float
    model: FrequencyModel = field(default_factory=FrequencyModel)

    def __post_init__(self):
        if not 0.0 < self.lower < self.upper:
            raise ValueError("FrequencyBox requires 0 < lower < upper")

    @classmethod
    def from_config(cls, config: SolverConfig, L_max: Optional[int] = None) -> "FrequencyBox":
        L = L_max or config.measure.L_max or config.L_angle
        model = FrequencyModel.from_config(config.frequency_model, config.tolerances.fd_step)
        return cls(IndexSets(config.S, config.K_normal, L), config.action_box.lower,
                   config.action_box.upper, model)

    @property
    def dim(self) -> int:
        return self.index_sets.dim

    def sample_xi(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def _all_frequencies(self, xi: np.ndarray) -> np.ndarray:
        index_sets = self.index_sets
        xi = np.atleast_2d(xi)
        I = np.zeros((xi.shape[0], len(index_sets.all_sites)))
        I[:, index_sets.tangential_positions] = xi
        return self.model.frequencies(I, index_sets.all_sites)

    def frequencies(self, xi: np.ndarray) -> np.ndarray:
        return self._all_frequencies(xi)[:, self.index_sets.tangential_positions]

    def seed_eigenvalues(self, xi: np.ndarray) -> np.ndarray:
        """(B, p, 2) sorted eigenvalues of the unperturbed blocks diag(omega_-k, omega_k)."""
        normal = self._all_frequencies(xi)[:, self.index_sets.normal_positions]
        return np.sort(normal.reshape(normal.shape[0], -1, 2), axis=-1)

    def seed_normal_form(self, xi: np.ndarray) -> BlockNormalForm:
        xi = np.asarray(xi, dtype=float).reshape(-1)
        normal = self._all_frequencies(xi)[0, self.index_sets.normal_positions]
        return BlockNormalForm.diagonal(normal, self.index_sets.normal_plus, self.frequencies(xi)[0])

    def tangential_jacobian(self, xi: np.ndarray) -> np.ndarray:
        index_sets = self.index_sets
        I = np.zeros(len(index_sets.all_sites))
        I[index_sets.tangential_positions] = xi
        full = self.model.jacobian(I, index_sets.all_sites)
        t = index_sets.tangential_positions
        return full[np.ix_(t, t)]


@dataclass
class ConditionSuite:
    """Which families to check and at which constants; tau_* = |S| + 1, gamma_* = gamma^(1/2)."""
    conditions: Tuple[str, ...]
    gamma: float
    tau: float
    L_max: int
    tau_star: float
    star_exponent: float = 0.5

    def __post_init__(self):
        unknown = set(self.conditions) - set(CONDITIONS)
        if unknown:
            raise ValueError(f"Unknown conditions: {sorted(unknown)}")

    @classmethod
    def from_config(cls, config: SolverConfig) -> "ConditionSuite":
        measure = config.measure
        return cls(tuple(measure.conditions), config.gamma, float(config.tau),
                   int(measure.L_max or config.L_angle), float(len(config.S) + 1))

    def level(self, condition: str, gamma: float) -> float:
        """The constant a normalized margin is compared against."""
        return gamma ** self.star_exponent if condition == "diophantine" else gamma


# ---------------------------------------------------------------------------
# Single-frequency checks
# ---------------------------------------------------------------------------

@dataclass
class DiophantineVerdict:
    ok: bool
    min_ratio: float
    ell: Optional[Tuple[int, ...]] = None
    value: float = float("inf")
    bound: float = 0.0

    def as_dict(self) -> Dict[str, Any]:
        return dict(ok=self.ok, min_ratio=self.min_ratio, ell=list(self.ell) if self.ell else None,
                    value=self.value, bound=self.bound)


def angle_ball(dim: int, L_max: int) -> np.ndarray:
    axes = [np.arange(-L_max, L_max + 1)] * dim
    cube = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing='ij')], axis=-1)
    return cube[np.abs(cube).sum(axis=1) <= L_max]


def diophantine_test(omega: np.ndarray, gamma: float, tau: float, L_max: int) -> DiophantineVerdict:
    """|omega . l| >= gamma / |l|_1^tau over 0 < |l|_1 <= L_max; the witness is the worst l."""
    omega = np.asarray(omega, dtype=float)
    lattice = angle_ball(len(omega), L_max)
    norm1 = np.abs(lattice).sum(axis=1)
    lattice, norm1 = lattice[norm1 > 0], norm1[norm1 > 0]
    values = np.abs(lattice @ omega)
    bounds = gamma / norm1.astype(float) ** tau
    ratios = values / bounds
    i = int(np.argmin(ratios))
    ok = bool(ratios[i] >= 1.0)
    if ok:
        return DiophantineVerdict(True, float(ratios[i]))
    return DiophantineVerdict(False, float(ratios[i]), tuple(int(e) for e in lattice[i]),
                              float(values[i]), float(bounds[i]))


# ---------------------------------------------------------------------------
# Batched margins
# ---------------------------------------------------------------------------

@dataclass
class FamilyMargins:
    """Normalized margins nu (B,) with the raw divisor and the (l, j, k, sign) at the minimum."""
    condition: str
    nu: np.ndarray
    margin: np.ndarray
    ell: np.ndarray
    j: np.ndarray
    k: np.ndarray

    def witness(self, b: int) -> Dict[str, Any]:
        sign = {"second_plus": "+", "second_minus": "-"}.get(self.condition, self.condition)
        return {"condition": self.condition, "ell": self.ell[b].tolist(), "j": int(self.j[b]),
                "k": int(self.k[b]), "sign": sign, "margin": float(self.margin[b]),
                "normalized_margin": float(self.nu[b])}


def _argmin_rows(ratios: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    flat = ratios.reshape(ratios.shape[0], -1)
    idx = np.argmin(flat, axis=1)
    return flat[np.arange(flat.shape[0]), idx], idx


def family_margins(omega: np.ndarray, eigenvalues: np.ndarray, sites_plus: Sequence[int],
                   lattice: np.ndarray, suite: ConditionSuite) -> Dict[str, FamilyMargins]:
    """
    Normalized margins for a batch of frequencies omega (B, d) with block eigenvalues (B, p, 2).

    The pair spectra of the 4x4 Melnikov operators of self-adjoint blocks are the sums and
    differences of block eigenvalues, so no 4x4 eigenproblem is solved here.
    """
    omega = np.atleast_2d(omega)
    B = omega.shape[0]
    norm1 = np.abs(lattice).sum(axis=1)
    od = omega @ lattice.T                                  # (B, L)
    weight = bracket(norm1) ** suite.tau                    # (L,)
    j = np.asarray(sites_plus, dtype=float)
    out: Dict[str, FamilyMargins] = {}
    empty = np.zeros(B, dtype=int)

    if "diophantine" in suite.conditions:
        nz = norm1 > 0
        scaled = np.abs(od[:, nz]) * norm1[nz].astype(float) ** suite.tau_star
        nu, idx = _argmin_rows(scaled)
        ells = lattice[nz][idx]
        out["diophantine"] = FamilyMargins("diophantine", nu, np.abs(od[:, nz])[np.arange(B), idx],
                                           ells, empty, empty)

    p = len(sites_plus)
    if p == 0:
        return out

    if "first" in suite.conditions:
        divisors = np.min(np.abs(od[:, :, None, None] + eigenvalues[:, None, :, :]), axis=-1)   # (B, L, p)
        shape = 2.0 * j[None, :] ** 2 / weight[:, None]                                         # (L, p)
        nu, idx = _argmin_rows(divisors / shape[None])
        l_idx, p_idx = np.unravel_index(idx, (len(lattice), p))
        out["first"] = FamilyMargins("first", nu, divisors.reshape(B, -1)[np.arange(B), idx],
                                     lattice[l_idx], j[p_idx].astype(int), j[p_idx].astype(int))

    for condition, sign in (("second_plus", 1.0), ("second_minus", -1.0)):
        if condition not in suite.conditions:
            continue
        # mu[b, p, q, a, c] = lambda_p^a +- lambda_q^c
        mu = eigenvalues[:, :, None, :, None] + sign * eigenvalues[:, None, :, None, :]
        mu = mu.reshape(B, p, p, 4)
        divisors = np.min(np.abs(od[:, :, None, None, None] + mu[:, None]), axis=-1)           # (B, L, p, p)
        w = j[:, None] ** 2 + sign * j[None, :] ** 2
        shape = 2.0 * bracket(w)[None, :, :] / weight[:, None, None]
        ratios = divisors / shape[None]
        if sign < 0:
            zero = norm1 == 0
            diag = np.eye(p, dtype=bool)
            ratios[:, zero[:, None, None] & diag[None]] = np.inf
        nu, idx = _argmin_rows(ratios)
        l_idx, p_idx, q_idx = np.unravel_index(idx, (len(lattice), p, p))
        out[condition] = FamilyMargins(condition, nu, divisors.reshape(B, -1)[np.arange(B), idx],
                                       lattice[l_idx], j[p_idx].astype(int), j[q_idx].astype(int))
    return out


@dataclass
class SurveyResult:
    margins: Dict[str, Dict[str, Any]]
    violations: List[Dict[str, Any]]

    def min_ratio(self, condition: str) -> float:
        return self.margins[condition]["ratio"]


def melnikov_survey(omega: np.ndarray, N: BlockNormalForm, gamma: float, tau: float, L_max: int,
                    conditions: Sequence[str] = CONDITIONS) -> SurveyResult:
    """Margins per condition family for one frequency and one normal form, with every violated index."""
    omega = np.asarray(omega, dtype=float)
    suite = ConditionSuite(tuple(conditions), gamma, tau, L_max, float(len(omega) + 1))
    lattice = angle_ball(len(omega), L_max)
    eigenvalues = N.eigenvalues()[None] if N.n_blocks else np.zeros((1, 0, 2))
    families = family_margins(omega[None], eigenvalues, N.sites_plus, lattice, suite)
    margins = {}
    for name, fam in families.items():
        level = suite.level(name, gamma)
        margins[name] = {**fam.witness(0), "ratio": float(fam.nu[0] / level), "ok": bool(fam.nu[0] >= level)}
    violations = _violations(omega, eigenvalues[0], N.sites_plus, lattice, suite)
    return SurveyResult(margins, violations)


def _violations(omega, eigenvalues, sites_plus, lattice, suite) -> List[Dict[str, Any]]:
    """Brute force over the whole truncation: every (l, j, k, sign) failing its condition."""
    out = []
    norm1 = np.abs(lattice).sum(axis=1)
    od = lattice @ omega
    weight = bracket(norm1) ** suite.tau
    gamma = suite.gamma
    if "diophantine" in suite.conditions:
        gamma_star = suite.level("diophantine", gamma)
        for i in np.flatnonzero((norm1 > 0) & (np.abs(od) * np.maximum(norm1, 1) ** suite.tau_star < gamma_star)):
            out.append({"condition": "diophantine", "ell": lattice[i].tolist(), "j": 0, "k": 0})
    for p, j in enumerate(sites_plus):
        if "first" in suite.conditions:
            divisors = np.min(np.abs(od[:, None] + eigenvalues[p][None]), axis=1)
            for i in np.flatnonzero(divisors < 2.0 * gamma * j * j / weight):
                out.append({"condition": "first", "ell": lattice[i].tolist(), "j": j, "k": j})
        for q, k in enumerate(sites_plus):
            for condition, sign in (("second_plus", 1.0), ("second_minus", -1.0)):
                if condition not in suite.conditions:
                    continue
                mu = (eigenvalues[p][:, None] + sign * eigenvalues[q][None, :]).ravel()
                divisors = np.min(np.abs(od[:, None] + mu[None]), axis=1)
                bad = divisors < 2.0 * gamma * bracket(j * j + sign * k * k) / weight
                if sign < 0 and p == q:
                    bad &= norm1 > 0
                for i in np.flatnonzero(bad):
                    out.append({"condition": condition, "ell": lattice[i].tolist(), "j": j, "k": k})
    return out


def index_bound_audit(violations: Sequence[Dict[str, Any]], gamma_star: Optional[float] = None,
                      tau_star: Optional[float] = None) -> Dict[str, float]:
    """
    Smallest constants C with j^2 <= C<l> (first), j^2 + k^2 <= C<l> (second +),
    |j^2 - k^2| <= C<l> (second -) and |j| <= C gamma_*^-1 <l>^tau_* for (l, j, j)
    over the given violations.
    """
    constants = {"first": 0.0, "second_plus": 0.0, "second_minus": 0.0, "diagonal": 0.0}
    for v in violations:
        ell = bracket(np.abs(np.asarray(v["ell"])).sum())
        j, k = v["j"], v["k"]
        if v["condition"] == "first":
            constants["first"] = max(constants["first"], j * j / ell)
        elif v["condition"] == "second_plus":
            constants["second_plus"] = max(constants["second_plus"], (j * j + k * k) / ell)
        elif v["condition"] == "second_minus":
            constants["second_minus"] = max(constants["second_minus"], abs(j * j - k * k) / ell)
            if j == k and gamma_star is not None and tau_star is not None:
                constants["diagonal"] = max(constants["diagonal"], abs(j) * gamma_star / ell ** tau_star)
    return {key: float(value) for key, value in constants.items()}


def _pair_margins(od: np.ndarray, eigenvalues: np.ndarray, p: int, q: int, sign: str) -> np.ndarray:
    if sign == "first":
        mu = eigenvalues[p]
    else:
        s = 1.0 if sign == "+" else -1.0
        mu = (eigenvalues[p][:, None] + s * eigenvalues[q][None, :]).ravel()
    return np.min(np.abs(od[:, None] + mu[None, :]), axis=1)


def nearby_form_check(omega: np.ndarray, N: BlockNormalForm, N_near: BlockNormalForm,
                      gamma: float, tau: float, L_max: int) -> Dict[str, Any]:
    """
    Triples passing at twice their threshold for N, with threshold >= 2 delta where delta is
    the largest block distance, must still pass for N_near. Returns the count and any failures.
    """
    omega = np.asarray(omega, dtype=float)
    lattice = angle_ball(len(omega), L_max)
    norm1 = np.abs(lattice).sum(axis=1)
    od = lattice @ omega
    weight = bracket(norm1) ** tau
    delta = float(np.max(np.linalg.norm(N.blocks - N_near.blocks, ord=2, axis=(1, 2)))) if N.n_blocks else 0.0
    eig, eig_near = N.eigenvalues(), N_near.eigenvalues()
    robust, failures = 0, []
    for p, j in enumerate(N.sites_plus):
        for q, k in enumerate(N.sites_plus):
            for sign in ("first", "+", "-"):
                if sign == "first" and p != q:
                    continue
                w = j * j if sign == "first" else (j * j + k * k if sign == "+" else j * j - k * k)
                thr = 2.0 * gamma * bracket(w) / weight
                keep = (_pair_margins(od, eig, p, q, sign) >= 2.0 * thr) & (2.0 * delta <= thr)
                if sign == "-" and p == q:
                    keep &= norm1 > 0
                robust += int(keep.sum())
                bad = keep & (_pair_margins(od, eig_near, p, q, sign) < thr)
                failures.extend({"ell": lattice[i].tolist(), "j": j, "k": k, "sign": sign}
                                for i in np.flatnonzero(bad))
    return {"delta": delta, "robust": robust, "failures": failures}


# ---------------------------------------------------------------------------
# Monte-Carlo measure
# ---------------------------------------------------------------------------

def binomial_interval(excluded: int, n: int, confidence: float = CONFIDENCE) -> Tuple[float, float]:
    """Exact (Clopper-Pearson) interval for an excluded fraction."""
    if n == 0:
        return 0.0, 1.0
    ci = scipy.stats.binomtest(int(excluded), int(n)).proportion_ci(confidence_level=confidence, method="exact")
    return float(ci.low), float(ci.high)


def fraction_entry(excluded: int, n: int) -> Dict[str, float]:
    low, high = binomial_interval(excluded, n)
    return {"fraction": excluded / n if n else 0.0, "excluded": int(excluded), "n": int(n),
            "ci_low": low, "ci_high": high}


@dataclass
class SampleMargins:
    """Normalized margins of every sampled frequency, per family."""
    xi: np.ndarray
    omega: np.ndarray
    families: Dict[str, FamilyMargins]

    @property
    def n(self) -> int:
        return self.omega.shape[0]

    def excluded(self, condition: str, level: float) -> np.ndarray:
        return self.families[condition].nu < level

    def excluded_total(self, suite: ConditionSuite, gamma: float) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        for name in self.families:
            mask |= self.excluded(name, suite.level(name, gamma))
        return mask


def _concat_families(parts: List[Dict[str, FamilyMargins]]) -> Dict[str, FamilyMargins]:
    names = parts[0].keys() if parts else []
    return {
        name: FamilyMargins(
            name,
            *(np.concatenate([getattr(part[name], attr) for part in parts])
              for attr in ("nu", "margin", "ell", "j", "k")),
        )
        for name in names
    }


def sample_margins(box: FrequencyBox, suite: ConditionSuite, n_samples: int, seed: int = 0,
                   threads: int = 1) -> SampleMargins:
    """Draw n_samples frequencies and compute their margins in chunks; deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    xi = box.sample_xi(rng, n_samples)
    omega = box.frequencies(xi)
    eigenvalues = box.seed_eigenvalues(xi)
    lattice = angle_ball(box.dim, suite.L_max)
    p = len(box.index_sets.normal_plus)
    chunk = max(1, CHUNK_BUDGET // max(1, len(lattice) * max(p * p * 4, 1)))
    starts = list(range(0, n_samples, chunk))

    def work(start: int) -> Dict[str, FamilyMargins]:
        sl = slice(start, start + chunk)
        return family_margins(omega[sl], eigenvalues[sl], box.index_sets.normal_plus, lattice, suite)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(start) for start in starts]
    logger.debug(f"Sampled {n_samples} frequencies in {len(starts)} chunks")
    return SampleMargins(xi, omega, _concat_families(parts))


def sweep_levels(parameter: str, values: Sequence[float], linkage_exponent: Optional[float]) -> List[float]:
    """gamma for each sweep value; eps sweeps go through gamma = eps^a."""
    if parameter == "gamma":
        return [float(v) for v in values]
    if linkage_exponent is None:
        raise ValueError("An eps sweep needs measure.linkage_exponent")
    return [float(v) ** linkage_exponent for v in values]


def scaling_fit(x: Sequence[float], y: Sequence[float]) -> Dict[str, Any]:
    """Slope of log y against log x with a 95% interval; points with y = 0 are dropped."""
    pts = [(np.log(a), np.log(b)) for a, b in zip(x, y) if a > 0 and b > 0]
    if len(pts) < 3:
        return {"slope": None, "points": len(pts)}
    xs, ys = np.array(pts).T
    fit = scipy.stats.linregress(xs, ys)
    half = float(scipy.stats.t.ppf(0.5 + CONFIDENCE / 2.0, len(pts) - 2) * fit.stderr)
    return {"slope": float(fit.slope), "intercept": float(fit.intercept), "stderr": float(fit.stderr),
            "ci_low": float(fit.slope) - half, "ci_high": float(fit.slope) + half, "points": len(pts)}


def measure_estimate(
    box: FrequencyBox,
    suite: ConditionSuite,
    n_samples: int = 4096,
    seed: int = 0,
    sweep: Optional[Sequence[float]] = None,
    parameter: str = "gamma",
    linkage_exponent: Optional[float] = None,
    sampler: str = "uniform",
    threads: int = 1,
    config: Optional[Dict[str, Any]] = None,
) -> MeasureReport:
    """Excluded fractions per condition at suite.gamma and along an optional gamma or eps sweep."""
    samples = sample_margins(box, suite, n_samples, seed, threads)
    n = samples.n
    fractions = {}
    for name in samples.families:
        fractions[name] = fraction_entry(int(samples.excluded(name, suite.level(name, suite.gamma)).sum()), n)
    total = samples.excluded_total(suite, suite.gamma)
    fractions["total"] = fraction_entry(int(total.sum()), n)

    witness_log = []
    for b in np.flatnonzero(total)[:WITNESS_LOG_SIZE]:
        for name, fam in samples.families.items():
            if fam.nu[b] < suite.level(name, suite.gamma):
                witness_log.append({"sample": int(b), "omega": samples.omega[b].tolist(), **fam.witness(b)})
                break

    rows: List[Dict[str, Any]] = []
    fits: Dict[str, Any] = {}
    if sweep is not None:
        values = [float(v) for v in sweep]
        gammas = sweep_levels(parameter, values, linkage_exponent)
        series: Dict[str, List[float]] = {name: [] for name in list(samples.families) + ["total"]}
        for value, gamma in zip(values, gammas):
            for name in samples.families:
                count = int(samples.excluded(name, suite.level(name, gamma)).sum())
                rows.append({"parameter": parameter, "value": value, "gamma": gamma, "condition": name,
                             **fraction_entry(count, n)})
                series[name].append(count / n)
            count = int(samples.excluded_total(suite, gamma).sum())
            rows.append({"parameter": parameter, "value": value, "gamma": gamma, "condition": "total",
                         **fraction_entry(count, n)})
            series["total"].append(count / n)
        for name, ys in series.items():
            own = [suite.level(name, g) if name != "total" else g for g in gammas]
            fits[name] = {**scaling_fit(own, ys), "against": "gamma_star" if name == "diophantine" else "gamma",
                          "slope_vs_parameter": scaling_fit(values, ys)["slope"]}
            ordered = [y for _, y in sorted(zip(gammas, ys))]
            fits[name]["monotone"] = bool(all(a <= b for a, b in zip(ordered[:-1], ordered[1:])))

    line_measure = None
    if sampler == "lines" and witness_log:
        line_measure = resonant_family_pattern(box, suite, witness_log, n_lines=min(n_samples, 512), seed=seed)

    logger.info(f"Measure estimate: total excluded fraction {fractions['total']['fraction']:.4f} over {n} samples")
    return MeasureReport(config=config or {}, fractions=fractions, sweep=rows, scaling_fits=fits,
                         witness_log=witness_log, line_measure=line_measure)


# ---------------------------------------------------------------------------
# Single resonant sets
# ---------------------------------------------------------------------------

@dataclass
class ResonantSetMeasure:
    ell: Tuple[int, ...]
    j: int
    k: int
    sign: str
    gamma: float
    fraction: float
    stderr: float
    n: int
    method: str

    def as_dict(self) -> Dict[str, Any]:
        return {"ell": list(self.ell), "j": self.j, "k": self.k, "sign": self.sign, "gamma": self.gamma,
                "fraction": self.fraction, "stderr": self.stderr, "n": self.n, "method": self.method}


def _threshold(suite: ConditionSuite, ell: np.ndarray, j: int, k: int, sign: str, gamma: float) -> float:
    brk = float(bracket(np.abs(ell).sum())) ** suite.tau
    if sign == "first":
        return 2.0 * gamma * j * j / brk
    w = j * j + k * k if sign == "+" else j * j - k * k
    return 2.0 * gamma * float(bracket(w)) / brk


def _combo_values(box: FrequencyBox, xi: np.ndarray, ell: np.ndarray, j: int, k: int, sign: str) -> np.ndarray:
    """omega . l + mu over the eigenvalue combinations of the triple, shape (B, combos)."""
    sites = box.index_sets.normal_plus
    eig = box.seed_eigenvalues(xi)
    od = box.frequencies(xi) @ ell
    ej = eig[:, sites.index(j)]
    if sign == "first":
        return od[:, None] + ej
    ek = eig[:, sites.index(k)]
    s = 1.0 if sign == "+" else -1.0
    return od[:, None] + (ej[:, :, None] + s * ek[:, None, :]).reshape(-1, 4)


def _merged_length(intervals: List[Tuple[float, float]]) -> float:
    total, end = 0.0, -np.inf
    for a, b in sorted(intervals):
        if b <= end:
            continue
        total += b - max(a, end)
        end = b
    return total


def _line_fraction(box: FrequencyBox, xi0: np.ndarray, ell: np.ndarray, j: int, k: int, sign: str,
                   threshold: float, dense: int = 4097) -> float:
    """1-D measure of the resonant set on the line through xi0 along which omega moves in direction l."""
    direction = np.linalg.solve(box.tangential_jacobian(xi0), ell / float(ell @ ell))
    with np.errstate(divide='ignore'):
        lo = np.where(direction != 0, (box.lower - xi0) / direction, -np.inf)
        hi = np.where(direction != 0, (box.upper - xi0) / direction, np.inf)
    t_lo = float(np.max(np.minimum(lo, hi)))
    t_hi = float(np.min(np.maximum(lo, hi)))
    length = t_hi - t_lo
    if length <= 0:
        return 0.0
    if box.model.is_quartic:
        ends = _combo_values(box, np.stack([xi0 + t_lo * direction, xi0 + t_hi * direction]), ell, j, k, sign)
        slopes = (ends[1] - ends[0]) / length
        intervals = []
        for f0, s in zip(ends[0], slopes):
            if s == 0:
                if abs(f0) < threshold:
                    intervals.append((t_lo, t_hi))
                continue
            a, b = sorted(((-threshold - f0) / s + t_lo, (threshold - f0) / s + t_lo))
            a, b = max(a, t_lo), min(b, t_hi)
            if b > a:
                intervals.append((a, b))
        return _merged_length(intervals) / length
    t = np.linspace(t_lo, t_hi, dense)
    values = np.min(np.abs(_combo_values(box, xi0 + t[:, None] * direction, ell, j, k, sign)), axis=1)
    return float(np.mean(values < threshold))


def resonant_set_measure(box: FrequencyBox, suite: ConditionSuite, ell: Sequence[int], j: int, k: int,
                         sign: str, gamma: float, n_lines: int = 256, seed: int = 0,
                         method: str = "lines") -> ResonantSetMeasure:
    """
    Fraction of the box in {omega : min |omega . l + mu| < threshold} for one (l, j, k, sign).

    ``lines`` averages the exact 1-D measure along lines in the l direction through uniform
    base points; ``uniform`` counts uniform samples.
    """
    ell = np.asarray(ell, dtype=float)
    if sign == "-" and j == k and not np.any(ell):
        raise ValueError("(0, j, j) with sign '-' is not a resonant set")
    threshold = _threshold(suite, ell, j, k, sign, gamma)
    rng = np.random.default_rng(seed)
    xi = box.sample_xi(rng, n_lines)
    if method == "lines":
        values = np.array([_line_fraction(box, x, ell, j, k, sign, threshold) for x in xi])
    elif method == "uniform":
        values = (np.min(np.abs(_combo_values(box, xi, ell, j, k, sign)), axis=1) < threshold).astype(float)
    else:
        raise ValueError(f"Unknown measure method: {method}")
    stderr = float(np.std(values, ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
    return ResonantSetMeasure(tuple(int(e) for e in ell), j, k, sign, gamma, float(np.mean(values)),
                              stderr, len(values), method)


def resonant_set_scaling(box: FrequencyBox, suite: ConditionSuite, ell: Sequence[int], j: int, k: int,
                         sign: str, gammas: Sequence[float], n_lines: int = 256, seed: int = 0) -> Dict[str, Any]:
    """Line measures along a gamma sweep with the fitted exponent of the set measure."""
    rows = [resonant_set_measure(box, suite, ell, j, k, sign, g, n_lines, seed).as_dict() for g in gammas]
    return {"rows": rows, "fit": scaling_fit(list(gammas), [r["fraction"] for r in rows])}


def resonant_family_pattern(box: FrequencyBox, suite: ConditionSuite, witnesses: Sequence[Dict[str, Any]],
                            n_lines: int = 256, seed: int = 0, limit: int = 8) -> Dict[str, Any]:
    """Line measures of the witnessed sets against gamma <w> <l>^(-tau-1)."""
    seen, rows = set(), []
    for w in witnesses:
        if w["condition"] == "diophantine":
            continue
        key = (tuple(w["ell"]), w["j"], w["k"], w["sign"])
        if key in seen or (w["sign"] == "-" and w["j"] == w["k"] and not any(w["ell"])):
            continue
        seen.add(key)
        m = resonant_set_measure(box, suite, w["ell"], w["j"], w["k"], w["sign"], suite.gamma, n_lines, seed)
        ell_b = float(bracket(np.abs(np.asarray(w["ell"])).sum()))
        j, k = w["j"], w["k"]
        weight = j * j if w["sign"] == "first" else (j * j + k * k if w["sign"] == "+" else j * j - k * k)
        scale = suite.gamma * float(bracket(weight)) * ell_b ** (-suite.tau - 1.0)
        rows.append({**m.as_dict(), "predicted_scale": scale, "ratio": m.fraction / scale})
        if len(rows) >= limit:
            break
    return {"method": "lines", "rows": rows}
