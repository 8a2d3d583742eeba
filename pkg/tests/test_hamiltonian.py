"""
Tests for the frequency map, the perturbation and the residual operator.
"""
import numpy as np
import pytest

from src.core.config_loader import PerturbationConfig, default_grid_size
from src.core.exceptions import AliasOverflow, OutOfRange, SqrtDomain
from src.lattice.spectral import IndexSets, sobolev_norm
from src.model.hamiltonian import (
    FOUR_PI2,
    ActionVector,
    FrequencyModel,
    HamiltonianField,
    LinearCorrection,
    Perturbation,
    PerturbationTerm,
    TorusEmbedding,
    frequencies,
    frequency_jacobian,
    kolmogorov_det,
    residual_F,
    tangential_frequencies,
    xi_of_omega,
    zeta_compatibility,
)


@pytest.fixture
def index_sets():
    return IndexSets((-1, 0, 1), K_normal=3, L_angle=2)


@pytest.fixture
def xi():
    return ActionVector(np.array([0.3, 0.2, 0.25]))


@pytest.fixture
def perturbation():
    config = PerturbationConfig(grid_size=default_grid_size(3, 4, 1))
    return Perturbation.from_config(config, eps=0.1)


@pytest.fixture
def phase_point(index_sets):
    """A single phase point near the unperturbed torus."""
    rng = np.random.default_rng(7)
    theta = rng.uniform(0, 2 * np.pi, size=(1, 3))
    y = 0.01 * rng.normal(size=(1, 3))
    z = 0.05 * (rng.normal(size=(1, index_sets.n_normal)) + 1j * rng.normal(size=(1, index_sets.n_normal)))
    return theta, y, z


def random_embedding(index_sets, amplitude, seed):
    """Small random periodic part with real Theta and y."""
    rng = np.random.default_rng(seed)
    iota = TorusEmbedding.zeros(index_sets)
    for part in (iota.Theta, iota.y):
        part.coeffs[:] = index_sets.symmetrize_real(amplitude * rng.normal(size=part.coeffs.shape))
    shape = iota.z.coeffs.shape
    iota.z.coeffs[:] = amplitude * (rng.normal(size=shape) + 1j * rng.normal(size=shape))
    return iota


class TestFrequencies:
    """Test cases for the frequency map."""

    def test_zero_actions(self, index_sets):
        I = ActionVector(np.full(3, 1e-300))
        omega = frequencies(I, index_sets)
        k = np.array(index_sets.all_sites, dtype=float)
        assert np.allclose(omega, FOUR_PI2 * k ** 2, atol=1e-12)

    def test_single_action(self, index_sets):
        """I_1 = delta gives omega_1 = 4 pi^2 + 2 delta."""
        delta = 0.01
        model = FrequencyModel()
        I = np.zeros(len(index_sets.all_sites))
        I[index_sets.all_sites.index(1)] = delta
        omega = model.frequencies(I, index_sets.all_sites)
        assert omega[index_sets.all_sites.index(1)] == pytest.approx(FOUR_PI2 + 2 * delta)
        assert omega[index_sets.all_sites.index(-1)] == pytest.approx(FOUR_PI2 + 4 * delta)

    def test_affine_in_actions(self, index_sets):
        model = FrequencyModel()
        rng = np.random.default_rng(0)
        I, J = rng.uniform(size=(2, len(index_sets.all_sites)))
        zero = np.zeros_like(I)
        sites = index_sets.all_sites
        lhs = model.frequencies(I, sites) + model.frequencies(J, sites) - model.frequencies(zero, sites)
        assert np.allclose(lhs, model.frequencies(I + J, sites))

    def test_kolmogorov_determinant(self, index_sets):
        """-(-2)^|S| (2|S| - 1): 40 for three sites and 2 for one."""
        assert kolmogorov_det(ActionVector(np.full(3, 0.1)), index_sets) == pytest.approx(40.0)
        single = IndexSets((0,), K_normal=2, L_angle=2)
        assert kolmogorov_det(ActionVector(np.array([0.1])), single) == pytest.approx(2.0)

    def test_jacobian_matches_finite_differences(self, index_sets, xi):
        """Central differences reproduce 4 - 2 delta_kn to 1e-8."""
        h = 1e-6
        analytic = frequency_jacobian(xi, index_sets)
        numeric = np.empty((3, 3))
        for j in range(3):
            step = np.zeros(3)
            step[j] = h
            plus = tangential_frequencies(xi.xi + step, index_sets)
            minus = tangential_frequencies(xi.xi - step, index_sets)
            numeric[:, j] = (plus - minus) / (2 * h)
        assert np.allclose(numeric, analytic, atol=1e-8)
        assert np.allclose(analytic, 4.0 - 2.0 * np.eye(3))

    def test_correction_uses_inverse_site(self, index_sets):
        model = FrequencyModel(correction=LinearCorrection(0.5))
        I = np.full(len(index_sets.all_sites), 0.1)
        base = FrequencyModel().frequencies(I, index_sets.all_sites)
        corrected = model.frequencies(I, index_sets.all_sites)
        k = np.array(index_sets.all_sites)
        expected = np.where(k != 0, 0.5 * I.sum() / np.where(k == 0, 1, k), 0.0)
        assert np.allclose(corrected - base, expected)

    def test_hook_without_jacobian_uses_differences(self, index_sets):
        hook = LinearCorrection(0.3)
        analytic = FrequencyModel(correction=hook)
        numeric = FrequencyModel(correction=lambda sites, I: hook(sites, I))
        I = np.full(len(index_sets.all_sites), 0.05)
        assert np.allclose(analytic.jacobian(I, index_sets.all_sites),
                           numeric.jacobian(I, index_sets.all_sites), atol=1e-7)


class TestXiOfOmega:
    """Test cases for the inverse frequency map."""

    def test_round_trip(self, index_sets, xi):
        omega = tangential_frequencies(xi.xi, index_sets)
        recovered = xi_of_omega(omega, index_sets)
        assert np.allclose(recovered.xi, xi.xi, atol=1e-12)

    def test_linear_response(self, index_sets, xi):
        """A shift of 1e-3 e_k moves xi by M^{-1} 1e-3 e_k with M = 4 - 2 delta."""
        omega = tangential_frequencies(xi.xi, index_sets)
        shift = np.array([0.0, 1e-3, 0.0])
        moved = xi_of_omega(omega + shift, index_sets)
        expected = xi.xi + np.linalg.solve(4.0 - 2.0 * np.eye(3), shift)
        assert np.allclose(moved.xi, expected, atol=1e-12)

    def test_corrected_model_round_trip(self, index_sets, xi):
        model = FrequencyModel(correction=LinearCorrection(0.2))
        omega = tangential_frequencies(xi.xi, index_sets, model)
        recovered = xi_of_omega(omega, index_sets, model)
        assert np.allclose(recovered.xi, xi.xi, atol=1e-11)

    def test_negative_actions_rejected(self, index_sets):
        k = np.array(index_sets.tangential, dtype=float)
        with pytest.raises(OutOfRange):
            xi_of_omega(FOUR_PI2 * k ** 2 - 1.0, index_sets)

    def test_action_box(self, index_sets, xi):
        omega = tangential_frequencies(xi.xi, index_sets)
        with pytest.raises(OutOfRange, match="action box"):
            xi_of_omega(omega, index_sets, action_box=(0.5, 1.0))


class TestPerturbation:
    """Test cases for the collocated perturbation."""

    def test_q1_real(self, perturbation, index_sets, phase_point):
        field = HamiltonianField(index_sets, ActionVector(np.array([0.3, 0.2, 0.25])), perturbation=perturbation)
        data = field.perturbation_data(*phase_point)
        assert np.isrealobj(data.q1)
        assert data.spill < 1e-20

    def test_alias_overflow(self, index_sets):
        coarse = Perturbation([PerturbationTerm(1.0, power1=4)], grid_size=16, eps=1.0)
        rng = np.random.default_rng(3)
        w = rng.normal(size=(1, 7)) + 1j * rng.normal(size=(1, 7))
        with pytest.raises(AliasOverflow):
            coarse.evaluate(w, index_sets.all_sites, index_sets.K_normal)

    def test_quadratic_hessian_is_constant(self, index_sets):
        """p = zeta1^2 + zeta2^2 = 2|u|^2 gives P_{w_bar w} = 2 Id and P_{w_bar w_bar} = 0."""
        quad = Perturbation([PerturbationTerm(1.0, power1=2), PerturbationTerm(1.0, power2=2)],
                            grid_size=16, eps=1.0)
        w = np.linspace(0.1, 0.7, 7)[None, :] * (1 + 0.5j)
        data = quad.evaluate(w, index_sets.all_sites, index_sets.K_normal)
        assert np.allclose(data.hessian_wbar_w(index_sets.all_sites)[0], 2.0 * np.eye(7), atol=1e-12)
        assert np.allclose(data.hessian_wbar_wbar(index_sets.all_sites)[0], 0.0, atol=1e-12)
        assert np.allclose(data.grad[0], 2.0 * w[0], atol=1e-12)


class TestHamiltonianField:
    """Finite-difference checks of gradients and Hessians."""

    def test_gradient_matches_energy(self, index_sets, xi, perturbation, phase_point):
        field = HamiltonianField(index_sets, xi, perturbation=perturbation)
        theta, y, z = phase_point
        rng = np.random.default_rng(11)
        dtheta, dy = rng.normal(size=(2, 1, 3))
        dz = rng.normal(size=(1, 4)) + 1j * rng.normal(size=(1, 4))
        h = 1e-6
        plus = field.energy(theta + h * dtheta, y + h * dy, z + h * dz)
        minus = field.energy(theta - h * dtheta, y - h * dy, z - h * dz)
        numeric = (plus - minus)[0] / (2 * h)
        grad = field.gradient(theta, y, z)
        analytic = (np.sum(grad.d_theta * dtheta) + np.sum(grad.d_y * dy)
                    + 2 * np.real(np.sum(grad.d_zbar * np.conj(dz))))
        assert numeric == pytest.approx(analytic, rel=1e-6)

    def test_hessian_blocks(self, index_sets, xi, perturbation, phase_point):
        field = HamiltonianField(index_sets, xi, perturbation=perturbation)
        theta, y, z = phase_point
        hess = field.hessian(theta, y, z)
        h = 1e-6

        yy = np.empty((3, 3))
        for a in range(3):
            step = np.zeros((1, 3))
            step[0, a] = h
            diff = field.gradient(theta, y + step, z).d_y - field.gradient(theta, y - step, z).d_y
            yy[:, a] = diff[0] / (2 * h)
        assert np.allclose(yy, hess.yy[0], rtol=1e-5, atol=1e-6)
        assert np.allclose(hess.yy[0], hess.yy[0].T, atol=1e-10)

        n = index_sets.n_normal
        for j in range(n):
            step = np.zeros((1, n), dtype=complex)
            step[0, j] = h
            real_dir = (field.gradient(theta, y, z + step).d_zbar - field.gradient(theta, y, z - step).d_zbar)[0] / (2 * h)
            imag_dir = (field.gradient(theta, y, z + 1j * step).d_zbar
                        - field.gradient(theta, y, z - 1j * step).d_zbar)[0] / (2 * h)
            assert np.allclose((real_dir - 1j * imag_dir) / 2, hess.A1[0][:, j], rtol=1e-5, atol=1e-6)
            assert np.allclose((real_dir + 1j * imag_dir) / 2, hess.A2[0][:, j], rtol=1e-5, atol=1e-6)

            dy_real = (field.gradient(theta, y, z + step).d_y - field.gradient(theta, y, z - step).d_y)[0] / (2 * h)
            dy_imag = (field.gradient(theta, y, z + 1j * step).d_y
                       - field.gradient(theta, y, z - 1j * step).d_y)[0] / (2 * h)
            assert np.allclose((dy_real - 1j * dy_imag) / 2, hess.yz[0][:, j], rtol=1e-5, atol=1e-6)

        assert np.allclose(hess.A1[0], hess.A1[0].conj().T, atol=1e-10)
        assert np.allclose(hess.A2[0], hess.A2[0].T, atol=1e-10)

    def test_sqrt_domain(self, index_sets, xi):
        field = HamiltonianField(index_sets, xi)
        with pytest.raises(SqrtDomain):
            field.gradient(np.zeros((1, 3)), -2 * xi.xi[None, :], np.zeros((1, index_sets.n_normal)))


class TestResidual:
    """Test cases for residual_F and zeta_compatibility."""

    def test_unperturbed_torus_is_exact(self, index_sets, xi):
        omega = tangential_frequencies(xi.xi, index_sets)
        iota = TorusEmbedding.zeros(index_sets)
        E = residual_F(iota, np.zeros(3), omega, xi)
        assert E.norm(0, 0) < 1e-12

    def test_frequency_mismatch(self, index_sets, xi):
        omega = tangential_frequencies(xi.xi, index_sets) + np.array([1e-3, 0.0, -2e-3])
        E = residual_F(TorusEmbedding.zeros(index_sets), np.zeros(3), omega, xi)
        mean = E.E_theta.mean().real
        assert np.allclose(mean, [1e-3, 0.0, -2e-3], atol=1e-12)
        E_theta_wave = E.E_theta.coeffs.copy()
        E_theta_wave[index_sets.zero_index] = 0
        assert np.allclose(E_theta_wave, 0, atol=1e-12)
        assert np.allclose(E.E_y.coeffs, 0, atol=1e-12)
        assert np.allclose(E.E_z.coeffs, 0, atol=1e-12)

    def test_linear_in_eps(self, index_sets, xi, perturbation):
        rng = np.random.default_rng(5)
        iota = TorusEmbedding.zeros(index_sets)
        iota.z.coeffs[:] = 0.01 * (rng.normal(size=iota.z.coeffs.shape) + 1j * rng.normal(size=iota.z.coeffs.shape))
        omega = tangential_frequencies(xi.xi, index_sets)
        base = residual_F(iota, np.zeros(3), omega, xi, perturbation.with_eps(0.0))
        one = residual_F(iota, np.zeros(3), omega, xi, perturbation.with_eps(1e-3))
        two = residual_F(iota, np.zeros(3), omega, xi, perturbation.with_eps(2e-3))
        for name in ("E_theta", "E_y", "E_z"):
            d1 = getattr(one, name).coeffs - getattr(base, name).coeffs
            d2 = getattr(two, name).coeffs - getattr(base, name).coeffs
            assert np.allclose(d2, 2 * d1, atol=1e-12)

    def test_real_components_stay_real(self, index_sets, xi, perturbation):
        rng = np.random.default_rng(9)
        iota = TorusEmbedding.zeros(index_sets)
        iota.Theta.coeffs[:] = index_sets.symmetrize_real(0.01 * rng.normal(size=iota.Theta.coeffs.shape))
        omega = tangential_frequencies(xi.xi, index_sets)
        E = residual_F(iota, np.zeros(3), omega, xi, perturbation)
        for part in (E.E_theta, E.E_y):
            assert np.allclose(part.coeffs, np.conj(part.coeffs[index_sets.neg_index]), atol=1e-14)

    def test_zeta_recovered_on_trivial_embedding(self, index_sets, xi):
        omega = tangential_frequencies(xi.xi, index_sets)
        iota = TorusEmbedding.zeros(index_sets)
        zeta = np.array([1e-4, -2e-4, 3e-4])
        E = residual_F(iota, zeta, omega, xi)
        # on the trivial embedding only -(d theta)^T E_y survives
        assert np.allclose(zeta_compatibility(iota, E), -zeta, atol=1e-14)
        E0 = residual_F(iota, np.zeros(3), omega, xi)
        assert np.allclose(zeta_compatibility(iota, E0), 0.0, atol=1e-14)

    def test_zeta_bounded_by_residual(self, xi, perturbation):
        ratios = []
        for grid in (9, 13):
            index_sets = IndexSets((-1, 0, 1), K_normal=3, L_angle=2, angle_grid=grid)
            omega = tangential_frequencies(xi.xi, index_sets)
            iota = random_embedding(index_sets, 1e-5, seed=4)
            E = residual_F(iota, np.zeros(3), omega, xi, perturbation)
            size = np.sqrt(sum(sobolev_norm(f, 1, 0) ** 2 for f in (E.E_theta, E.E_y, E.E_z)))
            assert size > 0.0
            ratios.append(np.linalg.norm(zeta_compatibility(iota, E)) / size)
        assert max(ratios) < 1.0
        # the ratio does not move when the quadrature grid is refined
        assert ratios[1] == pytest.approx(ratios[0], rel=0.1, abs=1e-12)
