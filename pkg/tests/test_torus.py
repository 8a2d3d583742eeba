"""
Tests for the isotropic correction, the symplectic chart and the Taylor coefficients.
"""
import numpy as np
import pytest

from src.core.config_loader import PerturbationConfig, default_grid_size
from src.core.exceptions import ChartSingular
from src.geometry.torus import (
    full_symplectic_form,
    gamma_chart,
    isotropize,
    isotropy_residual,
    liouville_form,
    symplectic_pairing,
    taylor_K,
)
from src.lattice.spectral import IndexSets
from src.model.hamiltonian import (
    ActionVector,
    HamiltonianField,
    Perturbation,
    TorusEmbedding,
    residual_F,
    tangential_frequencies,
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


def small_torus(index_sets, delta, seed=3):
    """Random embedding supported on |l|_1 <= 1 with amplitude delta."""
    rng = np.random.default_rng(seed)
    iota = TorusEmbedding.zeros(index_sets)
    low = (index_sets.norm1 <= 1) & (index_sets.norm1 > 0)
    for component in (iota.Theta, iota.y):
        raw = rng.normal(size=component.coeffs.shape) + 1j * rng.normal(size=component.coeffs.shape)
        component.coeffs[:] = delta * index_sets.symmetrize_real(raw * low[:, None])
    raw = rng.normal(size=iota.z.coeffs.shape) + 1j * rng.normal(size=iota.z.coeffs.shape)
    iota.z.coeffs[:] = delta * raw * (index_sets.norm1 <= 1)[:, None]
    return iota


class TestForms:
    """Test cases for the symplectic pairing and the Liouville form."""

    def test_full_form_is_antisymmetric(self):
        d, n = 3, 4
        form = full_symplectic_form(d, n)
        assert np.allclose(form, -form.T)
        real_block, normal_block = form[:2 * d, :2 * d], form[2 * d:, 2 * d:]
        assert np.allclose(form[:2 * d, 2 * d:], 0.0)
        # J^2 = -I on (theta, y); the i-scaled pairing on (z, z_bar) squares to +I
        assert np.allclose(real_block @ real_block, -np.eye(2 * d))
        assert np.allclose(normal_block @ normal_block, np.eye(2 * n))
        assert np.allclose(normal_block, normal_block.conj().T)

    def test_pairing_is_antisymmetric(self):
        rng = np.random.default_rng(1)
        X1 = (rng.normal(size=3), rng.normal(size=3), rng.normal(size=2) + 1j * rng.normal(size=2))
        X2 = (rng.normal(size=3), rng.normal(size=3), rng.normal(size=2) + 1j * rng.normal(size=2))
        assert symplectic_pairing(X1, X2) == pytest.approx(-symplectic_pairing(X2, X1))
        assert abs(symplectic_pairing(X1, X2).imag) < 1e-14

    def test_liouville_form_on_flat_torus(self, index_sets):
        iota = TorusEmbedding.zeros(index_sets)
        iota.y.coeffs[index_sets.zero_index] = [0.1, -0.2, 0.3]
        a = liouville_form(iota)
        assert np.allclose(a, -np.array([0.1, -0.2, 0.3])[None, :])


class TestIsotropize:
    """Test cases for the isotropic correction."""

    def test_trivial_torus_unchanged(self, index_sets):
        iso = isotropize(TorusEmbedding.zeros(index_sets))
        assert np.allclose(iso.y_iso.coeffs, 0.0)
        assert np.allclose(iso.rho.coeffs, 0.0)
        assert iso.closedness_residual == 0.0
        assert iso.isotropy_residual() == 0.0

    def test_correction_restores_isotropy(self, index_sets):
        iota = small_torus(index_sets, 1e-5)
        before = isotropy_residual(iota)
        iso = isotropize(iota)
        assert before > 1e-7
        assert iso.closedness_residual < 1e-9
        assert iso.isotropy_residual() < 1e-2 * before

    def test_correction_is_linear_at_small_amplitude(self, index_sets):
        small = isotropize(small_torus(index_sets, 1e-5))
        large = isotropize(small_torus(index_sets, 2e-5))
        shift_small = small.y_iso.coeffs - small.base.y.coeffs
        shift_large = large.y_iso.coeffs - large.base.y.coeffs
        assert np.max(np.abs(shift_large - 2 * shift_small)) < 1e-3 * np.max(np.abs(shift_large))

    def test_two_form_is_antisymmetric(self, index_sets):
        iso = isotropize(small_torus(index_sets, 1e-4))
        S = index_sets.tangential
        for k in S:
            for j in S:
                assert np.allclose(iso.A_coeffs[(k, j)].coeffs, -iso.A_coeffs[(j, k)].coeffs)

    def test_transport_agrees_with_curl(self, index_sets, xi):
        iota = small_torus(index_sets, 1e-4)
        omega = tangential_frequencies(xi.xi, index_sets)
        E = residual_F(iota, np.zeros(3), omega, xi)
        curl = isotropize(iota)
        transport = isotropize(iota, E, omega, gamma=1e-8, tau=3.0, method="transport", tol_iso=1e-6)
        assert transport.method == "transport"
        assert transport.method_gap < 1e-2 * np.max(np.abs(curl.rho.coeffs))

    def test_transport_needs_flow_data(self, index_sets):
        with pytest.raises(ValueError, match="transport isotropy needs"):
            isotropize(small_torus(index_sets, 1e-4), method="transport")

    def test_unknown_method(self, index_sets):
        with pytest.raises(ValueError, match="Unknown isotropy method"):
            isotropize(TorusEmbedding.zeros(index_sets), method="hodge")

    def test_chart_singular(self, index_sets):
        with pytest.raises(ChartSingular):
            isotropize(small_torus(index_sets, 1e-2), chart_cond_cap=1.0 + 1e-12)


class TestGammaChart:
    """Test cases for the chart around an isotropic torus."""

    def test_identity_at_trivial_torus(self, index_sets):
        chart = gamma_chart(isotropize(TorusEmbedding.zeros(index_sets)))
        D = 2 * 3 + 2 * index_sets.n_normal
        assert np.allclose(chart.d_gamma(), np.eye(D)[None])
        assert chart.symplectic_residual() == 0.0

    def test_inverse(self, index_sets):
        chart = gamma_chart(isotropize(small_torus(index_sets, 1e-2)))
        product = np.einsum('gij,gjk->gik', chart.d_gamma(), chart.d_gamma_inv())
        assert np.allclose(product, np.eye(product.shape[-1])[None], atol=1e-12)

    def test_pull_inverts_push(self, index_sets):
        chart = gamma_chart(isotropize(small_torus(index_sets, 1e-2)))
        rng = np.random.default_rng(5)
        G, n = index_sets.grid_points, index_sets.n_normal
        psi = rng.normal(size=(G, 3))
        upsilon = rng.normal(size=(G, 3))
        w = rng.normal(size=(G, n)) + 1j * rng.normal(size=(G, n))
        back = chart.pull(*chart.push(psi, upsilon, w))
        for original, recovered in zip((psi, upsilon, w), back):
            assert np.allclose(original, recovered, atol=1e-12)

    def test_symplectic_defect_is_isotropy_defect(self, index_sets):
        iso = isotropize(small_torus(index_sets, 1e-5))
        chart = gamma_chart(iso)
        assert chart.symplectic_residual() == pytest.approx(iso.isotropy_residual(), rel=1e-6, abs=1e-15)
        chart.check_symplectic(1e-6)

    def test_push_matches_matrix(self, index_sets):
        chart = gamma_chart(isotropize(small_torus(index_sets, 1e-2)))
        rng = np.random.default_rng(6)
        G, n = index_sets.grid_points, index_sets.n_normal
        psi = rng.normal(size=(G, 3))
        upsilon = rng.normal(size=(G, 3))
        w = rng.normal(size=(G, n)) + 1j * rng.normal(size=(G, n))
        theta, y, z = chart.push(psi, upsilon, w)
        stacked = np.concatenate([psi, upsilon, w, np.conj(w)], axis=-1)
        image = np.einsum('gij,gj->gi', chart.d_gamma(), stacked)
        assert np.allclose(image[:, :3], theta)
        assert np.allclose(image[:, 3:6], y)
        assert np.allclose(image[:, 6:6 + n], z)


class TestTaylorCoefficients:
    """Test cases for the expansion of the Hamiltonian in the chart."""

    def test_unperturbed_trivial_torus(self, index_sets, xi):
        chart = gamma_chart(isotropize(TorusEmbedding.zeros(index_sets)))
        K = taylor_K(chart, xi)
        omega = tangential_frequencies(xi.xi, index_sets)
        assert np.allclose(K.K10, omega[None, :])
        assert np.allclose(K.K20, (4.0 * np.ones((3, 3)) - 2.0 * np.eye(3))[None])
        assert np.allclose(K.K11, 0.0)
        assert np.allclose(K.A2, 0.0)
        hamiltonian = HamiltonianField(index_sets, xi)
        I = np.zeros((1, len(index_sets.all_sites)))
        I[0, index_sets.tangential_positions] = xi.xi
        normal_freq = hamiltonian.model.frequencies(I, index_sets.all_sites)[0, index_sets.normal_positions]
        assert np.allclose(K.A1, np.diag(normal_freq)[None])
        assert K.structure_residual() < 1e-12

    def test_zeta_shifts_energy(self, index_sets, xi):
        chart = gamma_chart(isotropize(TorusEmbedding.zeros(index_sets)))
        zeta = np.array([0.1, 0.0, -0.2])
        shifted = taylor_K(chart, xi, zeta=zeta)
        plain = taylor_K(chart, xi)
        assert np.allclose(shifted.K00 - plain.K00, index_sets.grid_phi @ zeta)

    def test_gradient_matches_differences(self, index_sets, xi, perturbation):
        chart = gamma_chart(isotropize(small_torus(index_sets, 1e-3)))
        K = taylor_K(chart, xi, perturbation)
        hamiltonian = HamiltonianField(index_sets, xi, perturbation=perturbation)
        G, n = index_sets.grid_points, index_sets.n_normal
        h = 1e-6
        zero_w = np.zeros((G, n), dtype=complex)
        for a in range(3):
            step = np.zeros((G, 3))
            step[:, a] = h
            up = hamiltonian.energy(*chart.point(step, zero_w))
            down = hamiltonian.energy(*chart.point(-step, zero_w))
            assert np.allclose((up - down) / (2 * h), K.K10[:, a], rtol=1e-6, atol=1e-6)

    def test_normal_hessian_matches_differences(self, index_sets, xi, perturbation):
        chart = gamma_chart(isotropize(small_torus(index_sets, 1e-3)))
        K = taylor_K(chart, xi, perturbation)
        hamiltonian = HamiltonianField(index_sets, xi, perturbation=perturbation)
        G, n = index_sets.grid_points, index_sets.n_normal
        zero_v = np.zeros((G, 3))
        h = 1e-4

        def energy(w):
            return hamiltonian.energy(*chart.point(zero_v, w))

        center = energy(np.zeros((G, n), dtype=complex))
        for k in range(n):
            real = np.zeros((G, n), dtype=complex)
            real[:, k] = h
            f_ss = (energy(real) - 2 * center + energy(-real)) / h ** 2
            f_tt = (energy(1j * real) - 2 * center + energy(-1j * real)) / h ** 2
            f_s = (energy(real) - energy(-real)) / (2 * h)
            f_t = (energy(1j * real) - energy(-1j * real)) / (2 * h)
            assert np.allclose((f_ss + f_tt) / 4, K.A1[:, k, k].real, atol=1e-4)
            assert np.allclose((f_ss - f_tt) / 4, K.A2[:, k, k].real, atol=1e-4)
            assert np.allclose((f_s + 1j * f_t) / 2, K.K01[:, n + k], atol=1e-6)

    def test_hamiltonian_blocks(self, index_sets, xi, perturbation):
        chart = gamma_chart(isotropize(small_torus(index_sets, 1e-3)))
        K = taylor_K(chart, xi, perturbation)
        n = index_sets.n_normal
        J2 = 1j * np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), np.zeros((n, n))]])
        assert np.allclose(K.hamiltonian_blocks(), np.einsum('ij,gjk->gik', J2, K.K02()))
        assert K.structure_residual() < 1e-10
