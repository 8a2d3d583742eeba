"""
Tests for the linearized normal operator and the three explicit conjugations.
"""
import numpy as np
import pytest

from src.core.config_loader import PerturbationConfig, default_grid_size
from src.core.exceptions import ExpDivergence
from src.geometry.torus import gamma_chart, isotropize, taylor_K
from src.lattice.spectral import IndexSets
from src.linearization.transforms import (
    LinHamOperator,
    NormalDecomposition,
    SymplecticTransform,
    TransformKind,
    assemble_frakL,
    conjugacy_residual,
    dexp_series,
    dx,
    expm_series,
    hamiltonian_structure_residual,
    hankel_block,
    inverse_dx,
    j_diag,
    normal_form_part,
    phi1_commutator_remainder,
    phi1_generator,
    phi2_profile,
    reduce_to_constant_diagonal,
    toeplitz_block,
    transform_phi1,
    transform_phi3,
)
from src.model.hamiltonian import ActionVector, Perturbation, TorusEmbedding, tangential_frequencies


@pytest.fixture
def index_sets():
    return IndexSets((-1, 0, 1), K_normal=3, L_angle=2)


@pytest.fixture
def xi():
    return ActionVector(np.array([0.3, 0.2, 0.25]))


@pytest.fixture
def omega(index_sets, xi):
    return tangential_frequencies(xi.xi, index_sets)


def coefficients(index_sets, xi, eps):
    perturbation = None
    if eps:
        config = PerturbationConfig(grid_size=default_grid_size(3, 4, 1))
        perturbation = Perturbation.from_config(config, eps=eps)
    chart = gamma_chart(isotropize(TorusEmbedding.zeros(index_sets)))
    return taylor_K(chart, xi, perturbation)


def random_hamiltonian(rng, n, scale=1.0, batch=1):
    """J [[A1, A2], [A2_bar, A1_bar]] with A1 hermitian and A2 symmetric."""
    raw = rng.normal(size=(batch, n, n)) + 1j * rng.normal(size=(batch, n, n))
    A1 = 0.5 * (raw + np.conj(np.swapaxes(raw, -1, -2)))
    raw = rng.normal(size=(batch, n, n)) + 1j * rng.normal(size=(batch, n, n))
    A2 = 0.5 * (raw + np.swapaxes(raw, -1, -2))
    A = np.concatenate([np.concatenate([A1, A2], -1), np.concatenate([np.conj(A2), np.conj(A1)], -1)], -2)
    return scale * j_diag(n)[:, None] * A


class TestBuildingBlocks:
    """Test cases for the x-multiplication matrices and series."""

    def test_inverse_dx_convention(self):
        rng = np.random.default_rng(0)
        hat = rng.normal(size=16) + 1j * rng.normal(size=16)
        centered = hat.copy()
        centered[0] = 0.0
        assert np.allclose(dx(inverse_dx(hat)), centered)
        assert inverse_dx(hat)[0] == 0.0

    def test_multiplication_matrices(self):
        hat = np.zeros(16, dtype=complex)
        hat[1] = 1.0
        sites = (-2, 2, -3, 3)
        T = toeplitz_block(hat, sites)
        H = hankel_block(hat, sites)
        assert T[2, 0] == 1.0 and T[1, 3] == 1.0
        assert np.count_nonzero(T) == 2
        assert np.allclose(H, H.T)

    def test_expm_of_zero_is_identity(self):
        X = np.zeros((2, 4, 4), dtype=complex)
        assert np.allclose(expm_series(X), np.eye(4)[None])

    def test_expm_diagonal(self):
        X = np.diag([0.1j, -0.2, 0.3 + 0.1j])[None]
        assert np.allclose(expm_series(X), np.diag(np.exp([0.1j, -0.2, 0.3 + 0.1j]))[None], atol=1e-13)

    def test_expm_divergence(self):
        X = 50.0 * np.eye(3)[None]
        with pytest.raises(ExpDivergence):
            expm_series(X, order_cap=5)

    def test_dexp_matches_differences(self):
        rng = np.random.default_rng(1)
        X = 0.3 * (rng.normal(size=(1, 4, 4)) + 1j * rng.normal(size=(1, 4, 4)))
        dX = rng.normal(size=(1, 4, 4)) + 1j * rng.normal(size=(1, 4, 4))
        h = 1e-6
        derivative = (expm_series(X + h * dX) - expm_series(X - h * dX)) / (2 * h)
        expected = np.matmul(expm_series(-X), derivative)
        assert np.allclose(dexp_series(X, dX), expected, atol=1e-7)

    def test_structure_residual(self):
        rng = np.random.default_rng(2)
        M = random_hamiltonian(rng, 3)
        assert hamiltonian_structure_residual(M) < 1e-14
        M[0, 0, 1] += 1.0
        assert hamiltonian_structure_residual(M) > 0.5


class TestSymplecticTransform:
    """Test cases for pointwise conjugations."""

    def test_hamiltonian_generator_is_symplectic(self, index_sets, omega):
        rng = np.random.default_rng(3)
        n = index_sets.n_normal
        X = random_hamiltonian(rng, n, scale=0.05, batch=index_sets.grid_points)
        transform = SymplecticTransform.from_grid(X, omega, index_sets)
        assert transform.symplectic_residual() < 1e-12

    def test_constant_generator_conjugates_by_matrix(self, index_sets, omega):
        rng = np.random.default_rng(4)
        n = index_sets.n_normal
        X = np.repeat(random_hamiltonian(rng, n, scale=0.1), index_sets.grid_points, axis=0)
        transform = SymplecticTransform.from_grid(X, omega, index_sets)
        assert np.allclose(transform.log_derivative, 0.0, atol=1e-10)
        M = random_hamiltonian(rng, n, batch=index_sets.grid_points)
        expected = expm_series(-X) @ M @ expm_series(X)
        assert np.allclose(transform.conjugate(M), expected, atol=1e-10)

    def test_unconjugate_inverts_conjugate(self, index_sets, omega):
        rng = np.random.default_rng(5)
        n = index_sets.n_normal
        X = random_hamiltonian(rng, n, scale=0.05, batch=index_sets.grid_points)
        transform = SymplecticTransform.from_grid(X, omega, index_sets)
        M = random_hamiltonian(rng, n, batch=index_sets.grid_points)
        assert np.allclose(transform.unconjugate(transform.conjugate(M)), M, atol=1e-10)
        assert hamiltonian_structure_residual(transform.conjugate(M)) < 1e-10

    def test_identity(self, index_sets):
        transform = SymplecticTransform.identity(index_sets)
        W = np.ones((index_sets.grid_points, 2 * index_sets.n_normal), dtype=complex)
        assert np.allclose(transform.apply(W), W)
        assert np.allclose(transform.apply_inverse(W), W)


class TestAssembly:
    """Test cases for the linearized operator and its decomposition."""

    def test_trivial_torus_has_no_remainder(self, index_sets, xi, omega):
        L = assemble_frakL(coefficients(index_sets, xi, 0.1), omega)
        assert L.decomposition.remainder_norm < 1e-10
        assert np.max(np.abs(L.decomposition.R0)) < 1e-10
        assert L.structure_residual() < 1e-10

    def test_unperturbed_operator_is_normal_form(self, index_sets, xi, omega):
        L = assemble_frakL(coefficients(index_sets, xi, 0.0), omega)
        assert np.allclose(L.R_part.blocks, 0.0, atol=1e-10)
        assert L.remainder_norm(0.0, 2.0) < 1e-8

    def test_normal_form_part(self, index_sets):
        rng = np.random.default_rng(6)
        G, n = index_sets.grid_points, index_sets.n_normal
        L = LinHamOperator(np.ones(3), random_hamiltonian(rng, n, batch=G), index_sets)
        N = normal_form_part(L.total)
        nonzero = np.flatnonzero(np.any(N.blocks != 0, axis=(1, 2)))
        assert list(nonzero) == [index_sets.zero_index]
        block = N.blocks[index_sets.zero_index]
        assert np.all(block[:n, n:] == 0) and np.all(block[n:, :n] == 0)
        # sites are ordered (-2, 2, -3, 3): no coupling between |k| = 2 and |k| = 3
        assert np.all(block[:2, 2:n] == 0)


class TestExplicitTransformations:
    """Test cases for the three explicit conjugations."""

    def test_phi1_is_identity_without_coupling(self, index_sets, xi, omega):
        L = assemble_frakL(coefficients(index_sets, xi, 0.0), omega)
        L1, phi1 = transform_phi1(L)
        assert np.allclose(phi1.forward, np.eye(2 * index_sets.n_normal)[None])
        assert np.allclose(L1.zeroth, L.zeroth)

    def test_phi1_commutator_identity(self):
        rng = np.random.default_rng(7)
        sites = (-2, 2, -3, 3)
        n = len(sites)
        q2_hat = 1e-2 * (rng.normal(size=(1, 16)) + 1j * rng.normal(size=(1, 16)))
        X1 = phi1_generator(q2_hat, sites)
        JD2 = j_diag(n) * np.concatenate([4 * np.pi ** 2 * np.asarray(sites, dtype=float) ** 2] * 2)
        lhs = JD2[:, None] * (-X1) - (-X1) * JD2[None, :]
        a1 = hankel_block(-0.5j * q2_hat, sites)
        zero = np.zeros_like(a1)
        coupling = np.concatenate([np.concatenate([zero, 2j * a1], -1),
                                   np.concatenate([-2j * np.conj(a1), zero], -1)], -2)
        rhs = j_diag(n)[:, None] * coupling - phi1_commutator_remainder(q2_hat, sites)
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_phi2_profile_solves_transport(self):
        rng = np.random.default_rng(8)
        signal = np.fft.fft(rng.normal(size=(2, 16)), axis=-1) / 16
        centered = signal.copy()
        centered[..., 0] = 0.0
        assert np.allclose(4.0 * dx(phi2_profile(signal)), centered)

    def test_phi3_removes_angle_dependence(self, index_sets):
        omega = np.array([1.0, np.sqrt(2.0), np.sqrt(3.0)])
        G, n = index_sets.grid_points, index_sets.n_normal
        phi = index_sets.grid_phi
        sites = np.asarray(index_sets.normal, dtype=float)
        D2 = 4 * np.pi ** 2 * sites ** 2
        Omega = 2.0 + 0.1 * np.cos(phi[:, :1]) + 0.05 * np.sin(phi[:, 1:2] - phi[:, 2:3]) * np.ones((1, n))
        lam = D2[None, :] + Omega
        zeroth = np.zeros((G, 2 * n, 2 * n), dtype=complex)
        diag = np.arange(2 * n)
        zeroth[:, diag, diag] = np.concatenate([1j * lam, -1j * lam], axis=-1)
        decomposition = NormalDecomposition(
            D2, Omega, np.zeros((G, 1), dtype=complex), np.zeros((G, 1), dtype=complex),
            np.zeros_like(zeroth), D2 + 2.0, np.zeros(G))
        L2 = LinHamOperator(omega, zeroth, index_sets, decomposition=decomposition)
        L3, phi3, seed = transform_phi3(L2, omega, gamma=1e-3, tau=3.0)
        assert phi3.kind is TransformKind.GAUGE_DIAG
        assert np.allclose(L3.zeroth, L3.zeroth[:1], atol=1e-10)
        assert np.allclose(seed.diagonal, D2 + 2.0)
        assert np.allclose(seed.r, 0.0, atol=1e-10)
        assert phi3.symplectic_residual() < 1e-12

    def test_seed_on_trivial_torus(self, index_sets, xi, omega):
        K = coefficients(index_sets, xi, 1e-3)
        chain = reduce_to_constant_diagonal(K, omega, gamma=1e-8, tau=3.0)
        assert chain.seed.c_eps == pytest.approx(float(np.mean(K.eps * K.q1_hat[:, 0].real)))
        assert np.allclose(chain.seed.r, 0.0, atol=1e-10)

    def test_chain_is_symplectic_and_audited(self, index_sets, xi, omega):
        chain = reduce_to_constant_diagonal(coefficients(index_sets, xi, 1e-3), omega, gamma=1e-8, tau=3.0)
        for transform in chain.transforms:
            assert transform.symplectic_residual() < 1e-10
        assert np.allclose(np.matmul(chain.forward(), chain.inverse()),
                           np.eye(2 * index_sets.n_normal)[None], atol=1e-10)
        assert chain.L0.structure_residual() < 1e-9
        L1, phi1 = transform_phi1(chain.L_omega)
        assert conjugacy_residual(chain.L_omega, L1, phi1) < 1e-12
