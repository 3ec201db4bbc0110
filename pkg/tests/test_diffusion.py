import numpy as np
import pytest
import scipy.linalg

from plomres.diffusion import (DiffusionError, build_diffusion_basis, default_eps_diff,
                               diffusion_spectrum, suggest_m, transition_matrix)

from conftest import whiten


@pytest.fixture
def cloud(gen):
    return whiten(gen.standard_normal((3, 12)))


def test_leading_pair_is_constant(cloud):
    basis = build_diffusion_basis(cloud, 2.0, 5)
    assert basis.kappa[0] == pytest.approx(1.0, abs=1e-12)
    g1 = basis.g[:, 0]
    assert np.ptp(g1) <= 1e-10 * abs(g1[0])
    assert np.all(np.diff(basis.kappa) < 0) and basis.kappa[-1] > 0


def test_normalization_and_right_inverse(cloud):
    basis = build_diffusion_basis(cloud, 1.5, 6)
    gbg = basis.g.T @ (basis.b_diag[:, None] * basis.g)
    assert np.abs(gbg - np.eye(6)).max() <= 1e-8
    assert np.abs(basis.g.T @ basis.a - np.eye(6)).max() <= 1e-10


def test_projection_idempotence(cloud, gen):
    basis = build_diffusion_basis(cloud, 1.5, 4)
    z = gen.standard_normal((3, 4))
    assert np.abs((z @ basis.g.T) @ basis.a - z).max() <= 1e-10


def test_rows_sum_to_one_for_huge_eps(gen):
    p = transition_matrix(gen.standard_normal((2, 5)), 1e9)
    assert np.abs(p.sum(axis=1) - 1.0).max() <= 1e-12


def test_matches_dense_nonsymmetric_oracle(gen):
    eta = gen.standard_normal((2, 6))
    basis = build_diffusion_basis(eta, 0.7, 6)
    vals, vecs = scipy.linalg.eig(transition_matrix(eta, 0.7))
    order = np.argsort(-vals.real)
    vals, vecs = vals.real[order], vecs.real[:, order]
    assert np.allclose(basis.kappa, vals, atol=1e-8)
    for a in range(6):
        v = vecs[:, a] / np.linalg.norm(vecs[:, a])
        g = basis.g[:, a] / np.linalg.norm(basis.g[:, a])
        assert min(np.linalg.norm(v - g), np.linalg.norm(v + g)) <= 1e-8


def test_spectrum_agrees_with_basis(cloud):
    basis = build_diffusion_basis(cloud, 2.0, 12)
    assert np.allclose(diffusion_spectrum(cloud, 2.0), basis.kappa, atol=1e-12)


def test_permutation_invariance(cloud, gen):
    perm = gen.permutation(cloud.shape[1])
    b1 = build_diffusion_basis(cloud, 2.0, 4)
    b2 = build_diffusion_basis(cloud[:, perm], 2.0, 4)
    assert np.allclose(b1.kappa, b2.kappa, atol=1e-12)
    for a in range(4):
        u, v = b1.g[perm, a], b2.g[:, a]
        assert min(np.abs(u - v).max(), np.abs(u + v).max()) <= 1e-8


def test_duplicates_raise_at_full_rank(gen):
    pts = gen.standard_normal((2, 4))
    eta = np.hstack([pts, pts[:, :1]])
    with pytest.raises(DiffusionError):
        build_diffusion_basis(eta, 1.0, 5)


def test_argument_errors(cloud):
    with pytest.raises(DiffusionError):
        build_diffusion_basis(cloud, 0.0, 3)
    with pytest.raises(DiffusionError):
        build_diffusion_basis(cloud, 1.0, 13)


def test_single_vector_basis_is_allowed(cloud):
    basis = build_diffusion_basis(cloud, 1.0, 1)
    assert basis.m == 1 and basis.kappa[0] == pytest.approx(1.0)


def test_suggest_m():
    assert suggest_m([1, 0.9, 0.5, 0.04, 0.03]) == 3
    assert suggest_m(np.ones(7) - 1e-3 * np.arange(7)) == 7
    assert suggest_m([1, 0.9, 0.5, 0.2, 0.08, 0.01], threshold=0.1) == 4


def test_default_eps_is_half_median(gen):
    eta = gen.standard_normal((2, 5))
    d2 = [np.sum((eta[:, i] - eta[:, j]) ** 2) for i in range(5) for j in range(i + 1, 5)]
    assert default_eps_diff(eta) == pytest.approx(np.median(d2) / 2)
