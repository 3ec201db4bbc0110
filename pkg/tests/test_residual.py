import numpy as np
import pytest
from hypothesis import given, strategies as st

from plomres.models.duffing import DuffingModel
from plomres.reduction import kl_expand, kl_time_derivatives
from plomres.residual import (ResidualReport, amplitude_subsample, block_sq_norm,
                              full_subsample, make_subsample, reference_mean_rho, rho_hat,
                              residual_realization, uniform_subsample)
from plomres.scm import LinearDecayModel, TimeGrid, Trajectory, build_training_dataset


def mean_seeds(model, controls):
    seeds = [model.derivative_seeds(w) for w in controls]
    return tuple(np.mean([s[k] for s in seeds], axis=0) for k in range(len(seeds[0])))


def test_zero_residuals():
    assert rho_hat(np.zeros((4, 3))) == 0.0


def test_formula_collapse():
    assert rho_hat(np.array([[3.0]])) == 3.0
    assert rho_hat(np.array([[-3.0]])) == 3.0


def test_block_norm_hand_oracle():
    r = np.arange(1.0, 10.0)[None, :]
    hand = (1 + 4) / 4 + (9 + 16 + 25) / 9 + (36 + 49 + 64 + 81) / 16
    assert block_sq_norm(r, (2, 3, 4))[0] == pytest.approx(hand, abs=1e-14)
    assert rho_hat(r, (2, 3, 4)) == pytest.approx(np.sqrt(hand), abs=1e-14)
    with pytest.raises(ValueError):
        block_sq_norm(r, (2, 3))


def test_empty_subsample_rejected():
    with pytest.raises(ValueError):
        rho_hat(np.zeros((0, 2)))


def test_full_subsample_matches_full_grid_formula(gen):
    r = gen.standard_normal((7, 3))
    assert rho_hat(r) == pytest.approx(np.sqrt(np.sum(r**2) / (3 * 7)), rel=1e-15)


def test_batched_rho_hat(gen):
    r = gen.standard_normal((5, 4, 3))
    assert np.allclose(rho_hat(r), [rho_hat(x) for x in r], rtol=1e-15)


def test_solver_trajectory_is_self_consistent():
    model = DuffingModel()
    grid = model.cfg.grid(512)
    w = np.array([0.4, -0.8])
    traj = model.solve(w, grid)
    r = residual_realization(model, traj, w, grid, full_subsample(grid))
    scale = np.abs(model.excitation(grid.times, w[1])).max()
    assert rho_hat(r) <= 1e-8 * scale


def test_scaled_duffing_trajectory_is_not_a_solution():
    model = DuffingModel()
    grid = model.cfg.grid(512)
    w = np.array([0.0, 0.5])
    traj = model.solve(w, grid)
    doubled = Trajectory(2 * traj.values, tuple(2 * d for d in traj.derivatives))
    r = residual_realization(model, doubled, w, grid, full_subsample(grid))
    excited = np.abs(model.excitation(grid.times, w[1])) > 1e-3
    assert np.all(np.abs(r[excited, 0]) > 0)


def test_missing_derivatives_rejected():
    model = DuffingModel()
    grid = model.cfg.grid(16)
    with pytest.raises(ValueError):
        residual_realization(model, Trajectory(np.zeros((1, 16))), np.zeros(2), grid,
                             full_subsample(grid))


def test_decay_exact_solution_residual_order():
    model = LinearDecayModel()
    w = np.array([0.5])
    k = float(model.rate(w))
    errs = []
    for n in (50, 100, 200, 400):
        grid = TimeGrid.over(0.0, 2.0, n)
        exact = np.exp(-k * grid.times)[None, :]
        rates = model.time_derivatives(exact, grid.dt, model.derivative_seeds(w))
        r = residual_realization(model, Trajectory(exact, rates), w, grid, full_subsample(grid))
        errs.append(rho_hat(r))
    orders = np.log2(np.array(errs[:-1]) / errs[1:])
    # at least first order; the trapezoid-consistent rates give second
    assert np.all(orders > 0.95)
    assert np.all(orders > 1.9)


def test_uniform_subsample():
    grid = TimeGrid.regular(0.0, 0.03, 333)
    idx = uniform_subsample(grid, 37)
    assert idx.size == 37 and idx[-1] == 332
    assert np.all(np.diff(idx) == 9)
    assert np.array_equal(uniform_subsample(grid, 333), full_subsample(grid))
    with pytest.raises(ValueError):
        uniform_subsample(grid, 0)


def test_amplitude_subsample_picks_peaks():
    values = np.zeros((2, 1, 10))
    values[:, 0, [2, 7]] = [[5.0, 3.0], [4.0, 6.0]]
    assert list(amplitude_subsample(values, 2)) == [2, 7]
    grid = TimeGrid.over(0, 1, 10)
    assert list(make_subsample({"kind": "amplitude", "n_sp": 2}, grid, values)) == [2, 7]
    with pytest.raises(ValueError):
        make_subsample({"kind": "random"}, grid)


@given(st.lists(st.floats(1e-3, 1e3), min_size=2, max_size=30), st.floats(0.1, 10.0))
def test_normalization_equivariance(vals, c):
    vals = np.array(vals)
    fixed = ResidualReport(c * vals, float(np.mean(vals)), np.arange(1))
    assert np.allclose(fixed.rho, c * vals / np.mean(vals), rtol=1e-12)
    recomputed = ResidualReport(c * vals, float(np.mean(c * vals)), np.arange(1))
    assert np.allclose(recomputed.rho, vals / np.mean(vals), rtol=1e-12)


def test_report_l2_identity(gen):
    rep = ResidualReport(np.abs(gen.standard_normal(50)), 1.3, np.arange(3))
    assert rep.l2**2 == pytest.approx(np.mean(rep.rho_hat**2), rel=1e-12)


@pytest.fixture(scope="module")
def duffing_reference():
    model = DuffingModel()
    grid = model.cfg.grid(512)
    ds = build_training_dataset(model, 30, grid, seed=8)
    kl, q = kl_expand(ds.values, 1e-6)
    kl_time_derivatives(kl, model, grid.dt, mean_seeds(model, ds.controls))
    return reference_mean_rho(model, kl, q, ds.controls, grid, full_subsample(grid))


def test_reference_normalized_mean_is_one(duffing_reference):
    ref, b_rho, report = duffing_reference
    assert abs(np.mean(report.rho) - 1.0) <= 1e-12
    assert report.provenance["kl_reconstructed"]


def test_reference_second_moment_at_least_one(duffing_reference):
    _, b_rho, _ = duffing_reference
    assert b_rho >= 1.0


def test_duffing_reference_l2_decreases_with_training_size():
    model = DuffingModel()
    grid = model.cfg.grid(1024)
    big = build_training_dataset(model, 80, grid, seed=1)
    l2 = []
    for n in (20, 40, 80):
        ds = big.subset(n)
        kl, q = kl_expand(ds.values, 1e-6)
        kl_time_derivatives(kl, model, grid.dt, mean_seeds(model, ds.controls))
        l2.append(reference_mean_rho(model, kl, q, ds.controls, grid, full_subsample(grid))[2].l2)
    assert l2[0] > l2[1] > l2[2], f"L2 residual by N_d: {l2}"
