import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import solve_ivp

from plomres.models.duffing import DuffingConfig, DuffingModel
from plomres.residual import full_subsample, residual_realization


@pytest.fixture
def model():
    return DuffingModel()


def test_nominal_maps_at_zero(model):
    g = model.g_map(np.zeros(2))
    assert g[0] == 2 * np.pi * 100 and g[1] == 6.0


@given(st.floats(-40, 40), st.floats(-40, 40))
def test_map_range(w1, w2):
    g = DuffingModel().g_map(np.array([w1, w2]))
    spread = np.sqrt(3) * 0.2
    nominal = np.array([2 * np.pi * 100, 6.0])
    assert np.all(g >= nominal * (1 - spread) - 1e-12)
    assert np.all(g <= nominal * (1 + spread) + 1e-12)


def test_zero_state_without_load_has_zero_residual(model):
    t = np.array([0.0, model.cfg.T])
    r = model.residual(np.zeros((2, 1)), (np.zeros((2, 1)), np.zeros((2, 1))), t, np.zeros(2))
    assert np.array_equal(r, np.zeros((2, 1)))


def test_excitation_endpoints_and_midpoint(model):
    T = model.cfg.T
    assert model.excitation(0.0, 0.3) == 0.0
    assert model.excitation(T, 0.3) == 0.0
    assert model.excitation(1.2 * T, 0.3) == 0.0
    oracle = (6.0 / 2) ** 2 * (1 + 0.05 * np.sin(2 * np.pi * 100 * T / 2)) * np.exp(-1.0)
    assert model.excitation(T / 2, 0.0) == pytest.approx(oracle, rel=1e-14)


def test_grid_invariant():
    grid = DuffingConfig().grid()
    assert abs(grid.n_time * grid.dt - 0.7325) <= 1e-9
    assert grid.dt == pytest.approx(2.5e-4, rel=1e-3)


def test_solver_output_satisfies_the_scheme(model):
    grid = model.cfg.grid(1024)
    for w in ([0.0, 0.0], [1.5, -1.0], [-2.0, 2.5]):
        w = np.array(w)
        traj = model.solve(w, grid)
        r = residual_realization(model, traj, w, grid, full_subsample(grid))
        # the inner solve stops at a 1e-6 relative step; its output must be
        # far more consistent than 10x that tolerance relative to the load
        load = np.abs(model.excitation(grid.times, w[1])).max()
        assert np.abs(r).max() <= 10 * model.cfg.tol * load


def test_batched_solve_matches_single(model):
    grid = model.cfg.grid(200)
    ws = np.array([[0.1, 0.2], [-1.0, 1.0]])
    batch = model.solve_many(ws, grid)
    assert np.allclose(batch[1], model.solve(ws[1], grid).values, rtol=0, atol=1e-15)


def test_linear_limit_is_second_order():
    model = DuffingModel(k_b=0.0)
    w = np.array([0.3, 0.7])
    g1 = model.g_map(w)[0]
    chi = model.cfg.chi

    def rhs(t, s):
        return [s[1], float(model.excitation(t, w[1])) - 2 * chi * g1 * s[1] - g1**2 * s[0]]

    errs = []
    for n in (1024, 2048, 4096):
        grid = model.cfg.grid(n)
        ref = solve_ivp(rhs, (0, model.cfg.T), [0.0, 0.0], t_eval=grid.times,
                        rtol=1e-11, atol=1e-14, method="DOP853").y[0]
        errs.append(np.abs(model.solve(w, grid).values[0] - ref).max())
    orders = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(orders > 1.8), orders


def test_prior_mean_of_first_map_is_nominal():
    model = DuffingModel()
    w = model.sample_prior(np.random.default_rng(0), 200_000)
    assert model.g_map(w)[:, 0].mean() == pytest.approx(2 * np.pi * 100, rel=2e-3)


def test_unknown_override_rejected():
    with pytest.raises(TypeError):
        DuffingModel(stiffness=1.0)
