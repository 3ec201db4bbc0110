"""Scalar Duffing oscillator under a windowed random excitation.

State ``y`` obeys ``y'' + 2 chi g1 y' + g1^2 (1 + k_b y^2) y = gamma(t, w2)``
from rest, with ``g_j`` mapped from standard normal controls ``w_j`` to a
uniform spread around their nominal values.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import erf

from ..scm import ScmModel, SolverError, TimeGrid, Trajectory, newmark_coefficients


@dataclass
class DuffingConfig:
    chi: float = 0.05
    k_b: float = 5e8
    T: float = 0.7325
    omega_b: float = 2.0 * np.pi * 100.0
    delta: tuple = (0.2, 0.2)
    g_nominal: tuple = (2.0 * np.pi * 100.0, 6.0)
    gamma0: float = 1.0
    tol: float = 1e-6
    max_iter: int = 50

    def grid(self, n_time: int = 2930) -> TimeGrid:
        return TimeGrid.over(0.0, self.T, n_time)


def uniform_of(w):
    return 0.5 * (1.0 + erf(np.asarray(w, dtype=float) / np.sqrt(2.0)))


class DuffingModel(ScmModel):
    model_id = "duffing"
    state_dim = 1
    control_dim = 2
    order = 2

    def __init__(self, config: DuffingConfig | None = None, **overrides):
        cfg = config or DuffingConfig()
        for key, value in overrides.items():
            if not hasattr(cfg, key):
                raise TypeError(f"unknown Duffing parameter {key!r}")
            setattr(cfg, key, value)
        self.cfg = cfg

    def params(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.cfg).items()}

    def g_map(self, w):
        """``g_j = g_nominal_j (1 + sqrt(3) delta_j (2 U_j - 1))``, columnwise."""
        w = np.asarray(w, dtype=float)
        nominal = np.asarray(self.cfg.g_nominal)
        delta = np.asarray(self.cfg.delta)
        return nominal * (1.0 + np.sqrt(3.0) * delta * (2.0 * uniform_of(w) - 1.0))

    def excitation(self, t, w2):
        """Windowed load; zero where the window denominator is not positive."""
        cfg = self.cfg
        t = np.asarray(t, dtype=float)
        g2 = cfg.g_nominal[1] * (1.0 + np.sqrt(3.0) * cfg.delta[1] * (2.0 * uniform_of(w2) - 1.0))
        denom = 1.0 - (2.0 * t / cfg.T - 1.0) ** 4
        window = np.where(denom > 0, np.exp(-1.0 / np.where(denom > 0, denom, 1.0)), 0.0)
        return (cfg.gamma0 * ((t / cfg.T) * g2) ** 2
                * (1.0 + 0.05 * np.sin(cfg.omega_b * t)) * window)

    def sample_prior(self, gen, n):
        return gen.standard_normal((n, 2))

    def derivative_seeds(self, w):
        acc0 = float(self.excitation(0.0, float(np.asarray(w)[1])))
        return (np.zeros(1), np.zeros(1), np.full(1, acc0))

    def residual(self, values, rates, times, w):
        vel, acc = rates
        g1 = self.g_map(w)[0]
        cfg = self.cfg
        return (acc + 2.0 * cfg.chi * g1 * vel + g1**2 * (1.0 + cfg.k_b * values**2) * values
                - self.excitation(times, float(w[1]))[:, None])

    def solve(self, w, grid):
        values = self.solve_many(np.asarray(w, dtype=float)[None, :], grid)[0]
        return Trajectory(values, self.time_derivatives(values, grid.dt, self.derivative_seeds(w)))

    def solve_many(self, ws, grid: TimeGrid) -> np.ndarray:
        """Newmark integration of all realizations at once.

        Each step solves the cubic ``k_lin y + c y^3 = rhs`` by Newton's method
        with step halving, starting from the previous state.
        """
        cfg = self.cfg
        ws = np.asarray(ws, dtype=float)
        n = ws.shape[0]
        g = self.g_map(ws)
        g1 = g[:, 0]
        a0, a1, a2, a3 = newmark_coefficients(grid.dt)
        damp = 2.0 * cfg.chi * g1
        k_lin = a0 + damp * a3 * a0 + g1**2
        cubic = g1**2 * cfg.k_b
        times = grid.times
        load = self.excitation(times[None, :], ws[:, 1:2])
        y = np.zeros(n)
        vel = np.zeros(n)
        acc = np.array([float(self.excitation(grid.t0, w2)) for w2 in ws[:, 1]])
        out = np.empty((n, 1, grid.n_time))
        for step in range(grid.n_time):
            c1 = -a0 * y - a1 * vel - a2 * acc
            c2 = vel + a3 * acc + a3 * c1
            rhs = load[:, step] - c1 - damp * c2
            y_new = self._solve_cubic(k_lin, cubic, rhs, y.copy(), step)
            acc_new = a0 * y_new + c1
            vel = vel + a3 * (acc + acc_new)
            acc, y = acc_new, y_new
            out[:, 0, step] = y
        return out

    def _solve_cubic(self, k_lin, cubic, rhs, y, step):
        cfg = self.cfg
        f = k_lin * y + cubic * y**3 - rhs
        for _ in range(cfg.max_iter):
            delta = f / (k_lin + 3.0 * cubic * y**2)
            trial = y - delta
            f_trial = k_lin * trial + cubic * trial**3 - rhs
            worse = np.abs(f_trial) > np.abs(f)
            halvings = 0
            while np.any(worse) and halvings < 30:
                delta = np.where(worse, 0.5 * delta, delta)
                trial = y - delta
                f_trial = k_lin * trial + cubic * trial**3 - rhs
                worse = np.abs(f_trial) > np.abs(f)
                halvings += 1
            y, f = trial, f_trial
            if np.all(np.abs(delta) <= cfg.tol * np.abs(y)):
                # one more Newton step turns the 1e-6 step test into full precision
                y = y - f / (k_lin + 3.0 * cubic * y**2)
                break
        else:
            raise SolverError(f"Newmark sub-iteration did not converge at step {step + 1}",
                              time_index=step + 1)
        if not np.all(np.isfinite(y)):
            raise SolverError(f"non-finite Duffing state at step {step + 1}", time_index=step + 1)
        return y
