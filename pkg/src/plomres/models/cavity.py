"""Two-dimensional lid-driven cavity on a staggered grid.

Velocity components live on cell faces and pressure at cell centers, with a
ghost layer carrying the no-slip and moving-lid conditions.  A time step
applies explicit convection (centered/donor-cell blend), an implicit viscous
solve, and a pressure projection.  Sparse LU factors are built once per
Reynolds number and reused for every step.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.special import erf

from ..scm import ScmModel, SolverError, TimeGrid, Trajectory


@dataclass
class CavityConfig:
    lx1: float = 0.9
    lx2: float = 1.0
    n1: int = 32
    n2: int = 36
    dt: float = 0.03
    v_bounds: tuple = (0.1, 0.3)
    nu_bounds: tuple = (1e-5, 3e-5)
    blend: float = 0.9

    def __post_init__(self):
        if self.n1 < 4 or self.n2 < 4:
            raise ValueError("cavity grid must be at least 4 x 4")


def prior_map(w, v_bounds=(0.1, 0.3), nu_bounds=(1e-5, 3e-5)):
    """Lid speed, viscosity and Reynolds number from standard normal controls."""
    w = np.asarray(w, dtype=float)
    u = 0.5 * (1.0 + erf(w / np.sqrt(2.0)))
    eps_v = v_bounds[1] / v_bounds[0] - 1.0
    eps_nu = nu_bounds[1] / nu_bounds[0] - 1.0
    speed = v_bounds[0] * (1.0 + eps_v * u[..., 0])
    visc = nu_bounds[0] * (1.0 + eps_nu * u[..., 1])
    return speed, visc, 0.9 * speed / visc


def _second_difference(n, h, ghost_ends):
    """1D second difference; reflective ghost ends give -3 on the boundary rows."""
    main = np.full(n, -2.0)
    if ghost_ends:
        main[0] = main[-1] = -3.0
    return sp.diags([np.ones(n - 1), main, np.ones(n - 1)], [-1, 0, 1]) / h**2


def _face_difference(n_cells):
    """Cell-by-interior-face difference (right face minus left face)."""
    d = sp.lil_matrix((n_cells, n_cells - 1))
    for c in range(n_cells):
        if c <= n_cells - 2:
            d[c, c] = 1.0
        if c >= 1:
            d[c, c - 1] = -1.0
    return d.tocsr()


class CavityOperators:
    """Grid-dependent operators shared by the solver and the residual."""

    def __init__(self, cfg: CavityConfig):
        n1, n2 = cfg.n1, cfg.n2
        self.cfg = cfg
        self.h1, self.h2 = cfg.lx1 / n1, cfg.lx2 / n2
        self.n_u1, self.n_u2, self.n_p = (n1 - 1) * n2, n1 * (n2 - 1), n1 * n2
        self.sizes = (self.n_u1, self.n_u2, self.n_p)
        eye = sp.identity
        self.lap1 = (sp.kron(_second_difference(n1 - 1, self.h1, False), eye(n2))
                     + sp.kron(eye(n1 - 1), _second_difference(n2, self.h2, True))).tocsc()
        self.lap2 = (sp.kron(_second_difference(n1, self.h1, True), eye(n2 - 1))
                     + sp.kron(eye(n1), _second_difference(n2 - 1, self.h2, False))).tocsc()
        lid = np.zeros((n1 - 1, n2))
        lid[:, -1] = 2.0 / self.h2**2
        self.lid_unit = lid.ravel()
        self.div1 = sp.kron(_face_difference(n1), eye(n2)).tocsr() / self.h1
        self.div2 = sp.kron(eye(n1), _face_difference(n2)).tocsr() / self.h2
        self.grad1 = (-self.div1.T).tocsr()
        self.grad2 = (-self.div2.T).tocsr()
        poisson = (self.div1 @ self.div1.T + self.div2 @ self.div2.T).tolil()
        poisson[0, :] = 0.0
        poisson[0, 0] = 1.0
        self.poisson = splu(poisson.tocsc())

    def split(self, y):
        y = np.asarray(y)
        a, b = self.n_u1, self.n_u1 + self.n_u2
        return y[..., :a], y[..., a:b], y[..., b:]

    def padded(self, u1, u2, speed):
        """Face arrays with walls and ghost cells, leading batch axes kept."""
        n1, n2 = self.cfg.n1, self.cfg.n2
        batch = u1.shape[:-1]
        uu = np.zeros(batch + (n1 + 1, n2 + 2))
        uu[..., 1:n1, 1:n2 + 1] = u1.reshape(batch + (n1 - 1, n2))
        uu[..., :, 0] = -uu[..., :, 1]
        uu[..., 1:n1, n2 + 1] = 2.0 * np.asarray(speed)[..., None] - uu[..., 1:n1, n2]
        vv = np.zeros(batch + (n1 + 2, n2 + 1))
        vv[..., 1:n1 + 1, 1:n2] = u2.reshape(batch + (n1, n2 - 1))
        vv[..., 0, :] = -vv[..., 1, :]
        vv[..., n1 + 1, :] = -vv[..., n1, :]
        return uu, vv

    def convection(self, u1, u2, speed):
        """Discrete ``(u . grad) u`` on interior faces for both components."""
        g = self.cfg.blend
        h1, h2 = self.h1, self.h2
        uu, vv = self.padded(u1, u2, speed)
        n1, n2 = self.cfg.n1, self.cfg.n2
        batch = u1.shape[:-1]

        # x-momentum at faces i = 1..n1-1, j = 1..n2
        uc = uu[..., 1:n1, 1:n2 + 1]
        ue, uw = uu[..., 2:n1 + 1, 1:n2 + 1], uu[..., 0:n1 - 1, 1:n2 + 1]
        un, us = uu[..., 1:n1, 2:n2 + 2], uu[..., 1:n1, 0:n2]
        s_e, s_w = (uc + ue) / 2, (uw + uc) / 2
        du2dx = (s_e**2 - s_w**2 + g * (np.abs(s_e) * (uc - ue) / 2
                                         - np.abs(s_w) * (uw - uc) / 2)) / h1
        v_n = (vv[..., 1:n1, 1:n2 + 1] + vv[..., 2:n1 + 1, 1:n2 + 1]) / 2
        v_s = (vv[..., 1:n1, 0:n2] + vv[..., 2:n1 + 1, 0:n2]) / 2
        duvdy = (v_n * (uc + un) / 2 - v_s * (us + uc) / 2
                 + g * (np.abs(v_n) * (uc - un) / 2 - np.abs(v_s) * (us - uc) / 2)) / h2
        conv1 = (du2dx + duvdy).reshape(batch + (self.n_u1,))

        # y-momentum at faces i = 1..n1, j = 1..n2-1
        vc = vv[..., 1:n1 + 1, 1:n2]
        ve, vw = vv[..., 2:n1 + 2, 1:n2], vv[..., 0:n1, 1:n2]
        vn_, vs_ = vv[..., 1:n1 + 1, 2:n2 + 1], vv[..., 1:n1 + 1, 0:n2 - 1]
        u_e = (uu[..., 1:n1 + 1, 1:n2] + uu[..., 1:n1 + 1, 2:n2 + 1]) / 2
        u_w = (uu[..., 0:n1, 1:n2] + uu[..., 0:n1, 2:n2 + 1]) / 2
        duvdx = (u_e * (vc + ve) / 2 - u_w * (vw + vc) / 2
                 + g * (np.abs(u_e) * (vc - ve) / 2 - np.abs(u_w) * (vw - vc) / 2)) / h1
        t_n, t_s = (vc + vn_) / 2, (vs_ + vc) / 2
        dv2dy = (t_n**2 - t_s**2 + g * (np.abs(t_n) * (vc - vn_) / 2
                                         - np.abs(t_s) * (vs_ - vc) / 2)) / h2
        conv2 = (duvdx + dv2dy).reshape(batch + (self.n_u2,))
        return conv1, conv2

    def divergence(self, u1, u2):
        return (self.div1 @ np.asarray(u1).T + self.div2 @ np.asarray(u2).T).T


class CavityModel(ScmModel):
    model_id = "cavity2d"
    control_dim = 2
    order = 1

    def __init__(self, config: CavityConfig | None = None, **overrides):
        cfg = config or CavityConfig()
        for key, value in overrides.items():
            if not hasattr(cfg, key):
                raise TypeError(f"unknown cavity parameter {key!r}")
            setattr(cfg, key, value)
        cfg.__post_init__()
        self.cfg = cfg
        self.ops = CavityOperators(cfg)
        self.state_dim = sum(self.ops.sizes)
        self.norm_blocks = self.ops.sizes

    def params(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.cfg).items()}

    def grid(self, horizon: float) -> TimeGrid:
        return TimeGrid.regular(0.0, self.cfg.dt, int(round(horizon / self.cfg.dt)))

    def controls(self, w):
        return prior_map(w, self.cfg.v_bounds, self.cfg.nu_bounds)

    def sample_prior(self, gen, n):
        return gen.standard_normal((n, 2))

    def derivative_seeds(self, w):
        return (np.zeros(self.state_dim),)

    def _viscous_factors(self, reynolds, dt):
        ops = self.ops
        k = dt / reynolds
        f1 = splu((sp.identity(ops.n_u1, format="csc") - k * ops.lap1).tocsc())
        f2 = splu((sp.identity(ops.n_u2, format="csc") - k * ops.lap2).tocsc())
        return f1, f2

    def step(self, u1, u2, speed, reynolds, dt, factors=None):
        """One explicit-convection / implicit-viscosity / projection step.

        Returns ``(u1, u2, p)`` at the new time.
        """
        ops = self.ops
        f1, f2 = factors or self._viscous_factors(reynolds, dt)
        c1, c2 = ops.convection(u1, u2, speed)
        v1 = f1.solve(u1 - dt * c1 + (dt / reynolds) * speed * ops.lid_unit)
        v2 = f2.solve(u2 - dt * c2)
        rhs = -(ops.div1 @ v1 + ops.div2 @ v2)
        rhs[0] = 0.0
        phi = ops.poisson.solve(rhs)
        return v1 - ops.grad1 @ phi, v2 - ops.grad2 @ phi, phi / dt

    def solve(self, w, grid: TimeGrid) -> Trajectory:
        if abs(grid.dt - self.cfg.dt) > 1e-12 * self.cfg.dt:
            raise ValueError("grid step differs from the cavity time step")
        speed, _, reynolds = self.controls(np.asarray(w, dtype=float))
        factors = self._viscous_factors(reynolds, grid.dt)
        u1 = np.zeros(self.ops.n_u1)
        u2 = np.zeros(self.ops.n_u2)
        values = np.empty((self.state_dim, grid.n_time))
        for n in range(grid.n_time):
            u1, u2, p = self.step(u1, u2, speed, reynolds, grid.dt, factors)
            if not (np.isfinite(u1).all() and np.isfinite(u2).all()):
                raise SolverError(f"non-finite cavity state at step {n + 1}", time_index=n + 1)
            values[:, n] = np.concatenate([u1, u2, p])
        return Trajectory(values, self.time_derivatives(values, grid.dt, self.derivative_seeds(w)))

    def residual(self, values, rates, times, w):
        """Scheme equations at each state: momentum rows then divergence rows.

        The previous state is recovered as ``U - dt dU/dt`` from the backward
        difference, so the residual of solver output vanishes to round-off.
        """
        ops = self.ops
        dt = self.cfg.dt
        speed, _, reynolds = self.controls(np.asarray(w, dtype=float))
        u1, u2, p = ops.split(values)
        r1, r2, _ = ops.split(rates[0])
        prev1, prev2 = u1 - dt * r1, u2 - dt * r2
        c1, c2 = ops.convection(prev1, prev2, np.full(values.shape[:-1], speed))
        g1 = (ops.grad1 @ p.T).T
        g2 = (ops.grad2 @ p.T).T
        uv1, uv2 = u1 + dt * g1, u2 + dt * g2
        lap1 = (ops.lap1 @ uv1.T).T + speed * ops.lid_unit
        lap2 = (ops.lap2 @ uv2.T).T
        res1 = r1 + g1 - lap1 / reynolds + c1
        res2 = r2 + g2 - lap2 / reynolds + c2
        res_div = ops.divergence(u1, u2)
        return np.concatenate([res1, res2, res_div], axis=-1)
