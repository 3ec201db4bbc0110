"""Stochastic computational models, training datasets and their statistics."""

from __future__ import annotations

import abc
import logging
from dataclasses import dataclass, field
import numpy as np

from . import rng

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """An implicit sub-step failed or the state became non-finite."""

    def __init__(self, message, time_index=None, realization=None):
        super().__init__(message)
        self.time_index = time_index
        self.realization = realization


@dataclass(frozen=True)
class TimeGrid:
    """Constant-step grid ``t_n = t0 + n*dt`` for ``n = 1..n_time``."""

    t0: float
    T: float
    dt: float
    n_time: int

    def __post_init__(self):
        if self.n_time < 1 or self.dt <= 0:
            raise ValueError("grid needs n_time >= 1 and dt > 0")
        span = self.T - self.t0
        if abs(span - self.n_time * self.dt) > 1e-12 * max(abs(span), 1.0):
            raise ValueError(
                f"T - t0 = {span!r} differs from n_time*dt = {self.n_time * self.dt!r}"
            )

    @classmethod
    def regular(cls, t0: float, dt: float, n_time: int) -> "TimeGrid":
        return cls(float(t0), float(t0 + n_time * dt), float(dt), int(n_time))

    @classmethod
    def over(cls, t0: float, T: float, n_time: int) -> "TimeGrid":
        return cls(float(t0), float(T), (T - t0) / n_time, int(n_time))

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(1, self.n_time + 1)

    def as_dict(self) -> dict:
        return {"t0": self.t0, "T": self.T, "dt": self.dt, "n_time": self.n_time}


@dataclass
class Trajectory:
    """Sampled values ``N x n_time`` plus optional time-derivative stacks."""

    values: np.ndarray
    derivatives: tuple = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("trajectory has non-finite entries")
        for d in self.derivatives:
            if d.shape != self.values.shape:
                raise ValueError("derivative stack shape mismatch")


def backward_difference(values: np.ndarray, dt: float, start) -> np.ndarray:
    """First-order rate along the last axis; ``start`` is the state at t0."""
    values = np.asarray(values, dtype=float)
    prev = np.concatenate(
        [np.broadcast_to(np.asarray(start, dtype=float)[..., None], values[..., :1].shape),
         values[..., :-1]],
        axis=-1,
    )
    return (values - prev) / dt


def newmark_coefficients(dt: float):
    """Centered (average acceleration) Newmark constants a0..a3."""
    return 4.0 / dt**2, 4.0 / dt, 1.0, dt / 2.0


def newmark_rates(values: np.ndarray, dt: float, seeds) -> tuple:
    """Velocity and acceleration stacks from the centered Newmark recurrences.

    ``seeds`` holds ``(y0, yd0, ydd0)`` at t0.  The recurrence is linear in
    the values and the seeds, so it commutes with any affine reduced basis.
    """
    values = np.asarray(values, dtype=float)
    a0, a1, a2, a3 = newmark_coefficients(dt)
    shape = values.shape[:-1]
    y_prev, v_prev, acc_prev = (np.broadcast_to(np.asarray(s, dtype=float), shape) for s in seeds)
    vel = np.empty_like(values)
    acc = np.empty_like(values)
    for n in range(values.shape[-1]):
        y = values[..., n]
        acc_n = a0 * (y - y_prev) - a1 * v_prev - a2 * acc_prev
        v_n = v_prev + a3 * (acc_prev + acc_n)
        vel[..., n] = v_n
        acc[..., n] = acc_n
        y_prev, v_prev, acc_prev = y, v_n, acc_n
    return vel, acc


class ScmModel(abc.ABC):
    """Discretized stochastic model with deterministic initial conditions.

    Subclasses define the state size, the prior on the control vector, one
    solver, and the residual operator evaluated with the solver's own
    discretization.
    """

    model_id: str = "abstract"
    state_dim: int
    control_dim: int
    order: int
    #: block sizes for the residual norm; None means the plain ``1/sqrt(N)``
    norm_blocks: tuple | None = None

    @abc.abstractmethod
    def sample_prior(self, gen: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``n`` control vectors, shape ``(n, n_w)``."""

    @abc.abstractmethod
    def solve(self, w: np.ndarray, grid: TimeGrid) -> Trajectory:
        ...

    @abc.abstractmethod
    def residual(self, values, rates, times, w) -> np.ndarray:
        """Residual vectors ``(n_sp, N)`` for states ``(n_sp, N)`` at ``times``."""

    @abc.abstractmethod
    def derivative_seeds(self, w: np.ndarray) -> tuple:
        """State and rates at t0 needed to start the derivative recurrence."""

    def time_derivatives(self, values, dt, seeds) -> tuple:
        if self.order == 1:
            return (backward_difference(values, dt, seeds[0]),)
        return newmark_rates(values, dt, seeds)

    def solve_many(self, ws: np.ndarray, grid: TimeGrid) -> np.ndarray:
        out = np.empty((len(ws), self.state_dim, grid.n_time))
        for ell, w in enumerate(ws):
            try:
                out[ell] = self.solve(w, grid).values
            except SolverError as exc:
                exc.realization = ell
                raise
        return out

    def params(self) -> dict:
        return {}


def solve_scm(model: ScmModel, w, grid: TimeGrid) -> Trajectory:
    return model.solve(np.asarray(w, dtype=float), grid)


@dataclass
class TrainingDataset:
    """``N_d`` solved trajectories stored as one ``(N_d, N, n_time)`` array."""

    grid: TimeGrid
    values: np.ndarray
    controls: np.ndarray
    seed: int
    model_id: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[2] != self.grid.n_time:
            raise ValueError("values must be (N_d, N, n_time) on the grid")
        if self.controls.shape[0] != self.values.shape[0]:
            raise ValueError("one control vector per trajectory")
        if self.n_d < 2:
            raise ValueError("a training dataset needs N_d >= 2")

    @property
    def n_d(self) -> int:
        return self.values.shape[0]

    @property
    def state_dim(self) -> int:
        return self.values.shape[1]

    @property
    def pairs(self) -> list:
        return [(Trajectory(v), w) for v, w in zip(self.values, self.controls)]

    def subset(self, n: int) -> "TrainingDataset":
        return TrainingDataset(self.grid, self.values[:n], self.controls[:n],
                               self.seed, self.model_id, dict(self.provenance))


def build_training_dataset(model: ScmModel, n_d: int, grid: TimeGrid, seed: int) -> TrainingDataset:
    """Draw ``n_d`` controls from the prior stream and solve each of them."""
    if n_d < 2:
        raise ValueError("N_d must be at least 2")
    ws = model.sample_prior(rng.stream(seed, "prior"), n_d)
    values = model.solve_many(ws, grid)
    log.info("solved %d %s trajectories", n_d, model.model_id)
    return TrainingDataset(grid, values, ws, int(seed), model.model_id,
                           {"params": model.params()})


def empirical_mean_traj(values) -> tuple:
    """Mean over realizations (``1/N_d``) and the centered trajectories."""
    if isinstance(values, TrainingDataset):
        values = values.values
    values = np.asarray(values, dtype=float)
    if values.shape[0] < 2:
        raise ValueError("need at least two trajectories")
    # shifted by the first realization: exact for repeated data, less cancellation
    anchor = values[0]
    mean = anchor + (values - anchor).mean(axis=0)
    return mean, values - mean


def trapezoid_rates(values: np.ndarray, dt: float, start, start_rate) -> np.ndarray:
    """Rates consistent with the trapezoid rule, ``y_n = y_{n-1} + dt (r_n + r_{n-1}) / 2``.

    ``start`` and ``start_rate`` are the state and rate at t0.
    """
    values = np.asarray(values, dtype=float)
    shape = values.shape[:-1]
    prev = np.broadcast_to(np.asarray(start, dtype=float), shape)
    prev_rate = np.broadcast_to(np.asarray(start_rate, dtype=float), shape)
    rates = np.empty_like(values)
    for n in range(values.shape[-1]):
        rates[..., n] = 2.0 * (values[..., n] - prev) / dt - prev_rate
        prev, prev_rate = values[..., n], rates[..., n]
    return rates


class LinearDecayModel(ScmModel):
    """``dy/dt + k(w) y = 0`` with ``y(t0) = 1`` and ``k(w) = exp(0.2 w)``.

    Integrated by the trapezoid rule; its rates follow the same rule, so the
    residual vanishes on the solver output and the error is O(dt^2).
    """

    model_id = "decay"
    state_dim = 1
    control_dim = 1
    order = 1

    def __init__(self, initial=1.0):
        self.initial = float(initial)

    def rate(self, w):
        return np.exp(0.2 * np.asarray(w, dtype=float)[..., 0])

    def sample_prior(self, gen, n):
        return gen.standard_normal((n, 1))

    def derivative_seeds(self, w):
        return (np.full(1, self.initial), np.full(1, -self.rate(w) * self.initial))

    def time_derivatives(self, values, dt, seeds):
        return (trapezoid_rates(values, dt, seeds[0], seeds[1]),)

    def solve(self, w, grid):
        k = self.rate(w)
        factor = (1.0 - 0.5 * k * grid.dt) / (1.0 + 0.5 * k * grid.dt)
        y = self.initial * factor ** np.arange(1, grid.n_time + 1)
        values = y[None, :]
        return Trajectory(values, self.time_derivatives(values, grid.dt, self.derivative_seeds(w)))

    def residual(self, values, rates, times, w):
        return rates[0] + self.rate(w) * values

    def params(self):
        return {"initial": self.initial}
