"""Time-subsampled random residual of a model on trajectories."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scm import ScmModel, TimeGrid, Trajectory


# -- subsampling ---------------------------------------------------------------

def full_subsample(grid: TimeGrid) -> np.ndarray:
    return np.arange(grid.n_time)


def uniform_subsample(grid: TimeGrid, n_sp: int) -> np.ndarray:
    """Grid columns nearest to ``t0 + s (T - t0) / n_sp`` for ``s = 1..n_sp``."""
    if not 1 <= n_sp <= grid.n_time:
        raise ValueError(f"n_sp={n_sp} must lie in [1, {grid.n_time}]")
    idx = np.rint(np.arange(1, n_sp + 1) * grid.n_time / n_sp).astype(int) - 1
    idx = np.unique(np.clip(idx, 0, grid.n_time - 1))
    if idx.size != n_sp:
        raise ValueError("uniform subsample produced duplicate columns")
    return idx


def amplitude_subsample(values, n_sp: int) -> np.ndarray:
    """Columns where the mean (over realizations) state norm is largest."""
    values = np.asarray(values, dtype=float)
    amp = np.linalg.norm(values, axis=1).mean(axis=0)
    order = np.argsort(-amp, kind="stable")[:n_sp]
    return np.sort(order)


def make_subsample(subsample: dict, grid: TimeGrid, values=None) -> np.ndarray:
    kind = subsample.get("kind", "full")
    if kind == "full":
        return full_subsample(grid)
    if kind == "uniform":
        return uniform_subsample(grid, int(subsample["n_sp"]))
    if kind == "amplitude":
        return amplitude_subsample(values, int(subsample["n_sp"]))
    raise ValueError(f"unknown subsample kind {kind!r}")


# -- norms ---------------------------------------------------------------------

def plain_sq_norm(r: np.ndarray) -> np.ndarray:
    """``|r|^2 / N`` per row."""
    r = np.asarray(r, dtype=float)
    return np.sum(r * r, axis=-1) / r.shape[-1]


def block_sq_norm(r: np.ndarray, sizes) -> np.ndarray:
    """Sum over consecutive blocks of ``|r_b|^2 / N_b^2`` per row."""
    r = np.asarray(r, dtype=float)
    if sum(sizes) != r.shape[-1]:
        raise ValueError("block sizes do not add up to the residual length")
    out = np.zeros(r.shape[:-1])
    start = 0
    for n in sizes:
        blk = r[..., start:start + n]
        out += np.sum(blk * blk, axis=-1) / float(n) ** 2
        start += n
    return out


def rho_hat(residuals, blocks=None) -> float | np.ndarray:
    """Root of the subsample-averaged squared residual norm.

    ``residuals`` is ``(n_sp, N)`` or batched ``(n, n_sp, N)``.
    """
    residuals = np.asarray(residuals, dtype=float)
    if residuals.shape[-2] == 0:
        raise ValueError("no subsample times")
    sq = plain_sq_norm(residuals) if blocks is None else block_sq_norm(residuals, blocks)
    return np.sqrt(sq.mean(axis=-1))


# -- evaluation ----------------------------------------------------------------

def residual_realization(model: ScmModel, traj: Trajectory, w, grid: TimeGrid, indices):
    """Residual vectors ``(n_sp, N)`` of one trajectory at grid columns ``indices``."""
    if len(traj.derivatives) < model.order:
        raise ValueError("trajectory lacks the time derivatives the model needs")
    idx = np.asarray(indices)
    values = traj.values[:, idx].T
    rates = tuple(d[:, idx].T for d in traj.derivatives)
    return model.residual(values, rates, grid.times[idx], np.asarray(w, dtype=float))


def rho_hat_of_states(model: ScmModel, values, rates, times, ws) -> np.ndarray:
    """``rho_hat`` for a batch of states ``(n, n_sp, N)`` with controls ``(n, n_w)``."""
    out = np.empty(len(ws))
    for ell, w in enumerate(ws):
        r = model.residual(values[ell], tuple(d[ell] for d in rates), times, w)
        out[ell] = rho_hat(r, model.norm_blocks)
    return out


def rho_hat_of_coefficients(model, kl, q, ws, grid: TimeGrid, indices, chunk: int = 64):
    """``rho_hat`` of KL reconstructions ``q`` ``(n_q, n)`` paired with ``ws``."""
    q = np.asarray(q, dtype=float)
    ws = np.asarray(ws, dtype=float)
    idx = np.asarray(indices)
    times = grid.times[idx]
    out = np.empty(q.shape[1])
    for start in range(0, q.shape[1], chunk):
        sl = slice(start, min(start + chunk, q.shape[1]))
        values, rates = kl.states_at(q[:, sl], idx)
        out[sl] = rho_hat_of_states(model, values, rates, times, ws[sl])
    return out


@dataclass
class ResidualReport:
    rho_hat: np.ndarray
    rho_ref_mean: float
    indices: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def rho(self) -> np.ndarray:
        return self.rho_hat / self.rho_ref_mean

    @property
    def mean(self) -> float:
        return float(np.mean(self.rho_hat))

    @property
    def std(self) -> float:
        return float(np.std(self.rho_hat, ddof=1)) if self.rho_hat.size > 1 else 0.0

    @property
    def l2(self) -> float:
        return float(np.sqrt(np.mean(self.rho_hat**2)))

    def summary(self) -> dict:
        return {"n": int(self.rho_hat.size), "mean_rho_hat": self.mean,
                "std_rho_hat": self.std, "l2_rho_hat": self.l2,
                "mean_rho": float(np.mean(self.rho)), "rho_ref_mean": self.rho_ref_mean}


def reference_mean_rho(model, kl, q_train, w_train, grid: TimeGrid, indices):
    """Reference mean of ``rho_hat`` over the KL-reconstructed training set.

    ``q_train`` is ``(n_q, N_d)`` and ``w_train`` the raw controls
    ``(N_d, n_w)``.  Returns ``(rho_ref_mean, b_rho, report)`` where ``b_rho``
    is the mean square of the normalized reference residual.
    """
    values = rho_hat_of_coefficients(model, kl, q_train, w_train, grid, indices)
    ref = float(np.mean(values))
    if not ref > 0:
        raise ValueError("reference residual mean is not positive")
    report = ResidualReport(values, ref, np.asarray(indices),
                            {"n_d_ref": int(values.size), "kl_reconstructed": True})
    b_rho = float(np.mean(report.rho**2))
    return ref, b_rho, report
