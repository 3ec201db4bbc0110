"""Karhunen-Loeve reduction of sampled trajectories and PCA whitening of X."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .scm import Trajectory, empirical_mean_traj

log = logging.getLogger(__name__)

#: eigenvalues below this fraction of the largest one count as zero
RANK_TOL = 1e-13


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so that its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def truncation_errors(eigenvalues: np.ndarray, total: float) -> np.ndarray:
    """``err(n) = 1 - sum_{a<=n} lambda_a / total`` for ``n = 1..len``."""
    return 1.0 - np.cumsum(eigenvalues) / total


def choose_order(eigenvalues, errors, eps, lower=1):
    """Smallest order >= ``lower`` with a positive eigenvalue and err <= eps.

    Returns ``(order, reached)``; if no order qualifies, the largest positive
    rank is returned with ``reached=False``.
    """
    positive = eigenvalues > RANK_TOL * eigenvalues[0]
    rank = int(np.count_nonzero(positive))
    for n in range(max(lower, 1), rank + 1):
        if errors[n - 1] <= eps:
            return n, True
    return rank, False


@dataclass
class KLBasis:
    """Mean trajectory, time-blocked modes ``(n_time, N, n_q)`` and spectrum."""

    mean: np.ndarray
    modes: np.ndarray
    eigenvalues: np.ndarray
    err_kl: float
    dt: float
    energy_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    reached: bool = True
    mean_rates: tuple = ()
    mode_rates: tuple = ()

    @property
    def n_q(self) -> int:
        return self.modes.shape[2]

    @property
    def n_time(self) -> int:
        return self.modes.shape[0]

    @property
    def state_dim(self) -> int:
        return self.modes.shape[1]

    def reconstruct(self, q) -> Trajectory:
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n_q,):
            raise ValueError(f"q must have {self.n_q} entries")
        values = self.mean + (self.modes @ q).T
        rates = tuple(m + (v @ q).T for m, v in zip(self.mean_rates, self.mode_rates))
        return Trajectory(values, rates)

    def project(self, values) -> np.ndarray:
        """KL coefficients ``(n_q, n)`` of trajectories ``(n, N, n_time)``."""
        centered = np.asarray(values, dtype=float) - self.mean
        return np.einsum("tka,lkt->al", self.modes, centered) / self.n_time / self.eigenvalues[:, None]

    def states_at(self, q, indices) -> tuple:
        """States and rates at grid columns ``indices`` for coefficients ``q``.

        ``q`` may be ``(n_q,)`` or ``(n_q, n)``; the result has shape
        ``(len(indices), N)`` or ``(n, len(indices), N)``.
        """
        q = np.asarray(q, dtype=float)
        if q.shape[0] != self.n_q:
            raise ValueError(f"q must have {self.n_q} rows")
        idx = np.asarray(indices)

        def one(mean, modes):
            base = mean[:, idx].T
            if q.ndim == 1:
                return base + modes[idx] @ q
            return base[None] + np.einsum("tnk,kl->ltn", modes[idx], q)

        values = one(self.mean, self.modes)
        rates = tuple(one(m, v) for m, v in zip(self.mean_rates, self.mode_rates))
        return values, rates


def kl_expand(values, eps_kl: float):
    """KL expansion by a thin SVD of the centered, stacked trajectories.

    ``values`` is ``(N_d, N, n_time)`` (or a dataset).  Returns the basis and
    the ``(n_q, N_d)`` coefficient samples, which are centered and whitened.
    """
    mean, centered = empirical_mean_traj(values)
    n_d, n_state, n_time = centered.shape
    # rows J = (n, k), one column per realization
    stacked = np.ascontiguousarray(centered.transpose(2, 1, 0)).reshape(n_time * n_state, n_d)
    u, s, _ = np.linalg.svd(stacked / np.sqrt(n_time), full_matrices=False)
    eig = s**2 / (n_d - 1)
    total = float(np.sum(stacked**2) / (n_time * (n_d - 1)))
    if total <= 0 or eig[0] <= 0:
        raise ValueError("centered data is identically zero")
    errors = truncation_errors(eig, total)
    n_q, reached = choose_order(eig, errors, eps_kl)
    if not reached:
        log.warning("KL tolerance %.3g unreachable; using full rank %d (err %.3g)",
                    eps_kl, n_q, errors[n_q - 1])
    lam = eig[:n_q]
    phi = np.sqrt(n_time) * fix_signs(u[:, :n_q])
    modes = (phi * np.sqrt(lam)).reshape(n_time, n_state, n_q)
    # q = Lambda^{-1} (1/n_time) sum_n V(t_n)^T y_c(t_n)
    q = (modes.reshape(n_time * n_state, n_q).T @ stacked) / n_time / lam[:, None]
    basis = KLBasis(mean, modes, lam, float(max(errors[n_q - 1], 0.0)), dt=np.nan,
                    energy_errors=errors, reached=reached)
    log.info("KL order n_q=%d, err=%.3e", n_q, basis.err_kl)
    return basis, q


def kl_time_derivatives(basis: KLBasis, model, dt: float, mean_seeds) -> KLBasis:
    """Attach rate stacks computed with the model's own time scheme.

    The mean uses the training-mean initial seeds and the modes start from
    zero, which makes the rates of ``reconstruct(q)`` exact for any ``q``.
    """
    rates_mean = model.time_derivatives(basis.mean, dt, mean_seeds)
    modes_t = np.moveaxis(basis.modes, 0, -1)  # (N, n_q, n_time)
    zero = tuple(np.zeros(modes_t.shape[:-1]) for _ in mean_seeds)
    rates_modes = tuple(np.moveaxis(r, -1, 0) for r in model.time_derivatives(modes_t, dt, zero))
    basis.mean_rates = tuple(rates_mean)
    basis.mode_rates = rates_modes
    basis.dt = dt
    return basis


@dataclass
class PCABasis:
    """PCA of ``x = (q, w)``: mean, eigenvectors ``(n_x, nu)`` and eigenvalues."""

    mean: np.ndarray
    vectors: np.ndarray
    eigenvalues: np.ndarray
    n_q: int
    n_w: int
    err_pca: float = 0.0
    energy_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lower_bound_met: bool = True

    @property
    def nu(self) -> int:
        return self.vectors.shape[1]

    @property
    def scaled(self) -> np.ndarray:
        """``psi xi^{1/2}``, the linear part of the decoder."""
        return self.vectors * np.sqrt(self.eigenvalues)

    def split(self):
        """Block split ``(x_q, x_w, psi_q, psi_w)``."""
        nq = self.n_q
        return self.mean[:nq], self.mean[nq:], self.vectors[:nq], self.vectors[nq:]

    def encode(self, x):
        x = np.asarray(x, dtype=float)
        col = x.ndim == 1
        x = x[:, None] if col else x
        eta = (self.vectors.T @ (x - self.mean[:, None])) / np.sqrt(self.eigenvalues)[:, None]
        return eta[:, 0] if col else eta

    def decode_x(self, eta):
        eta = np.asarray(eta, dtype=float)
        if eta.shape[0] != self.nu:
            raise ValueError(f"eta must have {self.nu} rows")
        lin = self.scaled @ eta
        return lin + (self.mean if eta.ndim == 1 else self.mean[:, None])

    def decode(self, eta):
        x = self.decode_x(eta)
        return x[: self.n_q], x[self.n_q:]


def pca_reduce(x_samples, eps_pca: float, nu_min: int | None = None):
    """PCA of the ``(n_x, N_d)`` samples; returns the basis and latent ``eta_d``.

    ``nu_min`` is a soft lower bound on the order (``n_q + 1`` by default);
    when no order above it has a positive eigenvalue and meets ``eps_pca``,
    the smallest feasible order is used and the fallback is logged.
    """
    x = np.asarray(x_samples, dtype=float)
    n_x, n_d = x.shape
    if n_d < 2:
        raise ValueError("PCA needs at least two samples")
    mean = x.mean(axis=1)
    centered = x - mean[:, None]
    cov = centered @ centered.T / (n_d - 1)
    xi, psi = np.linalg.eigh(cov)
    order = np.argsort(xi)[::-1]
    xi, psi = xi[order], fix_signs(psi[:, order])
    total = float(np.trace(cov))
    if total <= 0 or xi[0] <= 0:
        raise ValueError("covariance of X has no positive eigenvalue")
    errors = truncation_errors(xi, total)
    lower = 1 if nu_min is None else int(nu_min)
    nu, reached = choose_order(xi, errors, eps_pca, lower=min(lower, n_x))
    met = reached
    if not reached:
        nu, reached = choose_order(xi, errors, eps_pca, lower=1)
        if reached:
            log.warning("PCA order lower bound %d infeasible; using nu=%d", lower, nu)
    if not reached:
        raise ValueError(f"PCA tolerance {eps_pca:g} not reachable with positive spectrum")
    basis = PCABasis(mean, psi[:, :nu], xi[:nu], n_q=0, n_w=0,
                     err_pca=float(max(errors[nu - 1], 0.0)), energy_errors=errors,
                     lower_bound_met=met)
    eta = (basis.vectors.T @ centered) / np.sqrt(basis.eigenvalues)[:, None]
    return basis, eta


def reduce_qw(q_samples, w_samples, eps_pca: float, nu_min: int | None = None):
    """PCA of the stacked ``x = (q, w)`` with the block split recorded."""
    q = np.asarray(q_samples, dtype=float)
    w = np.asarray(w_samples, dtype=float)
    if nu_min is None:
        nu_min = q.shape[0] + 1
    basis, eta = pca_reduce(np.vstack([q, w]), eps_pca, nu_min)
    basis.n_q, basis.n_w = q.shape[0], w.shape[0]
    return basis, eta
