"""Modified Gaussian kernel density estimate of the latent vector.

The bandwidth pair keeps the smoothed law centered with identity covariance
whenever the training cloud is whitened.  All sums over kernels are shifted by
the per-query maximum exponent, so the gradient of ``log zeta`` stays finite
far from the data.
"""

from __future__ import annotations

import numpy as np


def bandwidths(n_d: int, nu: int) -> tuple[float, float]:
    """Silverman width ``s`` and the moment-preserving modified width."""
    if n_d < 1 or nu < 1:
        raise ValueError("need N_d >= 1 and nu >= 1")
    s = (4.0 / (n_d * (2.0 + nu))) ** (1.0 / (nu + 4.0))
    s_hat = s / np.sqrt(s * s + (n_d - 1.0) / n_d)
    return float(s), float(s_hat)


class KdeModel:
    """Mixture of ``N_d`` Gaussians of width ``s_hat`` centered at ``(s_hat/s) eta_d``."""

    def __init__(self, eta_d):
        eta_d = np.asarray(eta_d, dtype=float)
        if eta_d.ndim != 2:
            raise ValueError("eta_d must be (nu, N_d)")
        self.eta_d = eta_d
        self.nu, self.n_d = eta_d.shape
        self.s, self.s_hat = bandwidths(self.n_d, self.nu)
        self.centers = (self.s_hat / self.s) * eta_d
        self._center_sq = np.sum(self.centers**2, axis=0)

    def _exponents(self, u):
        # (N_d, n) exponents -|c_j - u_l|^2 / (2 s_hat^2), by the expanded square
        d2 = (self._center_sq[:, None] + np.sum(u * u, axis=0)[None, :]
              - 2.0 * self.centers.T @ u)
        return -np.maximum(d2, 0.0) / (2.0 * self.s_hat**2)

    @staticmethod
    def _as_columns(u):
        u = np.asarray(u, dtype=float)
        return (u[:, None], True) if u.ndim == 1 else (u, False)

    def log_zeta(self, u):
        u, single = self._as_columns(u)
        e = self._exponents(u)
        top = e.max(axis=0)
        out = top + np.log(np.exp(e - top).mean(axis=0))
        return out[0] if single else out

    def zeta(self, u):
        """Kernel average in (0, 1]; clipped to the smallest normal on underflow."""
        return np.maximum(np.exp(self.log_zeta(u)), np.finfo(float).tiny)

    def potential(self, u):
        return -self.log_zeta(u)

    def grad_log_zeta(self, u):
        """Gradient of ``log zeta`` at one point ``(nu,)`` or at columns ``(nu, n)``."""
        u, single = self._as_columns(u)
        e = self._exponents(u)
        weights = np.exp(e - e.max(axis=0))
        weights /= weights.sum(axis=0)
        g = (self.centers @ weights - u) / self.s_hat**2
        return g[:, 0] if single else g

    def grad_zeta(self, u):
        u, single = self._as_columns(u)
        e = self._exponents(u)
        top = e.max(axis=0)
        w = np.exp(e - top)
        g = (self.centers @ w - u * w.sum(axis=0)) * (np.exp(top) / (self.n_d * self.s_hat**2))
        return g[:, 0] if single else g

    def mixture_mean(self) -> np.ndarray:
        return self.centers.mean(axis=1)

    def mixture_cov(self) -> np.ndarray:
        """``s_hat^2 I + (s_hat/s)^2 ((N_d-1)/N_d) C_eta`` in closed form."""
        ratio = self.s_hat / self.s
        if self.n_d > 1:
            emp = np.cov(self.eta_d, ddof=1).reshape(self.nu, self.nu)
        else:
            emp = np.zeros((self.nu, self.nu))
        return self.s_hat**2 * np.eye(self.nu) + ratio**2 * (self.n_d - 1) / self.n_d * emp

    def sample_mixture(self, gen: np.random.Generator, n: int) -> np.ndarray:
        """Independent draws from the smoothed law, shape ``(nu, n)``."""
        pick = gen.integers(0, self.n_d, size=n)
        return self.centers[:, pick] + self.s_hat * gen.standard_normal((self.nu, n))
