"""Constraint functions, their gradients, and the Lagrange-multiplier iteration.

The constraint vector stacks one residual row (the squared normalized
residual) and ``2 n_w`` moment rows for the controls.  The residual row has
no closed form in latent space, so its gradient comes from a Nadaraya-Watson
regression of ``rho^2`` on unconstrained learned samples.  The tilted law is
``p(eta) exp(-<lambda, h(eta)>)``, and Newton steps on ``lambda`` use the
sample covariance of ``h`` as the Hessian.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .sampler import IsdeParams, LearnedLatents, stormer_verlet_run

log = logging.getLogger(__name__)


#: largest exponent magnitude kept after shifting, safely below log(max float)
_EXP_SAFE = 600.0


class HessianError(RuntimeError):
    pass


def surrogate_bandwidth(n_mc: int, nu: int) -> float:
    return (4.0 / (n_mc * (2.0 + nu + 1.0))) ** (1.0 / (4.0 + nu + 1.0))


class RhoSurrogate:
    """Kernel regression of ``r = rho^2`` on scaled latent anchors.

    Parameters
    ----------
    eta_ar : (nu, n_mc) array
        Unconstrained learned latent vectors.
    rho_ar : (n_mc,) array
        Their normalized residuals.
    bandwidth : float, optional
        Overrides the Silverman width of the joint ``(r, eta)`` density.
    shift : {"mean", "min", "none"}
        Exponent conditioning.  ``"mean"`` subtracts the average exponent over
        anchors; ``"min"`` subtracts the smallest one.
    """

    def __init__(self, eta_ar, rho_ar, bandwidth: float | None = None, shift: str = "mean"):
        eta_ar = np.asarray(eta_ar, dtype=float)
        rho_ar = np.asarray(rho_ar, dtype=float)
        if eta_ar.shape[1] != rho_ar.size:
            raise ValueError("one residual per learned vector")
        if rho_ar.size < 10:
            raise ValueError("the surrogate needs at least 10 anchors")
        if shift not in ("mean", "min", "none"):
            raise ValueError(f"unknown shift {shift!r}")
        self.nu, self.n_mc = eta_ar.shape
        self.center = eta_ar.mean(axis=1)
        self.scale = eta_ar.std(axis=1, ddof=1)
        if np.any(self.scale <= 0):
            raise ValueError("a latent coordinate has zero spread among anchors")
        self.anchors = (eta_ar - self.center[:, None]) / self.scale[:, None]
        self.responses = rho_ar**2
        self.sigma_r = float(np.std(self.responses, ddof=1))
        self.bandwidth = float(bandwidth) if bandwidth else surrogate_bandwidth(self.n_mc, self.nu)
        self.shift = shift
        self._anchor_sq = np.sum(self.anchors**2, axis=0)

    def _weights(self, eta):
        eta_hat = (eta - self.center[:, None]) / self.scale[:, None]
        d2 = (self._anchor_sq[:, None] + np.sum(eta_hat**2, axis=0)[None, :]
              - 2.0 * self.anchors.T @ eta_hat)
        o = np.maximum(d2, 0.0) / (2.0 * self.bandwidth**2)
        if self.shift == "mean":
            o = o - o.mean(axis=0)
            # the mean shift overflows for very narrow kernels; those columns
            # fall back to the min shift, which leaves the ratios unchanged
            bad = o.min(axis=0) < -_EXP_SAFE
            if np.any(bad):
                o[:, bad] -= o[:, bad].min(axis=0)
        elif self.shift == "min":
            o = o - o.min(axis=0)
        return eta_hat, np.exp(-o)

    def value(self, eta):
        eta, single = _columns(eta)
        _, w = self._weights(eta)
        h = (self.responses @ w) / w.sum(axis=0)
        return h[0] if single else h

    def value_and_grad(self, eta):
        """Return ``h`` ``(n,)`` and its latent gradient ``(nu, n)``."""
        eta, single = _columns(eta)
        eta_hat, w = self._weights(eta)
        rw = self.responses[:, None] * w
        big_a, big_b = rw.sum(axis=0), w.sum(axis=0)
        s2 = self.bandwidth**2
        grad_a = (self.anchors @ rw - eta_hat * big_a) / s2
        grad_b = (self.anchors @ w - eta_hat * big_b) / s2
        h = big_a / big_b
        grad = (grad_a - h * grad_b) / big_b / self.scale[:, None]
        return (h[0], grad[:, 0]) if single else (h, grad)


def _columns(u):
    u = np.asarray(u, dtype=float)
    return (u[:, None], True) if u.ndim == 1 else (u, False)


@dataclass
class ConstraintTargets:
    b_rho: float
    b_w: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.b_rho], self.b_w])


def assemble_targets(w_train, b_rho: float) -> ConstraintTargets:
    """Mean and second moment of each raw training control, plus ``b_rho``."""
    w = np.asarray(w_train, dtype=float)
    if not b_rho > 0:
        raise ValueError("b_rho must be positive")
    return ConstraintTargets(float(b_rho), np.concatenate([w.mean(axis=0), np.mean(w**2, axis=0)]))


class ConstraintFunction:
    """``h = (rho^2, w_1..w_nw, w_1^2..w_nw^2)`` as functions of the latent vector.

    ``rho_evaluator``, when given, maps latent columns to exact ``rho^2``
    values through decoding and the model residual; it is used for the
    sample moments, while gradients always come from ``surrogate``.
    """

    def __init__(self, pca, surrogate: Optional[RhoSurrogate] = None,
                 rho_evaluator: Optional[Callable] = None):
        self.pca = pca
        self.surrogate = surrogate
        self.rho_evaluator = rho_evaluator
        _, self.x_w, _, _ = pca.split()
        self.slope_w = pca.scaled[pca.n_q:]  # (n_w, nu)
        self.n_w = pca.n_w
        self.n_rows = 1 + 2 * self.n_w

    def w_rows(self, eta):
        eta, _ = _columns(eta)
        lin = self.x_w[:, None] + self.slope_w @ eta
        return np.vstack([lin, lin**2])

    def jacobian(self, eta) -> np.ndarray:
        """Jacobian ``(n_rows, nu, n)`` at latent columns ``eta``."""
        eta, _ = _columns(eta)
        n = eta.shape[1]
        jac = np.empty((self.n_rows, eta.shape[0], n))
        if self.surrogate is None:
            jac[0] = np.nan
        else:
            jac[0] = self.surrogate.value_and_grad(eta)[1]
        lin = self.x_w[:, None] + self.slope_w @ eta
        jac[1:1 + self.n_w] = self.slope_w[:, :, None]
        jac[1 + self.n_w:] = 2.0 * lin[:, None, :] * self.slope_w[:, :, None]
        return jac

    def evaluate(self, eta) -> np.ndarray:
        eta, _ = _columns(eta)
        if self.rho_evaluator is not None:
            rho_row = np.asarray(self.rho_evaluator(eta), dtype=float)
        else:
            rho_row = self.surrogate.value(eta)
        return np.vstack([rho_row[None, :], self.w_rows(eta)])

    def drift(self, lam) -> Callable:
        """``u -> -sum_c lambda_c grad h_c(u)`` for ``(nu, n)`` columns ``u``."""
        lam = np.asarray(lam, dtype=float)
        lam_rho, lam_lin, lam_sq = lam[0], lam[1:1 + self.n_w], lam[1 + self.n_w:]

        def extra(u):
            out = np.zeros_like(u)
            if lam_rho != 0.0:
                out -= lam_rho * self.surrogate.value_and_grad(u)[1]
            if np.any(lam_lin != 0.0):
                out -= (lam_lin @ self.slope_w)[:, None]
            if np.any(lam_sq != 0.0):
                lin = self.x_w[:, None] + self.slope_w @ u
                out -= 2.0 * self.slope_w.T @ (lam_sq[:, None] * lin)
            return out

        return extra


class LinearConstraint:
    """``h(eta) = C eta``; row 0 plays the residual role in the iteration."""

    def __init__(self, coeffs):
        self.coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
        self.n_rows = self.coeffs.shape[0]
        self.n_w = (self.n_rows - 1) // 2

    def evaluate(self, eta):
        return self.coeffs @ _columns(eta)[0]

    def jacobian(self, eta):
        eta, _ = _columns(eta)
        return np.repeat(self.coeffs[:, :, None], eta.shape[1], axis=2)

    def drift(self, lam):
        push = -(np.asarray(lam, dtype=float) @ self.coeffs)
        return lambda u: np.broadcast_to(push[:, None], u.shape).copy()


@dataclass
class LagrangeTrace:
    algo: int
    lambdas: list = field(default_factory=list)
    err_r: list = field(default_factory=list)
    err_w: list = field(default_factory=list)
    err_rw: list = field(default_factory=list)
    mean_h: list = field(default_factory=list)
    min_eig: list = field(default_factory=list)
    i_opt: int = 1

    def monitored(self) -> np.ndarray:
        return np.asarray(self.err_r if self.algo == 1 else self.err_rw)

    def rows(self) -> list:
        out = []
        for i, lam in enumerate(self.lambdas):
            out.append({"i": i + 1, "err_R": self.err_r[i], "err_W": self.err_w[i],
                        "err_RW": self.err_rw[i], "min_eig": self.min_eig[i],
                        **{f"lambda_{c}": float(v) for c, v in enumerate(lam)},
                        **{f"mean_h_{c}": float(v) for c, v in enumerate(self.mean_h[i])}})
        return out


def constraint_errors(targets: ConstraintTargets, mean_h) -> tuple:
    err_r = abs(targets.b_rho - mean_h[0]) / targets.b_rho
    if targets.b_w.size:
        err_w = float(np.linalg.norm(targets.b_w - mean_h[1:]) / np.linalg.norm(targets.b_w))
    else:
        err_w = 0.0
    return float(err_r), err_w, float(np.hypot(err_r, err_w))


def _pd_check(block, iteration, label):
    eig = np.linalg.eigvalsh(np.atleast_2d(block))
    if not eig.min() > 0:
        raise HessianError(
            f"iteration {iteration}: {label} covariance not positive definite "
            f"(min eigenvalue {eig.min():.3g})")
    return float(eig.min())


def newton_step(algo: int, grad, cov, iteration: int):
    """Return the Newton increment ``-H^{-1} grad`` for the algorithm's blocks."""
    step = np.zeros_like(grad)
    if algo == 1:
        min_eig = _pd_check(cov[:1, :1], iteration, "residual")
        step[0] = -grad[0] / cov[0, 0]
    elif algo == 2:
        min_eig = _pd_check(cov, iteration, "full")
        step = -np.linalg.solve(cov, grad)
    elif algo == 3:
        min_eig = _pd_check(cov[:1, :1], iteration, "residual")
        step[0] = -grad[0] / cov[0, 0]
        if grad.size > 1:
            min_eig = min(min_eig, _pd_check(cov[1:, 1:], iteration, "control"))
            step[1:] = -np.linalg.solve(cov[1:, 1:], grad[1:])
    else:
        raise ValueError(f"unknown algorithm {algo}")
    return step, min_eig


def lagrange_iterate(algo: int, targets: ConstraintTargets, constraint, kde, basis,
                     params: IsdeParams, max_iter: int = 20, patience: int = 5,
                     damping: bool = False, on_iteration: Optional[Callable] = None):
    """Newton iteration on the multipliers with frozen sampler seeds.

    Returns ``(trace, latents, h)`` where ``latents`` and ``h`` are the
    samples and constraint values at the best recorded iteration.
    """
    b = targets.vector()
    if b.size != constraint.n_rows:
        raise ValueError("targets and constraint rows disagree")
    lam = np.zeros(constraint.n_rows)
    trace = LagrangeTrace(algo)
    best = (np.inf, None, None)
    stale = 0
    prev_lam, prev_err = None, None
    i = 0
    while i < max_iter:
        i += 1
        drift = None if not np.any(lam) else constraint.drift(lam)
        latents = stormer_verlet_run(kde, basis, params, drift)
        h = constraint.evaluate(latents.eta)
        mean_h = h.mean(axis=1)
        cov = np.atleast_2d(np.cov(h, ddof=1))
        err_r, err_w, err_rw = constraint_errors(targets, mean_h)
        monitored = err_r if algo == 1 else err_rw
        if (damping and prev_err is not None and monitored > 2.0 * prev_err
                and i < max_iter):
            # step halving: retry halfway between the last two multipliers
            lam = 0.5 * (lam + prev_lam)
            log.info("algo %d iteration %d: error doubled, halving step", algo, i)
            continue
        trace.lambdas.append(lam.copy())
        trace.err_r.append(err_r)
        trace.err_w.append(err_w)
        trace.err_rw.append(err_rw)
        trace.mean_h.append(mean_h)
        log.info("algo %d iteration %d: err_R=%.4g err_W=%.4g", algo, len(trace.lambdas),
                 err_r, err_w)
        if monitored < best[0]:
            best = (monitored, latents, h)
            trace.i_opt = len(trace.lambdas)
            stale = 0
        else:
            stale += 1
        grad = b - mean_h
        step, min_eig = newton_step(algo, grad, cov, len(trace.lambdas))
        trace.min_eig.append(min_eig)
        if on_iteration is not None:
            on_iteration(trace, latents, h)
        if stale >= patience:
            break
        prev_lam, prev_err = lam.copy(), monitored
        lam = lam + step
    latents = best[1]
    latents.provenance["lambda"] = trace.lambdas[trace.i_opt - 1].tolist()
    latents.provenance["algo"] = algo
    return trace, latents, best[2]
