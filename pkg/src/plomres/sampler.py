"""Reduced Ito-SDE generator integrated with the Stormer-Verlet scheme.

The chain lives in the ``nu x m`` coefficients of the diffusion-maps basis.
One learned vector is read off every ``M0`` steps after burn-in; it is column
``j0`` of ``Z g^T`` where the column selectors are drawn once per seed.  The
selector belongs to the recording slot ``step // M0`` rather than to the sample
count, so a run with a longer burn-in records a suffix of a shorter one.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from . import rng
from .diffusion import DiffusionBasis
from .kde import KdeModel

log = logging.getLogger(__name__)


@dataclass
class IsdeParams:
    n_mc: int = 1000
    f0: float = 4.0
    #: step; ``None`` selects ``2 pi s_hat / 20``
    dr: Optional[float] = None
    l0: int = 100
    M0: int = 20
    seed: int = 0

    def resolved_dr(self, s_hat: float) -> float:
        return float(self.dr) if self.dr is not None else 2.0 * np.pi * s_hat / 20.0

    def validate(self):
        if self.f0 <= 0 or self.l0 < 0 or self.M0 < 1 or self.n_mc < 1:
            raise ValueError(f"invalid sampler parameters {self}")
        if self.dr is not None and self.dr <= 0:
            raise ValueError("dr must be positive")


@dataclass
class LearnedLatents:
    eta: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def n_mc(self) -> int:
        return self.eta.shape[1]


class NonFiniteState(RuntimeError):
    pass


def verlet_chain(z, x, force: Callable, dr: float, f0: float, n_steps: int,
                 noise: Optional[Callable] = None, every: int = 0, skip: int = 0,
                 on_record: Optional[Callable] = None):
    """Integrate the dissipative Hamiltonian system in place of ``(z, x)``.

    ``force(z_half)`` returns the drift in coefficient space and ``noise(step)``
    the scaled increment ``dW a``.  After ``skip`` steps, ``on_record(z)`` is
    called every ``every`` steps.  Returns the final ``(z, x)``.
    """
    beta = f0 * dr / 4.0
    c_keep = (1.0 - beta) / (1.0 + beta)
    c_force = dr / (1.0 + beta)
    c_noise = np.sqrt(f0) / (1.0 + beta)
    for step in range(1, n_steps + 1):
        z_half = z + 0.5 * dr * x
        x = c_keep * x + c_force * force(z_half)
        if noise is not None:
            x = x + c_noise * noise(step)
        z = z_half + 0.5 * dr * x
        if not np.isfinite(z).all():
            raise NonFiniteState(f"non-finite chain state at step {step}")
        if on_record is not None and step > skip and (step - skip) % every == 0:
            on_record(z)
    return z, x


def wiener_increments(gen: np.random.Generator, dr: float, shape) -> np.ndarray:
    """Brownian increments over one step: independent N(0, dr) entries."""
    return np.sqrt(dr) * gen.standard_normal(shape)


def frozen_draws(params: IsdeParams, nu: int, n_d: int):
    """The initial velocity ``v0`` and the per-slot column selectors of a seed."""
    v0 = rng.stream(params.seed, "v0").standard_normal((nu, n_d))
    n_slots = (params.l0 + params.n_mc * params.M0) // params.M0 + 1
    j0 = rng.stream(params.seed, "j0").integers(0, n_d, size=n_slots)
    return v0, j0


def stormer_verlet_run(kde: KdeModel, basis: DiffusionBasis, params: IsdeParams,
                       drift_extra: Optional[Callable] = None) -> LearnedLatents:
    """Run the projected ISDE and collect ``n_MC`` learned latent vectors.

    ``drift_extra(u)`` maps a ``(nu, N_d)`` matrix of points to the extra
    drift columns, typically ``-J(u)^T lambda`` for a constraint Jacobian.
    """
    params.validate()
    nu, n_d = kde.nu, kde.n_d
    g, a = basis.g, basis.a
    dr = params.resolved_dr(kde.s_hat)
    if params.f0 > 4.0 / kde.s_hat:
        warnings.warn(f"f0={params.f0} exceeds the advisory bound 4/s_hat={4.0 / kde.s_hat:.3g}")
    v0, j0 = frozen_draws(params, nu, n_d)
    wiener = rng.stream(params.seed, "wiener")

    def force(z_half):
        u = z_half @ g.T
        drift = kde.grad_log_zeta(u)
        if drift_extra is not None:
            drift = drift + drift_extra(u)
        return drift @ a

    def noise(_step):
        return wiener_increments(wiener, dr, (nu, n_d)) @ a

    out = np.empty((nu, params.n_mc))
    count = [0]

    def record(z):
        ell = count[0]
        slot = (params.l0 + (ell + 1) * params.M0) // params.M0
        out[:, ell] = z @ g[j0[slot]]
        count[0] += 1

    n_steps = params.l0 + params.n_mc * params.M0
    verlet_chain(kde.eta_d @ a, v0 @ a, force, dr, params.f0, n_steps, noise,
                 every=params.M0, skip=params.l0, on_record=record)
    prov = {
        "params": asdict(params), "dr": dr, "steps": n_steps,
        "v0_fingerprint": rng.fingerprint(v0),
        "j0_fingerprint": rng.fingerprint(j0.astype(float)),
        "wiener_fingerprint": rng.fingerprint(
            rng.stream(params.seed, "wiener").standard_normal(8)),
        "constrained": drift_extra is not None,
    }
    log.info("sampled %d latent vectors (%d steps, dr=%.4g)", params.n_mc, n_steps, dr)
    return LearnedLatents(out, prov)


def sample_unconstrained(kde: KdeModel, basis: DiffusionBasis, params: IsdeParams) -> LearnedLatents:
    return stormer_verlet_run(kde, basis, params, drift_extra=None)


def decode_learned(eta, pca, kl, indices=None):
    """Decode latent columns into KL coefficients, controls and states.

    Returns ``(q, w, values, rates)``; the states are evaluated at grid
    columns ``indices`` (all columns when omitted) with shape
    ``(n, len(indices), N)``.
    """
    eta = np.atleast_2d(np.asarray(eta, dtype=float).T).T
    q, w = pca.decode(eta)
    if indices is None:
        indices = np.arange(kl.n_time)
    values, rates = kl.states_at(q, indices)
    return q, w, values, rates


def latent_trajectory_basis(pca, kl):
    """Direct affine map from latent space to trajectories.

    Returns the mean ``(N, n_time)`` and time-blocked slopes
    ``(n_time, N, nu)`` with ``y(t_n) = mean(t_n) + slopes(t_n) eta``.
    """
    xq, _, psi_q, _ = pca.split()
    mean = kl.mean + (kl.modes @ xq).T
    slopes = kl.modes @ (psi_q * np.sqrt(pca.eigenvalues))
    return mean, slopes
