"""Diffusion-maps basis of the training latent cloud.

The basis ``g`` holds the leading right eigenvectors of the row-stochastic
kernel matrix ``P = b^{-1} K``.  They are obtained from the symmetric matrix
``b^{-1/2} K b^{-1/2}``, which shares the spectrum of ``P``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .reduction import fix_signs

log = logging.getLogger(__name__)

TIE_TOL = 1e-12


class DiffusionError(ValueError):
    pass


@dataclass
class DiffusionBasis:
    eps_diff: float
    g: np.ndarray
    a: np.ndarray
    kappa: np.ndarray
    b_diag: np.ndarray
    #: full spectrum of the transition matrix, kept for plots and ``suggest_m``
    spectrum: np.ndarray

    @property
    def m(self) -> int:
        return self.g.shape[1]


def kernel_matrix(eta_d, eps_diff: float) -> np.ndarray:
    if eps_diff <= 0:
        raise DiffusionError("eps_diff must be positive")
    d2 = squareform(pdist(np.asarray(eta_d, dtype=float).T, "sqeuclidean"))
    return np.exp(-d2 / (4.0 * eps_diff))


def transition_matrix(eta_d, eps_diff: float) -> np.ndarray:
    k = kernel_matrix(eta_d, eps_diff)
    return k / k.sum(axis=1, keepdims=True)


def default_eps_diff(eta_d) -> float:
    """Half the median pairwise squared distance of the cloud."""
    d2 = pdist(np.asarray(eta_d, dtype=float).T, "sqeuclidean")
    if d2.size == 0:
        return 1.0
    return float(np.median(d2) / 2.0)


def diffusion_spectrum(eta_d, eps_diff: float) -> np.ndarray:
    """All eigenvalues of the transition matrix in decreasing order."""
    k = kernel_matrix(eta_d, eps_diff)
    root = 1.0 / np.sqrt(k.sum(axis=1))
    sym = root[:, None] * k * root[None, :]
    return np.sort(np.linalg.eigvalsh((sym + sym.T) / 2.0))[::-1]


def build_diffusion_basis(eta_d, eps_diff: float, m: int) -> DiffusionBasis:
    eta_d = np.asarray(eta_d, dtype=float)
    n_d = eta_d.shape[1]
    if not 1 <= m <= n_d:
        raise DiffusionError(f"basis size m={m} must lie in [1, N_d={n_d}]")
    k = kernel_matrix(eta_d, eps_diff)
    b = k.sum(axis=1)
    root = 1.0 / np.sqrt(b)
    sym = root[:, None] * k * root[None, :]
    kappa, gamma = np.linalg.eigh((sym + sym.T) / 2.0)
    order = np.argsort(kappa)[::-1]
    kappa, gamma = kappa[order], gamma[:, order]
    lead = kappa[:m]
    gaps = -np.diff(lead)
    if np.any(gaps <= TIE_TOL):
        at = int(np.argmax(gaps <= TIE_TOL)) + 1
        raise DiffusionError(
            f"eigenvalues {at} and {at + 1} tie (gap {gaps[at - 1]:.3g}); "
            "duplicate points or eps_diff too large for m")
    if m > 1 and lead[-1] <= TIE_TOL:
        raise DiffusionError(f"kappa_{m} = {lead[-1]:.3g} is not positive")
    g = root[:, None] * fix_signs(gamma[:, :m])
    # the first vector is constant; store it exactly so
    g[:, 0] = np.mean(g[:, 0])
    a = g @ np.linalg.inv(g.T @ g)
    return DiffusionBasis(float(eps_diff), g, a, lead.copy(), b, kappa)


def suggest_m(kappa, threshold: float = 0.1) -> int:
    """Smallest ``m >= 3`` with ``kappa_{m+1}/kappa_2 < threshold``, else ``N_d``."""
    kappa = np.asarray(kappa, dtype=float)
    n = kappa.size
    for m in range(3, n):
        if kappa[m] / kappa[1] < threshold:
            log.info("diffusion basis size m=%d (ratio %.3g)", m, kappa[m] / kappa[1])
            return m
    log.info("diffusion spectrum does not decay below %.3g; m=N_d=%d", threshold, n)
    return n
