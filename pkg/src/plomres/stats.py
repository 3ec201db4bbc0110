"""Summary statistics for reports: 1D density curves and pointwise envelopes."""

from __future__ import annotations

import numpy as np


def silverman_width(samples) -> float:
    x = np.asarray(samples, dtype=float).ravel()
    sigma = np.std(x, ddof=1)
    if not sigma > 0:
        raise ValueError("samples have zero variance")
    return float(1.06 * sigma * x.size ** (-1 / 5))


def scalar_pdf(samples, grid) -> np.ndarray:
    """Gaussian KDE of 1D samples evaluated on ``grid`` (Silverman width)."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 10:
        raise ValueError("a density curve needs at least 10 samples")
    h = silverman_width(x)
    grid = np.asarray(grid, dtype=float)
    out = np.zeros(grid.shape)
    # chunk over samples to keep memory flat for long sample vectors
    for start in range(0, x.size, 4096):
        z = (grid[..., None] - x[start:start + 4096]) / h
        out += np.exp(-0.5 * z * z).sum(axis=-1)
    return out / (x.size * h * np.sqrt(2.0 * np.pi))


def pdf_grid(*sample_sets, n: int = 201, pad: float = 6.0) -> np.ndarray:
    """Common grid covering every sample set to ``pad`` standard deviations."""
    lo, hi = np.inf, -np.inf
    for x in sample_sets:
        x = np.asarray(x, dtype=float).ravel()
        sd = np.std(x, ddof=1)
        lo, hi = min(lo, x.min() - pad * sd), max(hi, x.max() + pad * sd)
    return np.linspace(lo, hi, n)


def confidence_envelope(samples, p_c: float):
    """Pointwise ``(lower, upper, mean)`` over axis 0 at probability level ``p_c``."""
    x = np.asarray(samples, dtype=float)
    if x.shape[0] < 50:
        raise ValueError("an envelope needs at least 50 samples")
    if not 0.0 <= p_c < 1.0:
        raise ValueError("p_c must lie in [0, 1)")
    lower = np.quantile(x, (1.0 - p_c) / 2.0, axis=0)
    upper = np.quantile(x, (1.0 + p_c) / 2.0, axis=0)
    return lower, upper, x.mean(axis=0)


def moments(x) -> dict:
    x = np.asarray(x, dtype=float).ravel()
    return {"mean": float(x.mean()), "std": float(x.std(ddof=1)) if x.size > 1 else 0.0,
            "second_moment": float(np.mean(x * x)), "n": int(x.size)}
