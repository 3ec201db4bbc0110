"""Optional PNG rendering of report tables.

matplotlib is imported lazily; without it the report still writes every CSV
and simply skips the figures.
"""

from __future__ import annotations

import logging
from pathlib import Path

log = logging.getLogger(__name__)

# fixed metadata keeps the PNG bytes independent of the environment
_PNG_META = {"Software": "plomres"}


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        return None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def available() -> bool:
    return _pyplot() is not None


def _save(fig, path: Path):
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    fig.clf()


def line_plot(path, x, series: dict, xlabel="", ylabel="", logy=False, title=""):
    """One figure with a line per entry of ``series`` (label -> y)."""
    plt = _pyplot()
    if plt is None:
        log.info("matplotlib unavailable; skipping %s", path)
        return None
    fig = plt.figure(figsize=(6, 4))
    ax = fig.add_subplot(111)
    for label, y in series.items():
        ax.plot(x, y, label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    _save(fig, Path(path))
    plt.close(fig)
    return Path(path)


def envelope_plot(path, t, lower, upper, mean, reference=None, xlabel="t", ylabel=""):
    plt = _pyplot()
    if plt is None:
        log.info("matplotlib unavailable; skipping %s", path)
        return None
    fig = plt.figure(figsize=(6, 4))
    ax = fig.add_subplot(111)
    ax.fill_between(t, lower, upper, alpha=0.3, label="envelope")
    ax.plot(t, mean, label="learned mean")
    if reference is not None:
        ax.plot(t, reference, "--", label="training mean")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    _save(fig, Path(path))
    plt.close(fig)
    return Path(path)
