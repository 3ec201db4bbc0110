"""Versioned YAML run configuration with strict key checking."""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

SCHEMA_VERSION = 1

DEFAULTS = {
    "version": SCHEMA_VERSION,
    "seed": 0,
    "out": "plomres-out",
    "model": {"id": "duffing", "params": {}, "n_time": None, "horizon": None},
    "train": {"n_d": 40, "n_d_ref": None},
    "reduce": {"eps_kl": 1e-6, "eps_pca": 1e-6, "nu_min": None},
    "diffusion": {"eps_diff": "auto", "m": "auto", "threshold": 0.1},
    "isde": {"n_mc": 500, "f0": 4.0, "dr": None, "l0": 100, "M0": 20},
    "residual": {"subsample": {"kind": "full", "n_sp": None}},
    "constrained": {"algos": [1], "max_iter": 10, "patience": 3, "damping": False,
                    "shift": "mean", "bandwidth": None},
    "report": {"p_c": 0.98, "figures": True, "pdf_points": 201, "probe": None},
}

# sections whose contents are free-form and checked by their consumer
_OPEN = {("model", "params")}


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, path=()):
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = path + (key,)
        if key not in base:
            raise ConfigError(f"unknown configuration key {'.'.join(where)!r}")
        if isinstance(base[key], dict) and where not in _OPEN:
            if not isinstance(value, dict):
                raise ConfigError(f"{'.'.join(where)} must be a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _check(cfg: dict):
    if cfg["version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {cfg['version']!r}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    tr = cfg["train"]
    if not isinstance(tr["n_d"], int) or tr["n_d"] < 2:
        raise ConfigError("train.n_d must be an integer >= 2")
    if tr["n_d_ref"] is not None and (not isinstance(tr["n_d_ref"], int) or tr["n_d_ref"] < 2):
        raise ConfigError("train.n_d_ref must be an integer >= 2")
    for key in ("eps_kl", "eps_pca"):
        if not 0 < float(cfg["reduce"][key]) < 1:
            raise ConfigError(f"reduce.{key} must lie in (0, 1)")
    diff = cfg["diffusion"]
    if diff["eps_diff"] != "auto" and not float(diff["eps_diff"]) > 0:
        raise ConfigError("diffusion.eps_diff must be positive or 'auto'")
    if diff["m"] != "auto" and (not isinstance(diff["m"], int) or diff["m"] < 1):
        raise ConfigError("diffusion.m must be a positive integer or 'auto'")
    isde = cfg["isde"]
    for key in ("n_mc", "l0", "M0"):
        if not isinstance(isde[key], int) or isde[key] < (0 if key == "l0" else 1):
            raise ConfigError(f"isde.{key} has an invalid value {isde[key]!r}")
    algos = cfg["constrained"]["algos"]
    if not isinstance(algos, list) or any(a not in (1, 2, 3) for a in algos):
        raise ConfigError("constrained.algos must be a list drawn from 1, 2, 3")
    if cfg["constrained"]["shift"] not in ("mean", "min", "none"):
        raise ConfigError("constrained.shift must be mean, min or none")
    kind = cfg["residual"]["subsample"]["kind"]
    if kind not in ("full", "uniform", "amplitude"):
        raise ConfigError(f"unknown subsample kind {kind!r}")
    if kind != "full" and not isinstance(cfg["residual"]["subsample"]["n_sp"], int):
        raise ConfigError("residual.subsample.n_sp is required for this kind")
    if not 0 <= float(cfg["report"]["p_c"]) < 1:
        raise ConfigError("report.p_c must lie in [0, 1)")


def from_dict(data: dict | None) -> dict:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    cfg = _merge(DEFAULTS, data)
    _check(cfg)
    return cfg


def load(path) -> dict:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return from_dict(data)
