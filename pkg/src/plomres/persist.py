"""Directory store: a JSON manifest next to flat little-endian arrays.

Each array is written row-major to its own ``.bin`` file.  The manifest holds
shapes, dtypes and SHA-256 digests, so a load either round-trips bit for bit
or fails with :class:`IntegrityError`.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
SCHEMA = "plomres-store/1"
_DTYPES = {"f8": "<f8", "i8": "<i8"}


class IntegrityError(RuntimeError):
    pass


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def dumps(obj) -> str:
    """Canonical JSON used for every manifest and sidecar."""
    return json.dumps(obj, sort_keys=True, indent=2, default=_jsonable) + "\n"


def _jsonable(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _write_atomic(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save(directory, arrays: dict, meta: dict | None = None) -> Path:
    """Write ``arrays`` (name -> ndarray) and ``meta`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in sorted(arrays.items()):
        arr = np.asarray(arr)
        kind = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        fname = f"{name}.bin"
        _write_atomic(directory / fname, data)
        entries[name] = {"file": fname, "shape": list(arr.shape), "dtype": kind,
                         "sha256": _digest(data)}
    manifest = {"schema": SCHEMA, "arrays": entries, "meta": meta or {}}
    _write_atomic(directory / MANIFEST, dumps(manifest).encode())
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable manifest ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("schema") != SCHEMA:
        raise IntegrityError(f"{path}: unknown manifest schema")
    if not isinstance(manifest.get("arrays"), dict):
        raise IntegrityError(f"{path}: manifest has no array table")
    return manifest


def load(directory, mmap: bool = False) -> tuple[dict, dict]:
    """Return ``(arrays, meta)``; every file is checked against its digest.

    With ``mmap=True`` arrays are memory-mapped read-only after the check,
    which keeps large time-blocked mode stacks out of RAM.
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    arrays = {}
    for name, entry in manifest["arrays"].items():
        try:
            path = directory / entry["file"]
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            data = path.read_bytes()
        except (KeyError, TypeError, ValueError, FileNotFoundError) as exc:
            raise IntegrityError(f"{directory}: bad entry for {name!r} ({exc})") from exc
        if _digest(data) != entry["sha256"]:
            raise IntegrityError(f"{path}: content does not match manifest digest")
        expected = int(np.prod(shape, dtype=np.int64)) * 8
        if len(data) != expected:
            raise IntegrityError(f"{path}: size {len(data)} != {expected}")
        if mmap:
            arrays[name] = np.memmap(path, dtype=dtype, mode="r", shape=shape)
        else:
            arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype[1:])
    return arrays, manifest["meta"]
