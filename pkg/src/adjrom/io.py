"""Flat binary containers for snapshots and POD bases, plus sidecar metadata.

Layout (little-endian): a 32-byte header -- 4-byte magic, u32 version, u64 n,
u64 k, u64 reserved -- followed by k columns of n float64 values. Snapshot
files (magic "AOSN") append the k float64 time stamps; basis files (magic
"AOPB") append the singular values, whose count is carried in the reserved
header word. A sidecar JSON file at <path>.json records the generating
config for snapshot files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from adjrom.fom import SnapshotMatrix
from adjrom.pod import PodBasis

__all__ = [
    "write_snapshots",
    "read_snapshots",
    "read_sidecar",
    "write_basis",
    "read_basis",
]

_HEADER = struct.Struct("<4sIQQQ")
_VERSION = 1
_F8 = np.dtype("<f8")


def _write_container(path, magic: bytes, n: int, k: int, reserved: int,
                     *arrays: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, _VERSION, n, k, reserved))
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype=_F8).tobytes())


def _read_header(fh, expected_magic: bytes, path):
    raw = fh.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, n, k, reserved = _HEADER.unpack(raw)
    if magic != expected_magic:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {expected_magic!r}")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    return n, k, reserved


def _sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_snapshots(path, snap: SnapshotMatrix, meta: dict | None = None) -> None:
    """Write a snapshot container and its sidecar metadata JSON."""
    # Columns are stored contiguously (Fortran order).
    _write_container(path, b"AOSN", snap.n, snap.k, 0,
                     snap.states.T, snap.times)
    with open(_sidecar_path(path), "w") as fh:
        json.dump(meta or {}, fh, indent=2)


def _read_f8(fh, count: int, path) -> np.ndarray:
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise ValueError(f"{path}: truncated payload")
    return np.frombuffer(raw, dtype=_F8)


def read_snapshots(path) -> SnapshotMatrix:
    with open(path, "rb") as fh:
        n, k, _ = _read_header(fh, b"AOSN", path)
        data = _read_f8(fh, n * k, path)
        times = _read_f8(fh, k, path)
    return SnapshotMatrix(data.reshape(k, n).T.copy(), times.copy())


def read_sidecar(path) -> dict:
    """Load the metadata JSON written next to a snapshot container."""
    with open(_sidecar_path(path)) as fh:
        return json.load(fh)


def write_basis(path, basis: PodBasis) -> None:
    """Write a POD basis container (columns of V_r, then singular values)."""
    _write_container(path, b"AOPB", basis.n, basis.r,
                     basis.singular_values.size,
                     basis.basis.T, basis.singular_values)


def read_basis(path) -> PodBasis:
    with open(path, "rb") as fh:
        n, r, n_sv = _read_header(fh, b"AOPB", path)
        data = _read_f8(fh, n * r, path)
        sv = _read_f8(fh, n_sv, path)
    V = data.reshape(r, n).T.copy()
    energy = float(np.sum(sv[:r] ** 2) / np.sum(sv**2))
    return PodBasis(V, sv.copy(), int(r), energy)
