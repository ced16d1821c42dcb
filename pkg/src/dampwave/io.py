"""Trajectory files and per-experiment summaries.

Binary trajectory layout (all little-endian):

    magic    4 bytes   b"DWAV"
    version  u16       1
    ndim     u16       number of grid axes
    dims     ndim x u64
    nsamp    u64       number of samples
    then per sample:  t (f64), u (prod(dims) f64), v (prod(dims) f64)

Arrays are stored in C order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .grid import GridState

MAGIC = b"DWAV"
VERSION = 1


def write_trajectory_csv(path, states) -> None:
    """One row per (sample, node): t, flat grid index, u, v."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "index", "u", "v"])
        for s in states:
            u = s.u.ravel()
            v = s.v.ravel()
            for i in range(u.size):
                w.writerow([repr(s.t), i, repr(float(u[i])), repr(float(v[i]))])


def read_trajectory_csv(path, shape) -> list[GridState]:
    rows: dict[float, list] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for t, i, u, v in r:
            rows.setdefault(float(t), []).append((int(i), float(u), float(v)))
    out = []
    size = int(np.prod(shape))
    for t, vals in rows.items():
        u = np.empty(size)
        v = np.empty(size)
        for i, a, b in vals:
            u[i], v[i] = a, b
        out.append(GridState(t, u.reshape(shape), v.reshape(shape)))
    return out


def write_trajectory_binary(path, states) -> None:
    states = list(states)
    if not states:
        raise ValueError("no samples to write")
    dims = states[0].u.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HH", VERSION, len(dims)))
        fh.write(struct.pack(f"<{len(dims)}Q", *dims))
        fh.write(struct.pack("<Q", len(states)))
        for s in states:
            if s.u.shape != dims:
                raise ValueError("all samples must share one grid shape")
            fh.write(struct.pack("<d", s.t))
            fh.write(np.ascontiguousarray(s.u, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(s.v, dtype="<f8").tobytes())


def read_trajectory_binary(path) -> list[GridState]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError("not a DWAV file (bad magic)")
    version, ndim = struct.unpack_from("<HH", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported DWAV version {version}")
    off = 8
    dims = struct.unpack_from(f"<{ndim}Q", data, off)
    off += 8 * ndim
    (nsamp,) = struct.unpack_from("<Q", data, off)
    off += 8
    size = int(np.prod(dims))
    expected = off + nsamp * 8 * (1 + 2 * size)
    if len(data) != expected:
        raise ValueError(f"truncated DWAV file: {len(data)} bytes, expected {expected}")
    out = []
    for _ in range(nsamp):
        (t,) = struct.unpack_from("<d", data, off)
        off += 8
        u = np.frombuffer(data, "<f8", size, off).reshape(dims)
        off += 8 * size
        v = np.frombuffer(data, "<f8", size, off).reshape(dims)
        off += 8 * size
        out.append(GridState(t, u, v))
    return out


def config_hash(cfg_dict: dict, length: int = 12) -> str:
    """Short digest of the canonical JSON form of a configuration."""
    blob = json.dumps(cfg_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:length]


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else repr(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


class ExperimentWriter:
    """Single writer for one experiment's CSV, extra files and JSON summary.

    File stem is ``<experiment>-<hash-of-config>``; every path recorded in the
    summary is relative to the output directory.
    """

    def __init__(self, out_dir, experiment: str, cfg_dict: dict):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.experiment = experiment
        self.config = cfg_dict
        self.stem = f"{experiment}-{config_hash(cfg_dict)}"
        self.files: dict[str, str] = {}

    def path(self, key: str, suffix: str) -> Path:
        name = self.stem + suffix
        self.files[key] = name
        return self.out / name

    def write_rows(self, header, rows, key: str = "csv", suffix: str = ".csv") -> Path:
        p = self.path(key, suffix)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow(["" if x is None else x for x in row])
        return p

    def summary(self, params: dict, verdict: str, measured: dict) -> Path:
        doc = {
            "experiment": self.experiment,
            "params": _jsonable(params),
            "verdict": verdict,
            "measured_constants": _jsonable(measured),
            "files": dict(self.files),
        }
        p = self.out / (self.stem + ".json")
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return p
