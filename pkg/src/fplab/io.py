"""File formats: binary ensembles, CSV diagnostics, JSON reports.

Binary layout: the 8-byte magic ``b"FPLABv1\\n"``, a little-endian uint64
header length, the UTF-8 JSON header, then the array as row-major
little-endian float64 of the shape recorded in the header.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FPLABv1\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None  # strict JSON has no NaN/Inf
    return obj


def dump_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def write_array(path, array, header: dict | None = None) -> Path:
    arr = np.ascontiguousarray(array, dtype="<f8")
    head = dict(header or {})
    head.update(shape=list(arr.shape), dtype="<f8", order="C")
    blob = json.dumps(_jsonable(head), sort_keys=True).encode()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(arr.tobytes(order="C"))
    return path


def read_array(path):
    with Path(path).open("rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not an fplab array file")
        (n,) = struct.unpack("<Q", fh.read(8))
        head = json.loads(fh.read(n))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(head["shape"]), head


def write_ensemble(path, ens) -> Path:
    p = ens.params
    head = {"kind": "ou-ensemble", "T": p.T, "dt": p.dt, "seed": p.seed, "lambda": p.spectrum.lam,
            "spectrum": p.spectrum.tag, "n_z": p.spectrum.n_z, "grid": ens.grid,
            "paths": ens.paths}
    return write_array(path, ens.values, head)


def write_trajectory(path, traj, sidecar: dict | None = None) -> tuple[Path, Path]:
    """Trajectory array plus a JSON diagnostics sidecar next to it."""
    path = Path(path)
    head = {"kind": "trajectory", "lambda": traj.lam, "grid": traj.grid}
    write_array(path, traj.V, head)
    diag = {k: {"mean": np.nanmean(v, axis=0), "max": np.nanmax(v, axis=0)} if np.any(np.isfinite(v))
            else {"mean": [], "max": []} for k, v in traj.diagnostics.items()}
    side = {"grid": traj.grid, "diagnostics": diag, "failed": int(np.sum(traj.failed)),
            "fail_times": traj.fail_time[traj.failed], **(sidecar or {})}
    sp = dump_json(side, path.with_suffix(".json"))
    return path, sp


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
    return path


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


MOMENT_HEADER = ["mode", "t", "mean", "var", "var_exact", "skew", "kurt", "z_mean", "z_var", "z_skew", "z_kurt"]


def moment_rows(checks):
    for c in checks:
        for r in c["modes"]:
            yield [r["mode"], c["t"]] + [r[k] for k in MOMENT_HEADER[2:]]


def write_moments_csv(path, checks) -> Path:
    return write_csv(path, MOMENT_HEADER, moment_rows(checks))


def write_residuals(path, reports) -> Path:
    return dump_json([r.to_dict() for r in reports], path)


def read_residuals(path):
    from .measure import ResidualReport

    rows = json.loads(Path(path).read_text())
    return [ResidualReport(**{k: (math.nan if v is None else v) for k, v in d.items()}) for d in rows]


def write_time_series(path, grid, series: dict) -> Path:
    """Long-format CSV: test function, t, value."""
    rows = ((name, float(t), float(v)) for name, vals in series.items() for t, v in zip(grid, vals))
    return write_csv(path, ["test_fn", "t", "value"], rows)


def sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
