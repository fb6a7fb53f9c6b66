"""Persistence: atomic writes, diagnostics CSV, report JSON, checkpoints, manifest.

CSV columns are ``t`` followed by the populated :class:`DiagnosticsSeries`
fields in declaration order; numbers are written with ``repr`` (shortest
round-trip decimal), so identical inputs give identical bytes.

A checkpoint ``<name>.bin`` holds the pressure history as little-endian
float64 in C order, shape ``(n_times, *grid.shape)``; ``<name>.json`` next
to it records grid, times, shape, dtype and boundary source.
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import os
import tempfile

import numpy as np

from .report import VerificationReport, _clean

CHECKPOINT_DTYPE = "<f8"


def ensure_writable(out_dir):
    """Create ``out_dir`` and fail before any output if it cannot be written."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir!r}: {exc}") from None
    if not os.access(out_dir, os.W_OK | os.X_OK):
        raise OSError(f"output directory {out_dir!r} is not writable")
    return out_dir


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to a temp file in the same directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    raw = data.encode("utf-8") if isinstance(data, str) else bytes(data)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _fmt(v):
    v = float(v)
    return repr(v)


def csv_text(columns):
    """``columns`` is an ordered mapping name -> 1-D array of equal length."""
    names = list(columns)
    arrays = [np.asarray(columns[n], float) for n in names]
    n = {a.size for a in arrays}
    if len(n) > 1:
        raise ValueError(f"columns have different lengths {sorted(n)}")
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for row in zip(*arrays):
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(series, path):
    cols = series.columns() if hasattr(series, "columns") else series
    return atomic_write(path, csv_text(cols))


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    names = rows[0]
    data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float).reshape(-1, len(names))
    return {n: data[:, i] for i, n in enumerate(names)}


def json_text(obj):
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(obj, path):
    if isinstance(obj, VerificationReport):
        obj = obj.to_dict()
    return atomic_write(path, json_text(obj))


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def read_report(path):
    return VerificationReport.from_dict(read_json(path))


def write_checkpoint(traj, out_dir, name="trajectory"):
    """Flat binary of ``p`` plus a JSON sidecar; returns both paths."""
    p = np.ascontiguousarray(traj.p, dtype=CHECKPOINT_DTYPE)
    bin_path = os.path.join(out_dir, name + ".bin")
    atomic_write(bin_path, p.tobytes(order="C"))
    side = {
        "format": "forchlab-checkpoint",
        "version": 1,
        "binary": os.path.basename(bin_path),
        "dtype": CHECKPOINT_DTYPE,
        "order": "C",
        "shape": list(p.shape),
        "fields": ["p"],
        "times": [float(t) for t in traj.times],
        "grid": traj.grid.to_dict(),
        "boundary": traj.boundary.source,
        "dt": traj.config.dt,
        "sha256": hashlib.sha256(p.tobytes()).hexdigest(),
    }
    json_path = os.path.join(out_dir, name + ".json")
    write_json(side, json_path)
    return bin_path, json_path


def read_checkpoint(json_path):
    """Returns ``(times, p, sidecar)``; the binary is checked against its hash."""
    side = read_json(json_path)
    bin_path = os.path.join(os.path.dirname(os.path.abspath(json_path)), side["binary"])
    with open(bin_path, "rb") as fh:
        raw = fh.read()
    if hashlib.sha256(raw).hexdigest() != side["sha256"]:
        raise ValueError(f"checkpoint {bin_path!r} does not match its sidecar hash")
    p = np.frombuffer(raw, dtype=side["dtype"]).reshape(side["shape"]).astype(float)
    return np.asarray(side["times"], float), p, side


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def inventory(out_dir, names):
    out = []
    for n in sorted(names):
        path = os.path.join(out_dir, n)
        out.append({"path": n, "bytes": os.path.getsize(path), "sha256": file_sha256(path)})
    return out


def write_outputs(out_dir, series=None, report=None, manifest=None, csv_name="diagnostics.csv",
                  report_name="report.json"):
    """Persist the diagnostics CSV, report JSON and manifest (manifest last)."""
    ensure_writable(out_dir)
    written = []
    if series is not None:
        write_csv(series, os.path.join(out_dir, csv_name))
        written.append(csv_name)
    if report is not None:
        write_json(report, os.path.join(out_dir, report_name))
        written.append(report_name)
    if manifest is not None:
        manifest.setdefault("inventory", [])
        manifest["inventory"] = inventory(out_dir, sorted(set(
            [e["path"] for e in manifest["inventory"]] + written)))
        write_json(manifest, os.path.join(out_dir, "manifest.json"))
    return written
