"""Checkpoint, task-vector and scan-result files.

Checkpoints are JSON envelopes. Floats are written with ``repr`` so every
value reads back bit-for-bit; a SHA-256 over the canonical body is checked
on load.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .diagnostics import Curve, GridScan
from .merge import TaskVector
from .nn import ModelSpec

FORMAT_VERSION = 1


class DigestError(ValueError):
    """A file failed its integrity check."""


class FormatError(ValueError):
    """A file is truncated, malformed or of an unsupported version."""


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical(body: dict) -> bytes:
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()


def _floats(values) -> list[float]:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to serialise non-finite values")
    return [float(v) for v in arr]


def _write_envelope(kind: str, body: dict, path) -> None:
    body = {"kind": kind, "format_version": FORMAT_VERSION, **body}
    doc = dict(body, digest=hashlib.sha256(_canonical(body)).hexdigest())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1))


def _read_envelope(kind: str, path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: truncated or malformed ({exc})") from None
    if not isinstance(doc, dict) or "digest" not in doc:
        raise FormatError(f"{path}: missing digest")
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    if doc.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind} file, found {doc.get('kind')!r}")
    digest = doc.pop("digest")
    if hashlib.sha256(_canonical(doc)).hexdigest() != digest:
        raise DigestError(f"{path}: content digest mismatch")
    return doc


def save_checkpoint(params: np.ndarray, spec: ModelSpec, meta: dict, path) -> None:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise ValueError("parameter vector does not match the model spec")
    _write_envelope("checkpoint", {"spec": spec.to_dict(), "spec_hash": spec.digest,
                                   "meta": meta, "params": _floats(params)}, path)


def load_checkpoint(path) -> tuple[np.ndarray, ModelSpec, dict]:
    doc = _read_envelope("checkpoint", path)
    spec = ModelSpec.from_dict(doc["spec"])
    params = np.array(doc["params"], dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise FormatError(f"{path}: parameter count does not match its spec")
    return params, spec, doc["meta"]


def save_task_vector(tau: TaskVector, path, meta: dict | None = None) -> None:
    _write_envelope("task_vector", {"task_id": tau.task_id, "base_hash": tau.base_hash,
                                    "meta": meta or {}, "values": _floats(tau.values),
                                    "residual": _floats(tau.residual)}, path)


def load_task_vector(path) -> TaskVector:
    doc = _read_envelope("task_vector", path)
    values = np.array(doc["values"], dtype=np.float64)
    residual = np.array(doc["residual"], dtype=np.float64)
    if residual.shape != values.shape:
        raise FormatError(f"{path}: residual length does not match the values")
    return TaskVector(values, doc["base_hash"], doc["task_id"], residual)


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def emit_grid(grid: GridScan, path) -> list[Path]:
    """Write ``alpha1,alpha2,value`` rows plus a JSON sidecar; returns both paths."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha1", "alpha2", "value"])
        for i, a1 in enumerate(grid.alpha1_axis):
            for j, a2 in enumerate(grid.alpha2_axis):
                w.writerow([repr(float(a1)), repr(float(a2)), repr(float(grid.values[i, j]))])
    meta = {"metric": grid.metric, "shape": list(grid.values.shape), **grid.context}
    side = _sidecar(path)
    side.write_text(json.dumps(meta, sort_keys=True, indent=1))
    return [path, side]


def read_grid(path) -> GridScan:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    a1 = sorted({float(r["alpha1"]) for r in rows})
    a2 = sorted({float(r["alpha2"]) for r in rows})
    values = np.array([float(r["value"]) for r in rows]).reshape(len(a1), len(a2))
    ctx = {k: v for k, v in meta.items() if k not in ("metric", "shape")}
    return GridScan(np.array(a1), np.array(a2), values, meta["metric"], ctx)


def emit_curve(curve: Curve, path) -> list[Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "value"])
        for x, v in zip(curve.abscissa, curve.values):
            w.writerow([repr(float(x)), repr(float(v))])
    side = _sidecar(path)
    side.write_text(json.dumps({"kind": curve.kind, **curve.context}, sort_keys=True, indent=1))
    return [path, side]


def read_curve(path) -> Curve:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    ctx = {k: v for k, v in meta.items() if k != "kind"}
    return Curve(np.array([float(r["x"]) for r in rows]), np.array([float(r["value"]) for r in rows]),
                 meta["kind"], ctx)


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1))
    return path
