"""Field and report export: legacy VTK, CSV iteration logs, JSON reports."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import fields
from pathlib import Path

import numpy as np

from .geometry import Mesh

__all__ = [
    "complex_entries",
    "load_deformation",
    "mesh_hash",
    "save_deformation",
    "write_iteration_log",
    "write_json",
    "write_vtk",
]

VTK_QUAD = 9


def mesh_hash(mesh: Mesh) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(mesh.cells, dtype="<i8").tobytes())
    return h.hexdigest()


def write_vtk(path, mesh: Mesh, point_data: dict | None = None, cell_data: dict | None = None, displacement=None, title: str = "unit cell"):
    """Write an ASCII legacy VTK unstructured grid of quadrilaterals.

    ``point_data`` and ``cell_data`` map names to arrays of shape ``(n,)``
    (scalars) or ``(n, 2)`` (vectors, padded with a zero z component).
    If ``displacement`` is given the points are moved by it.
    """
    pts = mesh.vertices if displacement is None else mesh.vertices + np.asarray(displacement)
    n, m = len(pts), len(mesh.cells)
    lines = ["# vtk DataFile Version 3.0", title[:255].replace("\n", " "), "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {n} double")
    lines += [f"{x!r} {y!r} 0.0" for x, y in pts]
    lines.append(f"CELLS {m} {5 * m}")
    lines += ["4 " + " ".join(map(str, c)) for c in mesh.cells]
    lines.append(f"CELL_TYPES {m}")
    lines += [str(VTK_QUAD)] * m

    def block(kind, count, data):
        if not data:
            return
        lines.append(f"{kind} {count}")
        for name, arr in data.items():
            arr = np.asarray(arr, dtype=float)
            if arr.shape[0] != count:
                raise ValueError(f"field {name!r} has {arr.shape[0]} entries, expected {count}")
            if arr.ndim == 1:
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines.extend(repr(float(a)) for a in arr)
            elif arr.shape[1:] == (2,):
                lines.append(f"VECTORS {name} double")
                lines.extend(f"{a!r} {b!r} 0.0" for a, b in arr.tolist())
            else:
                raise ValueError(f"field {name!r} must be scalar or 2-vector")

    block("POINT_DATA", n, point_data)
    block("CELL_DATA", m, cell_data)
    Path(path).write_text("\n".join(lines) + "\n")


def save_deformation(path, q: np.ndarray):
    """Nodal displacement ``(n_vertices, 2)`` as plain text."""
    np.savetxt(path, np.asarray(q, dtype=float), fmt="%.17g", header="qx qy")


def load_deformation(path, n_vertices: int) -> np.ndarray:
    q = np.loadtxt(path, ndmin=2)
    if q.shape != (n_vertices, 2):
        raise ValueError(f"{path}: expected {n_vertices} rows of 2 values, got shape {q.shape}")
    return q


def complex_entries(value: np.ndarray) -> dict:
    """2x2 complex tensor as ``{"xx": {"re":..., "im":...}, ...}``."""
    names = ("x", "y")
    return {names[i] + names[j]: {"re": float(value[i, j].real), "im": float(value[i, j].imag)} for i in range(2) for j in range(2)}


def write_json(path, payload: dict):
    Path(path).write_text(json.dumps(payload, indent=2, allow_nan=True) + "\n")


def write_iteration_log(path, records, fmt: str = "csv"):
    if fmt == "json":
        write_json(path, {"records": [r.as_dict() for r in records]})
        return
    if not records:
        Path(path).write_text("")
        return
    names = [f.name for f in fields(records[0])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for r in records:
            w.writerow([repr(getattr(r, k)) if isinstance(getattr(r, k), float) else getattr(r, k) for k in names])
