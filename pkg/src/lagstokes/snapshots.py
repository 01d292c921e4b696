"""Bit-stable plain-text serialization: field snapshots and CSV reports.

Floats are written with 17 significant digits, which round-trips IEEE
doubles exactly, so read(write(x)) == x bitwise for finite values.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError
from .mesh import Field, RefMesh

FIELD_FORMAT_HEADER = "LAGSTOKES-FIELD v1"
_FLOAT = "%.17g"


def write_field(field: Field, path, time: float = 0.0, mesh_hash: str | None = None) -> None:
    mesh = field.mesh
    lines = [FIELD_FORMAT_HEADER,
             "time " + _FLOAT % time,
             f"mesh {mesh_hash or mesh.mesh_hash()}",
             f"ncomp {field.ncomp}",
             f"nsdof {mesh.nsdof}"]
    lines += [" ".join(_FLOAT % v for v in row) for row in field.values]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_field(mesh: RefMesh, path) -> tuple[Field, float]:
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if lines[0] != FIELD_FORMAT_HEADER:
        raise ParameterError(f"unexpected field header {lines[0]!r}")
    time = float(lines[1].split()[1])
    file_hash = lines[2].split()[1]
    if file_hash != mesh.mesh_hash():
        raise ShapeError("snapshot belongs to a different mesh "
                         f"({file_hash} != {mesh.mesh_hash()})")
    ncomp = int(lines[3].split()[1])
    nsdof = int(lines[4].split()[1])
    if nsdof != mesh.nsdof:
        raise ShapeError("snapshot dof count does not match the mesh")
    values = np.array([[float(tok) for tok in lines[5 + i].split()]
                       for i in range(nsdof)])
    return Field(mesh, ncomp, values.reshape(nsdof, ncomp)), time


def write_csv(path, columns: dict) -> None:
    """Write named columns with frozen order and 17-digit floats."""
    names = list(columns)
    arrays = [np.asarray(columns[n]) for n in names]
    length = len(arrays[0])
    for name, arr in zip(names, arrays):
        if len(arr) != length:
            raise ShapeError(f"column {name!r} has length {len(arr)} != {length}")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(names) + "\n")
        for i in range(length):
            row = []
            for arr in arrays:
                v = arr[i]
                row.append(_FLOAT % v if np.issubdtype(arr.dtype, np.floating)
                           else str(v))
            fh.write(",".join(row) + "\n")


def read_csv(path) -> dict:
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    names = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:] if line]
    out = {}
    for j, name in enumerate(names):
        col = [row[j] for row in rows]
        try:
            out[name] = np.array([float(v) for v in col])
        except ValueError:
            out[name] = np.array(col)
    return out
