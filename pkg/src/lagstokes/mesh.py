"""Two-phase reference domain: concentric 2-D droplet mesh with a labeled
interface.

The reference configuration is fixed for all time: an inner disk (phase +)
surrounded by an annulus (phase -), separated by the interface Gamma at
r_inner and bounded by the outer free boundary Gamma_plus at r_outer.
Scalar fields may jump across Gamma, so interface nodes carry doubled
scalar degrees of freedom (a plus-side and a minus-side value); velocity
uses the single-valued nodal layout since the velocity jump vanishes.

Orientation convention, used consistently by every downstream module:
the interface normal n points from the plus phase into the minus phase,
and jump(f) = (plus-side trace) - (minus-side trace).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DomainError, FacetLookupError, ParameterError, ShapeError

MESH_FORMAT_HEADER = "LAGSTOKES-MESH v1"

_UNIT_TOL = 1e-14


@dataclass(frozen=True)
class RefMesh:
    """Immutable triangulated two-phase reference domain.

    Facet ids are global: interface facets come first (0 .. n_interface-1),
    then outer facets.  Interface facets store the adjacent plus and minus
    cells; outer facets store their single owner cell.
    """

    nodes: np.ndarray            # (nn, 2)
    cells: np.ndarray            # (nc, 3) CCW vertex ids
    phase: np.ndarray            # (nc,) +1 or -1
    interface_facets: np.ndarray  # (ni, 4): node0, node1, plus_cell, minus_cell
    outer_facets: np.ndarray     # (no, 3): node0, node1, cell
    outer_phase: int             # phase label of cells touching Gamma_plus
    gamma_minus_facets: tuple = ()   # container-case wall; carried, unused

    # derived quantities, filled in __post_init__
    gamma_nodes: np.ndarray = dc_field(default=None, repr=False)
    gamma_plus_nodes: np.ndarray = dc_field(default=None, repr=False)
    areas: np.ndarray = dc_field(default=None, repr=False)
    grads: np.ndarray = dc_field(default=None, repr=False)   # (nc, 3, 2) barycentric gradients
    facet_normals: np.ndarray = dc_field(default=None, repr=False)
    facet_lengths: np.ndarray = dc_field(default=None, repr=False)
    sdof_plus: np.ndarray = dc_field(default=None, repr=False)
    sdof_minus: np.ndarray = dc_field(default=None, repr=False)
    cell_sdofs: np.ndarray = dc_field(default=None, repr=False)
    sdof_phase: np.ndarray = dc_field(default=None, repr=False)
    node_normals_gamma: np.ndarray = dc_field(default=None, repr=False)
    node_normals_outer: np.ndarray = dc_field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.ascontiguousarray(self.nodes, dtype=float))
        object.__setattr__(self, "cells", np.ascontiguousarray(self.cells, dtype=np.int64))
        object.__setattr__(self, "phase", np.ascontiguousarray(self.phase, dtype=np.int64))
        object.__setattr__(self, "interface_facets",
                           np.ascontiguousarray(self.interface_facets, dtype=np.int64).reshape(-1, 4))
        object.__setattr__(self, "outer_facets",
                           np.ascontiguousarray(self.outer_facets, dtype=np.int64).reshape(-1, 3))
        self._build_geometry()
        self._build_scalar_dofs()
        self._build_facets()
        for name in ("nodes", "cells", "phase", "interface_facets", "outer_facets",
                     "gamma_nodes", "gamma_plus_nodes", "areas", "grads",
                     "facet_normals", "facet_lengths", "sdof_plus", "sdof_minus",
                     "cell_sdofs", "sdof_phase", "node_normals_gamma", "node_normals_outer"):
            getattr(self, name).flags.writeable = False

    # -- construction helpers -------------------------------------------------

    def _build_geometry(self):
        x = self.nodes[self.cells]                       # (nc, 3, 2)
        e1 = x[:, 1] - x[:, 0]
        e2 = x[:, 2] - x[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(det <= 0):
            raise ParameterError("mesh contains non-CCW or degenerate cells")
        areas = 0.5 * det
        # gradients of the three barycentric coordinates on each cell
        grads = np.empty((len(self.cells), 3, 2))
        grads[:, 1, 0] = e2[:, 1] / det
        grads[:, 1, 1] = -e2[:, 0] / det
        grads[:, 2, 0] = -e1[:, 1] / det
        grads[:, 2, 1] = e1[:, 0] / det
        grads[:, 0] = -grads[:, 1] - grads[:, 2]
        object.__setattr__(self, "areas", areas)
        object.__setattr__(self, "grads", grads)

    def _build_scalar_dofs(self):
        nn = len(self.nodes)
        gamma_nodes = np.unique(self.interface_facets[:, :2])
        gamma_plus_nodes = np.unique(self.outer_facets[:, :2])
        sdof_plus = np.arange(nn, dtype=np.int64)
        sdof_minus = np.arange(nn, dtype=np.int64)
        sdof_minus[gamma_nodes] = nn + np.arange(len(gamma_nodes))
        cell_sdofs = np.where((self.phase[:, None] > 0),
                              sdof_plus[self.cells], sdof_minus[self.cells])
        sdof_phase = np.zeros(nn + len(gamma_nodes), dtype=np.int64)
        for a in range(3):
            sdof_phase[cell_sdofs[:, a]] = self.phase
        sdof_phase[sdof_plus[gamma_nodes]] = 1
        sdof_phase[sdof_minus[gamma_nodes]] = -1
        object.__setattr__(self, "sdof_phase", sdof_phase)
        object.__setattr__(self, "gamma_nodes", gamma_nodes)
        object.__setattr__(self, "gamma_plus_nodes", gamma_plus_nodes)
        object.__setattr__(self, "sdof_plus", sdof_plus)
        object.__setattr__(self, "sdof_minus", sdof_minus)
        object.__setattr__(self, "cell_sdofs", cell_sdofs)

    def _build_facets(self):
        centroids = self.nodes[self.cells].mean(axis=1)
        nf = len(self.interface_facets) + len(self.outer_facets)
        normals = np.empty((nf, 2))
        lengths = np.empty(nf)
        for k, (a, b, cplus, cminus) in enumerate(self.interface_facets):
            if self.phase[cplus] != 1 or self.phase[cminus] != -1:
                raise ParameterError(f"interface facet {k} is not shared by one + and one - cell")
            normals[k], lengths[k] = _edge_normal(self.nodes[a], self.nodes[b],
                                                  away_from=centroids[cplus])
        off = len(self.interface_facets)
        for k, (a, b, c) in enumerate(self.outer_facets):
            if self.phase[c] != self.outer_phase:
                raise ParameterError(f"outer facet {k} owner phase disagrees with outer_phase")
            normals[off + k], lengths[off + k] = _edge_normal(self.nodes[a], self.nodes[b],
                                                              away_from=centroids[c])
        object.__setattr__(self, "facet_normals", normals)
        object.__setattr__(self, "facet_lengths", lengths)
        object.__setattr__(self, "node_normals_gamma",
                           _node_normals(self, self.gamma_nodes, self.interface_facets[:, :2],
                                         normals[:off]))
        object.__setattr__(self, "node_normals_outer",
                           _node_normals(self, self.gamma_plus_nodes, self.outer_facets[:, :2],
                                         normals[off:]))

    # -- queries ---------------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_interface_facets(self) -> int:
        return len(self.interface_facets)

    @property
    def n_facets(self) -> int:
        return len(self.interface_facets) + len(self.outer_facets)

    @property
    def nsdof(self) -> int:
        """Scalar dof count: one per node plus one extra per interface node."""
        return self.n_nodes + len(self.gamma_nodes)

    def is_interface_facet(self, facet: int) -> bool:
        self._check_facet(facet)
        return facet < len(self.interface_facets)

    def facet_nodes(self, facet: int) -> np.ndarray:
        self._check_facet(facet)
        if facet < len(self.interface_facets):
            return self.interface_facets[facet, :2]
        return self.outer_facets[facet - len(self.interface_facets), :2]

    def _check_facet(self, facet: int):
        if not 0 <= facet < self.n_facets:
            raise FacetLookupError(f"unknown facet id {facet}")

    def total_area(self) -> float:
        return float(self.areas.sum())

    def mesh_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.nodes, self.cells, self.phase,
                    self.interface_facets, self.outer_facets):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.outer_phase).encode())
        return h.hexdigest()[:16]

    def validate(self):
        """Re-check the structural invariants; raises ParameterError."""
        if np.any(self.areas <= 0):
            raise ParameterError("non-positive cell area")
        nrm = np.linalg.norm(self.facet_normals, axis=1)
        if np.any(np.abs(nrm - 1.0) > _UNIT_TOL):
            raise ParameterError("facet normal not unit length")
        for a, b, cp, cm in self.interface_facets:
            if self.phase[cp] != 1 or self.phase[cm] != -1:
                raise ParameterError("interface facet phase pairing broken")


def _edge_normal(xa: np.ndarray, xb: np.ndarray, away_from: np.ndarray):
    t = xb - xa
    length = float(np.hypot(t[0], t[1]))
    n = np.array([t[1], -t[0]]) / length
    mid = 0.5 * (xa + xb)
    if np.dot(n, away_from - mid) > 0:
        n = -n
    return n, length


def _node_normals(mesh: RefMesh, nodes: np.ndarray, facet_nodes: np.ndarray,
                  facet_normals: np.ndarray) -> np.ndarray:
    """Unit node normals as the normalized average of adjacent facet normals."""
    acc = np.zeros((mesh.n_nodes, 2))
    np.add.at(acc, facet_nodes[:, 0], facet_normals)
    np.add.at(acc, facet_nodes[:, 1], facet_normals)
    out = acc[nodes]
    nrm = np.linalg.norm(out, axis=1, keepdims=True)
    return out / nrm


def build_two_phase_disk(n_radial: int, n_angular: int,
                         r_inner: float, r_outer: float) -> RefMesh:
    """Concentric two-phase disk: inner disk labeled +, annulus labeled -.

    ``n_radial`` radial layers per phase, ``n_angular`` nodes per ring.  The
    circle of radius ``r_inner`` is the interface Gamma and the circle of
    radius ``r_outer`` is the free boundary Gamma_plus (so outer facets
    belong to minus cells: the annulus-droplet configuration).
    """
    if n_radial < 2:
        raise ParameterError(f"n_radial must be >= 2, got {n_radial}")
    if n_angular < 8:
        raise ParameterError(f"n_angular must be >= 8, got {n_angular}")
    if not (0.0 < r_inner < r_outer):
        raise ParameterError(f"need 0 < r_inner < r_outer, got {r_inner}, {r_outer}")

    radii = np.concatenate([
        r_inner * np.arange(1, n_radial + 1) / n_radial,
        r_inner + (r_outer - r_inner) * np.arange(1, n_radial + 1) / n_radial,
    ])
    theta = 2 * np.pi * np.arange(n_angular) / n_angular
    nodes = [np.zeros((1, 2))]
    for r in radii:
        nodes.append(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))
    nodes = np.vstack(nodes)

    def ring(i):  # node ids of ring i (1-based; ring 0 is the center point)
        return 1 + (i - 1) * n_angular + np.arange(n_angular)

    cells = []
    r1 = ring(1)
    for k in range(n_angular):
        cells.append((0, r1[k], r1[(k + 1) % n_angular]))
    for i in range(1, 2 * n_radial):
        a, b = ring(i), ring(i + 1)
        for k in range(n_angular):
            k1 = (k + 1) % n_angular
            cells.append((a[k], b[k], b[k1]))
            cells.append((a[k], b[k1], a[k1]))
    cells = np.array(cells, dtype=np.int64)

    # phase by centroid radius
    centroids = nodes[cells].mean(axis=1)
    phase = np.where(np.hypot(centroids[:, 0], centroids[:, 1]) < r_inner, 1, -1)

    # edge -> adjacent cells
    edge_cells: dict[tuple[int, int], list[int]] = {}
    for c, (v0, v1, v2) in enumerate(cells):
        for a, b in ((v0, v1), (v1, v2), (v2, v0)):
            edge_cells.setdefault((min(a, b), max(a, b)), []).append(c)

    interface, outer = [], []
    for (a, b), adj in edge_cells.items():
        if len(adj) == 2 and phase[adj[0]] != phase[adj[1]]:
            cp, cm = (adj[0], adj[1]) if phase[adj[0]] == 1 else (adj[1], adj[0])
            interface.append((a, b, cp, cm))
        elif len(adj) == 1:
            outer.append((a, b, adj[0]))
    interface.sort()
    outer.sort()

    return RefMesh(nodes=nodes, cells=cells, phase=phase,
                   interface_facets=np.array(interface, dtype=np.int64),
                   outer_facets=np.array(outer, dtype=np.int64),
                   outer_phase=-1)


def facet_normal(mesh: RefMesh, facet: int) -> np.ndarray:
    """Unit normal of a facet: on Gamma it points from the plus phase into
    the minus phase, on Gamma_plus out of the domain."""
    mesh._check_facet(facet)
    return mesh.facet_normals[facet].copy()


@dataclass
class Field:
    """Nodal values on the reference mesh, with doubled interface dofs.

    ``values`` has shape (mesh.nsdof, ncomp): row i < n_nodes is the
    plus-side value at node i (and the only value away from Gamma); the
    trailing rows hold the minus-side traces of the interface nodes.
    """

    mesh: RefMesh
    ncomp: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.nsdof, self.ncomp):
            raise ShapeError(
                f"field values shape {self.values.shape} != ({self.mesh.nsdof}, {self.ncomp})")

    @classmethod
    def zeros(cls, mesh: RefMesh, ncomp: int = 1) -> "Field":
        return cls(mesh, ncomp, np.zeros((mesh.nsdof, ncomp)))

    @classmethod
    def from_nodal(cls, mesh: RefMesh, nodal: np.ndarray) -> "Field":
        """Continuous field from per-node values: both interface traces share
        the node value exactly."""
        nodal = np.asarray(nodal, dtype=float)
        if nodal.ndim == 1:
            nodal = nodal[:, None]
        if nodal.shape[0] != mesh.n_nodes:
            raise ShapeError(f"expected {mesh.n_nodes} nodal rows, got {nodal.shape[0]}")
        values = np.empty((mesh.nsdof, nodal.shape[1]))
        values[:mesh.n_nodes] = nodal
        values[mesh.n_nodes:] = nodal[mesh.gamma_nodes]
        return cls(mesh, nodal.shape[1], values)

    @classmethod
    def from_phase_traces(cls, mesh: RefMesh, plus: np.ndarray, minus: np.ndarray) -> "Field":
        """Field from separate per-node plus/minus trace arrays."""
        plus = np.atleast_2d(np.asarray(plus, dtype=float).T).T
        minus = np.atleast_2d(np.asarray(minus, dtype=float).T).T
        if plus.shape != minus.shape or plus.shape[0] != mesh.n_nodes:
            raise ShapeError("trace arrays must both be (n_nodes, ncomp)")
        values = np.empty((mesh.nsdof, plus.shape[1]))
        # interior nodes take the value of their own phase; Gamma nodes
        # (sdof_phase +1 on the primary dof) keep both traces
        own_plus = mesh.sdof_phase[:mesh.n_nodes] > 0
        values[:mesh.n_nodes] = np.where(own_plus[:, None], plus, minus)
        values[mesh.n_nodes:] = minus[mesh.gamma_nodes]
        return cls(mesh, plus.shape[1], values)

    def plus(self) -> np.ndarray:
        """Per-node values with the plus-side trace on Gamma nodes."""
        return self.values[self.mesh.sdof_plus]

    def minus(self) -> np.ndarray:
        """Per-node values with the minus-side trace on Gamma nodes."""
        return self.values[self.mesh.sdof_minus]

    def copy(self) -> "Field":
        return Field(self.mesh, self.ncomp, self.values.copy())

    def __add__(self, other: "Field") -> "Field":
        self._check_compatible(other)
        return Field(self.mesh, self.ncomp, self.values + other.values)

    def __sub__(self, other: "Field") -> "Field":
        self._check_compatible(other)
        return Field(self.mesh, self.ncomp, self.values - other.values)

    def __mul__(self, scalar: float) -> "Field":
        return Field(self.mesh, self.ncomp, self.values * float(scalar))

    __rmul__ = __mul__

    def _check_compatible(self, other: "Field"):
        if other.mesh is not self.mesh or other.ncomp != self.ncomp:
            raise ShapeError("fields live on different meshes or component counts")


def jump(field: Field, facet: int) -> np.ndarray:
    """Interface jump of a field at a Gamma facet midpoint:
    (plus-side trace) - (minus-side trace), one value per component."""
    mesh = field.mesh
    mesh._check_facet(facet)
    if not mesh.is_interface_facet(facet):
        raise DomainError(f"facet {facet} is not on the interface Gamma")
    a, b = mesh.interface_facets[facet, :2]
    vp = 0.5 * (field.values[mesh.sdof_plus[a]] + field.values[mesh.sdof_plus[b]])
    vm = 0.5 * (field.values[mesh.sdof_minus[a]] + field.values[mesh.sdof_minus[b]])
    return vp - vm


# -- plain-text mesh format ----------------------------------------------------

def write_mesh(mesh: RefMesh, path) -> None:
    """Write the mesh in the LAGSTOKES-MESH v1 plain-text format."""
    lines = [MESH_FORMAT_HEADER,
             f"outer_phase {mesh.outer_phase}",
             f"nodes {mesh.n_nodes}"]
    lines += ["%.17g %.17g" % (x, y) for x, y in mesh.nodes]
    lines.append(f"cells {mesh.n_cells}")
    lines += ["%d %d %d %d" % (v0, v1, v2, p)
              for (v0, v1, v2), p in zip(mesh.cells, mesh.phase)]
    lines.append(f"interface_facets {len(mesh.interface_facets)}")
    lines += ["%d %d %d %d" % tuple(row) for row in mesh.interface_facets]
    lines.append(f"outer_facets {len(mesh.outer_facets)}")
    lines += ["%d %d %d" % tuple(row) for row in mesh.outer_facets]
    lines.append(f"gamma_minus_facets {len(mesh.gamma_minus_facets)}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path) -> RefMesh:
    """Read a LAGSTOKES-MESH v1 file written by :func:`write_mesh`."""
    with open(path, encoding="ascii") as fh:
        toks = fh.read().split("\n")
    if toks[0] != MESH_FORMAT_HEADER:
        raise ParameterError(f"unexpected mesh header {toks[0]!r}")
    i = 1
    outer_phase = int(toks[i].split()[1]); i += 1

    def block(name, width, dtype):
        nonlocal i
        tag, count = toks[i].split()
        if tag != name:
            raise ParameterError(f"expected block {name!r}, found {tag!r}")
        count = int(count); i += 1
        rows = [toks[i + k].split() for k in range(count)]
        i += count
        return np.array(rows, dtype=dtype).reshape(count, width)

    nodes = block("nodes", 2, float)
    cellrows = block("cells", 4, np.int64)
    interface = block("interface_facets", 4, np.int64)
    outer = block("outer_facets", 3, np.int64)
    return RefMesh(nodes=nodes, cells=cellrows[:, :3], phase=cellrows[:, 3],
                   interface_facets=interface, outer_facets=outer,
                   outer_phase=outer_phase)
