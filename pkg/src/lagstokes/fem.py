"""Finite element machinery shared by the transmission, stepper and
fixed-point modules.

Velocity is discretized with the MINI element (continuous P1 enriched by a
cubic cell bubble per component); pressure and other interface-jumping
scalars use P1 with doubled Gamma dofs (see :mod:`lagstokes.mesh`).  All
element integrands assembled here are polynomial, and the 12-point
degree-6 triangle rule integrates every one of them exactly; that
exactness is what makes rigid motions exact discrete equilibria and the
rigid-momentum identities hold to solver roundoff.

Velocity dof layout: 2*i + comp for node i, then 2*n_nodes + 2*c + comp
for the bubble of cell c.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ShapeError, SolverError
from .mesh import Field, RefMesh

# Dunavant 12-point rule, exact for degree 6, weights in area coordinates.
_QW = np.array([0.050844906370207] * 3 + [0.116786275726379] * 3
               + [0.082851075618374] * 6)
_a1, _b1 = 0.873821971016996, 0.063089014491502
_a2, _b2 = 0.501426509658179, 0.249286745170910
_a3, _b3, _c3 = 0.053145049844817, 0.310352451033784, 0.636502499121399
_QL = np.array([
    [_a1, _b1, _b1], [_b1, _a1, _b1], [_b1, _b1, _a1],
    [_a2, _b2, _b2], [_b2, _a2, _b2], [_b2, _b2, _a2],
    [_a3, _b3, _c3], [_a3, _c3, _b3], [_b3, _a3, _c3],
    [_b3, _c3, _a3], [_c3, _a3, _b3], [_c3, _b3, _a3],
])

# 3-point Gauss rule on [0,1], exact for degree 5 edge integrands.
_EQ = np.array([0.5 - np.sqrt(0.15), 0.5, 0.5 + np.sqrt(0.15)])
_EW = np.array([5.0, 8.0, 5.0]) / 18.0

_NQ = len(_QW)
# scalar basis (P1 + bubble) at the quadrature points; cell independent
_NB = 4
_NVALS = np.empty((_NQ, _NB))
_NVALS[:, :3] = _QL
_NVALS[:, 3] = 27.0 * _QL[:, 0] * _QL[:, 1] * _QL[:, 2]


def n_udofs(mesh: RefMesh) -> int:
    return 2 * (mesh.n_nodes + mesh.n_cells)


def nodal_udofs(mesh: RefMesh) -> int:
    return 2 * mesh.n_nodes


def nodal_to_uvec(mesh: RefMesh, nodal: np.ndarray) -> np.ndarray:
    """Velocity dof vector from (n_nodes, 2) nodal values, zero bubbles."""
    if nodal.shape != (mesh.n_nodes, 2):
        raise ShapeError(f"expected ({mesh.n_nodes}, 2) nodal array")
    vec = np.zeros(n_udofs(mesh))
    vec[:2 * mesh.n_nodes] = nodal.ravel()
    return vec


def uvec_nodal(mesh: RefMesh, vec: np.ndarray) -> np.ndarray:
    """(n_nodes, 2) nodal values of a velocity dof vector (bubbles vanish
    at the vertices, so these are the pointwise nodal values)."""
    return vec[:2 * mesh.n_nodes].reshape(mesh.n_nodes, 2)


def uvec_to_field(mesh: RefMesh, vec: np.ndarray) -> Field:
    return Field.from_nodal(mesh, uvec_nodal(mesh, vec))


def field_to_uvec(field: Field) -> np.ndarray:
    if field.ncomp != 2:
        raise ShapeError("velocity field must have 2 components")
    return nodal_to_uvec(field.mesh, field.plus())


def _basis_grads(mesh: RefMesh) -> np.ndarray:
    """Gradients of the 4 scalar basis functions at the quadrature points,
    shape (nc, nq, 4, 2)."""
    nc = mesh.n_cells
    dN = np.empty((nc, _NQ, _NB, 2))
    dN[:, :, :3, :] = mesh.grads[:, None, :, :]
    lam = _QL  # (nq, 3)
    coef = np.stack([lam[:, 1] * lam[:, 2],
                     lam[:, 0] * lam[:, 2],
                     lam[:, 0] * lam[:, 1]], axis=1)  # (nq, 3)
    dN[:, :, 3, :] = 27.0 * np.einsum("qa,caj->cqj", coef, mesh.grads)
    return dN


def _cell_udofs(mesh: RefMesh) -> np.ndarray:
    """(nc, 4, 2) velocity dof ids for the 4 basis functions x 2 components."""
    nc, nn = mesh.n_cells, mesh.n_nodes
    dofs = np.empty((nc, _NB, 2), dtype=np.int64)
    dofs[:, :3, 0] = 2 * mesh.cells
    dofs[:, :3, 1] = 2 * mesh.cells + 1
    cell_ids = np.arange(nc)
    dofs[:, 3, 0] = 2 * nn + 2 * cell_ids
    dofs[:, 3, 1] = 2 * nn + 2 * cell_ids + 1
    return dofs


def _scatter(rows, cols, vals, shape):
    return sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape)


def velocity_mass(mesh: RefMesh, weight_per_cell: np.ndarray) -> sp.csr_matrix:
    """(w u, v) over the MINI space with a cellwise-constant weight."""
    em = np.einsum("q,qa,qb->ab", _QW, _NVALS, _NVALS)  # reference 4x4
    vals = weight_per_cell[:, None, None] * mesh.areas[:, None, None] * em[None]
    dofs = _cell_udofs(mesh)
    n = n_udofs(mesh)
    blocks = []
    for comp in range(2):
        r = np.broadcast_to(dofs[:, :, comp][:, :, None], vals.shape)
        c = np.broadcast_to(dofs[:, :, comp][:, None, :], vals.shape)
        blocks.append(_scatter(r, c, vals, (n, n)))
    return (blocks[0] + blocks[1]).tocsr()


def deformation_stiffness(mesh: RefMesh, mu_per_cell: np.ndarray) -> sp.csr_matrix:
    """a(u, v) = 1/2 (mu D(u), D(v)) with D(w) = grad^T w + grad w^T."""
    dN = _basis_grads(mesh)
    s1 = np.einsum("q,cqaj,cqbj->cab", _QW, dN, dN) * mesh.areas[:, None, None]
    s2 = np.einsum("q,cqam,cqbi->cambi", _QW, dN, dN) * mesh.areas[:, None, None, None, None]
    w = mu_per_cell
    dofs = _cell_udofs(mesh)
    n = n_udofs(mesh)
    out = sp.csr_matrix((n, n))
    for i in range(2):
        for m in range(2):
            vals = w[:, None, None] * ((s1 if i == m else 0.0) + s2[:, :, m, :, i])
            r = np.broadcast_to(dofs[:, :, i][:, :, None], vals.shape)
            c = np.broadcast_to(dofs[:, :, m][:, None, :], vals.shape)
            out = out + _scatter(r, c, vals, (n, n))
    return out.tocsr()


def div_coupling(mesh: RefMesh, cell_scalar_dofs: np.ndarray, n_scalar: int) -> sp.csr_matrix:
    """B[s, udof] = (lambda_s, div v) over the given scalar dof map."""
    dN = _basis_grads(mesh)
    # E[c, s, b, j] = int lambda_s dN_b^j
    e = np.einsum("q,qs,cqbj->csbj", _QW, _QL, dN) * mesh.areas[:, None, None, None]
    dofs = _cell_udofs(mesh)
    n = n_udofs(mesh)
    out = sp.csr_matrix((n_scalar, n))
    for j in range(2):
        vals = e[:, :, :, j]
        r = np.broadcast_to(cell_scalar_dofs[:, :, None], vals.shape)
        c = np.broadcast_to(dofs[:, :, j][:, None, :], vals.shape)
        out = out + _scatter(r, c, vals, (n_scalar, n))
    return out.tocsr()


def grad_coupling(mesh: RefMesh, cell_scalar_dofs: np.ndarray, n_scalar: int) -> sp.csr_matrix:
    """G[udof, s] = (v, grad lambda_s): pairs velocities with scalar
    potential gradients (cellwise constant for P1 potentials)."""
    # int over cell of N_b: P1 -> area/3, bubble -> 9/20 area
    nint = np.array([1 / 3, 1 / 3, 1 / 3, 9 / 20])
    e = np.einsum("b,csj->cbsj", nint, mesh.grads) * mesh.areas[:, None, None, None]
    dofs = _cell_udofs(mesh)
    n = n_udofs(mesh)
    out = sp.csr_matrix((n, n_scalar))
    for j in range(2):
        vals = e[:, :, :, j]
        r = np.broadcast_to(dofs[:, :, j][:, :, None], vals.shape)
        c = np.broadcast_to(cell_scalar_dofs[:, None, :], vals.shape)
        out = out + _scatter(r, c, vals, (n, n_scalar))
    return out.tocsr()


def scalar_mass(mesh: RefMesh, cell_scalar_dofs: np.ndarray, n_scalar: int,
                weight_per_cell: np.ndarray | None = None) -> sp.csr_matrix:
    """(w f, g) over the P1 scalar space given by the dof map."""
    w = np.ones(mesh.n_cells) if weight_per_cell is None else weight_per_cell
    em = (np.ones((3, 3)) + np.eye(3)) / 12.0
    vals = w[:, None, None] * mesh.areas[:, None, None] * em[None]
    r = np.broadcast_to(cell_scalar_dofs[:, :, None], vals.shape)
    c = np.broadcast_to(cell_scalar_dofs[:, None, :], vals.shape)
    return _scatter(r, c, vals, (n_scalar, n_scalar))


def scalar_stiffness(mesh: RefMesh, cell_scalar_dofs: np.ndarray, n_scalar: int,
                     weight_per_cell: np.ndarray | None = None) -> sp.csr_matrix:
    """(w grad f, grad g) over the P1 scalar space given by the dof map."""
    w = np.ones(mesh.n_cells) if weight_per_cell is None else weight_per_cell
    vals = np.einsum("caj,cbj->cab", mesh.grads, mesh.grads)
    vals = vals * (w * mesh.areas)[:, None, None]
    r = np.broadcast_to(cell_scalar_dofs[:, :, None], vals.shape)
    c = np.broadcast_to(cell_scalar_dofs[:, None, :], vals.shape)
    return _scatter(r, c, vals, (n_scalar, n_scalar))


# -- facet (edge) integrals ------------------------------------------------

def _edge_mass(length: float) -> np.ndarray:
    return length / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])


def facet_load(mesh: RefMesh, facet_nodes: np.ndarray, facet_lengths: np.ndarray,
               nodal_values: np.ndarray) -> np.ndarray:
    """Velocity load vector for a surface term (w, v) with w given by P1
    nodal values on the facet nodes; bubble traces vanish on edges."""
    load = np.zeros(n_udofs(mesh))
    for (a, b), length in zip(facet_nodes, facet_lengths):
        em = _edge_mass(length)
        wa, wb = nodal_values[a], nodal_values[b]
        for comp in range(2):
            load[2 * a + comp] += em[0, 0] * wa[comp] + em[0, 1] * wb[comp]
            load[2 * b + comp] += em[1, 0] * wa[comp] + em[1, 1] * wb[comp]
    return load


def facet_inner(facet_nodes: np.ndarray, facet_lengths: np.ndarray,
                fa: np.ndarray, fb: np.ndarray) -> float:
    """Surface inner product of two P1-nodal (n_nodes, k) arrays."""
    total = 0.0
    for (a, b), length in zip(facet_nodes, facet_lengths):
        em = _edge_mass(length)
        va, vb = np.atleast_1d(fa[a]), np.atleast_1d(fa[b])
        wa, wb = np.atleast_1d(fb[a]), np.atleast_1d(fb[b])
        total += em[0, 0] * va @ wa + em[0, 1] * va @ wb \
            + em[1, 0] * vb @ wa + em[1, 1] * vb @ wb
    return float(total)


def facet_l2(facet_nodes: np.ndarray, facet_lengths: np.ndarray, f: np.ndarray) -> float:
    return float(np.sqrt(max(facet_inner(facet_nodes, facet_lengths, f, f), 0.0)))


# -- cell gradients and nodal recovery --------------------------------------

def cell_gradients(field: Field) -> np.ndarray:
    """Exact cellwise Jacobian of a P1 field: (nc, ncomp, 2) with
    G[c, j, k] = d f^j / d xi_k on cell c."""
    mesh = field.mesh
    vals = field.values[mesh.cell_sdofs]            # (nc, 3, ncomp)
    return np.einsum("cav,cak->cvk", vals, mesh.grads)


def cell_values(field: Field) -> np.ndarray:
    """Cell-centroid values of a P1 field, (nc, ncomp)."""
    return field.values[field.mesh.cell_sdofs].mean(axis=1)


def recover_nodal(mesh: RefMesh, cell_data: np.ndarray) -> np.ndarray:
    """Volume-weighted average of cellwise data onto scalar dofs.

    Each cell contributes to its own-side dofs, so interface nodes receive
    separate plus/minus traces.  Returns (nsdof, ...) matching the trailing
    shape of ``cell_data``; deterministic accumulation in cell order.
    """
    trail = cell_data.shape[1:]
    acc = np.zeros((mesh.nsdof,) + trail)
    wsum = np.zeros(mesh.nsdof)
    w = mesh.areas
    for a in range(3):
        dofs = mesh.cell_sdofs[:, a]
        np.add.at(acc, dofs, cell_data * w.reshape((-1,) + (1,) * len(trail)))
        np.add.at(wsum, dofs, w)
    return acc / wsum.reshape((-1,) + (1,) * len(trail))


def recover_gradient(field: Field) -> np.ndarray:
    """Nodal Jacobian recovery: cellwise differentiation then volume-weighted
    per-phase averaging; exact for globally linear fields."""
    return recover_nodal(field.mesh, cell_gradients(field))


# -- norms -------------------------------------------------------------------

def field_l2(field: Field, weight_per_cell: np.ndarray | None = None) -> float:
    mesh = field.mesh
    w = mesh.areas if weight_per_cell is None else mesh.areas * weight_per_cell
    vals = field.values[mesh.cell_sdofs]            # (nc, 3, ncomp)
    em = (np.ones((3, 3)) + np.eye(3)) / 12.0
    sq = np.einsum("cav,ab,cbv->c", vals, em, vals)
    return float(np.sqrt(max(np.dot(w, sq), 0.0)))


def field_h1_semi(field: Field) -> float:
    g = cell_gradients(field)
    sq = np.einsum("cvk,cvk->c", g, g)
    return float(np.sqrt(max(np.dot(field.mesh.areas, sq), 0.0)))


def field_h1(field: Field) -> float:
    return float(np.hypot(field_l2(field), field_h1_semi(field)))


def field_integral(field: Field) -> np.ndarray:
    """Exact integral of a P1 field over the broken domain, per component."""
    mesh = field.mesh
    vals = field.values[mesh.cell_sdofs]
    return np.einsum("c,cav->v", mesh.areas / 3.0, vals)


def field_inner(fa: Field, fb: Field, weight_per_cell: np.ndarray | None = None) -> float:
    mesh = fa.mesh
    w = mesh.areas if weight_per_cell is None else mesh.areas * weight_per_cell
    va = fa.values[mesh.cell_sdofs]
    vb = fb.values[mesh.cell_sdofs]
    em = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return float(np.dot(w, np.einsum("cav,ab,cbv->c", va, em, vb)))


def hessian_seminorm(field: Field) -> float:
    """L2 norm of the cellwise gradient of the recovered Jacobian; the
    second-difference surrogate used in trajectory norms."""
    mesh = field.mesh
    g = recover_gradient(field)                       # (nsdof, ncomp, 2)
    flat = Field(mesh, field.ncomp * 2, g.reshape(mesh.nsdof, -1))
    return field_h1_semi(flat)


def interpolate(mesh: RefMesh, fn, ncomp: int = 1) -> Field:
    """Continuous nodal interpolant of fn(x, y) -> (ncomp,)."""
    vals = np.array([np.atleast_1d(fn(x, y)) for x, y in mesh.nodes], dtype=float)
    if vals.shape[1] != ncomp:
        raise ShapeError(f"function returned {vals.shape[1]} components, expected {ncomp}")
    return Field.from_nodal(mesh, vals)


def interpolate_two_phase(mesh: RefMesh, fn_plus, fn_minus, ncomp: int = 1) -> Field:
    """Doubled interpolant with independent plus/minus expressions."""
    vp = np.array([np.atleast_1d(fn_plus(x, y)) for x, y in mesh.nodes], dtype=float)
    vm = np.array([np.atleast_1d(fn_minus(x, y)) for x, y in mesh.nodes], dtype=float)
    return Field.from_phase_traces(mesh, vp, vm)


# -- linear solver wrapper -----------------------------------------------------

class Factorized:
    """Deterministic sparse LU with residual reporting."""

    def __init__(self, matrix: sp.spmatrix):
        self.matrix = matrix.tocsc()
        try:
            self._lu = spla.splu(self.matrix)
        except RuntimeError as exc:  # pragma: no cover - depends on data
            raise SolverError(f"sparse factorization failed: {exc}") from exc

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x = self._lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SolverError("linear solve produced non-finite values")
        return x

    def residual(self, x: np.ndarray, rhs: np.ndarray) -> float:
        r = self.matrix @ x - rhs
        scale = max(float(np.linalg.norm(rhs)), 1e-300)
        return float(np.linalg.norm(r)) / scale
