"""Weak elliptic transmission solves, pressure reconstruction, the weighted
Helmholtz projection and the rigid-motion basis.

The transmission potential lives in continuous P1 with zero trace on the
outer boundary; prescribed interface jumps are imposed strongly through a
plus-side nodal lift, so the doubled representation of the solution
reproduces the jump datum exactly.  The Helmholtz projection is realized
as the eta-weighted L2 projection of nodal fields onto the discretely
weighted-divergence-free subspace (a mixed solve); that algebraic form is
what makes the projection idempotent and exactly orthogonal to rigid
motions in floating point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fem
from .errors import GeometryError, ParameterError, ShapeError
from .fem import Factorized
from .mesh import Field, RefMesh


@dataclass(frozen=True)
class MaterialParams:
    """Piecewise-constant densities and viscosities of the two phases."""

    eta_plus: float
    eta_minus: float
    mu_plus: float
    mu_minus: float

    def __post_init__(self):
        for name in ("eta_plus", "eta_minus", "mu_plus", "mu_minus"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be > 0, got {getattr(self, name)}")

    def eta_cells(self, mesh: RefMesh) -> np.ndarray:
        return np.where(mesh.phase > 0, self.eta_plus, self.eta_minus)

    def mu_cells(self, mesh: RefMesh) -> np.ndarray:
        return np.where(mesh.phase > 0, self.mu_plus, self.mu_minus)

    def eta_sdofs(self, mesh: RefMesh) -> np.ndarray:
        return np.where(mesh.sdof_phase > 0, self.eta_plus, self.eta_minus)

    def mu_sdofs(self, mesh: RefMesh) -> np.ndarray:
        return np.where(mesh.sdof_phase > 0, self.mu_plus, self.mu_minus)


@dataclass
class TransmissionSolution:
    """Discrete transmission potential with its solve diagnostics.

    ``theta`` is a doubled scalar field (the continuous part plus the
    interface-jump lift); ``residual`` is the relative algebraic residual
    of the reduced system and ``stability_ratio`` is the measured
    ||grad theta|| / ||data|| quotient.
    """

    theta: Field
    residual: float
    stability_ratio: float

    def grad_norm(self) -> float:
        return fem.field_h1_semi(self.theta)


class _TransmissionWorkspace:
    """Factorized continuous-P1 transmission operator for one (mesh, eta)."""

    def __init__(self, mesh: RefMesh, params: MaterialParams):
        self.mesh = mesh
        self.params = params
        inv_eta = 1.0 / params.eta_cells(mesh)
        self.stiffness = fem.scalar_stiffness(mesh, mesh.cells, mesh.n_nodes, inv_eta)
        self.free = np.setdiff1d(np.arange(mesh.n_nodes), mesh.gamma_plus_nodes)
        self.lu = Factorized(self.stiffness[np.ix_(self.free, self.free)])

    def solve(self, rhs: np.ndarray, dirichlet: np.ndarray | None = None):
        """Solve for the continuous part with optional Gamma_plus trace."""
        mesh = self.mesh
        theta = np.zeros(mesh.n_nodes)
        if dirichlet is not None:
            theta[mesh.gamma_plus_nodes] = dirichlet
            rhs = rhs - self.stiffness @ theta
        red = rhs[self.free]
        sol = self.lu.solve(red)
        residual = self.lu.residual(sol, red)
        theta[self.free] = sol
        return theta, residual


_workspaces: dict[tuple, _TransmissionWorkspace] = {}


def _workspace(mesh: RefMesh, params: MaterialParams) -> _TransmissionWorkspace:
    key = (id(mesh), params.eta_plus, params.eta_minus)
    ws = _workspaces.get(key)
    if ws is None or ws.mesh is not mesh:
        ws = _TransmissionWorkspace(mesh, params)
        _workspaces[key] = ws
    return ws


def _gradient_rhs_from_field(mesh: RefMesh, f: Field) -> np.ndarray:
    """(f, grad phi) against continuous P1 test functions; exact for P1 f."""
    fc = fem.cell_values(f)                      # (nc, 2)
    return _gradient_rhs_from_cells(mesh, fc)


def _gradient_rhs_from_cells(mesh: RefMesh, w_cells: np.ndarray) -> np.ndarray:
    rhs = np.zeros(mesh.n_nodes)
    contrib = np.einsum("cak,ck->ca", mesh.grads, w_cells) * mesh.areas[:, None]
    np.add.at(rhs, mesh.cells.ravel(), contrib.ravel())
    return rhs


def _jump_lift(mesh: RefMesh, beta: np.ndarray) -> Field:
    """Doubled field whose plus trace equals beta on Gamma and vanishes
    elsewhere; realizes [[theta]] = beta strongly."""
    lift = Field.zeros(mesh, 1)
    lift.values[mesh.sdof_plus[mesh.gamma_nodes], 0] = beta
    return lift


def _compose(mesh: RefMesh, theta_cont: np.ndarray, lift: Field | None) -> Field:
    out = Field.from_nodal(mesh, theta_cont)
    if lift is not None:
        out.values += lift.values
    return out


def solve_weak_transmission(f: Field, params: MaterialParams) -> TransmissionSolution:
    """Weak problem (eta^-1 grad theta, grad phi) = (f, grad phi) with
    theta = 0 on Gamma_plus; theta is continuous across Gamma."""
    mesh = f.mesh
    if f.ncomp != 2:
        raise ShapeError("transmission data must be a vector field")
    if not np.all(np.isfinite(f.values)):
        raise ParameterError("transmission data contain non-finite values")
    ws = _workspace(mesh, params)
    rhs = _gradient_rhs_from_field(mesh, f)
    theta, residual = ws.solve(rhs)
    sol = _compose(mesh, theta, None)
    fnorm = fem.field_l2(f)
    ratio = fem.field_h1_semi(sol) / fnorm if fnorm > 0 else 0.0
    return TransmissionSolution(sol, residual, ratio)


def solve_transmission_with_jumps(alpha: Field, beta: np.ndarray, gamma: np.ndarray,
                                  params: MaterialParams) -> TransmissionSolution:
    """Transmission solve with prescribed interface jump ``beta`` (one value
    per Gamma node) and outer trace ``gamma`` (one value per Gamma_plus
    node); the jump is imposed strongly."""
    mesh = alpha.mesh
    beta = np.asarray(beta, dtype=float).reshape(-1)
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    if beta.shape != mesh.gamma_nodes.shape:
        raise ShapeError("beta must give one value per Gamma node")
    if gamma.shape != mesh.gamma_plus_nodes.shape:
        raise ShapeError("gamma must give one value per Gamma_plus node")
    ws = _workspace(mesh, params)
    rhs = _gradient_rhs_from_field(mesh, alpha)
    return _solve_with_jumps(ws, rhs, beta, gamma,
                             data_norm=fem.field_l2(alpha))


def _solve_with_jumps(ws: _TransmissionWorkspace, rhs: np.ndarray,
                      beta: np.ndarray, gamma: np.ndarray,
                      data_norm: float) -> TransmissionSolution:
    mesh = ws.mesh
    lift = _jump_lift(mesh, beta)
    inv_eta = 1.0 / ws.params.eta_cells(mesh)
    grad_lift = fem.cell_gradients(lift)[:, 0, :]          # (nc, 2)
    rhs = rhs - _gradient_rhs_from_cells(mesh, inv_eta[:, None] * grad_lift)
    theta, residual = ws.solve(rhs, dirichlet=gamma)
    sol = _compose(mesh, theta, lift)
    bnorm = fem.facet_l2(mesh.interface_facets[:, :2], _gamma_lengths(mesh),
                         _expand_gamma(mesh, beta))
    gnorm = fem.facet_l2(mesh.outer_facets[:, :2], _outer_lengths(mesh),
                         _expand_outer(mesh, gamma))
    denom = data_norm + bnorm + gnorm
    ratio = fem.field_h1_semi(sol) / denom if denom > 0 else 0.0
    return TransmissionSolution(sol, residual, ratio)


def _gamma_lengths(mesh: RefMesh) -> np.ndarray:
    return mesh.facet_lengths[:mesh.n_interface_facets]


def _outer_lengths(mesh: RefMesh) -> np.ndarray:
    return mesh.facet_lengths[mesh.n_interface_facets:]


def _expand_gamma(mesh: RefMesh, per_gamma_node: np.ndarray) -> np.ndarray:
    out = np.zeros((mesh.n_nodes,) + per_gamma_node.shape[1:])
    out[mesh.gamma_nodes] = per_gamma_node
    return out


def _expand_outer(mesh: RefMesh, per_outer_node: np.ndarray) -> np.ndarray:
    out = np.zeros((mesh.n_nodes,) + per_outer_node.shape[1:])
    out[mesh.gamma_plus_nodes] = per_outer_node
    return out


def pressure_reconstruct_K(u: Field, params: MaterialParams,
                           grad_u: np.ndarray | None = None) -> TransmissionSolution:
    """Pressure K(u) from the transmission data of the Stokes operator:

        alpha_u = eta^-1 Div(mu D(u)) - grad div u     (weak, via the
                  recovered stress; u is differentiated only once),
        beta_u  = [[mu D(u) n . n]] - [[div u]]        on Gamma,
        gamma_u = (mu D(u) n . n) - div u              on Gamma_plus.

    Rigid fields carry D(u) = 0 and div u = 0 exactly at the nodal level,
    so their reconstructed pressure vanishes.
    """
    mesh = u.mesh
    G = fem.recover_gradient(u) if grad_u is None else np.asarray(grad_u, dtype=float)
    D = G + np.swapaxes(G, 1, 2)                          # (nsdof, 2, 2)
    mu_s = params.mu_sdofs(mesh)
    S = mu_s[:, None, None] * D
    d = G[:, 0, 0] + G[:, 1, 1]                           # div u, nodal

    # alpha_u paired weakly: cellwise divergence of the recovered stress
    s_field = Field(mesh, 4, S.reshape(mesh.nsdof, 4))
    dS = fem.cell_gradients(s_field).reshape(mesh.n_cells, 2, 2, 2)
    div_s = dS[:, :, 0, 0] + dS[:, :, 1, 1]               # sum_k d_k S_{jk}
    grad_d = fem.cell_gradients(Field(mesh, 1, d[:, None]))[:, 0, :]
    inv_eta = 1.0 / params.eta_cells(mesh)
    w_cells = inv_eta[:, None] * div_s - grad_d

    ws = _workspace(mesh, params)
    rhs = _gradient_rhs_from_cells(mesh, w_cells)

    gn = mesh.gamma_nodes
    nrm = mesh.node_normals_gamma
    sp_ = S[mesh.sdof_plus[gn]]
    sm_ = S[mesh.sdof_minus[gn]]
    snn_p = np.einsum("ni,nij,nj->n", nrm, sp_, nrm)
    snn_m = np.einsum("ni,nij,nj->n", nrm, sm_, nrm)
    beta = (snn_p - snn_m) - (d[mesh.sdof_plus[gn]] - d[mesh.sdof_minus[gn]])

    on = mesh.gamma_plus_nodes
    osd = mesh.sdof_minus[on] if mesh.outer_phase < 0 else mesh.sdof_plus[on]
    onrm = mesh.node_normals_outer
    gamma = np.einsum("ni,nij,nj->n", onrm, S[osd], onrm) - d[osd]

    alpha_norm = float(np.sqrt(np.dot(mesh.areas, np.einsum("ck,ck->c", w_cells, w_cells))))
    return _solve_with_jumps(ws, rhs, beta, gamma, data_norm=alpha_norm)


# -- weighted Helmholtz projection ------------------------------------------

class _ProjectionWorkspace:
    """Factorized mixed system of the nodal eta-weighted projection."""

    def __init__(self, mesh: RefMesh, params: MaterialParams):
        self.mesh = mesh
        nn = mesh.n_nodes
        eta_c = params.eta_cells(mesh)
        m_full = fem.velocity_mass(mesh, eta_c)
        g_full = fem.grad_coupling(mesh, mesh.cells, nn)
        nodal = np.arange(2 * nn)
        free = np.setdiff1d(np.arange(nn), mesh.gamma_plus_nodes)
        self.free = free
        m = m_full[np.ix_(nodal, nodal)]
        g = g_full[np.ix_(nodal, free)]
        self.m = m.tocsr()
        system = sp.bmat([[m, g], [g.T, None]], format="csc")
        self.lu = Factorized(system)

    def project(self, fvec: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        rhs = np.concatenate([self.m @ fvec, np.zeros(len(self.free))])
        sol = self.lu.solve(rhs)
        res = self.lu.residual(sol, rhs)
        n = 2 * self.mesh.n_nodes
        return sol[:n], sol[n:], res


_proj_workspaces: dict[tuple, _ProjectionWorkspace] = {}


def _proj_workspace(mesh: RefMesh, params: MaterialParams) -> _ProjectionWorkspace:
    key = (id(mesh), params.eta_plus, params.eta_minus)
    ws = _proj_workspaces.get(key)
    if ws is None or ws.mesh is not mesh:
        ws = _ProjectionWorkspace(mesh, params)
        _proj_workspaces[key] = ws
    return ws


def helmholtz_project(f: Field, params: MaterialParams) -> tuple[Field, Field]:
    """Split f = Pf + Qf with Pf in the discrete weighted-divergence-free
    space {v : (v, grad phi) = 0 for all potentials phi vanishing on
    Gamma_plus} and Qf the eta-weighted gradient complement.

    The split is the algebraic eta-orthogonal projection on nodal fields:
    applying it twice reproduces Pf, the decomposition is exact by
    construction, and (eta Qf, p) = 0 to roundoff for every rigid p.
    """
    mesh = f.mesh
    if f.ncomp != 2:
        raise ShapeError("can only project vector fields")
    ws = _proj_workspace(mesh, params)
    fvec = f.plus().ravel()
    wvec, _, _ = ws.project(fvec)
    pf = Field.from_nodal(mesh, wvec.reshape(mesh.n_nodes, 2))
    qf = f - pf
    return pf, qf


# -- rigid motions -----------------------------------------------------------

@dataclass
class RigidBasis:
    """Orthonormal basis of the rigid motions a + c(-y, x) in the
    eta-weighted inner product; affine coefficients kept alongside the
    nodal fields so the zero-deformation identities are exact."""

    fields: list
    coeffs: list          # (antisymmetric 2x2, offset 2-vector) per member
    gram: np.ndarray

    def __len__(self) -> int:
        return len(self.fields)


def build_rigid_basis(mesh: RefMesh, params: MaterialParams) -> RigidBasis:
    """Gram-Schmidt orthonormalization of {e1, e2, (-y, x)} in (eta ., .)."""
    if mesh.total_area() <= 0:
        raise GeometryError("mesh has zero measure")
    eta_c = params.eta_cells(mesh)
    raw = [
        (np.zeros((2, 2)), np.array([1.0, 0.0])),
        (np.zeros((2, 2)), np.array([0.0, 1.0])),
        (np.array([[0.0, -1.0], [1.0, 0.0]]), np.array([0.0, 0.0])),
    ]
    fields, coeffs = [], []
    for A, b in raw:
        vals = mesh.nodes @ A.T + b
        fld = Field.from_nodal(mesh, vals)
        # two modified Gram-Schmidt sweeps for a Gram matrix at roundoff
        for _ in range(2):
            for prev_f, (pA, pb) in zip(fields, coeffs):
                c = fem.field_inner(fld, prev_f, eta_c)
                fld = fld - c * prev_f
                A = A - c * pA
                b = b - c * pb
        nrm = np.sqrt(fem.field_inner(fld, fld, eta_c))
        if nrm <= 0:
            raise GeometryError("degenerate rigid-motion Gram matrix")
        fields.append(fld * (1.0 / nrm))
        coeffs.append((A / nrm, b / nrm))
    gram = np.array([[fem.field_inner(fa, fb, eta_c) for fb in fields] for fa in fields])
    return RigidBasis(fields, coeffs, gram)


def project_out_rigid(u: Field, basis: RigidBasis, params: MaterialParams) -> Field:
    """Remove the eta-weighted rigid components: u - sum (eta u, p) p."""
    eta_c = params.eta_cells(u.mesh)
    out = u.copy()
    for p in basis.fields:
        out = out - fem.field_inner(out, p, eta_c) * p
    return out


def rigid_momenta(u: Field, basis: RigidBasis, params: MaterialParams) -> np.ndarray:
    eta_c = params.eta_cells(u.mesh)
    return np.array([fem.field_inner(u, p, eta_c) for p in basis.fields])
