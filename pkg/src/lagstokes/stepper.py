"""Implicit time integration of the linear two-phase Stokes system with
interface transmission and free-boundary traction conditions.

One backward-Euler step solves the saddle-point system

    (eta (u' - u)/dt, v) + 1/2 (mu D(u'), D(v)) - (q', div v)
        = (eta f, v) + (h, v)_Gamma + (k, v)_Gamma+ + stress terms,
    (div u', phi) = (g, phi),

with MINI velocities and doubled P1 pressure.  Traction data enter as
natural boundary terms of the integration-by-parts identity, so rigid
motions (zero deformation, zero divergence) are exact discrete equilibria
and the rigid momenta are conserved to solver roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp

from . import fem
from .errors import (DataError, NumericError, ParameterError, ResolventError,
                     ShapeError)
from .fem import Factorized
from .mesh import Field, RefMesh
from .transmission import MaterialParams, RigidBasis, build_rigid_basis

_DATA_CONSISTENCY_TOL = 1e-8
_KORN_DENSE_LIMIT = 3200


@dataclass
class StokesState:
    """Velocity-pressure pair at one time level.

    ``u`` is the nodal velocity field (the bubble enrichment vanishes at
    nodes; its coefficients are kept in ``bubble`` so that restarts and
    conserved quantities see the full discrete vector).
    """

    u: Field
    q: Field
    t: float
    bubble: np.ndarray | None = None

    def uvec(self) -> np.ndarray:
        vec = fem.field_to_uvec(self.u)
        if self.bubble is not None:
            vec[2 * self.u.mesh.n_nodes:] = self.bubble
        return vec

    @classmethod
    def from_uvec(cls, mesh: RefMesh, vec: np.ndarray, q: Field, t: float) -> "StokesState":
        return cls(fem.uvec_to_field(mesh, vec), q, t,
                   bubble=vec[2 * mesh.n_nodes:].copy())


@dataclass
class StokesData:
    """Right-hand-side data of one linear step.

    ``h`` is the prescribed traction jump on Gamma (per Gamma node) and
    ``k`` the traction on Gamma_plus (per outer node).  ``stress_ibp`` is
    an optional cellwise matrix S entering the momentum equation weakly as
    (S, grad v) - ([[S n]], v)_Gamma - (S n+, v)_Gamma+, the form in which
    the Lagrangian stress-difference source is assembled.  When ``g`` is
    nonzero a flux potential ``R`` with div R = g must accompany it.
    """

    f: Field | None = None
    g: Field | None = None
    R: Field | None = None
    h: np.ndarray | None = None
    k: np.ndarray | None = None
    stress_ibp: np.ndarray | None = None

    @classmethod
    def zero(cls) -> "StokesData":
        return cls()


class StokesWorkspace:
    """Assembled two-phase Stokes operators for one (mesh, params), with a
    factorization cache keyed by time step.

    ``mu_cells`` overrides the piecewise-constant viscosity with cellwise
    values (used by the local path for smooth mu(rho0))."""

    def __init__(self, mesh: RefMesh, params: MaterialParams,
                 mu_cells: np.ndarray | None = None):
        self.mesh = mesh
        self.params = params
        eta_c = params.eta_cells(mesh)
        mu_c = params.mu_cells(mesh) if mu_cells is None \
            else np.asarray(mu_cells, dtype=float)
        if np.any(mu_c <= 0):
            raise ParameterError("viscosity must be strictly positive")
        self.mass = fem.velocity_mass(mesh, eta_c)
        self.stiffness = fem.deformation_stiffness(mesh, mu_c)
        self.div = fem.div_coupling(mesh, mesh.cell_sdofs, mesh.nsdof)
        self.pressure_mass = fem.scalar_mass(mesh, mesh.cell_sdofs, mesh.nsdof)
        self.nu = fem.n_udofs(mesh)
        self.np_ = mesh.nsdof
        self._step_lu: dict[float, Factorized] = {}
        self._basis: RigidBasis | None = None

    # -- operators ---------------------------------------------------------

    def saddle(self, coef: float) -> sp.csc_matrix:
        """[[coef*M + A, -B^T], [B, 0]]."""
        top = (coef * self.mass + self.stiffness).tocsr()
        return sp.bmat([[top, -self.div.T], [self.div, None]], format="csc")

    def step_factorization(self, dt: float) -> Factorized:
        lu = self._step_lu.get(dt)
        if lu is None:
            lu = Factorized(self.saddle(1.0 / dt))
            self._step_lu[dt] = lu
        return lu

    def rigid_basis(self) -> RigidBasis:
        if self._basis is None:
            self._basis = build_rigid_basis(self.mesh, self.params)
        return self._basis

    # -- scalar diagnostics on full dof vectors -----------------------------

    def kinetic_energy(self, uvec: np.ndarray) -> float:
        return 0.5 * float(uvec @ (self.mass @ uvec))

    def dissipation(self, uvec: np.ndarray) -> float:
        """1/2 (mu D(u), D(u)); the stiffness quadratic form."""
        return float(uvec @ (self.stiffness @ uvec))

    def momentum(self, uvec: np.ndarray, basis: RigidBasis | None = None) -> np.ndarray:
        basis = basis or self.rigid_basis()
        out = np.empty(len(basis))
        for i, p in enumerate(basis.fields):
            out[i] = float(fem.field_to_uvec(p) @ (self.mass @ uvec))
        return out

    # -- loads --------------------------------------------------------------

    def momentum_load(self, data: StokesData) -> np.ndarray:
        mesh = self.mesh
        load = np.zeros(self.nu)
        if data.f is not None:
            load += self.mass @ fem.field_to_uvec(data.f)
        if data.h is not None:
            h = np.asarray(data.h, dtype=float)
            if h.shape != (len(mesh.gamma_nodes), 2):
                raise ShapeError("h must be (n_gamma_nodes, 2)")
            nodal = np.zeros((mesh.n_nodes, 2))
            nodal[mesh.gamma_nodes] = h
            load += fem.facet_load(mesh, mesh.interface_facets[:, :2],
                                   mesh.facet_lengths[:mesh.n_interface_facets], nodal)
        if data.k is not None:
            k = np.asarray(data.k, dtype=float)
            if k.shape != (len(mesh.gamma_plus_nodes), 2):
                raise ShapeError("k must be (n_outer_nodes, 2)")
            nodal = np.zeros((mesh.n_nodes, 2))
            nodal[mesh.gamma_plus_nodes] = k
            load += fem.facet_load(mesh, mesh.outer_facets[:, :2],
                                   mesh.facet_lengths[mesh.n_interface_facets:], nodal)
        if data.stress_ibp is not None:
            load += self.stress_ibp_load(data.stress_ibp)
        return load

    def stress_volume_load(self, s_cells: np.ndarray) -> np.ndarray:
        """(S, grad v) for a cellwise-constant stress; bubble rows vanish
        because the cell integral of the bubble gradient is zero."""
        mesh = self.mesh
        s_cells = np.asarray(s_cells, dtype=float)
        if s_cells.shape != (mesh.n_cells, 2, 2):
            raise ShapeError("stress field must be (n_cells, 2, 2)")
        load = np.zeros(self.nu)
        contrib = np.einsum("cjk,cak->caj", s_cells, mesh.grads) * mesh.areas[:, None, None]
        for comp in range(2):
            np.add.at(load, 2 * mesh.cells.ravel() + comp, contrib[:, :, comp].ravel())
        return load

    def facet_value_load(self, values: np.ndarray, interface: bool) -> np.ndarray:
        """Surface load for per-facet constant vector values."""
        mesh = self.mesh
        load = np.zeros(self.nu)
        if interface:
            pairs = mesh.interface_facets[:, :2]
            lengths = mesh.facet_lengths[:mesh.n_interface_facets]
        else:
            pairs = mesh.outer_facets[:, :2]
            lengths = mesh.facet_lengths[mesh.n_interface_facets:]
        for (a, b), val, length in zip(pairs, np.asarray(values, dtype=float), lengths):
            for comp in range(2):
                load[2 * a + comp] += 0.5 * length * val[comp]
                load[2 * b + comp] += 0.5 * length * val[comp]
        return load

    def stress_ibp_load(self, s_cells: np.ndarray) -> np.ndarray:
        """Weak divergence of a cellwise stress: (S, grad v) minus its
        interface and outer boundary traces."""
        mesh = self.mesh
        s_cells = np.asarray(s_cells, dtype=float)
        load = self.stress_volume_load(s_cells)
        ni = mesh.n_interface_facets
        jumps = np.einsum("fjk,fk->fj",
                          s_cells[mesh.interface_facets[:, 2]]
                          - s_cells[mesh.interface_facets[:, 3]],
                          mesh.facet_normals[:ni])
        load -= self.facet_value_load(jumps, interface=True)
        traces = np.einsum("fjk,fk->fj", s_cells[mesh.outer_facets[:, 2]],
                           mesh.facet_normals[ni:])
        load -= self.facet_value_load(traces, interface=False)
        return load

    def divergence_load(self, data: StokesData) -> np.ndarray:
        if data.g is None:
            return np.zeros(self.np_)
        if data.g.ncomp != 1:
            raise ShapeError("divergence datum must be scalar")
        self._check_g_consistency(data)
        return self.pressure_mass @ data.g.values[:, 0]

    def _check_g_consistency(self, data: StokesData):
        mesh = self.mesh
        gnorm = fem.field_l2(data.g)
        if gnorm == 0.0:
            return
        if data.R is None:
            raise DataError("nonzero divergence datum g requires a flux potential R")
        # (g, phi) = -(R, grad phi) for continuous phi vanishing on Gamma_plus
        gl = np.zeros(mesh.n_nodes)
        gcells = fem.cell_values(data.g)[:, 0]
        contrib = (mesh.areas * gcells)[:, None] / 3.0 * np.ones(3)
        np.add.at(gl, mesh.cells.ravel(), contrib.ravel())
        rl = np.zeros(mesh.n_nodes)
        rcells = fem.cell_values(data.R)
        rc = np.einsum("cak,ck->ca", mesh.grads, rcells) * mesh.areas[:, None]
        np.add.at(rl, mesh.cells.ravel(), rc.ravel())
        free = np.setdiff1d(np.arange(mesh.n_nodes), mesh.gamma_plus_nodes)
        mismatch = np.linalg.norm(gl[free] + rl[free])
        scale = max(gnorm, fem.field_l2(data.R), 1e-300)
        if mismatch > _DATA_CONSISTENCY_TOL * scale * np.sqrt(len(free)):
            raise DataError(
                f"divergence datum inconsistent with flux potential: residual {mismatch:.3e}")


def step_linear(state: StokesState, data: StokesData, dt: float,
                params: MaterialParams,
                workspace: StokesWorkspace | None = None) -> StokesState:
    """One backward-Euler step of the linear two-phase Stokes system."""
    if dt <= 0:
        raise ParameterError(f"dt must be positive, got {dt}")
    mesh = state.u.mesh
    ws = workspace or StokesWorkspace(mesh, params)
    lu = ws.step_factorization(dt)
    rhs = np.concatenate([
        ws.mass @ state.uvec() / dt + ws.momentum_load(data),
        ws.divergence_load(data),
    ])
    sol = lu.solve(rhs)
    unew = sol[:ws.nu]
    qnew = Field(mesh, 1, sol[ws.nu:][:, None])
    return StokesState.from_uvec(mesh, unew, qnew, state.t + dt)


@dataclass
class Trajectory:
    """Uniform-dt sequence of states with scalar diagnostics, plus the
    optional Lagrangian companions filled by the nonlinear path."""

    times: np.ndarray
    states: list
    diagnostics: dict = dc_field(default_factory=dict)
    cofactors: list | None = None         # nodal A per step
    lagrangian_maps: list | None = None   # nodal X(xi, t) per step
    meta: dict = dc_field(default_factory=dict)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0


def run_linear(u0: Field, n_steps: int, dt: float, params: MaterialParams,
               data=None, workspace: StokesWorkspace | None = None,
               bubble0: np.ndarray | None = None) -> Trajectory:
    """Integrate the zero- or given-data linear system from u0.

    ``data`` may be None, a single StokesData reused each step, or a
    callable step_index -> StokesData.  ``bubble0`` carries the initial
    bubble coefficients when restarting from a previous discrete state.
    """
    mesh = u0.mesh
    ws = workspace or StokesWorkspace(mesh, params)
    state = StokesState(u0, Field.zeros(mesh, 1), 0.0, bubble=bubble0)
    states = [state]
    for m in range(n_steps):
        d = data(m) if callable(data) else (data or StokesData.zero())
        state = step_linear(state, d, dt, params, ws)
        states.append(state)
    times = dt * np.arange(n_steps + 1)
    basis = ws.rigid_basis()
    energy = np.array([ws.kinetic_energy(s.uvec()) for s in states])
    dissip = np.array([ws.dissipation(s.uvec()) for s in states])
    momenta = np.array([ws.momentum(s.uvec(), basis) for s in states])
    return Trajectory(times, states,
                      diagnostics={"energy": energy, "dissipation": dissip,
                                   "momenta": momenta})


def solve_resolvent(lam: complex, f: Field, params: MaterialParams,
                    workspace: StokesWorkspace | None = None,
                    singular_threshold: float = 1e12) -> tuple[StokesState, StokesState]:
    """Stationary resolvent solve lam*u - eta^-1 Div T(u, q) = f with the
    transmission and traction conditions of the droplet.

    Returns (real part, imaginary part) as two states; the imaginary part
    is zero for real lam.  At lam = 0 the operator is restricted to the
    rigid-orthogonal complement via a bordered system (0 belongs to the
    resolvent set of the restricted operator only).
    """
    mesh = f.mesh
    ws = workspace or StokesWorkspace(mesh, params)
    lam = complex(lam)
    fvec = ws.mass @ fem.field_to_uvec(f)
    nu, np_ = ws.nu, ws.np_

    if lam == 0:
        basis = ws.rigid_basis()
        cols = np.column_stack([ws.mass @ fem.field_to_uvec(p) for p in basis.fields])
        system = sp.bmat([
            [ws.stiffness, -ws.div.T, sp.csr_matrix(cols)],
            [ws.div, None, None],
            [sp.csr_matrix(cols.T), None, None],
        ], format="csc")
        rhs = np.concatenate([fvec, np.zeros(np_ + len(basis))])
        sol = Factorized(system).solve(rhs)
        ur, qr = sol[:nu], sol[nu:nu + np_]
        real = StokesState.from_uvec(mesh, ur, Field(mesh, 1, qr[:, None]), 0.0)
        imag = StokesState.from_uvec(mesh, np.zeros(nu), Field.zeros(mesh, 1), 0.0)
        return real, imag

    if lam.imag == 0:
        system = ws.saddle(lam.real)
        rhs = np.concatenate([fvec, np.zeros(np_)])
        sol = Factorized(system).solve(rhs)
        ur, qr = sol[:nu], sol[nu:]
        ui = np.zeros(nu)
        qi = np.zeros(np_)
    else:
        top = (lam.real * ws.mass + ws.stiffness).tocsr()
        lm = (lam.imag * ws.mass).tocsr()
        system = sp.bmat([
            [top, -lm, -ws.div.T, None],
            [lm, top, None, -ws.div.T],
            [ws.div, None, None, None],
            [None, ws.div, None, None],
        ], format="csc")
        rhs = np.concatenate([fvec, np.zeros(nu + 2 * np_)])
        sol = Factorized(system).solve(rhs)
        ur, ui = sol[:nu], sol[nu:2 * nu]
        qr, qi = sol[2 * nu:2 * nu + np_], sol[2 * nu + np_:]

    unorm = np.sqrt(ur @ (ws.mass @ ur) + ui @ (ws.mass @ ui))
    fnorm = np.sqrt(max(fem.field_to_uvec(f) @ fvec, 0.0))
    if fnorm > 0 and unorm / fnorm > singular_threshold:
        raise ResolventError(
            "resolvent solve is near-singular; lambda is close to the spectrum",
            distance_estimate=fnorm / unorm)
    real = StokesState.from_uvec(mesh, ur, Field(mesh, 1, qr[:, None]), 0.0)
    imag = StokesState.from_uvec(mesh, ui, Field(mesh, 1, qi[:, None]), 0.0)
    return real, imag


def korn_constant(mesh: RefMesh, params: MaterialParams, seed: int = 0) -> float:
    """Discrete second-Korn constant: the smallest Rayleigh quotient
    ||D(w)||^2 / ||w||_H1^2 over nodal P1 fields orthogonal (in the
    eta-weighted mass) to the rigid motions."""
    nn = mesh.n_nodes
    # P1-only blocks: assemble scalar mass/stiffness and expand per component
    ms = fem.scalar_mass(mesh, mesh.cells, nn)
    ks = fem.scalar_stiffness(mesh, mesh.cells, nn)
    eye2 = sp.identity(2, format="csr")
    b_h1 = sp.kron(ms + ks, eye2, format="csr")
    m_eta = sp.kron(fem.scalar_mass(mesh, mesh.cells, nn, params.eta_cells(mesh)),
                    eye2, format="csr")

    # deformation form on P1 only (drop bubble rows/cols of the MINI matrix)
    a_full = fem.deformation_stiffness(mesh, np.full(mesh.n_cells, 2.0))
    nodal = np.arange(2 * nn)
    a_p1 = a_full[np.ix_(nodal, nodal)].tocsr()

    basis = build_rigid_basis(mesh, params)
    constraints = np.column_stack(
        [m_eta @ p.plus().ravel() for p in basis.fields])

    if 2 * nn <= _KORN_DENSE_LIMIT:
        q, _ = np.linalg.qr(constraints, mode="complete")
        z = q[:, constraints.shape[1]:]
        a_red = z.T @ (a_p1 @ z)
        b_red = z.T @ (b_h1 @ z)
        from scipy.linalg import eigh
        vals = eigh(a_red, b_red, eigvals_only=True, subset_by_index=[0, 0])
        return float(vals[0])

    import warnings

    import scipy.sparse.linalg as spla
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((2 * nn, 4))
    y = spla.spsolve(b_h1.tocsc(), constraints)
    shift = Factorized((a_p1 + 1e-3 * b_h1).tocsc())

    class _Prec(spla.LinearOperator):
        def __init__(self):
            super().__init__(dtype=float, shape=a_p1.shape)

        def _matvec(self, x):
            return shift.solve(x)

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            vals, _ = spla.lobpcg(a_p1, x0, B=b_h1, Y=np.asarray(y), M=_Prec(),
                                  largest=False, tol=1e-9, maxiter=800)
    except Exception as exc:  # pragma: no cover - solver-dependent
        raise NumericError(f"Korn eigen-solver failed: {exc}") from exc
    if not np.all(np.isfinite(vals)) or np.min(vals) <= 0:
        raise NumericError("Korn eigen-solver returned an invalid spectrum")
    return float(np.min(vals))
