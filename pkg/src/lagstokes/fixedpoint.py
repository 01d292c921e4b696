"""Nonlinear right-hand sides of the Lagrangian two-phase system, the
Picard solution map on a short horizon, stability probing, and global
continuation for the droplet.

The solver decomposes the unknown as (linear evolution) + (correction) and
iterates the map that feeds the previous iterate's Lagrangian geometry
into the linear stepper.  Horizons obey the smallness conditions derived
from the exponent arithmetic, with adaptive halving when the measured
contraction factor is too large or the displacement gradient leaves the
series region.  Everything is deterministic for fixed inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import fem, kernel
from .errors import (DomainError, GeometryError, NonContractionError,
                     ParameterError, ValidationError)
from .mesh import Field
from .stepper import StokesData, StokesState, StokesWorkspace, Trajectory, run_linear
from .transmission import MaterialParams, helmholtz_project, project_out_rigid, rigid_momenta


# -- exponent arithmetic -------------------------------------------------------

@dataclass(frozen=True)
class ExponentSet:
    """The three time-smallness exponents of the short-horizon estimates."""

    sigma: float
    s: float
    sigma_tilde: float
    index_class: str   # "I" (p >= 2) or "II" (p < 2 with the slope condition)


def sigma_exponents(p: float, q: float, n_dim: int = 2) -> ExponentSet:
    """Exponents sigma_{p,q}, s_{p,q}, sigma~_{p,q} of the nonlinear
    estimates.

    Admissible indices: q > N with either p >= 2 (class I) or
    1 < p < 2 and 1/p + N/q > 3/2 (class II).
    """
    if not q > n_dim:
        raise DomainError(f"need q > N = {n_dim}, got q = {q}")
    if not p > 1:
        raise DomainError(f"need p > 1, got p = {p}")
    if p >= 2:
        index_class = "I"
    else:
        if not (1.0 / p + n_dim / q > 1.5):
            raise DomainError(
                f"(p, q) = ({p}, {q}) outside the admissible index sets: "
                "p < 2 requires 1/p + N/q > 3/2")
        index_class = "II"
    sigma = 0.5 * (1.0 - n_dim / q) if (2.0 / p + n_dim / q > 1.0) else 0.0
    if index_class == "I":
        s = 0.5 * (1.0 - n_dim / (p * q) + sigma)
    else:
        s = 0.5 * ((1.0 - 1.0 / p) + sigma)
    sigma_tilde = min(1.0 / p, 0.5 * (1.0 - n_dim / q))
    return ExponentSet(sigma=sigma, s=s, sigma_tilde=sigma_tilde, index_class=index_class)


def select_local_T(L: float, exps: ExponentSet, p: float, C_cal: float = 1.0) -> float:
    """Largest horizon T <= 1 satisfying both smallness conditions

        C_cal * T^(1/p' + sigma) * L <= 1/2   and   C_cal * T^s * L <= 1.
    """
    if not L > 0:
        raise DomainError(f"bound L must be positive, got {L}")
    if not C_cal > 0:
        raise DomainError(f"calibration constant must be positive, got {C_cal}")
    one_pprime = 1.0 - 1.0 / p
    t1 = (0.5 / (C_cal * L)) ** (1.0 / (one_pprime + exps.sigma))
    t2 = (1.0 / (C_cal * L)) ** (1.0 / exps.s)
    return min(1.0, t1, t2)


# -- configuration -------------------------------------------------------------

@dataclass
class IterationConfig:
    """Parameters of the fixed-point solver.

    ``L_bound = 0`` measures the bound from the linear solve; ``eps0 = 0``
    derives the decay weight from the discrete spectral gap.  ``gamma0``
    is the exponential bookkeeping weight of the extension bounds.
    """

    p: float = 2.0
    q: float = 4.0
    dt: float = 0.05
    horizon: float = 1.0
    L_bound: float = 0.0
    fp_tol: float = 1e-11
    max_iters: int = 30
    kappa_cap: float = 0.5
    gamma0: float = 1.0
    eps0: float = 0.0
    C_cal: float = 1.0
    a_cal: float = 1.0
    contraction_target: float = 0.9
    min_steps: int = 4
    smallness: float = 1.0
    n_dim: int = 2

    def __post_init__(self):
        self.exponents = sigma_exponents(self.p, self.q, self.n_dim)
        if self.dt <= 0:
            raise ValidationError("dt must be positive", field="dt")
        if self.horizon <= 0:
            raise ValidationError("horizon must be positive", field="horizon")
        if self.gamma0 < 1.0:
            raise ValidationError("gamma0 must be >= 1", field="gamma0")
        if not (0 < self.kappa_cap < 1):
            raise ValidationError("kappa_cap must lie in (0, 1)", field="kappa_cap")
        if self.fp_tol <= 0:
            raise ValidationError("fp_tol must be positive", field="fp_tol")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1", field="max_iters")


# -- time-series extension operators -------------------------------------------

def extension_reflect(values: np.ndarray, dt: float, t: float) -> np.ndarray:
    """Even reflection about s = t of cell-centered samples on (0, T),
    zero outside (0, 2t): sample j of the output mirrors index 2m-1-j.

    ``t`` must be a grid multiple within (0, T]."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    if dt <= 0:
        raise ParameterError("dt must be positive")
    m = int(round(t / dt))
    if m < 1 or m > n or abs(m * dt - t) > 1e-9 * dt:
        raise ParameterError(f"t = {t} is not a grid multiple inside (0, {n * dt}]")
    out = np.zeros((2 * m,) + values.shape[1:])
    out[:m] = values[:m]
    out[m:] = values[m - 1::-1]
    return out


def smoothstep_cutoff(x: np.ndarray) -> np.ndarray:
    """Quintic smoothstep: 1 for x <= 0, 0 for x >= 1."""
    x = np.clip(x, 0.0, 1.0)
    return 1.0 - (10.0 * x ** 3 - 15.0 * x ** 4 + 6.0 * x ** 5)


@dataclass
class CutoffExtension:
    values: np.ndarray
    bound_factor: float      # measured weighted-norm quotient
    bound_limit: float       # (1 + e^{2 p gamma})^{1/p}


def weighted_lp_norm(values: np.ndarray, dt: float, p: float, gamma: float) -> float:
    """Discrete (sum dt |e^{gamma s} v|^p)^{1/p} on cell-centered samples."""
    values = np.asarray(values, dtype=float)
    s = (np.arange(len(values)) + 0.5) * dt
    flat = np.abs(values).reshape(len(values), -1).max(axis=1) if values.ndim > 1 \
        else np.abs(values)
    return float((dt * np.sum((np.exp(gamma * s) * flat) ** p)) ** (1.0 / p))


def cutoff_extension(values: np.ndarray, dt: float, T: float,
                     gamma: float, p: float) -> CutoffExtension:
    """phi_T x (even reflection about T): the compactly supported extension
    used by the global continuation, with the measured exponential-weight
    bound against its theoretical limit (1 + e^{2 p gamma})^{1/p}."""
    ext = extension_reflect(values, dt, T)
    m = len(ext)
    s = (np.arange(m) + 0.5) * dt
    phi = smoothstep_cutoff(s - T)
    out = ext * (phi if ext.ndim == 1 else phi.reshape(-1, *([1] * (ext.ndim - 1))))
    nin = weighted_lp_norm(values[:int(round(T / dt))], dt, p, gamma)
    nout = weighted_lp_norm(out, dt, p, gamma)
    factor = nout / nin if nin > 0 else 0.0
    limit = (1.0 + math.exp(2.0 * p * gamma)) ** (1.0 / p)
    return CutoffExtension(values=out, bound_factor=factor, bound_limit=limit)


# -- nonlinear right-hand sides -------------------------------------------------

@dataclass
class NonlinearRHS:
    """The five data fields of the Stokes-like reformulation at one time.

    The stress difference T(u,q) - T_A(u,q) A enters the momentum equation
    weakly (``stress`` per cell, applied through the integration-by-parts
    load); ``f_ext`` carries the external-force and density-defect parts.
    ``h_jump`` is the interface jump of T n - T_A nbar and ``k`` the outer
    traction defect (nodal traces, used for reports and the Xi residuals).

    For assembly, the combined facet terms [[h]] - [[Sigma n]] and
    k - Sigma n+ collapse analytically to T_A (A n - nbar); the solver uses
    that collapsed form built from the same cellwise data as ``stress``
    (``j_gamma`` per interface facet, ``j_outer`` per outer facet), so the
    stress traces cancel exactly instead of through two discretizations.
    """

    t: float
    stress: np.ndarray                 # (nc, 2, 2)
    g: Field
    R: Field
    h_jump: np.ndarray                 # (n_gamma_nodes, 2)
    k: np.ndarray                      # (n_outer_nodes, 2)
    j_gamma: np.ndarray                # (n_interface_facets, 2): [[T_A (A n - nbar)]]
    j_outer: np.ndarray                # (n_outer_facets, 2)
    f_ext: Field | None = None

    def to_stokes_data(self) -> StokesData:
        return StokesData(f=self.f_ext, g=self.g, R=self.R,
                          h=self.h_jump, k=self.k, stress_ibp=self.stress)

    def compatibility_residual(self) -> float:
        """|(g, 1) - boundary flux of R|: the divergence-form identity.

        The flux uses exact facet normals, so the identity holds to
        roundoff for linear R with matching constant g."""
        mesh = self.g.mesh
        total_g = float(fem.field_integral(self.g)[0])
        r_outer = self.R.minus() if mesh.outer_phase < 0 else self.R.plus()
        flux = 0.0
        off = mesh.n_interface_facets
        for k, (a, b, _) in enumerate(mesh.outer_facets):
            n = mesh.facet_normals[off + k]
            length = mesh.facet_lengths[off + k]
            flux += 0.5 * length * (r_outer[a] + r_outer[b]) @ n
        return abs(total_g - flux)


def compute_nonlinear_terms(u_hist: list, q_hist: list, A: kernel.CofactorField,
                            params: MaterialParams, dt: float,
                            rho0: Field | None = None, f_ext=None,
                            X: np.ndarray | None = None,
                            eval_time: float = 0.0,
                            mu_nodal: Field | None = None) -> NonlinearRHS:
    """Assemble the nonlinear data at the time of the last history entry.

    ``u_hist`` and ``q_hist`` are the velocity/pressure fields up to the
    evaluation time (at least one entry; two are needed for the time
    derivative when the density differs from eta).  The divergence parts
    use nodal recovered Jacobians; the momentum source is produced in weak
    form from exact cellwise gradients, never by second differentiation.
    ``f_ext`` is called as f(x, y, t) at the mapped positions ``X``;
    ``mu_nodal`` tabulates a smooth viscosity mu(rho0) nodewise, replacing
    the piecewise-constant coefficients of ``params``.
    """
    u, q = u_hist[-1], q_hist[-1]
    mesh = u.mesh
    if A.mesh is not mesh:
        _raise_shape()
    mu_c = params.mu_cells(mesh) if mu_nodal is None \
        else fem.cell_values(mu_nodal)[:, 0]

    # cellwise exact quantities for the weak momentum source
    G_c = fem.cell_gradients(u)                        # (nc, 2, 2)
    q_c = fem.cell_values(q)[:, 0]
    A_c = A.mats[mesh.cell_sdofs].mean(axis=1)
    Gt_c = np.swapaxes(G_c, 1, 2)
    At_c = np.swapaxes(A_c, 1, 2)
    D_c = G_c + Gt_c
    Du_c = np.einsum("cij,cjk->cik", G_c, At_c) + np.einsum("cij,cjk->cik", A_c, Gt_c)
    eye = np.eye(2)
    T_c = mu_c[:, None, None] * D_c - q_c[:, None, None] * eye
    Tu_c = mu_c[:, None, None] * Du_c - q_c[:, None, None] * eye
    stress = T_c - np.einsum("cij,cjk->cik", Tu_c, A_c)

    # nodal recovered quantities for the divergence data
    G_n = fem.recover_gradient(u)                      # (nsdof, 2, 2)
    ImAt = np.swapaxes(_eye_minus(A.mats), 1, 2)
    g_vals = np.einsum("nij,nji->n", G_n, ImAt)        # tr(G (I - A^T))
    g = Field(mesh, 1, g_vals[:, None])
    u_dof = u.values                                   # (nsdof, 2)
    R = Field(mesh, 2, np.einsum("nij,nj->ni", ImAt, u_dof))

    # interface and outer traction defects from nodal traces
    nbar = kernel.pushforward_normal(A, mesh)
    mu_s = params.mu_sdofs(mesh) if mu_nodal is None else mu_nodal.values[:, 0]
    q_dof = q.values[:, 0]
    h_jump = _traction_defect_jump(mesh, G_n, A.mats, q_dof, mu_s, nbar)
    k = _outer_traction_defect(mesh, G_n, A.mats, q_dof, mu_s, nbar)
    j_gamma, j_outer = _facet_corrections(mesh, Tu_c, A_c)

    f_field = None
    if rho0 is not None or f_ext is not None:
        eta_s = params.eta_sdofs(mesh)
        acc = np.zeros((mesh.nsdof, 2))
        if f_ext is not None:
            # compose the force with the Lagrangian map by nodal interpolation
            pos = mesh.nodes if X is None else X
            fvals = np.array([np.atleast_1d(f_ext(x, y, eval_time)) for x, y in pos],
                             dtype=float)
            fnod = Field.from_nodal(mesh, fvals)
            rho_vals = eta_s if rho0 is None else rho0.values[:, 0]
            acc += rho_vals[:, None] * fnod.values
        if rho0 is not None and len(u_hist) >= 2:
            dudt = (u_hist[-1].values - u_hist[-2].values) / dt
            acc += (eta_s - rho0.values[:, 0])[:, None] * dudt
        f_field = Field(mesh, 2, acc / eta_s[:, None])
    return NonlinearRHS(t=eval_time, stress=stress, g=g, R=R, h_jump=h_jump, k=k,
                        j_gamma=j_gamma, j_outer=j_outer, f_ext=f_field)


def _facet_corrections(mesh, Tu_c: np.ndarray, A_c: np.ndarray):
    """Per-facet values of [[T_A (A n - nbar)]] on Gamma and of
    T_A (A n+ - nbar+) on Gamma_plus, from the adjacent-cell traces; the
    pushforward normal uses the facet-averaged cofactor so it stays
    single-valued on the interface."""
    ni = mesh.n_interface_facets
    j_gamma = np.zeros((ni, 2))
    for kf, (a, b, cp, cm) in enumerate(mesh.interface_facets):
        n = mesh.facet_normals[kf]
        an_p = A_c[cp] @ n
        an_m = A_c[cm] @ n
        avg = 0.5 * (an_p + an_m)
        nbar = avg / np.linalg.norm(avg)
        j_gamma[kf] = Tu_c[cp] @ (an_p - nbar) - Tu_c[cm] @ (an_m - nbar)
    no = len(mesh.outer_facets)
    j_outer = np.zeros((no, 2))
    for kf, (a, b, c) in enumerate(mesh.outer_facets):
        n = mesh.facet_normals[ni + kf]
        an = A_c[c] @ n
        nbar = an / np.linalg.norm(an)
        j_outer[kf] = Tu_c[c] @ (an - nbar)
    return j_gamma, j_outer


def _raise_shape():
    from .errors import ShapeError
    raise ShapeError("cofactor field and velocity live on different meshes")


def _eye_minus(mats: np.ndarray) -> np.ndarray:
    out = -mats.copy()
    out[:, 0, 0] += 1.0
    out[:, 1, 1] += 1.0
    return out


def _nodal_traction(G_n, A, q_dof, mu_s, sdofs, n_fixed, n_bar):
    """T(u,q) n - T_A(u,q) nbar at the given scalar dofs."""
    G = G_n[sdofs]
    Amat = A[sdofs]
    Gt = np.swapaxes(G, 1, 2)
    At = np.swapaxes(Amat, 1, 2)
    D = G + Gt
    Du = np.einsum("nij,njk->nik", G, At) + np.einsum("nij,njk->nik", Amat, Gt)
    mu = mu_s[sdofs][:, None, None]
    q = q_dof[sdofs][:, None]
    t_n = mu[:, :, 0] * np.einsum("nij,nj->ni", D, n_fixed) - q * n_fixed
    tu_nb = mu[:, :, 0] * np.einsum("nij,nj->ni", Du, n_bar) - q * n_bar
    return t_n - tu_nb


def _traction_defect_jump(mesh, G_n, A, q_dof, mu_s, nbar) -> np.ndarray:
    gn = mesh.gamma_nodes
    n_fixed = mesh.node_normals_gamma
    hp = _nodal_traction(G_n, A, q_dof, mu_s, mesh.sdof_plus[gn], n_fixed, nbar.gamma)
    hm = _nodal_traction(G_n, A, q_dof, mu_s, mesh.sdof_minus[gn], n_fixed, nbar.gamma)
    return hp - hm


def _outer_traction_defect(mesh, G_n, A, q_dof, mu_s, nbar) -> np.ndarray:
    on = mesh.gamma_plus_nodes
    sd = mesh.sdof_minus[on] if mesh.outer_phase < 0 else mesh.sdof_plus[on]
    return _nodal_traction(G_n, A, q_dof, mu_s, sd, mesh.node_normals_outer, nbar.outer)


# -- trajectory norms ------------------------------------------------------------

def trajectory_norm(u_fields: list, q_fields: list, dt: float, p: float) -> float:
    """Computable surrogate of the maximal-regularity trajectory norm:
    sup-in-time H1 of u, plus L_p-in-time of the step increments / dt,
    the recovered second differences, and the pressure gradient."""
    sup = max(fem.field_h1(u) for u in u_fields)
    inc, hess, prs = [], [], []
    for m in range(1, len(u_fields)):
        inc.append(fem.field_l2(u_fields[m] - u_fields[m - 1]) / dt)
    for m in range(len(u_fields)):
        hess.append(fem.hessian_seminorm(u_fields[m]))
    for qf in q_fields:
        prs.append(fem.field_h1_semi(qf))

    def lp(vals):
        vals = np.asarray(vals, dtype=float)
        return float((dt * np.sum(vals ** p)) ** (1.0 / p)) if len(vals) else 0.0

    return sup + lp(inc) + lp(hess) + lp(prs)


def _xi_norms(mesh, u_fields, h_jumps, k_fields, params, dt, p) -> tuple[float, float]:
    """L_p-in-time of the surface L2 norms of the normal-stress residuals
    Xi = (mu D(u) n) . n - h . n on Gamma and its outer analogue."""
    from .transmission import _expand_gamma, _expand_outer
    mu_s = params.mu_sdofs(mesh)
    gl = mesh.facet_lengths[:mesh.n_interface_facets]
    ol = mesh.facet_lengths[mesh.n_interface_facets:]
    xi_series, xio_series = [], []
    for m, u in enumerate(u_fields):
        G = fem.recover_gradient(u)
        D = G + np.swapaxes(G, 1, 2)
        gn, on = mesh.gamma_nodes, mesh.gamma_plus_nodes
        nrm, onrm = mesh.node_normals_gamma, mesh.node_normals_outer
        sd = mesh.sdof_plus[gn]
        xi = mu_s[sd] * np.einsum("ni,nij,nj->n", nrm, D[sd], nrm)
        if h_jumps is not None and h_jumps[m] is not None:
            xi = xi - np.einsum("nk,nk->n", h_jumps[m], nrm)
        osd = mesh.sdof_minus[on] if mesh.outer_phase < 0 else mesh.sdof_plus[on]
        xio = mu_s[osd] * np.einsum("ni,nij,nj->n", onrm, D[osd], onrm)
        if k_fields is not None and k_fields[m] is not None:
            xio = xio - np.einsum("nk,nk->n", k_fields[m], onrm)
        xi_series.append(fem.facet_l2(mesh.interface_facets[:, :2], gl,
                                      _expand_gamma(mesh, xi)))
        xio_series.append(fem.facet_l2(mesh.outer_facets[:, :2], ol,
                                       _expand_outer(mesh, xio)))

    def lp(vals):
        vals = np.asarray(vals, dtype=float)
        return float((dt * np.sum(vals ** p)) ** (1.0 / p)) if len(vals) else 0.0

    return lp(xi_series), lp(xio_series)


# -- the Picard loop --------------------------------------------------------------

@dataclass
class IterationReport:
    converged: bool
    iterations: int
    contraction_factors: list
    distances: list
    horizon: float
    n_steps: int
    kappa_max: float
    residual: float                  # substituted nonlinear residual (relative)
    ball_norm: float                 # trajectory norm of the converged correction
    xi_norm: float
    xi_outer_norm: float
    L_bound: float
    horizon_halvings: int

    def csv_rows(self):
        rows = []
        for i, d in enumerate(self.distances):
            fac = self.contraction_factors[i - 1] if i >= 1 else float("nan")
            rows.append((i + 1, fac, d))
        return rows


def _build_geometry(mesh, u_fields, dt, cfg, C0=None, grad0=None):
    """Accumulated displacement gradients and cofactors along a trajectory.

    Returns (C_list, A_list, kappa_max); C0 carries prior accumulation for
    continued runs and grad0 seeds the trapezoid left endpoint.
    """
    C = (C0.copy() if C0 is not None else kernel.DisplacementGradient(mesh))
    if C._last_grad is None:
        C.seed_left_endpoint(fem.recover_gradient(u_fields[0]) if grad0 is None else grad0)
    C_list, A_list = [C], [kernel.neumann_cofactor(C, kappa=cfg.kappa_cap)]
    kappa_max = A_list[0].kappa
    for m in range(1, len(u_fields)):
        C = kernel.accumulate_gradient(C, fem.recover_gradient(u_fields[m]), dt)
        A = kernel.neumann_cofactor(C, kappa=cfg.kappa_cap)
        kappa_max = max(kappa_max, A.kappa)
        C_list.append(C)
        A_list.append(A)
    return C_list, A_list, kappa_max


def picard_solve_local(v0: Field, cfg: IterationConfig, params: MaterialParams,
                       workspace: StokesWorkspace | None = None,
                       C0: kernel.DisplacementGradient | None = None,
                       X0: np.ndarray | None = None,
                       t0: float = 0.0,
                       rho0: Field | None = None,
                       f_ext=None,
                       mu_nodal: Field | None = None,
                       bubble0: np.ndarray | None = None) -> tuple[Trajectory, IterationReport]:
    """Fixed-point solve of the nonlinear system on a short horizon.

    The initial velocity is projected into the discrete divergence-free
    space, the horizon is chosen by the measured linear bound through the
    smallness conditions, and the Picard map (geometry from the previous
    iterate, one linear solve per iterate) runs until the successive
    trajectory distance falls below tolerance.  The horizon is halved when
    the series region or the contraction target is violated.

    ``rho0`` (initial density), ``f_ext(x, y, t)`` (external force, composed
    with the Lagrangian map) and ``mu_nodal`` (tabulated smooth viscosity)
    enable the general local path; the defaults give the piecewise-constant
    forceless case the global continuation builds on.
    """
    mesh = v0.mesh
    if mu_nodal is not None:
        ws = StokesWorkspace(mesh, params,
                             mu_cells=fem.cell_values(mu_nodal)[:, 0])
    else:
        ws = workspace or StokesWorkspace(mesh, params)
    if C0 is None:
        v0, _ = helmholtz_project(v0, params)

    # horizon from the measured linear bound
    cap = min(cfg.horizon, 1.0)
    n_cap = max(int(round(cap / cfg.dt)), cfg.min_steps)
    lin = run_linear(v0, n_cap, cfg.dt, params, workspace=ws, bubble0=bubble0)
    L = cfg.L_bound
    if L <= 0:
        L = max(trajectory_norm([s.u for s in lin.states],
                                [s.q for s in lin.states], cfg.dt, cfg.p), 1e-12)
    T = min(select_local_T(L, cfg.exponents, cfg.p, cfg.C_cal), cfg.horizon)
    n_steps = max(int(math.ceil(T / cfg.dt - 1e-12)), cfg.min_steps)
    halvings = 0

    while True:
        try:
            result = _picard_attempt(v0, cfg, params, ws, n_steps, C0, X0, t0,
                                     rho0, f_ext, mu_nodal, bubble0)
        except (GeometryError, NonContractionError):
            if n_steps // 2 < cfg.min_steps:
                raise
            n_steps //= 2
            halvings += 1
            continue
        traj, report = result
        if report.converged and max(report.contraction_factors[1:], default=0.0) \
                < cfg.contraction_target:
            report.horizon_halvings = halvings
            report.L_bound = L
            return traj, report
        if n_steps // 2 < cfg.min_steps:
            report.horizon_halvings = halvings
            report.L_bound = L
            return traj, report
        n_steps //= 2
        halvings += 1


def _lagrangian_maps(mesh, u_fields, dt, X0):
    """Nodal particle positions X = xi + int u dtau (trapezoid) per step."""
    X = mesh.nodes.copy() if X0 is None else X0.copy()
    maps = [X.copy()]
    for m in range(1, len(u_fields)):
        X = X + 0.5 * dt * (u_fields[m - 1].plus() + u_fields[m].plus())
        maps.append(X.copy())
    return maps


def _picard_attempt(v0, cfg, params, ws, n_steps, C0, X0, t0, rho0, f_ext,
                    mu_nodal=None, bubble0=None):
    mesh = v0.mesh
    dt = cfg.dt
    lin = run_linear(v0, n_steps, dt, params, workspace=ws, bubble0=bubble0)
    uL = [s.u for s in lin.states]
    qL = [s.q for s in lin.states]
    uL_vecs = [s.uvec() for s in lin.states]

    U = [Field.zeros(mesh, 2) for _ in range(n_steps + 1)]
    Q = [Field.zeros(mesh, 1) for _ in range(n_steps + 1)]
    U_vecs = [np.zeros(ws.nu) for _ in range(n_steps + 1)]
    distances, factors = [], []
    scale = max(trajectory_norm(uL, qL, dt, cfg.p), 1e-12)
    converged = False
    kappa_max = 0.0
    rhs_list = None

    for it in range(cfg.max_iters):
        W = [uL[m] + U[m] for m in range(n_steps + 1)]
        Th = [qL[m] + Q[m] for m in range(n_steps + 1)]
        _, A_list, kappa_max = _build_geometry(mesh, W, dt, cfg, C0)
        maps = _lagrangian_maps(mesh, W, dt, X0) if f_ext is not None else None
        rhs_list = []
        for m in range(1, n_steps + 1):
            rhs = compute_nonlinear_terms(W[:m + 1], Th[:m + 1], A_list[m],
                                          params, dt, rho0=rho0, f_ext=f_ext,
                                          X=None if maps is None else maps[m],
                                          eval_time=t0 + m * dt,
                                          mu_nodal=mu_nodal)
            rhs_list.append(rhs)
        U_new_vecs, U_new, Q_new = _solve_correction(mesh, ws, dt, rhs_list, n_steps)
        dist = trajectory_norm([U_new[m] - U[m] for m in range(n_steps + 1)],
                               [Q_new[m] - Q[m] for m in range(n_steps + 1)], dt, cfg.p)
        distances.append(dist)
        if len(distances) >= 2 and distances[-2] > 0:
            factors.append(dist / distances[-2])
        U, Q, U_vecs = U_new, Q_new, U_new_vecs
        if dist <= cfg.fp_tol * scale:
            converged = True
            break
    if not converged:
        fac = factors[-1] if factors else float("inf")
        if fac >= 1.0:
            raise NonContractionError(
                f"Picard iteration failed to contract (factor {fac:.3f})", factor=fac)

    # compose, build trajectory companions
    u_fields = [uL[m] + U[m] for m in range(n_steps + 1)]
    q_fields = [qL[m] + Q[m] for m in range(n_steps + 1)]
    u_vecs = [uL_vecs[m] + U_vecs[m] for m in range(n_steps + 1)]
    C_list, A_list, kappa_max = _build_geometry(mesh, u_fields, dt, cfg, C0)
    maps = _lagrangian_maps(mesh, u_fields, dt, X0)
    states = [StokesState.from_uvec(mesh, u_vecs[m], q_fields[m], t0 + m * dt)
              for m in range(n_steps + 1)]
    traj = Trajectory(times=t0 + dt * np.arange(n_steps + 1), states=states,
                      cofactors=[a.mats for a in A_list],
                      lagrangian_maps=maps,
                      meta={"displacement": C_list[-1]})
    traj.diagnostics["energy"] = np.array([ws.kinetic_energy(v) for v in u_vecs])

    residual = _substituted_residual(mesh, ws, dt, u_vecs, u_fields, q_fields,
                                     cfg, params, C0, rho0, f_ext, mu_nodal, t0)
    ball = trajectory_norm(U, Q, dt, cfg.p)
    h_series = [None] + [r.h_jump for r in rhs_list] if rhs_list else None
    k_series = [None] + [r.k for r in rhs_list] if rhs_list else None
    xi, xio = _xi_norms(mesh, U, h_series, k_series, params, dt, cfg.p)
    report = IterationReport(converged=converged, iterations=len(distances),
                             contraction_factors=factors, distances=distances,
                             horizon=n_steps * dt, n_steps=n_steps,
                             kappa_max=kappa_max, residual=residual,
                             ball_norm=ball, xi_norm=xi, xi_outer_norm=xio,
                             L_bound=0.0, horizon_halvings=0)
    return traj, report


def _momentum_rhs(ws, rhs_nl: NonlinearRHS) -> np.ndarray:
    """Assembled momentum load of the nonlinear data: volume stress term
    plus the collapsed facet corrections (and the external part)."""
    load = ws.stress_volume_load(rhs_nl.stress)
    load += ws.facet_value_load(rhs_nl.j_gamma, interface=True)
    load += ws.facet_value_load(rhs_nl.j_outer, interface=False)
    if rhs_nl.f_ext is not None:
        load += ws.mass @ fem.field_to_uvec(rhs_nl.f_ext)
    return load


def _solve_correction(mesh, ws, dt, rhs_list, n_steps):
    lu = ws.step_factorization(dt)
    U_vecs = [np.zeros(ws.nu)]
    U_fields = [Field.zeros(mesh, 2)]
    Q_fields = [Field.zeros(mesh, 1)]
    vec = U_vecs[0]
    for m in range(1, n_steps + 1):
        rhs_nl = rhs_list[m - 1]
        rhs = np.concatenate([
            ws.mass @ vec / dt + _momentum_rhs(ws, rhs_nl),
            ws.pressure_mass @ rhs_nl.g.values[:, 0],
        ])
        sol = lu.solve(rhs)
        vec = sol[:ws.nu]
        U_vecs.append(vec)
        U_fields.append(fem.uvec_to_field(mesh, vec))
        Q_fields.append(Field(mesh, 1, sol[ws.nu:][:, None]))
    return U_vecs, U_fields, Q_fields


def _substituted_residual(mesh, ws, dt, u_vecs, u_fields, q_fields, cfg, params,
                          C0, rho0, f_ext, mu_nodal=None, t0=0.0):
    """Relative algebraic residual of the composed solution substituted
    back into the discrete nonlinear system."""
    _, A_list, _ = _build_geometry(mesh, u_fields, dt, cfg, C0)
    maps = _lagrangian_maps(mesh, u_fields, dt, None) if f_ext is not None else None
    lu = ws.step_factorization(dt)
    worst = 0.0
    for m in range(1, len(u_fields)):
        rhs_nl = compute_nonlinear_terms(u_fields[:m + 1], q_fields[:m + 1],
                                         A_list[m], params, dt, rho0=rho0, f_ext=f_ext,
                                         X=None if maps is None else maps[m],
                                         eval_time=t0 + m * dt, mu_nodal=mu_nodal)
        rhs = np.concatenate([
            ws.mass @ u_vecs[m - 1] / dt + _momentum_rhs(ws, rhs_nl),
            ws.pressure_mass @ rhs_nl.g.values[:, 0],
        ])
        z = np.concatenate([u_vecs[m], q_fields[m].values[:, 0]])
        r = lu.matrix @ z - rhs
        worst = max(worst, np.linalg.norm(r) / max(np.linalg.norm(rhs), 1e-300))
    return worst


# -- stability probe ---------------------------------------------------------------

@dataclass
class StabilityReport:
    distance: float            # trajectory distance L
    initial_distance: float
    ratio: float
    horizon: float


def stability_probe(v0_a: Field, v0_b: Field, cfg: IterationConfig,
                    params: MaterialParams,
                    workspace: StokesWorkspace | None = None) -> StabilityReport:
    """Distance between the two fixed points divided by the initial-data
    distance; bounded ratios are the discrete uniqueness/stability probe."""
    ws = workspace or StokesWorkspace(v0_a.mesh, params)
    traj_a, rep_a = picard_solve_local(v0_a, cfg, params, workspace=ws)
    traj_b, rep_b = picard_solve_local(v0_b, cfg, params, workspace=ws)
    n = min(len(traj_a.states), len(traj_b.states))
    du = [traj_b.states[m].u - traj_a.states[m].u for m in range(n)]
    dq = [traj_b.states[m].q - traj_a.states[m].q for m in range(n)]
    dist = trajectory_norm(du, dq, cfg.dt, cfg.p)
    d0 = fem.field_h1(v0_b - v0_a)
    ratio = dist / d0 if d0 > 0 else 0.0
    return StabilityReport(distance=dist, initial_distance=d0, ratio=ratio,
                           horizon=min(rep_a.horizon, rep_b.horizon))


# -- global continuation -------------------------------------------------------------

@dataclass
class XReport:
    times: np.ndarray
    x_values: np.ndarray
    bound: float
    exceeded: bool
    eps0: float
    initial_norm: float
    momenta_drift: float
    decay_rate: float
    a_fit: float = float("nan")
    b_fit: float = float("nan")


def fit_x_recursion(x_values: np.ndarray) -> tuple[float, float]:
    """Least-squares (a, b) of X = a + b (X^2 + X^3) over the samples, with
    the intercept lifted so the inequality covers every sample."""
    x = np.asarray(x_values, dtype=float)
    x = x[np.isfinite(x)]
    if len(x) == 0:
        return 0.0, 0.0
    z = x ** 2 + x ** 3
    design = np.column_stack([np.ones_like(x), z])
    coef, *_ = np.linalg.lstsq(design, x, rcond=None)
    a, b = float(coef[0]), float(max(coef[1], 0.0))
    a = max(a, float(np.max(x - b * z)), 0.0)
    return a, b


def global_continue(v0: Field, cfg: IterationConfig, params: MaterialParams,
                    workspace: StokesWorkspace | None = None,
                    orthogonality_tol: float = 1e-12) -> tuple[Trajectory, XReport]:
    """Extend the small-data droplet solution to the configured horizon by
    chained local solves, tracking the exponentially weighted functional

        X(T) = || e^{eps0 t} (d_t w, w, grad w, grad^2 w) ||_{Lp(Lq)}
             + || e^{eps0 t} P ||_{Lp(W1)},    (w, P) = (u, q) - (u_L, q_L),

    against the bound 2 * a_cal * ||v0||.  Requires rho0 = eta (piecewise
    constant), zero external force, and eta-orthogonality of v0 to the
    rigid motions (projected when violated beyond tolerance).
    """
    mesh = v0.mesh
    ws = workspace or StokesWorkspace(mesh, params)
    basis = ws.rigid_basis()

    v0n = fem.field_h1(v0)
    moms = rigid_momenta(v0, basis, params)
    if np.abs(moms).max() > orthogonality_tol * max(v0n, 1e-30):
        v0 = project_out_rigid(v0, basis, params)
    v0, _ = helmholtz_project(v0, params)
    init_norm = fem.field_h1(v0) + fem.hessian_seminorm(v0)
    if init_norm > cfg.smallness:
        raise ValidationError(
            f"initial datum norm {init_norm:.3e} exceeds the smallness bound "
            f"{cfg.smallness:.3e}", field="smallness")

    eps0 = cfg.eps0
    if eps0 <= 0:
        from .diagnostics import discrete_spectrum
        eps0 = 0.5 * discrete_spectrum(mesh, params, len(basis) + 3, ws).gap

    # global linear reference from the same datum
    n_total = int(round(cfg.horizon / cfg.dt))
    lin = run_linear(v0, n_total, cfg.dt, params, workspace=ws)

    bound = 2.0 * cfg.a_cal * init_norm
    states = None
    C_state, X_state = None, None
    x_times, x_vals = [], []
    exceeded = False
    t = 0.0
    current = v0
    current_bubble = None
    all_cof, all_maps = None, None
    while t < cfg.horizon - 1e-12 and not exceeded:
        seg_cfg = replace(cfg, horizon=min(cfg.horizon - t, cfg.horizon))
        traj, rep = picard_solve_local(current, seg_cfg, params, workspace=ws,
                                       C0=C_state, X0=X_state, t0=t,
                                       bubble0=current_bubble)
        if not rep.converged:
            raise NonContractionError(
                f"segment at t = {t:.4g} failed to converge "
                f"(last factor {rep.contraction_factors[-1] if rep.contraction_factors else float('nan'):.3g})")
        if states is None:
            states = list(traj.states)
            all_cof = list(traj.cofactors)
            all_maps = list(traj.lagrangian_maps)
        else:
            states.extend(traj.states[1:])
            all_cof.extend(traj.cofactors[1:])
            all_maps.extend(traj.lagrangian_maps[1:])
        C_state = traj.meta["displacement"]
        X_state = traj.lagrangian_maps[-1]
        t = traj.times[-1]
        current = traj.states[-1].u
        current_bubble = traj.states[-1].bubble

        x_now = _x_functional(states, lin.states, cfg, eps0)
        x_times.append(t)
        x_vals.append(x_now)
        if x_now > bound:
            exceeded = True

    times = cfg.dt * np.arange(len(states))
    full = Trajectory(times=times, states=states, cofactors=all_cof,
                      lagrangian_maps=all_maps,
                      meta={"eps0": eps0, "bound": bound})
    full.diagnostics["energy"] = np.array(
        [ws.kinetic_energy(s.uvec()) for s in states])

    vel = np.sqrt(np.maximum(2.0 * full.diagnostics["energy"], 1e-300))
    try:
        from .diagnostics import decay_fit
        rate, _ = decay_fit(vel, cfg.dt)
    except (DomainError, ParameterError):
        rate = float("nan")
    drift = _lagrangian_momentum_drift(full, params, ws)
    a_fit, b_fit = fit_x_recursion(np.array(x_vals))
    report = XReport(times=np.asarray(x_times), x_values=np.asarray(x_vals),
                     bound=bound, exceeded=exceeded, eps0=eps0,
                     initial_norm=init_norm, momenta_drift=drift,
                     decay_rate=rate, a_fit=a_fit, b_fit=b_fit)
    return full, report


def _x_functional(states, lin_states, cfg, eps0) -> float:
    dt, p = cfg.dt, cfg.p
    n = min(len(states), len(lin_states))
    w = [states[m].u - lin_states[m].u for m in range(n)]
    P = [states[m].q - lin_states[m].q for m in range(n)]
    terms = []
    for m in range(1, n):
        s = (fem.field_l2(w[m] - w[m - 1]) / dt + fem.field_l2(w[m])
             + fem.field_h1_semi(w[m]) + fem.hessian_seminorm(w[m]))
        terms.append(math.exp(eps0 * m * dt) * s)
    x_w = float((dt * np.sum(np.asarray(terms) ** p)) ** (1.0 / p)) if terms else 0.0
    pterms = [math.exp(eps0 * m * dt) * fem.field_h1(P[m]) for m in range(1, n)]
    x_p = float((dt * np.sum(np.asarray(pterms) ** p)) ** (1.0 / p)) if pterms else 0.0
    return x_w + x_p


def _lagrangian_momentum_drift(traj: Trajectory, params, ws) -> float:
    from .diagnostics import momentum_and_barycenter
    rep = momentum_and_barycenter(traj, params, ws)
    return float(rep.residuals["momentum"].max())
