"""Conservation budgets, exponential-decay fitting, the cubic bootstrap
lemma and the discrete spectrum of the two-phase Stokes operator.

The spectrum is computed from the saddle-point generalized eigenproblem on
the discretely divergence-free manifold with the eta-weighted mass, using
a shift-invert Arnoldi iteration at a small negative shift so the exact
rigid-motion kernel separates cleanly from the first positive cluster.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .errors import DomainError, NumericError, ParameterError
from .mesh import Field
from .stepper import StokesWorkspace, Trajectory
from .transmission import MaterialParams


@dataclass
class ConservationReport:
    """Scalar budget series along a trajectory; residual arrays are keyed
    by identity name ('energy', 'momentum', 'barycenter')."""

    times: np.ndarray
    energy: np.ndarray | None = None
    dissipation: np.ndarray | None = None
    momenta: np.ndarray | None = None          # (n_steps+1, M)
    barycenter: np.ndarray | None = None       # (n_steps+1, 2)
    residuals: dict = dc_field(default_factory=dict)

    def csv_columns(self) -> dict:
        cols = {"time": self.times}
        if self.energy is not None:
            cols["energy"] = self.energy
        if self.dissipation is not None:
            cols["dissipation"] = self.dissipation
        if self.momenta is not None:
            for alpha in range(self.momenta.shape[1]):
                cols[f"momentum_{alpha}"] = self.momenta[:, alpha]
        if self.barycenter is not None:
            cols["barycenter_x"] = self.barycenter[:, 0]
            cols["barycenter_y"] = self.barycenter[:, 1]
        for name, arr in self.residuals.items():
            cols[f"residual_{name}"] = arr
        return cols


@dataclass
class SpectrumReport:
    """Eigenvalues of the discrete Stokes operator sorted by real part."""

    eigenvalues: np.ndarray
    kernel_dim: int
    gap: float                   # smallest nonzero real part
    eps0: float                  # decay-rate surrogate derived from the gap
    kernel_vectors: np.ndarray = None   # velocity dof columns
    principal_angles: np.ndarray = None


def _lagrangian_dissipation(traj: Trajectory, params: MaterialParams, i: int,
                            mu_c: np.ndarray) -> float:
    """1/2 int mu D_A(u):D_A(u) with the stored cofactor at step i,
    evaluated cellwise (exact velocity gradients, centroid cofactor)."""
    state = traj.states[i]
    mesh = state.u.mesh
    G = fem.cell_gradients(state.u)                     # (nc, 2, 2)
    A = traj.cofactors[i]                                # (nsdof, 2, 2)
    Ac = A[mesh.cell_sdofs].mean(axis=1)                 # centroid value
    Du = np.einsum("cij,ckj->cik", G, Ac) + np.einsum("cij,ckj->cik", Ac, G)
    sq = np.einsum("cij,cij->c", Du, Du)
    return 0.5 * float(np.dot(mesh.areas * mu_c, sq))


def energy_budget(traj: Trajectory, params: MaterialParams,
                  workspace: StokesWorkspace | None = None,
                  work: np.ndarray | None = None) -> ConservationReport:
    """Kinetic energy, dissipation and the per-step residual of the energy
    identity d/dt (1/2 eta|u|^2) + 1/2 (mu D(u), D(u)) = work.

    With a Lagrangian trajectory (cofactors present) the dissipation uses
    the transformed deformation tensor.
    """
    if len(traj.states) < 2:
        raise ParameterError("trajectory must contain at least two states")
    mesh = traj.states[0].u.mesh
    ws = workspace or StokesWorkspace(mesh, params)
    n = len(traj.states)
    dt = traj.dt
    energy = np.array([ws.kinetic_energy(s.uvec()) for s in traj.states])
    if traj.cofactors is not None:
        mu_c = params.mu_cells(mesh)
        dissip = np.array([_lagrangian_dissipation(traj, params, i, mu_c)
                           for i in range(n)])
    else:
        dissip = np.array([ws.dissipation(s.uvec()) for s in traj.states])
    w = np.zeros(n) if work is None else np.asarray(work, dtype=float)
    residual = np.zeros(n)
    residual[1:] = (energy[1:] - energy[:-1]) / dt + dissip[1:] - w[1:]
    return ConservationReport(times=traj.times, energy=energy, dissipation=dissip,
                              residuals={"energy": residual})


def momentum_and_barycenter(traj: Trajectory, params: MaterialParams,
                            workspace: StokesWorkspace | None = None) -> ConservationReport:
    """Rigid-momentum and barycenter series with their identity residuals.

    Linear trajectories use the fixed-domain momenta (eta u, p_alpha); a
    Lagrangian trajectory evaluates the pulled-back momenta
    int eta u . p_alpha(X(xi,t)) dxi and the barycenter int eta X dxi.
    """
    mesh = traj.states[0].u.mesh
    ws = workspace or StokesWorkspace(mesh, params)
    basis = ws.rigid_basis()
    eta_c = params.eta_cells(mesh)
    n = len(traj.states)
    dt = traj.dt

    if traj.lagrangian_maps is None:
        momenta = np.array([ws.momentum(s.uvec(), basis) for s in traj.states])
        vol_flux = np.array([fem.field_integral(s.u) * 0 +
                             _eta_velocity_integral(s.u, eta_c) for s in traj.states])
        bary = np.empty((n, 2))
        bary[0] = _eta_position_integral(mesh, eta_c, None)
        for i in range(1, n):
            bary[i] = bary[i - 1] + 0.5 * dt * (vol_flux[i - 1] + vol_flux[i])
    else:
        momenta = np.empty((n, len(basis)))
        bary = np.empty((n, 2))
        for i, s in enumerate(traj.states):
            X = traj.lagrangian_maps[i]        # (n_nodes, 2)
            momenta[i] = _lagrangian_momenta(s.u, X, basis, eta_c)
            bary[i] = _eta_position_integral(mesh, eta_c, X)
        vol_flux = np.array([_eta_velocity_integral(s.u, eta_c) for s in traj.states])

    mom_res = momenta - momenta[0]
    bary_res = np.zeros(n)
    for i in range(1, n):
        bary_res[i] = np.linalg.norm((bary[i] - bary[i - 1]) / dt - vol_flux[i])
    return ConservationReport(times=traj.times, momenta=momenta, barycenter=bary,
                              residuals={"momentum": np.abs(mom_res).max(axis=1),
                                         "barycenter": bary_res})


def _eta_velocity_integral(u: Field, eta_c: np.ndarray) -> np.ndarray:
    mesh = u.mesh
    vals = u.values[mesh.cell_sdofs]
    return np.einsum("c,cav->v", mesh.areas * eta_c / 3.0, vals)


def _eta_position_integral(mesh, eta_c: np.ndarray, X: np.ndarray | None) -> np.ndarray:
    pos = mesh.nodes if X is None else X
    fld = Field.from_nodal(mesh, pos)
    vals = fld.values[mesh.cell_sdofs]
    return np.einsum("c,cav->v", mesh.areas * eta_c / 3.0, vals)


def _lagrangian_momenta(u: Field, X: np.ndarray, basis, eta_c: np.ndarray) -> np.ndarray:
    mesh = u.mesh
    out = np.empty(len(basis))
    for alpha, (A, b) in enumerate(basis.coeffs):
        p_at_x = X @ A.T + b
        integrand = Field.from_nodal(mesh, u.plus() * 0 + p_at_x)
        out[alpha] = fem.field_inner(u, integrand, eta_c)
    return out


def decay_fit(series: np.ndarray, dt: float, drop_fraction: float = 0.1,
              times: np.ndarray | None = None) -> tuple[float, float]:
    """Least-squares exponential rate of a positive series: fits
    log y = c - rate * t after dropping the leading transient fraction.

    Returns (rate, confidence half-width); rate > 0 means decay.
    """
    series = np.asarray(series, dtype=float)
    if len(series) < 8:
        raise ParameterError(f"need at least 8 samples, got {len(series)}")
    if np.any(series <= 0) or not np.all(np.isfinite(series)):
        raise DomainError("decay fit requires strictly positive finite samples")
    t = np.arange(len(series)) * dt if times is None else np.asarray(times, dtype=float)
    skip = int(np.floor(drop_fraction * len(series)))
    t, y = t[skip:], np.log(series[skip:])
    a = np.column_stack([np.ones_like(t), t])
    coef, res, _, _ = np.linalg.lstsq(a, y, rcond=None)
    rate = -coef[1]
    dof = len(t) - 2
    if dof > 0 and len(res):
        sigma2 = res[0] / dof
        tvar = np.sum((t - t.mean()) ** 2)
        half = 1.96 * np.sqrt(sigma2 / tvar) if tvar > 0 else np.inf
    else:
        half = 0.0
    return float(rate), float(half)


def discrete_spectrum(mesh, params: MaterialParams, count: int,
                      workspace: StokesWorkspace | None = None,
                      sigma: float = -0.1, seed: int = 0,
                      kernel_tol: float = 1e-8) -> SpectrumReport:
    """Smallest-magnitude eigenpairs of the two-phase Stokes operator on the
    discretely divergence-free manifold.

    The kernel consists of the rigid motions; every other eigenvalue of the
    symmetric pencil has positive real part.
    """
    ws = workspace or StokesWorkspace(mesh, params)
    basis = ws.rigid_basis()
    if count < len(basis) + 3:
        raise ParameterError(f"count must be at least {len(basis) + 3}")
    nu, np_ = ws.nu, ws.np_
    K = sp.bmat([[ws.stiffness, -ws.div.T], [ws.div, None]], format="csc")
    M = sp.bmat([[ws.mass, None],
                 [None, sp.csr_matrix((np_, np_))]], format="csc")
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(nu + np_)
    try:
        vals, vecs = spla.eigs(K, k=count, M=M, sigma=sigma, which="LM", v0=v0)
    except Exception as exc:
        raise NumericError(f"spectrum eigen-solver failed: {exc}") from exc

    order = np.argsort(vals.real)
    vals, vecs = vals[order], vecs[:, order]
    scale = max(np.abs(vals).max(), 1.0)
    kernel_mask = np.abs(vals) <= kernel_tol * scale
    kernel_dim = int(kernel_mask.sum())
    nonzero = vals[~kernel_mask]
    gap = float(nonzero.real.min()) if len(nonzero) else np.inf

    kvecs = vecs[:nu, kernel_mask].real
    angles = _principal_angles(ws, basis, kvecs) if kernel_dim else np.array([])
    return SpectrumReport(eigenvalues=vals, kernel_dim=kernel_dim, gap=gap,
                          eps0=gap, kernel_vectors=kvecs, principal_angles=angles)


def _principal_angles(ws: StokesWorkspace, basis, kvecs: np.ndarray) -> np.ndarray:
    """Principal angles between the kernel eigenvectors and the rigid-motion
    span, measured in the eta-weighted inner product."""
    if kvecs.shape[1] == 0:
        return np.array([])
    p_mat = np.column_stack([fem.field_to_uvec(p) for p in basis.fields])
    # eta-orthonormalize both bases, then SVD of the cross-Gram
    def orthonormalize(cols):
        g = cols.T @ (ws.mass @ cols)
        lam, q = np.linalg.eigh(g)
        if np.any(lam <= 0):
            raise NumericError("degenerate subspace in principal-angle computation")
        return cols @ (q / np.sqrt(lam)) @ q.T

    pb = orthonormalize(p_mat)
    kb = orthonormalize(kvecs)
    svals = np.linalg.svd(pb.T @ (ws.mass @ kb), compute_uv=False)
    svals = np.clip(svals, -1.0, 1.0)
    return np.arccos(svals)


# -- bootstrap lemma -----------------------------------------------------------

class BootstrapRoot(NamedTuple):
    r_b: float
    fprime: float     # 3 b r_b^2 + 2 b r_b - 1, zero by construction


def bootstrap_rb(b: float) -> BootstrapRoot:
    """Critical radius r_b = (-1 + sqrt(1 + 3/b)) / 3 of the cubic
    bootstrap map, with the stationarity residual for verification."""
    if not b > 0:
        raise DomainError(f"b must be positive, got {b}")
    r = (-1.0 + np.sqrt(1.0 + 3.0 / b)) / 3.0
    fprime = 3.0 * b * r * r + 2.0 * b * r - 1.0
    return BootstrapRoot(float(r), float(fprime))


@dataclass
class BootstrapVerdict:
    hypothesis_ok: bool
    recursion_ok: bool
    conclusion_ok: bool
    first_violation: int | None
    r_b: float
    bound: float              # 2a
    max_x: float
    max_step: float

    @property
    def holds(self) -> bool:
        return self.hypothesis_ok and self.recursion_ok and self.conclusion_ok


def bootstrap_check(a: float, b: float, X: np.ndarray,
                    max_jump: float | None = None,
                    slack: float = 1e-12) -> BootstrapVerdict:
    """Verify the cubic bootstrap lemma on sampled data: under the smallness
    hypothesis a < r_b (2 - b r_b)/3 with X(0) <= r_b, a trajectory obeying
    X <= a + b X^2 + b X^3 stays below 2a."""
    if not (a > 0 and b > 0):
        raise DomainError("a and b must be positive")
    X = np.asarray(X, dtype=float)
    r_b = bootstrap_rb(b).r_b
    steps = np.abs(np.diff(X)) if len(X) > 1 else np.array([0.0])
    max_step = float(steps.max()) if len(steps) else 0.0
    hypothesis_ok = (a < r_b * (2.0 - b * r_b) / 3.0) and (len(X) > 0 and X[0] <= r_b)
    if max_jump is not None and max_step > max_jump:
        hypothesis_ok = False
    recursion = X <= a + b * X ** 2 + b * X ** 3 + slack
    first = None
    if not np.all(recursion):
        first = int(np.argmin(recursion))
    conclusion = X <= 2.0 * a + slack
    if first is None and not np.all(conclusion):
        first = int(np.argmin(conclusion))
    return BootstrapVerdict(
        hypothesis_ok=bool(hypothesis_ok),
        recursion_ok=bool(np.all(recursion)),
        conclusion_ok=bool(np.all(conclusion)),
        first_violation=first,
        r_b=r_b,
        bound=2.0 * a,
        max_x=float(X.max()) if len(X) else 0.0,
        max_step=max_step,
    )
