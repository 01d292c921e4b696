"""Lagrangian map geometry: accumulated displacement gradients, the
cofactor matrix via its Neumann series, difference fields, pushforward
normals and the deformation-tensor variants entering the nonlinear terms.

All quantities are per-node 2x2 matrices on the doubled scalar dof layout,
so interface nodes carry independent plus/minus traces.  The series is
valid while the accumulated gradient stays strictly inside the unit ball;
callers are expected to shrink their time horizon when the kappa check
fails.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import fem
from .errors import ConvergenceError, DomainError, GeometryError, ShapeError, SingularityError
from .mesh import Field, RefMesh

DEFAULT_KAPPA = 0.5
DEFAULT_SERIES_TOL = 1e-13
DEFAULT_MAX_ORDER = 64


def _spectral_norms(mats: np.ndarray) -> np.ndarray:
    """Exact per-node 2-norm of (n, 2, 2) matrices."""
    sq = np.einsum("nij,nik->njk", mats, mats)
    tr = sq[:, 0, 0] + sq[:, 1, 1]
    det = sq[:, 0, 0] * sq[:, 1, 1] - sq[:, 0, 1] * sq[:, 1, 0]
    disc = np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0))
    return np.sqrt(np.maximum(0.5 * (tr + disc), 0.0))


@dataclass
class DisplacementGradient:
    """Time-accumulated velocity gradient C(xi, t) = int_0^t grad u dtau.

    Accumulated with the trapezoid rule (exact for piecewise-constant-in-time
    data); ``norm_estimate`` tracks an upper bound for the L1-in-time of the
    max-node gradient norm, which is the kappa certificate of Lemma-A type
    bounds.
    """

    mesh: RefMesh
    mats: np.ndarray = None          # (nsdof, 2, 2)
    time: float = 0.0
    norm_estimate: float = 0.0
    _last_grad: np.ndarray = dc_field(default=None, repr=False)

    def __post_init__(self):
        if self.mats is None:
            self.mats = np.zeros((self.mesh.nsdof, 2, 2))
        self.mats = np.asarray(self.mats, dtype=float)
        if self.mats.shape != (self.mesh.nsdof, 2, 2):
            raise ShapeError("displacement gradient shape mismatch")

    def copy(self) -> "DisplacementGradient":
        out = DisplacementGradient(self.mesh, self.mats.copy(), self.time, self.norm_estimate)
        out._last_grad = None if self._last_grad is None else self._last_grad.copy()
        return out

    def seed_left_endpoint(self, grad_u: np.ndarray) -> None:
        """Record the gradient at the current time as the trapezoid left
        endpoint without advancing; used to seed t = 0 data."""
        grad_u = np.asarray(grad_u, dtype=float)
        if grad_u.shape != (self.mesh.nsdof, 2, 2):
            raise ShapeError("gradient field does not match the mesh dof layout")
        self._last_grad = grad_u.copy()

    def max_norm(self) -> float:
        return float(_spectral_norms(self.mats).max())


def accumulate_gradient(C: DisplacementGradient, grad_u: np.ndarray,
                        dt: float) -> DisplacementGradient:
    """Advance C by one trapezoid step with the new nodal Jacobian ``grad_u``
    (shape (nsdof, 2, 2)); the first call seeds the left endpoint."""
    if dt <= 0:
        raise DomainError(f"dt must be positive, got {dt}")
    grad_u = np.asarray(grad_u, dtype=float)
    if grad_u.shape != (C.mesh.nsdof, 2, 2):
        raise ShapeError("gradient field does not match the mesh dof layout")
    out = C.copy()
    left = C._last_grad if C._last_grad is not None else grad_u
    avg = 0.5 * (left + grad_u)
    out.mats = C.mats + dt * avg
    out.time = C.time + dt
    out.norm_estimate = C.norm_estimate + dt * float(_spectral_norms(avg).max())
    out._last_grad = grad_u.copy()
    return out


@dataclass
class CofactorField:
    """Per-node cofactor matrix A = (I + C)^{-1} with series metadata."""

    mesh: RefMesh
    mats: np.ndarray                  # (nsdof, 2, 2)
    order: int = 0
    kappa: float = 0.0

    def identity_residual(self, C: DisplacementGradient) -> float:
        prod = np.einsum("nij,njk->nik", self.mats, _i_plus(C.mats))
        prod[:, 0, 0] -= 1.0
        prod[:, 1, 1] -= 1.0
        return float(_spectral_norms(prod).max())

    def minus_identity_norm(self) -> float:
        d = self.mats.copy()
        d[:, 0, 0] -= 1.0
        d[:, 1, 1] -= 1.0
        return float(_spectral_norms(d).max())


@dataclass
class TransformedNormal:
    """Unit pushforward normals A n / |A n| at interface and outer nodes."""

    mesh: RefMesh
    gamma: np.ndarray        # (n_gamma_nodes, 2)
    outer: np.ndarray        # (n_outer_nodes, 2)


def _i_plus(C: np.ndarray) -> np.ndarray:
    out = C.copy()
    out[:, 0, 0] += 1.0
    out[:, 1, 1] += 1.0
    return out


def neumann_cofactor(C: DisplacementGradient, tol: float = DEFAULT_SERIES_TOL,
                     max_order: int = DEFAULT_MAX_ORDER,
                     kappa: float = DEFAULT_KAPPA) -> CofactorField:
    """Truncated Neumann series sum_k (-C)^k for (I + C)^{-1}.

    Stops at the first order whose term norm drops below ``tol``; raises if
    the per-node norm bound exceeds ``kappa`` (series untrusted) or the
    series fails to converge within ``max_order`` terms.
    """
    norms = _spectral_norms(C.mats)
    kmax = float(norms.max()) if len(norms) else 0.0
    if kmax > kappa * (1.0 + 1e-12):        # boundary ||C|| = kappa admissible
        raise GeometryError(
            f"displacement gradient norm {kmax:.3g} exceeds kappa={kappa}; "
            "reduce the time horizon")
    n = C.mats.shape[0]
    acc = np.zeros_like(C.mats)
    acc[:, 0, 0] = 1.0
    acc[:, 1, 1] = 1.0
    term = acc.copy()
    order = 0
    for k in range(1, max_order + 1):
        term = -np.einsum("nij,njk->nik", term, C.mats)
        tnorm = float(_spectral_norms(term).max())
        if tnorm < tol:
            break
        acc += term
        order = k
    else:
        raise ConvergenceError(
            f"cofactor series did not reach tol={tol} within {max_order} terms")
    return CofactorField(C.mesh, acc, order=order, kappa=kmax)


def direct_inverse_oracle(C: DisplacementGradient) -> CofactorField:
    """Closed-form per-node 2x2 inverse of (I + C); the series oracle."""
    m = _i_plus(C.mats)
    det = m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]
    bad = np.nonzero(np.abs(det) < 1e-300)[0]
    if len(bad):
        raise SingularityError(f"singular map at node {bad[0]}", node=int(bad[0]))
    inv = np.empty_like(m)
    inv[:, 0, 0] = m[:, 1, 1] / det
    inv[:, 1, 1] = m[:, 0, 0] / det
    inv[:, 0, 1] = -m[:, 0, 1] / det
    inv[:, 1, 0] = -m[:, 1, 0] / det
    return CofactorField(C.mesh, inv, order=-1, kappa=float(_spectral_norms(C.mats).max()))


def delta_cofactor(C1: DisplacementGradient, C2: DisplacementGradient,
                   tol: float = DEFAULT_SERIES_TOL,
                   max_order: int = DEFAULT_MAX_ORDER,
                   kappa: float = DEFAULT_KAPPA) -> np.ndarray:
    """Difference field A2 - A1 by the telescoped double-sum series

        delta A = sum_{l>=1} (-1)^l sum_{j=0}^{l-1} C1^j (C2 - C1) C2^{l-1-j},

    truncated once the l-th term norm falls below ``tol``.  The difference
    factor sits between the power sums; matrices do not commute, so the
    shorthand with the factor pulled out front is only notation.
    """
    for C in (C1, C2):
        kmax = float(_spectral_norms(C.mats).max()) if len(C.mats) else 0.0
        if kmax > kappa:
            raise GeometryError(
                f"displacement gradient norm {kmax:.3g} exceeds kappa={kappa}")
    if C1.mesh is not C2.mesh:
        raise ShapeError("displacement gradients live on different meshes")
    dC = C2.mats - C1.mats
    n = dC.shape[0]
    eye = np.zeros((n, 2, 2))
    eye[:, 0, 0] = 1.0
    eye[:, 1, 1] = 1.0

    series = np.zeros((n, 2, 2))
    sign = -1.0
    c1_pows = [eye]       # C1^j dC prefactors are built below from these
    c2_pows = [eye]
    for ell in range(1, max_order + 1):
        inner = np.zeros((n, 2, 2))
        for j in range(ell):
            left = np.einsum("nij,njk->nik", c1_pows[j], dC)
            inner += np.einsum("nij,njk->nik", left, c2_pows[ell - 1 - j])
        series += sign * inner
        sign = -sign
        if float(_spectral_norms(inner).max()) < tol:
            break
        c1_pows.append(np.einsum("nij,njk->nik", c1_pows[-1], C1.mats))
        c2_pows.append(np.einsum("nij,njk->nik", c2_pows[-1], C2.mats))
    else:
        raise ConvergenceError(
            f"delta-cofactor series did not converge within {max_order} terms")
    return series


def pushforward_normal(A: CofactorField, mesh: RefMesh,
                       degeneracy_tol: float = 1e-12) -> TransformedNormal:
    """Unit transformed normals on Gamma and Gamma_plus.

    On Gamma the two traces of A are averaged before applying, keeping the
    transformed normal single-valued on the interface.
    """
    gm = 0.5 * (A.mats[mesh.sdof_plus[mesh.gamma_nodes]]
                + A.mats[mesh.sdof_minus[mesh.gamma_nodes]])
    gvec = np.einsum("nij,nj->ni", gm, mesh.node_normals_gamma)
    om = A.mats[mesh.sdof_minus[mesh.gamma_plus_nodes]] if mesh.outer_phase < 0 \
        else A.mats[mesh.sdof_plus[mesh.gamma_plus_nodes]]
    ovec = np.einsum("nij,nj->ni", om, mesh.node_normals_outer)
    for vec, name in ((gvec, "Gamma"), (ovec, "Gamma_plus")):
        mags = np.linalg.norm(vec, axis=1)
        if np.any(mags < degeneracy_tol):
            raise GeometryError(f"|A n| degenerate on {name}")
        vec /= mags[:, None]
    return TransformedNormal(mesh, gvec, ovec)


@dataclass
class DeformationTensors:
    """Per-node deformation-tensor family for a velocity field u:

    ``D``       symmetric rate tensor grad^T u + grad u^T,
    ``Du``      its Lagrangian transform grad^T u A^T + A grad u^T,
    ``H``       the defect D - Du = grad^T u (I - A^T) + (I - A) grad u^T,
    ``D_tilde`` the product D(u) (I - A) entering the source terms.
    """

    D: np.ndarray
    Du: np.ndarray
    H: np.ndarray
    D_tilde: np.ndarray


def deformation_tensors(u: Field, A: CofactorField,
                        grad_u: np.ndarray | None = None) -> DeformationTensors:
    """All deformation-tensor variants from recovered nodal Jacobians."""
    if u.ncomp != 2:
        raise ShapeError("velocity field must have 2 components")
    G = fem.recover_gradient(u) if grad_u is None else np.asarray(grad_u, dtype=float)
    if G.shape != (u.mesh.nsdof, 2, 2):
        raise ShapeError("Jacobian field shape mismatch")
    At = np.swapaxes(A.mats, 1, 2)
    Gt = np.swapaxes(G, 1, 2)
    D = G + Gt
    Du = np.einsum("nij,njk->nik", G, At) + np.einsum("nij,njk->nik", A.mats, Gt)
    ImA = -A.mats.copy()
    ImA[:, 0, 0] += 1.0
    ImA[:, 1, 1] += 1.0
    ImAt = np.swapaxes(ImA, 1, 2)
    H = np.einsum("nij,njk->nik", G, ImAt) + np.einsum("nij,njk->nik", ImA, Gt)
    D_tilde = np.einsum("nij,njk->nik", D, ImA)
    return DeformationTensors(D=D, Du=Du, H=H, D_tilde=D_tilde)


def identity_cofactor(mesh: RefMesh) -> CofactorField:
    mats = np.zeros((mesh.nsdof, 2, 2))
    mats[:, 0, 0] = 1.0
    mats[:, 1, 1] = 1.0
    return CofactorField(mesh, mats, order=0, kappa=0.0)
