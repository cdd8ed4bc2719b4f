"""The scaled problem: residual and potential of the ansatz, the weighted
norm, and linear/nonlinear solves projected off the approximate kernel.

The scaled domain is the physical mesh with coordinates reinterpreted as
eps*y; every integral carries the change-of-variables Jacobian, which makes
the projected saddle system

    [eps^2 A - M_aW   -C^T] [phi]   [F]
    [      C            0 ] [ c ] = [0]

well-scaled (A the weighted Neumann operator, M_aW the potential-weighted
mass, C the kernel-constraint rows). The c-block is eliminated by a Schur
complement on the (at most 2m)-dimensional multiplier space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (ContractionFailed, NonPositiveField,
                     OverflowInExponential, SaddleSingular)
from .fem import (GridFunction, _quad_points_for_tris, tri_rule)

_EXP_CAP = 700.0


# -- nonlinearity of the scaled equation -----------------------------------------


def nonlinearity(scale):
    """(f, f', f'') of the scaled equation as vectorized callables of v.

    f(v) = u^(p-1) exp(gamma^p (u^p - 1)), u = 1 + v/(p gamma^p).
    Raises NonPositiveField when p != 1 and u <= 0, OverflowInExponential
    when the exponent exceeds floating range.
    """
    p, gp = scale.p, scale.gamma_p

    def parts(v):
        v = np.asarray(v, dtype=float)
        u = 1.0 + v / (p * gp)
        if p != 1.0 and np.any(u <= 0.0):
            raise NonPositiveField("scaled field drives u = 1 + v/(p gamma^p) <= 0")
        ex = gp * (u ** p - 1.0)
        if np.any(ex > _EXP_CAP):
            raise OverflowInExponential(
                f"exponent {float(np.max(ex)):.3g} exceeds floating range")
        return u, np.exp(ex)

    def f(v):
        u, e = parts(v)
        return u ** (p - 1.0) * e

    def fp(v):
        u, e = parts(v)
        return ((p - 1.0) / (p * gp) * u ** (p - 2.0) + u ** (2.0 * (p - 1.0))) * e

    def fpp(v):
        u, e = parts(v)
        g1 = (p - 1.0) / (p * gp)
        return (g1 * (p - 2.0) / (p * gp) * u ** (p - 3.0)
                + 3.0 * g1 * u ** (2.0 * p - 3.0)
                + u ** (3.0 * p - 3.0) * 1.0) * e

    return f, fp, fpp


# -- weighted norm -----------------------------------------------------------------


@dataclass
class WeightedNorm:
    """Bubble-adapted sup norm: sup |h| / (sum_i mu_i^s/(mu_i+|y-xi'_i|)^(2+s) + eps^2)."""

    config: object
    sigma: float = 0.25

    def weight(self, y_pts):
        sc = self.config.scale
        y_pts = np.atleast_2d(np.asarray(y_pts, dtype=float))
        out = np.full(y_pts.shape[0], sc.eps ** 2)
        for i, pt in enumerate(self.config.points):
            mu = float(self.config.mu[i])
            r = np.linalg.norm(y_pts - pt.xi / sc.eps, axis=1)
            out += mu ** self.sigma / (mu + r) ** (2.0 + self.sigma)
        return out

    def of_values(self, values, y_pts):
        return float(np.max(np.abs(np.asarray(values)) / self.weight(y_pts)))

    def of_nodal(self, values):
        mesh_pts = self.config._mesh_scaled_pts
        return self.of_values(values, mesh_pts)


# -- residual and potential ---------------------------------------------------------


def scaled_nodes(ansatz):
    return ansatz.mesh.vertices / ansatz.config.scale.eps


def residual_E(ansatz, norm: WeightedNorm = None):
    """(nodal residual field of the scaled equation, its weighted norm).

    E = -D_a V + eps^2 V - f(V) + p gamma^p eps^2, with the operator part
    evaluated through the bubble identity (exact for the analytic pieces)
    and f(V) from the assembled ansatz.
    """
    cfg = ansatz.config
    f, _, _ = nonlinearity(cfg.scale)
    op = ansatz.operator_term(ansatz.mesh.vertices)
    E = op - f(ansatz.V_nodal)
    if norm is None:
        norm = WeightedNorm(cfg)
    val = norm.of_values(E, scaled_nodes(ansatz))
    return E, val


def potential_W(ansatz, norm: WeightedNorm = None):
    """(nodal potential W = f'(V), its weighted norm)."""
    cfg = ansatz.config
    _, fp, _ = nonlinearity(cfg.scale)
    W = fp(ansatz.V_nodal)
    if norm is None:
        norm = WeightedNorm(cfg)
    return W, norm.of_values(W, scaled_nodes(ansatz))


# -- projection basis ----------------------------------------------------------------


def cutoff_chi(r, R0=10.0):
    """Quintic step: 1 on [0, R0], 0 beyond R0+1, C^2 monotone between."""
    r = np.asarray(r, dtype=float)
    s = np.clip(r - R0, 0.0, 1.0)
    return 1.0 - (10.0 * s ** 3 - 15.0 * s ** 4 + 6.0 * s ** 5)


def _Zj(z, j):
    r2 = (z ** 2).sum(axis=1)
    if j == 0:
        return (r2 - 1.0) / (r2 + 1.0)
    return z[:, j - 1] / (r2 + 1.0)


@dataclass
class FlatteningMap:
    """Boundary-straightening change of variables at a boundary bubble.

    rotation A maps the outward normal at xi to (0, -1) so the interior
    is locally the upper graph region x2 > G(x1), G(x1) = kappa x1^2 / 2
    (quadratic fit of the boundary; exact within the O(eps mu) cutoff)."""

    xi: np.ndarray
    A: np.ndarray
    kappa: float
    eps: float

    def apply(self, x_phys):
        x_phys = np.atleast_2d(np.asarray(x_phys, dtype=float))
        v = (x_phys - self.xi) @ self.A.T
        g = 0.5 * self.kappa * v[:, 0] ** 2
        gp = self.kappa * v[:, 0]
        F1 = v[:, 0] + (v[:, 1] - g) * gp / (1.0 + gp ** 2)
        F2 = v[:, 1] - g
        return np.stack([F1, F2], axis=-1) / self.eps


def rotation_to_lower_normal(nu):
    """Rotation A with A nu = (0, -1)."""
    phi = np.arctan2(nu[1], nu[0])
    alpha = -np.pi / 2.0 - phi
    ca, sa = np.cos(alpha), np.sin(alpha)
    return np.array([[ca, -sa], [sa, ca]])


class ProjectionBasis:
    """Cutoffs chi_i and kernel elements Z_ij of the projected problem.

    Interior bubbles carry the two translation modes (j = 1, 2); boundary
    bubbles carry the flattened tangential mode (j = 1). j = 0 is the
    dilation mode, exposed for diagnostics only. All callables take
    physical coordinates x = eps y.
    """

    def __init__(self, config, R0=10.0):
        self.config = config
        self.R0 = float(R0)
        self.flattening = []
        self.J = []
        for pt in config.points:
            if pt.tag == "interior":
                self.flattening.append(None)
                self.J.append(2)
            else:
                t = config.domain.project(pt.xi)
                _, nu, _ = config.domain.boundary_point(float(t))
                kappa = float(config.domain.curvature(float(t)))
                self.flattening.append(FlatteningMap(
                    pt.xi, rotation_to_lower_normal(nu), kappa, config.scale.eps))
                self.J.append(1)
        self.labels = [(i, j) for i in range(config.m)
                       for j in range(1, self.J[i] + 1)]

    def _coords(self, i, x_phys):
        sc = self.config.scale
        pt = self.config.points[i]
        mu = float(self.config.mu[i])
        if self.flattening[i] is None:
            z = (np.atleast_2d(np.asarray(x_phys, float)) - pt.xi) / (sc.eps * mu)
        else:
            z = self.flattening[i].apply(x_phys) / mu
        return z, mu

    def chi(self, i, x_phys):
        z, _ = self._coords(i, x_phys)
        return cutoff_chi(np.linalg.norm(z, axis=1), self.R0)

    def Z(self, i, j, x_phys):
        z, mu = self._coords(i, x_phys)
        return _Zj(z, j) / mu

    def support_radius(self, i):
        """Physical radius covering supp chi_i (with flattening margin)."""
        sc = self.config.scale
        mu = float(self.config.mu[i])
        return 1.4 * sc.eps * mu * (self.R0 + 1.0)

    def constraint_matrix(self, mesh):
        """Rows C[(i,j), n] = int chi_i Z_ij phi_n dx (physical measure; the
        eps^-2 Jacobian cancels in the scaled saddle system)."""
        rows = []
        for (i, j) in self.labels:
            xi = self.config.points[i].xi
            cent = mesh.vertices[mesh.triangles].mean(axis=1)
            sel = np.where(np.linalg.norm(cent - xi, axis=1)
                           <= self.support_radius(i) + 2 * mesh.h_loc)[0]
            pts, wts, bary, tri_of = _quad_points_for_tris(mesh, sel, tri_rule(5), 0)
            vals = self.chi(i, pts) * self.Z(i, j, pts) * wts
            row = np.zeros(mesh.n_vertices)
            np.add.at(row, mesh.triangles[tri_of].ravel(),
                      (vals[:, None] * bary).ravel())
            rows.append(row)
        return np.array(rows)


# -- projected solves -----------------------------------------------------------------


@dataclass
class ProjectedOperator:
    """Factorized saddle operator for one (ansatz, basis)."""

    ansatz: object
    basis: ProjectionBasis
    system: object
    K: sp.csr_matrix
    C: np.ndarray
    _solve: object
    _schur: np.ndarray

    def apply_T(self, rhs_vec):
        """Solve K phi - C^T c = rhs, C phi = 0; returns (phi, c)."""
        y0 = self._solve(rhs_vec)
        if not np.all(np.isfinite(y0)):
            raise SaddleSingular("singular projected operator (non-finite solve)")
        try:
            c = -np.linalg.solve(self._schur, self.C @ y0)
        except np.linalg.LinAlgError as exc:
            raise SaddleSingular(f"singular multiplier block: {exc}") from exc
        phi = y0 + self._solve(self.C.T @ c)
        return phi, c

    def residuals(self, phi, c, rhs_vec):
        lin = np.linalg.norm(self.K @ phi - self.C.T @ c - rhs_vec)
        lin /= max(np.linalg.norm(rhs_vec), 1e-300)
        con = float(np.max(np.abs(self.C @ phi))) if self.C.size else 0.0
        return lin, con


def build_projected_operator(ansatz, basis: ProjectionBasis, system) -> ProjectedOperator:
    """Assemble eps^2 A - M_aW and the constraint rows, factorize once."""
    cfg = ansatz.config
    sc = cfg.scale
    mesh = system.mesh
    _, fp, _ = nonlinearity(sc)

    # potential-weighted mass, order-5 rule (W is sharply peaked)
    pts, wts, bary, tri_of = _quad_points_for_tris(
        mesh, np.arange(mesh.n_triangles), tri_rule(5), 0)
    Uq = np.zeros(pts.shape[0])
    for i in range(cfg.m):
        Uq += ansatz.bubble_profile(i, pts)
    Uq /= sc.pg1
    for H in ansatz.H_parts:
        Uq += H.at_quad(bary, tri_of)
    Wq = fp(sc.pg1 * Uq - sc.p * sc.gamma_p)
    aW = system.coeff._value(pts) * Wq * wts
    lam = bary.reshape(mesh.n_triangles, -1, 3)
    aWr = aW.reshape(mesh.n_triangles, -1)
    Mloc = np.einsum("tq,tqi,tqj->tij", aWr, lam, lam)
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    MaW = sp.coo_matrix((Mloc.ravel(), (rows, cols)),
                        shape=(mesh.n_vertices, mesh.n_vertices)).tocsr()
    K = (sc.eps ** 2 * system.A - MaW).tocsc()
    C = basis.constraint_matrix(mesh)
    try:
        solve = spla.factorized(K)
    except RuntimeError as exc:
        raise SaddleSingular(f"projected operator not factorizable: {exc}") from exc
    X = np.column_stack([solve(C[r]) for r in range(C.shape[0])])
    schur = C @ X
    return ProjectedOperator(ansatz, basis, system, K.tocsr(), C, solve, schur)


def _rhs_from_h(op: ProjectedOperator, h):
    """F_n = int a h phi_n dx for h callable on physical points or nodal."""
    mesh = op.system.mesh
    if callable(h):
        from .fem import assemble_volume_load
        return assemble_volume_load(mesh, op.system.coeff, h, order=5)
    vals = h.values if isinstance(h, GridFunction) else np.asarray(h, dtype=float)
    return op.system.M_a @ vals


def solve_projected_linear(h, basis: ProjectionBasis, ansatz, system,
                           operator: ProjectedOperator = None):
    """Solve L(phi) = h + (1/a) sum c_ij chi_i Z_ij with orthogonality
    constraints; returns (phi nodal, multipliers dict, diagnostics)."""
    op = operator or build_projected_operator(ansatz, basis, system)
    rhs = _rhs_from_h(op, h)
    phi, c = op.apply_T(rhs)
    lin, con = op.residuals(phi, c, rhs)
    if con > 1e-10 or lin > 1e-9:
        raise SaddleSingular(
            f"projected solve residuals lin={lin:.2e}, constraint={con:.2e}")
    mult = {lab: c[k] for k, lab in enumerate(basis.labels)}
    return phi, mult, {"linear_residual": lin, "constraint_residual": con}


def residual_E_callable(ansatz):
    """E as a callable of physical points (operator identity minus f(V))."""
    cfg = ansatz.config
    f, _, _ = nonlinearity(cfg.scale)

    def E_of(pts):
        sc = cfg.scale
        V = sc.pg1 * ansatz.U_eval(pts) - sc.p * sc.gamma_p
        return ansatz.operator_term(pts) - f(V)

    return E_of


def solve_projected_nonlinear(ansatz, basis: ProjectionBasis, system,
                              tol=1e-10, max_iter=15, step_cap=2.0):
    """Solve the projected nonlinear problem

        -D_a phi + eps^2 phi + E + f(V) - f(V+phi) = (1/a) sum c_ij chi_i Z_ij,
        int chi_i Z_ij phi = 0,

    by a projected Newton iteration with Armijo line search (the plain
    fixed point phi <- T(-E - N(phi)) is only a contraction for eps far
    below desk scale; Newton has the same first iterate, since the first
    linearization is at phi = 0, and the same solution). Returns (phi
    nodal, multipliers dict, diagnostics with an iterates log).
    """
    cfg = ansatz.config
    sc = cfg.scale
    mesh = system.mesh
    f, fp, _ = nonlinearity(sc)
    C = basis.constraint_matrix(mesh)

    pts, wts, bary, tri_of = _quad_points_for_tris(
        mesh, np.arange(mesh.n_triangles), tri_rule(5), 0)
    aq = system.coeff._value(pts)
    op_q = ansatz.operator_term(pts)
    Uq = np.zeros(pts.shape[0])
    for i in range(cfg.m):
        Uq += ansatz.bubble_profile(i, pts)
    Uq /= sc.pg1
    for H in ansatz.H_parts:
        Uq += H.at_quad(bary, tri_of)
    Vq = sc.pg1 * Uq - sc.p * sc.gamma_p
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    lam3 = bary.reshape(mesh.n_triangles, -1, 3)

    def load_vec(vals_q):
        b = np.zeros(mesh.n_vertices)
        np.add.at(b, mesh.triangles[tri_of].ravel(),
                  ((aq * vals_q * wts)[:, None] * bary).ravel())
        return b

    def mass_w(wq):
        aw = (aq * wq * wts).reshape(mesh.n_triangles, -1)
        M = np.einsum("tq,tqi,tqj->tij", aw, lam3, lam3)
        return sp.coo_matrix((M.ravel(), (rows, cols)),
                             shape=(mesh.n_vertices,) * 2).tocsr()

    eA = (sc.eps ** 2 * system.A).tocsr()
    phi = np.zeros(mesh.n_vertices)
    phiq = np.zeros(pts.shape[0])
    c = np.zeros(C.shape[0])

    def resid(ph, phq, cc):
        return eA @ ph + load_vec(op_q - f(Vq + phq)) - C.T @ cc

    Rv = resid(phi, phiq, c)
    log = []
    upd = np.inf
    for it in range(max_iter):
        J = (eA - mass_w(fp(Vq + phiq))).tocsc()
        try:
            solve = spla.factorized(J)
        except RuntimeError as exc:
            raise SaddleSingular(f"linearized operator not factorizable: {exc}") from exc
        X = np.column_stack([solve(C[r]) for r in range(C.shape[0])])
        try:
            schur_solve = np.linalg.solve(C @ X, C @ solve(-Rv))
        except np.linalg.LinAlgError as exc:
            raise SaddleSingular(f"singular multiplier block: {exc}") from exc
        delta = solve(-Rv) - X @ schur_solve
        dc = -schur_solve
        dinf = float(np.max(np.abs(delta)))
        if dinf > step_cap:
            delta *= step_cap / dinf
            dc *= step_cap / dinf
        t = 1.0
        nR = np.linalg.norm(Rv)
        accepted = False
        while t >= 1e-4:
            try:
                phn = phi + t * delta
                phnq = np.einsum("mj,mj->m", bary, phn[mesh.triangles[tri_of]])
                cn = c + t * dc
                Rn = resid(phn, phnq, cn)
                if np.linalg.norm(Rn) <= (1.0 - 1e-4 * t) * nR:
                    accepted = True
                    break
            except (OverflowInExponential, NonPositiveField, FloatingPointError):
                pass
            t /= 2.0
        if not accepted:
            raise ContractionFailed(
                f"line search stalled at iteration {it}, |R| = {nR:.2e}")
        phi, phiq, c, Rv = phn, phnq, cn, Rn
        upd = t * float(np.max(np.abs(delta)))
        log.append({"iter": it, "update": upd, "step": t,
                    "phi_inf": float(np.max(np.abs(phi))),
                    "residual": float(np.linalg.norm(Rv))})
        if upd <= tol * (1.0 + np.max(np.abs(phi))):
            break
    else:
        raise ContractionFailed(
            f"projected Newton: update {upd:.2e} after {max_iter} iterations")
    mult = {lab: c[k] for k, lab in enumerate(basis.labels)}
    con = float(np.max(np.abs(C @ phi))) if C.size else 0.0
    _, Enorm = residual_E(ansatz)
    return phi, mult, {"iterations": log, "E_norm": Enorm,
                       "constraint_residual": con,
                       "mu_weighted_multipliers": float(sum(
                           cfg.mu[i] * abs(mult[(i, j)]) for (i, j) in basis.labels))}
