"""Energy functional, its bubble expansion, reduced energies and
critical-point searches for the separated and clustered regimes.

The reduced energy of a configuration xi_1..xi_m is

    F(xi) = sum_i c_i a(xi_i) {1 - [c_i H_a(xi_i,xi_i)
            + sum_k c_k G_a(xi_i,xi_k) - (1+p)K - (p-1)L] / (4|log eps|)},

computed from Green solves on a fixed mesh, so it is a deterministic
piecewise-smooth function of the points; gradients are central differences
and critical points are found by multi-start Levenberg-Marquardt on the
difference-gradient map (separated regime) or Nelder-Mead maximization
with feasibility barriers (clustered regime).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.integrate import quad
from scipy.optimize import least_squares, minimize

from .errors import (InfeasibleConfig, MaximizerOnBoundary, NoCriticalPoint,
                     NonPositiveField, OverflowInExponential, QuadratureFailure)
from .fem import _quad_points_for_tris, tri_rule
from .green import green_eval
from .radial import (LOG8, bubble_weight, closed_logsq_source, kernel_z0,
                     liouville_profile, radial_solve)

_EXP_CAP = 700.0


# -- constants ----------------------------------------------------------------------


@dataclass(frozen=True)
class EnergyConstants:
    K: float
    L: float


def constant_L(quad_limit=400):
    """L = (1/8pi) int e^V [V^2/2 - w0] - 1 by radial quadrature of the
    closed-form block w0, cross-checked by a quadrature-machinery gate
    (the 8pi moment) and a second resolution."""

    def integrand(r):
        return (bubble_weight(r)
                * (0.5 * liouville_profile(r) ** 2 - closed_logsq_source(r))
                * 2.0 * np.pi * r)

    pieces = [quad(integrand, a, b, limit=quad_limit, epsabs=1e-12, epsrel=1e-12)
              for a, b in ((0.0, 10.0), (10.0, 1e4), (1e4, 1e8))]
    pieces.append(quad(integrand, 1e8, np.inf, limit=quad_limit))
    main = sum(v for v, _ in pieces)
    err = sum(e for _, e in pieces)
    if err > 1e-8 or not np.isfinite(main):
        raise QuadratureFailure(f"L quadrature error {err:.2e}")
    L = main / (8.0 * np.pi) - 1.0

    # machinery gate: weighted moment against [V^2/2 + V - w0] must be 8 pi
    def gate(r):
        comb = (0.5 * liouville_profile(r) ** 2 + liouville_profile(r)
                - closed_logsq_source(r))
        return 8.0 * (r ** 2 - 1.0) ** 2 / (r ** 2 + 1.0) ** 4 * comb * 2.0 * np.pi * r
    gval = quad(gate, 0, 50.0, limit=quad_limit)[0] + quad(gate, 50.0, np.inf)[0]
    if abs(gval / (8.0 * np.pi) - 1.0) > 1e-7:
        raise QuadratureFailure(f"moment gate off by {gval / (8 * np.pi) - 1:.2e}")

    # second resolution: same integrand through the radial ODE solver block
    corr = radial_solve(lambda rr: 0.5 * liouville_profile(rr) ** 2, 1.0)
    def integrand2(r):
        return (bubble_weight(r)
                * (0.5 * liouville_profile(r) ** 2 - corr.evaluator(r))
                * 2.0 * np.pi * r)
    alt = (quad(integrand2, 0.0, 1e3, limit=quad_limit)[0]
           + quad(integrand, 1e3, np.inf, limit=quad_limit)[0]) / (8.0 * np.pi) - 1.0
    return L, {"cross_check": alt, "agreement": abs(L - alt), "moment_gate": gval}


@lru_cache(maxsize=1)
def energy_constants() -> EnergyConstants:
    L, diag = constant_L()
    if diag["agreement"] > 1e-8:
        raise QuadratureFailure(f"L resolutions disagree by {diag['agreement']:.2e}")
    return EnergyConstants(K=LOG8 - 2.0, L=L)


# -- energy functional ---------------------------------------------------------------


def _exp_up(u_vals, p):
    if p != 1.0 and np.any(u_vals <= 0.0):
        raise NonPositiveField("u^p needs u > 0")
    ex = u_vals ** p
    if np.any(ex > _EXP_CAP):
        raise OverflowInExponential(f"u^p = {float(np.max(ex)):.3g} overflows exp")
    return np.exp(ex)


def energy_J(u, lam, p, system):
    """J(u) = (1/2) int a(|grad u|^2 + u^2) - (lam/p) int a e^(u^p), order-5
    rule for the exponential. u: nodal values or GridFunction."""
    from .fem import GridFunction
    vals = u.values if isinstance(u, GridFunction) else np.asarray(u, dtype=float)
    mesh = system.mesh
    quadratic = 0.5 * system.quadratic_form(vals)
    pts, wts, bary, tri_of = _quad_points_for_tris(
        mesh, np.arange(mesh.n_triangles), tri_rule(5), 0)
    uq = np.einsum("mj,mj->m", bary, vals[mesh.triangles[tri_of]])
    aq = system.coeff._value(pts)
    expo = float((aq * _exp_up(uq, p)) @ wts)
    return quadratic - lam / p * expo


def scaled_energy(v, scale, system):
    """Scaled-variables energy of v(y) = p gamma^(p-1) u(eps y) - p gamma^p,
    with the linear and constant counterterms that make

        I(v) = p^2 gamma^(2(p-1)) J(u)

    an exact identity (computed with the same quadrature as energy_J)."""
    from .fem import GridFunction
    vals = v.values if isinstance(v, GridFunction) else np.asarray(v, dtype=float)
    mesh = system.mesh
    sc = scale
    quadratic = 0.5 * system.quadratic_form(vals)
    pts, wts, bary, tri_of = _quad_points_for_tris(
        mesh, np.arange(mesh.n_triangles), tri_rule(5), 0)
    vq = np.einsum("mj,mj->m", bary, vals[mesh.triangles[tri_of]])
    aq = system.coeff._value(pts)
    uq = 1.0 + vq / (sc.p * sc.gamma_p)
    if sc.p != 1.0 and np.any(uq <= 0.0):
        raise NonPositiveField("scaled field makes 1 + v/(p gamma^p) <= 0")
    ex = sc.gamma_p * (uq ** sc.p - 1.0)
    if np.any(ex > _EXP_CAP):
        raise OverflowInExponential("scaled exponential overflows")
    expo = float((aq * np.exp(ex)) @ wts) / sc.eps ** 2
    ones = np.ones(mesh.n_vertices)
    lin = sc.p * sc.gamma_p * float(ones @ (system.M_a @ vals))
    const = 0.5 * (sc.p * sc.gamma_p) ** 2 * float(ones @ (system.M_a @ ones))
    return quadratic - expo + lin + const


def expansion_J(config, constants: EnergyConstants = None):
    """Bubble expansion of J at the assembled configuration:

    (1/(2 p^2 gamma^(2(p-1)))) sum_i c_i a(xi_i) {4|log eps| + (1+p)K
        + (p-1)L - c_i H_a(xi_i,xi_i) - sum_k c_k G_a(xi_i,xi_k)}.
    """
    if constants is None:
        constants = energy_constants()
    sc = config.scale
    if config.green is None:
        raise InfeasibleConfig("config needs Green data (solve the mu system first)")
    total = 0.0
    for i, pt in enumerate(config.points):
        a_i = config.coeff.value(pt.xi)
        cross = sum(config.points[k].c * green_eval(config.green[k], pt.xi)
                    for k in range(config.m) if k != i)
        total += pt.c * a_i * (4.0 * sc.log_eps_abs
                               + (1.0 + sc.p) * constants.K
                               + (sc.p - 1.0) * constants.L
                               - pt.c * config.green[i].robin - cross)
    return total / (2.0 * sc.p ** 2 * sc.gamma ** (2.0 * (sc.p - 1.0)))


# -- separated regime -----------------------------------------------------------------


def A_separated(domain, coeff, theta, t, log_eps):
    """Interior-offset profile A(s, t) = a(s) + [a(s) log t - t d_nu a(s)]/|log eps|."""
    pt, nu, _ = domain.boundary_point(float(theta))
    a, ga = coeff.value(pt), coeff.grad(pt)
    dnu = float(ga @ nu)
    return a + (a * np.log(t) - t * dnu) / log_eps


def A_separated_dt(domain, coeff, theta, t, log_eps):
    pt, nu, _ = domain.boundary_point(float(theta))
    a = coeff.value(pt)
    dnu = float(coeff.grad(pt) @ nu)
    return (a / t - dnu) / log_eps


def A_separated_dtt(domain, coeff, theta, t, log_eps):
    pt, _, _ = domain.boundary_point(float(theta))
    return -coeff.value(pt) / (t * t * log_eps)


def critical_offset(domain, coeff, theta):
    """t = a(s)/d_nu a(s), the unique stationary offset (needs d_nu a > 0)."""
    pt, nu, _ = domain.boundary_point(float(theta))
    dnu = float(coeff.grad(pt) @ nu)
    if dnu <= 0.0:
        raise InfeasibleConfig("no interior stationary offset: d_nu a <= 0")
    return coeff.value(pt) / dnu


@dataclass
class SeparatedConfig:
    """Boundary anchors theta_1..theta_m with normal offsets t_1..t_l for
    the leading interior points; xi_i = s_i - (t_i/|log eps|) nu(s_i)."""

    domain: object
    thetas: np.ndarray
    ts: np.ndarray       # offsets for the first l anchors
    d: float             # feasibility margin

    @property
    def m(self):
        return self.thetas.size

    @property
    def l(self):
        return self.ts.size

    def points(self, scale):
        pts, nus, _ = self.domain.boundary_point(self.thetas)
        interior = [pts[i] - (self.ts[i] / scale.log_eps_abs) * nus[i]
                    for i in range(self.l)]
        boundary = [pts[i] for i in range(self.l, self.m)]
        return interior, boundary

    def validate(self):
        pts, _, _ = self.domain.boundary_point(self.thetas)
        for i in range(self.m):
            for k in range(i + 1, self.m):
                if np.linalg.norm(pts[i] - pts[k]) <= 2.0 * self.d:
                    raise InfeasibleConfig(
                        f"|s_{i} - s_{k}| <= 2d = {2 * self.d:.3g}")
        if np.any(self.ts <= self.d) or np.any(self.ts >= 1.0 / self.d):
            raise InfeasibleConfig(f"offsets {self.ts} outside ({self.d}, {1/self.d})")


def default_margin(domain):
    return 0.1 * domain.diameter


def reduced_F(points_interior, points_boundary, scale, coeff, solver,
              constants: EnergyConstants = None):
    """The reduced energy at explicit points (shared by both regimes)."""
    if constants is None:
        constants = energy_constants()
    from .green import C_BOUNDARY, C_INTERIOR
    pts = list(points_interior) + list(points_boundary)
    cs = [C_INTERIOR] * len(points_interior) + [C_BOUNDARY] * len(points_boundary)
    tags = ["interior"] * len(points_interior) + ["boundary"] * len(points_boundary)
    data = [solver.data(x, tag) for x, tag in zip(pts, tags)]
    le = scale.log_eps_abs
    total = 0.0
    for i, (x, c_i) in enumerate(zip(pts, cs)):
        cross = sum(cs[k] * green_eval(data[k], np.asarray(x, dtype=float))
                    for k in range(len(pts)) if k != i)
        bracket = (c_i * data[i].robin + cross
                   - (1.0 + scale.p) * constants.K - (scale.p - 1.0) * constants.L)
        total += c_i * coeff.value(x) * (1.0 - bracket / (4.0 * le))
    return total


def reduced_F_separated(sep: SeparatedConfig, scale, coeff, solver,
                        constants: EnergyConstants = None, grad=False,
                        step=1e-4):
    """Value (and optionally the central-difference gradient in the
    (theta_1..theta_m, t_1..t_l) coordinates)."""
    sep.validate()
    constants = constants or energy_constants()

    def value(x):
        cfg = SeparatedConfig(sep.domain, x[:sep.m], x[sep.m:], sep.d)
        pi, pb = cfg.points(scale)
        return reduced_F(pi, pb, scale, coeff, solver, constants)

    x0 = np.concatenate([sep.thetas, sep.ts])
    F0 = value(x0)
    if not grad:
        return F0
    g = np.zeros_like(x0)
    for j in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[j] += step
        xm[j] -= step
        g[j] = (value(xp) - value(xm)) / (2.0 * step)
    return F0, g


def _coordinate_root_polish(gradmap, x0, sweeps=8, bracket=0.08, tol=1e-13):
    """Drive the difference-gradient map to zero by cyclic per-coordinate
    Brent root finding.

    The discrete reduced energy is C0 with gradient kinks where a source
    point crosses a mesh edge, so Jacobian-based solvers stall; each
    component of the central-difference gradient is continuous in its own
    coordinate and is bracketed and solved exactly instead.
    """
    from scipy.optimize import brentq
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    g = gradmap(x)
    for _ in range(sweeps):
        for j in range(n):
            def gj(t):
                xt = x.copy()
                xt[j] = t
                return gradmap(xt)[j]
            lo, hi = x[j] - bracket, x[j] + bracket
            glo, ghi = gj(lo), gj(hi)
            width = bracket
            while glo * ghi > 0 and width > 1e-4:
                width /= 2.0
                lo, hi = x[j] - width, x[j] + width
                glo, ghi = gj(lo), gj(hi)
            if glo * ghi <= 0:
                x[j] = brentq(gj, lo, hi, xtol=tol)
        g = gradmap(x)
        if np.linalg.norm(g) <= 1e-11:
            break
    return x, float(np.linalg.norm(g))


def find_separated_config(domain, coeff, scale, k, l, solver, d=None,
                          n_scan=160, grad_tol=1e-8, constants=None,
                          max_starts=4):
    """Critical configuration of the separated reduced energy.

    Seeds: boundary extrema of a restricted to the boundary for the
    anchors, t = a/d_nu a for interior offsets; refinement by
    Levenberg-Marquardt on the central-difference gradient map. Returns
    (SeparatedConfig, certificate dict).
    """
    m = k + l
    d = d or default_margin(domain)
    constants = constants or energy_constants()
    thetas = np.linspace(0.0, 2 * np.pi, n_scan, endpoint=False)
    pts, _, _ = domain.boundary_point(thetas)
    avals = coeff._value(pts)
    # local extrema of a on the boundary as anchor candidates
    ext = [i for i in range(n_scan)
           if (avals[i] - avals[i - 1]) * (avals[(i + 1) % n_scan] - avals[i]) <= 0.0
           and (abs(avals[i] - avals[i - 1]) + abs(avals[(i + 1) % n_scan] - avals[i])) > 0]
    order = sorted(ext, key=lambda i: -avals[i])
    starts = []
    for s0 in range(max_starts):
        cand = [thetas[order[(j + s0) % max(len(order), 1)]] if order else
                thetas[(j * n_scan) // m] for j in range(m)]
        starts.append(np.array(cand))

    best = None
    for cand in starts:
        ts = []
        feasible = True
        for j in range(l):
            try:
                tstar = critical_offset(domain, coeff, cand[j])
            except InfeasibleConfig:
                feasible = False
                break
            ts.append(np.clip(tstar, 1.5 * d, 0.7 / d))
        if not feasible:
            continue
        x0 = np.concatenate([cand, np.array(ts)])
        sep0 = SeparatedConfig(domain, x0[:m], x0[m:], d)
        try:
            sep0.validate()
        except InfeasibleConfig:
            continue

        def gradmap(x):
            cfg = SeparatedConfig(domain, x[:m], x[m:], d)
            cfg.validate()
            _, g = reduced_F_separated(cfg, scale, coeff, solver, constants,
                                       grad=True)
            return g

        try:
            x, gnorm = _coordinate_root_polish(gradmap, x0)
        except InfeasibleConfig:
            continue
        cfg = SeparatedConfig(domain, x[:m], x[m:], d)
        try:
            cfg.validate()
        except InfeasibleConfig:
            continue
        Fv = reduced_F_separated(cfg, scale, coeff, solver, constants)
        scaled = gnorm / (1.0 + abs(Fv))
        if best is None or scaled < best[1]["grad_norm_scaled"]:
            best = (cfg, {"grad_norm": gnorm, "grad_norm_scaled": scaled,
                          "value": Fv})
        if scaled <= grad_tol:
            break
    if best is None or best[1]["grad_norm_scaled"] > grad_tol:
        got = "none" if best is None else f"{best[1]['grad_norm_scaled']:.2e}"
        raise NoCriticalPoint(f"no critical point at tolerance {grad_tol} (best {got})")
    return best


# -- clustered regime -----------------------------------------------------------------


def clustered_floor(scale, m):
    from .bubble import separation_floor
    return separation_floor(scale, m)


def clustered_trial(domain, xi_star, k, l, scale, d, rho=None):
    """The explicit trial ladder: interior points stacked along the inward
    normal with spacing rho/sqrt(|log eps|), boundary points spread along
    the boundary with the same spacing."""
    le = scale.log_eps_abs
    if rho is None:
        rho = 0.45 * d * np.sqrt(le) / max(k + l, 1)
    th0 = domain.project(np.asarray(xi_star, dtype=float))
    pt0, nu0, _ = domain.boundary_point(float(th0))
    interior = [pt0 - ((j + 1) * rho / np.sqrt(le)) * nu0 for j in range(l)]
    speed = float(np.linalg.norm(np.atleast_2d(domain.d1(np.atleast_1d(th0)))[0]))
    boundary = []
    for j in range(k):
        off = (-1) ** j * ((j // 2 + 1) * rho / np.sqrt(le)) / speed
        th = th0 + off
        boundary.append(np.atleast_2d(domain.curve(np.atleast_1d(th)))[0])
    return interior, boundary


def _clustered_slacks(domain, xi_star, pts_i, pts_b, scale, d, m):
    floor = clustered_floor(scale, m)
    allpts = list(pts_i) + list(pts_b)
    sep = min((np.linalg.norm(np.asarray(a) - np.asarray(b))
               for idx, a in enumerate(allpts) for b in allpts[idx + 1:]),
              default=np.inf)
    bdist = min((domain.dist_to_boundary(x) for x in pts_i), default=np.inf)
    ball = max(np.linalg.norm(np.asarray(x) - xi_star) for x in allpts)
    return {"separation": sep, "separation_floor": floor,
            "boundary_dist": bdist, "boundary_floor": floor,
            "ball_slack": d - ball}


def find_clustered_config(domain, coeff, xi_star, scale, k, l, solver,
                          d=None, constants=None, seed=0):
    """Maximize the reduced energy over configurations accumulating at
    xi_star (k boundary + l interior points inside B_d(xi_star)).

    Multi-start Nelder-Mead from the explicit trial ladder and jittered
    variants; raises MaximizerOnBoundary (with the active-constraint case)
    if the maximizer is not strictly interior. Returns (points_interior,
    points_boundary, certificate)."""
    xi_star = np.asarray(xi_star, dtype=float)
    m = k + l
    d = d or default_margin(domain)
    constants = constants or energy_constants()
    le = scale.log_eps_abs
    floor = clustered_floor(scale, m)
    th0 = float(domain.project(xi_star))
    speed = float(np.linalg.norm(np.atleast_2d(domain.d1(np.atleast_1d(th0)))[0]))
    _, nu0, tan0 = domain.boundary_point(th0)
    pt0 = np.atleast_2d(domain.curve(np.atleast_1d(th0)))[0]

    def unpack(x):
        # interior points: (tangential, inward-normal > 0) local coordinates
        pts_i = []
        for j in range(l):
            s, t = x[2 * j], x[2 * j + 1]
            pts_i.append(pt0 + s * tan0 - abs(t) * nu0)
        pts_b = []
        for j in range(k):
            th = x[2 * l + j]
            pts_b.append(np.atleast_2d(domain.curve(np.atleast_1d(th)))[0])
        return pts_i, pts_b

    # practical floors: the theoretical |log eps|^-kappa scales are far below
    # mesh resolution at desk scale, and points that close to the boundary or
    # to each other are numerically degenerate
    floor_b = max(floor, 1e-3 * domain.diameter)
    floor_s = max(4 * floor, 1e-3 * domain.diameter)

    def neg_F(x):
        pts_i, pts_b = unpack(x)
        allp = pts_i + pts_b
        pen = 0.0
        for a_pt in allp:
            excess = np.linalg.norm(np.asarray(a_pt) - xi_star) - d
            if excess > 0:
                pen += 1e3 * (1.0 + excess)
        for x_i in pts_i:
            if (not domain.inside(x_i)) or domain.signed_dist(x_i) > -floor_b:
                pen += 1e3
        for idx, a_pt in enumerate(allp):
            for b_pt in allp[idx + 1:]:
                sepd = np.linalg.norm(np.asarray(a_pt) - np.asarray(b_pt))
                if sepd < floor_s:
                    pen += 1e3 * (1.0 + (floor_s - sepd) / floor_s)
        if pen > 0:
            return pen
        return -reduced_F(pts_i, pts_b, scale, coeff, solver, constants)

    tri_i, tri_b = clustered_trial(domain, xi_star, k, l, scale, d)
    x0 = []
    for x_i in tri_i:
        rel = x_i - pt0
        x0 += [float(rel @ tan0), float(-(rel @ nu0))]
    for x_b in tri_b:
        x0.append(float(domain.project(x_b)))
    x0 = np.array(x0)
    trial_value = reduced_F(tri_i, tri_b, scale, coeff, solver, constants)

    rng = np.random.default_rng(seed)
    best = None
    for trial in range(4):
        xs = x0 if trial == 0 else x0 + rng.normal(0, 0.1 / np.sqrt(le), x0.size)
        res = minimize(neg_F, xs, method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 2500})
        if best is None or res.fun < best.fun:
            best = res
    pts_i, pts_b = unpack(best.x)
    value = -best.fun
    slacks = _clustered_slacks(domain, xi_star, pts_i, pts_b, scale, d, m)
    if slacks["ball_slack"] <= 1e-6 * d:
        which = "boundary-anchor" if any(
            np.linalg.norm(b - xi_star) >= d - 1e-6 * d for b in pts_b) \
            else "interior-anchor"
        raise MaximizerOnBoundary(f"cluster escaped B_d(xi*)", case=which)
    if slacks["separation"] <= 10 * floor:
        raise MaximizerOnBoundary("separation constraint nearly active",
                                  case="separation")
    if l > 0 and slacks["boundary_dist"] <= 10 * floor:
        raise MaximizerOnBoundary("interior point nearly on the boundary",
                                  case="boundary-distance")
    cert = {"value": value, "trial_value": trial_value, "slacks": slacks,
            "improved_over_trial": bool(value >= trial_value - 1e-12)}
    return pts_i, pts_b, cert
