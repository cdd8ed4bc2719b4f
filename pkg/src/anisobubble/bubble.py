"""Bubble ansatz assembly: scale parameters, concentration heights and the
multi-bubble approximate solution.

The approximate solution is U = sum_i (U_i + H_i): U_i is the four-parameter
bubble profile plus its radial correction series (active for p != 1), and
H_i is the domain/anisotropy adaptation solved from a weighted Neumann
problem. The heights mu_i solve the nonlinear matching system that couples
Robin values, mutual Green interactions and the correction far-field
slopes; it is a contraction in log(8 mu_i^2) at small eps and is solved by
a damped fixed point seeded with its leading-order form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .errors import (FixedPointDiverged, InfeasibleConfig, MissingCorrections,
                     NoRoot)
from .fem import GridFunction, assemble_boundary_load, assemble_volume_load
from .green import C_BOUNDARY, C_INTERIOR, GreenSolver, classify_source
from .radial import correction_family, omega_profile


# -- scale parameters -----------------------------------------------------------


@dataclass(frozen=True)
class ScaleParams:
    """(lambda, eps, gamma, p) tied by p lam gamma^(2(p-1)) eps^(2(p-2)/p) = 1
    and p gamma^p = -4 log eps."""

    p: float
    eps: float
    lam: float
    gamma: float

    @property
    def gamma_p(self):
        """gamma^p = -(4/p) log eps."""
        return self.gamma ** self.p

    @property
    def pg1(self):
        """p gamma^(p-1), the amplitude scaling of the ansatz."""
        return self.p * self.gamma ** (self.p - 1.0)

    @property
    def log_eps_abs(self):
        return -np.log(self.eps)

    @property
    def q(self):
        """(p-1)/p, the correction-series ratio (0 at p = 1)."""
        return (self.p - 1.0) / self.p

    def residual(self):
        return abs(self.p * self.lam * self.gamma ** (2 * (self.p - 1.0))
                   * self.eps ** (2 * (self.p - 2.0) / self.p) - 1.0)


def scale_from_eps(p, eps) -> ScaleParams:
    p, eps = float(p), float(eps)
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if not 0 < p < 2:
        raise ValueError("p must lie in (0, 2)")
    gamma = (-(4.0 / p) * np.log(eps)) ** (1.0 / p)
    lam = eps ** ((4.0 - 2.0 * p) / p) / (p * gamma ** (2.0 * (p - 1.0)))
    return ScaleParams(p, eps, lam, gamma)


def scale_from_lambda(p, lam) -> ScaleParams:
    """Invert the scale relation for eps by safeguarded bisection in log eps.

    For p < 1 the relation has two roots; the physical (small-eps) branch
    below the stationary point of the left side is selected.
    """
    p, lam = float(p), float(lam)
    if not 0 < p < 2:
        raise ValueError("p must lie in (0, 2)")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if p == 1.0:
        return scale_from_eps(1.0, np.sqrt(lam))

    def r(t):  # t = log eps; relation in log form
        return (np.log(p * lam) + (2.0 * (p - 1.0) / p) * np.log(-(4.0 / p) * t)
                + (2.0 * (p - 2.0) / p) * t)

    t_hi = -1e-9
    if p < 1.0:
        t_hi = (1.0 - p) / (p - 2.0) - 1e-9  # stationary point of the relation
    if r(t_hi) >= 0.0:
        raise NoRoot(f"lambda = {lam:g} too large for the small-eps branch at p = {p}")
    t_lo = t_hi
    for _ in range(200):
        t_lo *= 2.0
        if r(t_lo) > 0.0:
            break
    else:
        raise NoRoot("failed to bracket the scale relation")
    t = brentq(r, t_lo, t_hi, xtol=1e-15, rtol=8.9e-16)
    sp = scale_from_eps(p, float(np.exp(t)))
    if sp.residual() > 1e-12:
        raise NoRoot(f"scale relation residual {sp.residual():.2e} after bisection")
    return sp


def epsilon_lambda_convert(value, direction, p) -> ScaleParams:
    """direction: 'lambda_to_eps' | 'eps_to_lambda'."""
    if direction == "lambda_to_eps":
        return scale_from_lambda(p, value)
    if direction == "eps_to_lambda":
        return scale_from_eps(p, value)
    raise ValueError(f"unknown direction {direction!r}")


# -- configuration ----------------------------------------------------------------


@dataclass
class BubblePoint:
    xi: np.ndarray
    tag: str      # 'interior' | 'boundary'
    c: float      # 8 pi | 4 pi

    @classmethod
    def make(cls, domain, xi, tag=None):
        xi, tag = classify_source(domain, xi, tag)
        return cls(xi=xi, tag=tag, c=C_INTERIOR if tag == "interior" else C_BOUNDARY)


def separation_floor(scale: ScaleParams, m):
    """|log eps|^(-kappa), kappa = 2(m^2+1)."""
    return scale.log_eps_abs ** (-2.0 * (m * m + 1))


@dataclass
class BubbleConfig:
    """Full ansatz parameter set: scale, points with tags, heights."""

    domain: object
    coeff: object
    scale: ScaleParams
    points: list
    mu: Optional[np.ndarray] = None
    green: Optional[list] = None      # GreenData per point
    mu_bracket_C: float = 6.0

    @property
    def m(self):
        return len(self.points)

    @property
    def n_interior(self):
        return sum(1 for pt in self.points if pt.tag == "interior")

    def validate_configuration(self):
        """Separation / boundary-distance constraints of the configuration
        space (interior points first, kappa = 2(m^2+1))."""
        m = self.m
        floor = separation_floor(self.scale, m)
        for i, pt in enumerate(self.points):
            for k in range(i + 1, m):
                d = np.linalg.norm(pt.xi - self.points[k].xi)
                if d <= floor:
                    raise InfeasibleConfig(
                        f"|xi_{i} - xi_{k}| = {d:.3e} <= {floor:.3e}")
            if pt.tag == "interior":
                d = self.domain.dist_to_boundary(pt.xi)
                if d <= floor:
                    raise InfeasibleConfig(
                        f"dist(xi_{i}, boundary) = {d:.3e} <= {floor:.3e}")
        ordered = [pt.tag for pt in self.points]
        if ordered != sorted(ordered, key=lambda t: t != "interior"):
            raise InfeasibleConfig("interior points must precede boundary points")

    def check_mu_bracket(self):
        C = self.mu_bracket_C
        hi = self.scale.log_eps_abs ** C
        if np.any(self.mu < 1.0 / C) or np.any(self.mu > hi):
            raise FixedPointDiverged(
                f"mu = {self.mu} violates [{1.0 / C:.3g}, {hi:.3g}]",
                last_iterate=self.mu)


def make_config(domain, coeff, scale, interior_points=(), boundary_points=()):
    pts = [BubblePoint.make(domain, xi, "interior") for xi in interior_points]
    pts += [BubblePoint.make(domain, xi, "boundary") for xi in boundary_points]
    cfg = BubbleConfig(domain, coeff, scale, pts)
    cfg.validate_configuration()
    return cfg


# -- mu-system ---------------------------------------------------------------------


def _interaction_data(config: BubbleConfig, solver: GreenSolver):
    """Robin values H_ii and the cross matrix G_ik = G_a(xi_i, xi_k)."""
    if config.green is None:
        config.green = [solver.data(pt.xi, pt.tag) for pt in config.points]
    m = config.m
    H = np.array([gd.robin for gd in config.green])
    G = np.zeros((m, m))
    for k, gd in enumerate(config.green):
        for i, pt in enumerate(config.points):
            if i != k:
                from .green import green_eval
                G[i, k] = green_eval(gd, pt.xi)
    return H, G


def solve_mu_system(config: BubbleConfig, solver: GreenSolver,
                    tol=1e-10, damping=0.5, max_iter=400,
                    H_override=None, G_override=None):
    """Solve the height-matching system for mu.

    Unknowns x_i = log(8 mu_i^2); the right side couples Robin values,
    cross Green interactions, and (for p != 1) the correction far-field
    slopes D^j_mu through S_i = sum_j q^j D^j_(mu_i)/gamma^(jp). At p = 1
    all S_i vanish and the system is the explicit closed form.
    H_override/G_override replace the computed interaction data (used by
    symmetry tests to feed exactly symmetric inputs).
    """
    sc = config.scale
    if H_override is not None:
        H, G = np.asarray(H_override, float), np.asarray(G_override, float)
        config.green = config.green or None
    else:
        H, G = _interaction_data(config, solver)
    c = np.array([pt.c for pt in config.points])
    m = config.m
    base = c * H + np.array([(c * G[i]).sum() - c[i] * G[i, i] for i in range(m)])

    if sc.p == 1.0:
        x = base.copy()
        config.mu = np.sqrt(np.exp(x) / 8.0)
        config.check_mu_bracket()
        return config.mu

    fam = correction_family(sc.p)
    q = sc.q
    gp = sc.gamma_p

    def S_of(mu):
        return sum((q ** j) * fam.D(j, mu) / gp ** j for j in (1, 2, 3, 4))

    def rhs(x):
        mu = np.sqrt(np.exp(x) / 8.0)
        S = np.array([S_of(mui) for mui in mu])
        out = np.empty(m)
        for i in range(m):
            cross = sum((1.0 - S[k] / 4.0) * c[k] * G[i, k] for k in range(m) if k != i)
            out[i] = ((1.0 - S[i] / 4.0) * c[i] * H[i]
                      + S[i] * np.log(sc.eps * mu[i]) + cross)
        return out

    # leading-order seed
    x = (2.0 * (sc.p - 1.0) / (2.0 - sc.p) * (1.0 - np.log(8.0))
         + base / (2.0 - sc.p))
    for _ in range(max_iter):
        r = rhs(x)
        if np.max(np.abs(r - x)) <= tol:
            x = r
            break
        x = x + damping * (r - x)
    else:
        raise FixedPointDiverged(
            f"mu fixed point stalled at residual {np.max(np.abs(rhs(x) - x)):.2e}",
            last_iterate=np.sqrt(np.exp(x) / 8.0))
    config.mu = np.sqrt(np.exp(x) / 8.0)
    config.check_mu_bracket()
    return config.mu


def mu_system_residual(config: BubbleConfig, solver: GreenSolver):
    """Component-wise residual of the height system at config.mu."""
    sc = config.scale
    H, G = _interaction_data(config, solver)
    c = np.array([pt.c for pt in config.points])
    mu = config.mu
    x = np.log(8.0 * mu ** 2)
    if sc.p == 1.0:
        S = np.zeros(config.m)
    else:
        fam = correction_family(sc.p)
        S = np.array([sum((sc.q ** j) * fam.D(j, mui) / sc.gamma_p ** j
                          for j in (1, 2, 3, 4)) for mui in mu])
    out = np.empty(config.m)
    for i in range(config.m):
        cross = sum((1.0 - S[k] / 4.0) * c[k] * G[i, k]
                    for k in range(config.m) if k != i)
        out[i] = x[i] - ((1.0 - S[i] / 4.0) * c[i] * H[i]
                         + S[i] * np.log(sc.eps * mu[i]) + cross)
    return out


def mu_leading_order(config: BubbleConfig, solver: GreenSolver):
    """Leading-order height formula (the fixed-point seed), as log(8 mu^2)."""
    sc = config.scale
    H, G = _interaction_data(config, solver)
    c = np.array([pt.c for pt in config.points])
    base = np.array([c[i] * H[i] + sum(c[k] * G[i, k] for k in range(config.m) if k != i)
                     for i in range(config.m)])
    return (2.0 * (sc.p - 1.0) / (2.0 - sc.p) * (1.0 - np.log(8.0))
            + base / (2.0 - sc.p))


# -- ansatz ------------------------------------------------------------------------


@dataclass
class AnsatzField:
    """Assembled approximate solution with per-bubble pieces.

    U_nodal are values of the physical-variable ansatz; V_nodal are the
    scaled-field values p gamma^(p-1) U - p gamma^p at the same vertices
    (the scaled domain is the physical mesh with coordinates divided
    by eps).
    """

    config: BubbleConfig
    mesh: object
    H_parts: list                  # GridFunction per bubble
    U_nodal: np.ndarray
    V_nodal: np.ndarray
    family: object = None

    def xi_scaled(self, i):
        return self.config.points[i].xi / self.config.scale.eps

    def bubble_profile(self, i, pts):
        """Analytic part of bubble i at physical points: profile plus the
        correction series (before the 1/(p gamma^(p-1)) amplitude)."""
        sc = self.config.scale
        pt = self.config.points[i]
        mu = float(self.config.mu[i])
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = omega_profile(sc.eps, mu, pt.xi, pts)
        out = np.atleast_1d(out).astype(float)
        if sc.p != 1.0:
            r_scaled = np.linalg.norm(pts - pt.xi, axis=1) / sc.eps
            for j in (1, 2, 3, 4):
                om_j = self.family.omega_j(j, mu)
                out += (sc.q ** j) / sc.gamma_p ** j * om_j(r_scaled)
        return out

    def bubble_profile_grad(self, i, pts):
        sc = self.config.scale
        pt = self.config.points[i]
        mu = float(self.config.mu[i])
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        d = pts - pt.xi
        r2 = (d ** 2).sum(axis=1)
        out = -4.0 * d / (sc.eps ** 2 * mu ** 2 + r2)[:, None]
        if sc.p != 1.0:
            r = np.sqrt(np.maximum(r2, 1e-300))
            rs = r / sc.eps
            radial = np.zeros_like(r)
            for j in (1, 2, 3, 4):
                omp = self.family.omega_j_prime(j, mu)
                radial += (sc.q ** j) / sc.gamma_p ** j * omp(rs) / sc.eps
            out += (radial / r)[:, None] * d
        return out

    def U_eval(self, pts):
        """Ansatz value at physical points (analytic parts + H fields)."""
        sc = self.config.scale
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.zeros(pts.shape[0])
        for i in range(self.config.m):
            out += self.bubble_profile(i, pts)
        out /= sc.pg1
        for H in self.H_parts:
            out += H.evaluate(pts)
        return out

    def V_eval_scaled(self, y_pts):
        """Scaled field at scaled coordinates y = x/eps."""
        sc = self.config.scale
        y_pts = np.atleast_2d(np.asarray(y_pts, dtype=float))
        return sc.pg1 * self.U_eval(y_pts * sc.eps) - sc.p * sc.gamma_p

    def operator_term(self, pts, _quad=None):
        """-D_a V + eps^2 V + p gamma^p eps^2 at physical points, through the
        operator identity: sum_i e^(w_mu_i)[1 + sum_j q^j gamma^(-jp)
        (omega^j - f^j)] evaluated at the scaled offsets. Exact up to the
        H_i discretization (which enters the residual through f(V))."""
        sc = self.config.scale
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.zeros(pts.shape[0])
        for i, pt in enumerate(self.config.points):
            mu = float(self.config.mu[i])
            z2 = ((pts - pt.xi) ** 2).sum(axis=1) / sc.eps ** 2
            ew = 8.0 * mu * mu / (mu * mu + z2) ** 2
            bracket = np.ones(pts.shape[0])
            if sc.p != 1.0:
                s = np.sqrt(z2) / mu
                for j in (1, 2, 3, 4):
                    diff = self.family.omega_minus_source(j, mu)
                    bracket += (sc.q ** j) / sc.gamma_p ** j * diff(s)
            out += ew * bracket
        return out


def assemble_ansatz(config: BubbleConfig, system, solver: GreenSolver) -> AnsatzField:
    """Solve the adaptation problems H_i and assemble the ansatz fields."""
    if config.mu is None:
        raise MissingCorrections("solve the height system before assembling")
    sc = config.scale
    fam = correction_family(sc.p) if sc.p != 1.0 else None
    mesh = system.mesh
    ans = AnsatzField(config, mesh, [], None, None, family=fam)
    glog = config.coeff.grad_log if config.coeff.kind != "constant" else None
    domain = config.domain
    H_parts = []
    for i, pt in enumerate(config.points):
        def volume(pts, i=i):
            vals = -ans.bubble_profile(i, pts)
            if glog is not None:
                vals = vals + (glog(pts) * ans.bubble_profile_grad(i, pts)).sum(axis=1)
            return vals / sc.pg1

        def flux(pts, i=i):
            # curve-projected evaluation (see green.regular_part): keeps the
            # near-anchor flux free of chord-sagitta artifacts
            t = domain.project(pts)
            onc = domain.curve(np.atleast_1d(t))
            _, nor, _ = domain.boundary_point(np.atleast_1d(t))
            return -(nor * ans.bubble_profile_grad(i, onc)).sum(axis=1) / sc.pg1

        from .fem import solve_neumann
        H_parts.append(solve_neumann(system, volume_load=volume, boundary_load=flux,
                                     singular_centers=[pt.xi]))
    ans.H_parts = H_parts
    U = np.zeros(mesh.n_vertices)
    for i in range(config.m):
        U += ans.bubble_profile(i, mesh.vertices) / sc.pg1
    for H in H_parts:
        U += H.values
    ans.U_nodal = U
    ans.V_nodal = sc.pg1 * U - sc.p * sc.gamma_p
    return ans


def farfield_coefficients(config: BubbleConfig):
    """[1 - S_i/4] c_i, the Green-tail coefficients of the ansatz far field."""
    sc = config.scale
    c = np.array([pt.c for pt in config.points])
    if sc.p == 1.0:
        return c
    fam = correction_family(sc.p)
    S = np.array([sum((sc.q ** j) * fam.D(j, mui) / sc.gamma_p ** j
                      for j in (1, 2, 3, 4)) for mui in config.mu])
    return (1.0 - S / 4.0) * c
