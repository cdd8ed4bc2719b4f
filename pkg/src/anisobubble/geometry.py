"""Smooth planar domains, boundary parametrizations and anisotropy coefficients.

Domains are smooth closed curves theta in [0, 2pi) -> R^2, counterclockwise,
star-shaped about their center so point-in-domain tests are exact. The
anisotropy coefficient a(x) > 0 is supplied with its gradient; grad log a
is formed as grad a / a.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NonPositiveCoefficient, OutsideDomain

TWO_PI = 2.0 * np.pi


def _as_points(x):
    """Return (pts, single) with pts of shape (n, 2)."""
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    return pts, (np.asarray(x).ndim == 1)


@dataclass(frozen=True)
class DomainSpec:
    """Smooth bounded star-shaped planar domain.

    curve / d1 / d2 map parameter arrays to (n, 2) point/derivative arrays;
    radius_fn gives the star-shaped radius about `center` (used for the
    exact inside test), and the parameter runs over [0, 2pi).
    """

    name: str
    center: np.ndarray
    curve: Callable[[np.ndarray], np.ndarray]
    d1: Callable[[np.ndarray], np.ndarray]
    d2: Callable[[np.ndarray], np.ndarray]
    radius_fn: Callable[[np.ndarray], np.ndarray]
    params: dict = field(default_factory=dict)
    _proj_table: tuple = field(default=None, repr=False, compare=False)

    # -- boundary parametrization -------------------------------------------------

    def boundary_point(self, s):
        """Point, outward unit normal and unit tangent at parameter s.

        s wraps periodically over [0, 2pi). Returns arrays shaped like s
        with a trailing axis of length 2.
        """
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))
        pts = self.curve(s_arr)
        tan = self.d1(s_arr)
        speed = np.linalg.norm(tan, axis=-1, keepdims=True)
        tan = tan / speed
        # ccw orientation: outward normal is the tangent rotated by -90 deg
        nor = np.stack([tan[:, 1], -tan[:, 0]], axis=-1)
        if np.isscalar(s) or np.asarray(s).ndim == 0:
            return pts[0], nor[0], tan[0]
        return pts, nor, tan

    def curvature(self, s):
        """Signed curvature (positive where the domain is locally convex)."""
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))
        d1 = self.d1(s_arr)
        d2 = self.d2(s_arr)
        num = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        kappa = num / np.linalg.norm(d1, axis=-1) ** 3
        return kappa[0] if np.asarray(s).ndim == 0 else kappa

    def arclength(self, s, n=4096):
        """Cumulative arc length from parameter 0 to s (trapezoid on d1)."""
        s = float(s) % TWO_PI
        thetas = np.linspace(0.0, s, max(16, int(n * s / TWO_PI) + 2))
        speed = np.linalg.norm(self.d1(thetas), axis=-1)
        return float(np.trapezoid(speed, thetas))

    def boundary_length(self, n=8192):
        thetas = np.linspace(0.0, TWO_PI, n, endpoint=False)
        speed = np.linalg.norm(self.d1(thetas), axis=-1)
        return float(speed.mean() * TWO_PI)

    # -- membership and distance --------------------------------------------------

    def inside(self, x, tol=1e-12):
        """Exact point-in-domain test for the star-shaped catalog."""
        pts, single = _as_points(x)
        rel = pts - self.center
        rho = np.linalg.norm(rel, axis=-1)
        theta = np.arctan2(rel[:, 1], rel[:, 0])
        ok = rho <= self.radius_fn(theta) + tol
        return bool(ok[0]) if single else ok

    def _projection_table(self, n=2048):
        """KDTree over dense boundary samples, seeds nearest-point projection."""
        tab = object.__getattribute__(self, "_proj_table")
        if tab is None:
            from scipy.spatial import cKDTree
            thetas = np.linspace(0.0, TWO_PI, n, endpoint=False)
            tab = (thetas, cKDTree(self.curve(thetas)))
            object.__setattr__(self, "_proj_table", tab)
        return tab

    def project(self, x, newton_steps=6):
        """Boundary parameter of the nearest boundary point to x.

        KDTree seed followed by Newton on g(t) = (x - c(t)).c'(t).
        Vectorized over points.
        """
        pts, single = _as_points(x)
        thetas, tree = self._projection_table()
        _, idx = tree.query(pts)
        t = thetas[idx]
        for _ in range(newton_steps):
            c = self.curve(t)
            dc = self.d1(t)
            ddc = self.d2(t)
            diff = pts - c
            g = np.einsum("ij,ij->i", diff, dc)
            dg = np.einsum("ij,ij->i", diff, ddc) - np.einsum("ij,ij->i", dc, dc)
            step = np.divide(g, dg, out=np.zeros_like(g), where=np.abs(dg) > 1e-30)
            t = t - np.clip(step, -0.2, 0.2)
        t = np.mod(t, TWO_PI)
        return t[0] if single else t

    def radial_gap(self, x):
        """r(theta) - |x - center|: positive inside, a cheap distance proxy
        (exact for the disk) used by the mesher's interior masks."""
        pts, single = _as_points(x)
        rel = pts - self.center
        rho = np.linalg.norm(rel, axis=-1)
        gap = self.radius_fn(np.arctan2(rel[:, 1], rel[:, 0])) - rho
        return float(gap[0]) if single else gap

    def signed_dist(self, x):
        """Signed distance to the boundary (negative inside). Vectorized."""
        pts, single = _as_points(x)
        t = np.atleast_1d(self.project(pts))
        d = np.linalg.norm(pts - self.curve(t), axis=-1)
        sd = np.where(self.inside(pts) if pts.shape[0] > 1 else self.inside(pts),
                      -d, d)
        return float(sd[0]) if single else sd

    def dist_to_boundary(self, x, tol=1e-9):
        """Distance from an interior/closure point to the boundary.

        Raises OutsideDomain for exterior points beyond tolerance.
        """
        sd = self.signed_dist(x)
        sd_arr = np.atleast_1d(sd)
        if np.any(sd_arr > tol):
            raise OutsideDomain(f"point outside {self.name} by {float(np.max(sd_arr)):.3e}")
        out = np.maximum(-sd_arr, 0.0)
        return float(out[0]) if np.isscalar(sd) or np.asarray(sd).ndim == 0 else out

    @property
    def bounding_box(self):
        thetas = np.linspace(0.0, TWO_PI, 4096, endpoint=False)
        pts = self.curve(thetas)
        return np.array([pts.min(axis=0), pts.max(axis=0)])

    @property
    def diameter(self):
        bb = self.bounding_box
        return float(np.max(bb[1] - bb[0]))


# -- catalog ------------------------------------------------------------------


def disk(radius=1.0, center=(0.0, 0.0)) -> DomainSpec:
    center = np.asarray(center, dtype=float)
    R = float(radius)

    def curve(t):
        t = np.atleast_1d(t)
        return center + R * np.stack([np.cos(t), np.sin(t)], axis=-1)

    def d1(t):
        t = np.atleast_1d(t)
        return R * np.stack([-np.sin(t), np.cos(t)], axis=-1)

    def d2(t):
        t = np.atleast_1d(t)
        return R * np.stack([-np.cos(t), -np.sin(t)], axis=-1)

    return DomainSpec("disk", center, curve, d1, d2,
                      lambda t: np.full_like(np.atleast_1d(t), R),
                      params={"radius": R, "center": tuple(center)})


def ellipse(a=2.0, b=1.0, center=(0.0, 0.0)) -> DomainSpec:
    center = np.asarray(center, dtype=float)
    a, b = float(a), float(b)

    def curve(t):
        t = np.atleast_1d(t)
        return center + np.stack([a * np.cos(t), b * np.sin(t)], axis=-1)

    def d1(t):
        t = np.atleast_1d(t)
        return np.stack([-a * np.sin(t), b * np.cos(t)], axis=-1)

    def d2(t):
        t = np.atleast_1d(t)
        return np.stack([-a * np.cos(t), -b * np.sin(t)], axis=-1)

    def radius(t):
        t = np.atleast_1d(t)
        return a * b / np.sqrt((b * np.cos(t)) ** 2 + (a * np.sin(t)) ** 2)

    return DomainSpec("ellipse", center, curve, d1, d2, radius,
                      params={"a": a, "b": b, "center": tuple(center)})


def star(radius=1.0, amplitude=0.1, lobes=3, center=(0.0, 0.0)) -> DomainSpec:
    """Smooth star-shaped perturbation of the disk, r(t) = R(1 + amp cos(k t))."""
    center = np.asarray(center, dtype=float)
    R, amp, k = float(radius), float(amplitude), int(lobes)
    if abs(amp) >= 1.0:
        raise ValueError("star perturbation must keep r(t) positive")

    def r(t):
        return R * (1.0 + amp * np.cos(k * t))

    def rp(t):
        return -R * amp * k * np.sin(k * t)

    def rpp(t):
        return -R * amp * k * k * np.cos(k * t)

    def curve(t):
        t = np.atleast_1d(t)
        e = np.stack([np.cos(t), np.sin(t)], axis=-1)
        return center + r(t)[:, None] * e

    def d1(t):
        t = np.atleast_1d(t)
        e = np.stack([np.cos(t), np.sin(t)], axis=-1)
        eperp = np.stack([-np.sin(t), np.cos(t)], axis=-1)
        return rp(t)[:, None] * e + r(t)[:, None] * eperp

    def d2(t):
        t = np.atleast_1d(t)
        e = np.stack([np.cos(t), np.sin(t)], axis=-1)
        eperp = np.stack([-np.sin(t), np.cos(t)], axis=-1)
        return (rpp(t) - r(t))[:, None] * e + 2.0 * rp(t)[:, None] * eperp

    return DomainSpec("star", center, curve, d1, d2,
                      lambda t: r(np.atleast_1d(t)),
                      params={"radius": R, "amplitude": amp, "lobes": k,
                              "center": tuple(center)})


_CATALOG = {"disk": disk, "ellipse": ellipse, "star": star}


def make_domain(name, **params) -> DomainSpec:
    if name not in _CATALOG:
        raise ValueError(f"unknown domain {name!r}; catalog: {sorted(_CATALOG)}")
    return _CATALOG[name](**params)


# -- anisotropy coefficients ----------------------------------------------------


@dataclass(frozen=True)
class AnisoCoefficient:
    """Positive coefficient a(x) with gradient, tagged by its kind."""

    kind: str  # 'constant' | 'power' | 'boundary-bump'
    _value: Callable[[np.ndarray], np.ndarray]
    _grad: Callable[[np.ndarray], np.ndarray]
    params: dict = field(default_factory=dict)

    def value(self, x):
        pts, single = _as_points(x)
        v = self._value(pts)
        return float(v[0]) if single else v

    def grad(self, x):
        pts, single = _as_points(x)
        g = self._grad(pts)
        return g[0] if single else g

    def grad_log(self, x):
        pts, single = _as_points(x)
        v = self._value(pts)
        g = self._grad(pts)
        out = g / v[:, None]
        return out[0] if single else out

    def __call__(self, x):
        return self.value(x)


def eval_aniso(coeff: AnisoCoefficient, x):
    """(a(x), grad a(x)) with a positivity guard."""
    pts, single = _as_points(x)
    v = coeff._value(pts)
    if np.any(v <= 0.0):
        bad = pts[np.argmin(v)]
        raise NonPositiveCoefficient(f"a({bad[0]:.4g},{bad[1]:.4g}) = {float(v.min()):.4g} <= 0")
    g = coeff._grad(pts)
    if single:
        return float(v[0]), g[0]
    return v, g


def constant_coefficient(c=1.0) -> AnisoCoefficient:
    c = float(c)
    if c <= 0:
        raise NonPositiveCoefficient("constant coefficient must be positive")
    return AnisoCoefficient(
        "constant",
        lambda pts: np.full(pts.shape[0], c),
        lambda pts: np.zeros_like(pts),
        params={"c": c},
    )


def power_coefficient(k1=1.0, k2=0.0, domain: DomainSpec | None = None) -> AnisoCoefficient:
    """a(x) = x1^k1 * x2^k2; the domain closure must stay in the open positive quadrant."""
    k1, k2 = float(k1), float(k2)
    if domain is not None:
        bb = domain.bounding_box
        if bb[0, 0] <= 0.0 or bb[0, 1] <= 0.0:
            raise NonPositiveCoefficient(
                "power-form coefficient needs the domain closure inside the open positive quadrant")

    def value(pts):
        return pts[:, 0] ** k1 * pts[:, 1] ** k2

    def grad(pts):
        v = value(pts)
        gx = np.where(k1 != 0.0, k1 * v / pts[:, 0], 0.0)
        gy = np.where(k2 != 0.0, k2 * v / pts[:, 1], 0.0)
        return np.stack([gx, gy], axis=-1)

    return AnisoCoefficient("power", value, grad, params={"k1": k1, "k2": k2})


def bump_coefficient(domain: DomainSpec, bumps) -> AnisoCoefficient:
    """a(x) = 1 + sum_j A_j exp(-|x - q_j|^2 / w_j^2).

    Each bump is (theta_j, A_j, w_j, offset_j): q_j sits at boundary parameter
    theta_j pushed offset_j along the outward normal. offset = 0 anchors the
    bump exactly on the boundary (grad a = 0 there); offset > 0 realizes
    d_nu a > 0 at the nearest boundary point.
    """
    centers, amps, widths = [], [], []
    for theta, A, w, offset in bumps:
        pt, nor, _ = domain.boundary_point(float(theta))
        centers.append(pt + float(offset) * nor)
        amps.append(float(A))
        widths.append(float(w))
    centers = np.asarray(centers)
    amps = np.asarray(amps)
    widths = np.asarray(widths)

    def value(pts):
        d2 = ((pts[:, None, 0] - centers[None, :, 0]) ** 2
              + (pts[:, None, 1] - centers[None, :, 1]) ** 2)
        return 1.0 + (amps[None, :] * np.exp(-d2 / widths[None, :] ** 2)).sum(axis=1)

    def grad(pts):
        diff = pts[:, None, :] - centers[None, :, :]
        d2 = (diff ** 2).sum(axis=-1)
        w2 = widths[None, :] ** 2
        coef = amps[None, :] * np.exp(-d2 / w2) * (-2.0 / w2)
        return (coef[:, :, None] * diff).sum(axis=1)

    return AnisoCoefficient(
        "boundary-bump", value, grad,
        params={"bumps": [tuple(map(float, b)) for b in bumps]})
