"""Geometric kernels: circle fitting, whole-body spline reconstruction, laser rays.

Points are plain ``(3,)`` float arrays in mm; key point sets are ``(n, 3)``
arrays whose row 0 is the fixed base.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import make_interp_spline


class DegenerateGeometryError(ValueError):
    pass


class NoIntersectionError(ValueError):
    pass


class BehindOriginError(ValueError):
    pass


@dataclass(frozen=True)
class Plane:
    """Plane ``{p : normal . p = offset}``; ``normal`` is normalized on construction."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm == 0.0:
            raise DegenerateGeometryError("plane normal must be a finite nonzero vector")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "offset", float(self.offset) / norm)

    @classmethod
    def horizontal(cls, z: float) -> "Plane":
        return cls(np.array([0.0, 0.0, 1.0]), z)

    def signed_distance(self, p) -> float:
        return float(self.normal @ np.asarray(p, dtype=float) - self.offset)


@dataclass(frozen=True)
class CircleFit:
    center: np.ndarray
    radius: float
    normal: np.ndarray
    residual: float  # RMS distance of the markers to the fitted circle, mm


def _canonical_normal(n: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    n = n / np.linalg.norm(n)
    for k in (2, 0, 1):
        if abs(n[k]) > tol:
            return n if n[k] > 0 else -n
    return n


def fit_circle_3d(markers) -> CircleFit:
    """Fit a circle to >= 3 marker positions on a key feature plane.

    The plane comes from the scatter matrix (centroid + least-variance axis).
    In-plane, an algebraic Kasa fit gives the initial center and radius, then
    one Gauss-Newton step on the geometric residuals refines them.
    """
    pts = np.asarray(markers, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise DegenerateGeometryError("need at least 3 markers with 3 coordinates each")
    if not np.all(np.isfinite(pts)):
        raise DegenerateGeometryError("marker coordinates must be finite")
    if len(np.unique(np.round(pts, 12), axis=0)) < 3:
        raise DegenerateGeometryError("fewer than 3 distinct markers")

    centroid = pts.mean(axis=0)
    q = pts - centroid
    _, sv, vt = np.linalg.svd(q, full_matrices=False)
    if sv[0] == 0.0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateGeometryError("markers are collinear")
    normal = _canonical_normal(vt[2])
    # in-plane basis, right-handed with the canonical normal
    e1 = vt[0] - (vt[0] @ normal) * normal
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    uv = np.column_stack([q @ e1, q @ e2])

    # Kasa: x^2 + y^2 = 2 a x + 2 b y + c
    A = np.column_stack([2.0 * uv, np.ones(len(uv))])
    rhs = (uv ** 2).sum(axis=1)
    (a, b, c), *_ = np.linalg.lstsq(A, rhs, rcond=None)
    r = np.sqrt(max(c + a * a + b * b, 0.0))

    # one Gauss-Newton step on r_i = |uv_i - (a, b)| - r
    d = uv - np.array([a, b])
    dist = np.linalg.norm(d, axis=1)
    if np.all(dist > 0.0):
        res = dist - r
        J = np.column_stack([-d[:, 0] / dist, -d[:, 1] / dist, -np.ones(len(dist))])
        step, *_ = np.linalg.lstsq(J, -res, rcond=None)
        a, b, r = a + step[0], b + step[1], r + step[2]
    if not r > 0.0:
        raise DegenerateGeometryError("circle fit produced a non-positive radius")

    center = centroid + a * e1 + b * e2
    in_plane = np.linalg.norm(uv - np.array([a, b]), axis=1) - r
    out_plane = q @ normal
    residual = float(np.sqrt(np.mean(in_plane ** 2 + out_plane ** 2)))
    return CircleFit(center=center, radius=float(r), normal=normal, residual=residual)


def _chord_params(keys: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(keys, axis=0), axis=1)
    if np.any(seg <= 0.0):
        raise DegenerateGeometryError("consecutive key points coincide")
    u = np.concatenate([[0.0], np.cumsum(seg)])
    return u / u[-1]


@dataclass(frozen=True)
class Reconstruction:
    points: np.ndarray  # (samples, 3)
    linear_fallback: bool


def bspline_reconstruct(keys, samples: int = 100) -> Reconstruction:
    """Interpolate the key points with a clamped cubic B-spline (chord-length knots).

    With fewer than 4 keys the body is returned as a resampled polyline and
    ``linear_fallback`` is set.
    """
    keys = np.asarray(keys, dtype=float)
    if keys.ndim != 2 or keys.shape[1] != 3 or len(keys) < 2:
        raise DegenerateGeometryError("need at least 2 key points")
    if samples < 2:
        raise ValueError("samples must be >= 2")
    u = _chord_params(keys)
    s = np.linspace(0.0, 1.0, samples)
    if len(keys) < 4:
        pts = np.column_stack([np.interp(s, u, keys[:, k]) for k in range(3)])
        return Reconstruction(pts, True)
    spline = make_interp_spline(u, keys, k=3)
    pts = spline(s)
    # clamped knots interpolate the ends; pin them to remove rounding
    pts[0], pts[-1] = keys[0], keys[-1]
    return Reconstruction(pts, False)


def body_tangent(keys, s: float) -> np.ndarray:
    """Unit tangent of the reconstructed body at normalized chord parameter ``s``."""
    keys = np.asarray(keys, dtype=float)
    if len(keys) < 2:
        raise DegenerateGeometryError("need at least 2 key points")
    if len(keys) < 4:
        u = _chord_params(keys)
        i = min(int(np.searchsorted(u, s, side="right")) - 1, len(keys) - 2)
        t = keys[i + 1] - keys[max(i, 0)]
        return t / np.linalg.norm(t)
    u = _chord_params(keys)
    t = make_interp_spline(u, keys, k=3).derivative()(s)
    return t / np.linalg.norm(t)


def tip_tangent(keys) -> np.ndarray:
    """Unit tangent at the last key point (the laser direction)."""
    return body_tangent(keys, 1.0)


def ray_plane_intersect(origin, direction, plane: Plane, eps: float = 1e-12) -> np.ndarray:
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    denom = float(plane.normal @ d)
    if abs(denom) < eps:
        raise NoIntersectionError("ray is parallel to the plane")
    t = (plane.offset - float(plane.normal @ o)) / denom
    if t < 0.0:
        raise BehindOriginError(f"plane lies behind the ray origin (t={t:.6g})")
    return o + t * d
