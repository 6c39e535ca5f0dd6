import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

from gaussmap.errors import ConvexityLossError, InputError

logger = logging.getLogger(__name__)

# Relative to the body diameter.
COINCIDENCE_TOL = 1e-9
CONVEXITY_TOL = -1e-12
UNIT_TOL = 1e-12
HAUSDORFF_ANGLES = 1024
MIN_ANGLES = 16
BALL_MASS_ANGLES = 256

Density = Callable[[np.ndarray], np.ndarray]


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise InputError("points must have finite coordinates")
    return pts


def unit_normals(M: int) -> np.ndarray:
    """Unit directions n(θ_k), θ_k = 2πk/M, as an (M, 2) array."""
    theta = 2.0 * np.pi * np.arange(M) / M
    return np.column_stack([np.cos(theta), np.sin(theta)])


@dataclass(frozen=True, eq=False)
class ConvexBody:
    """Compact convex planar body given by its extreme points."""

    vertices: np.ndarray

    def __post_init__(self):
        vertices = _as_points(self.vertices).copy()
        vertices.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)

    def support(self, directions) -> np.ndarray:
        directions = np.asarray(directions, dtype=float).reshape(-1, 2)
        return np.max(directions @ self.vertices.T, axis=1)

    @property
    def area(self) -> float:
        return 0.0

    @property
    def perimeter(self) -> float:
        if len(self.vertices) < 2:
            return 0.0
        return 2.0 * float(np.linalg.norm(self.vertices[1] - self.vertices[0]))

    @property
    def diameter(self) -> float:
        if len(self.vertices) < 2:
            return 0.0
        return float(pdist(self.vertices).max())

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    @property
    def is_degenerate(self) -> bool:
        return True

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Edge start points and CCW edge vectors (a 2-gon for segments)."""
        nxt = np.roll(self.vertices, -1, axis=0)
        return self.vertices, nxt - self.vertices

    def edge_normals(self) -> np.ndarray:
        _, d = self.edges()
        lengths = np.linalg.norm(d, axis=1)
        lengths[lengths == 0] = 1.0
        return np.column_stack([d[:, 1], -d[:, 0]]) / lengths[:, None]

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        pts = _as_points(points)
        a, b = self.vertices[0], self.vertices[-1]
        return _segment_distance(pts, a, b) <= tol


class PointBody(ConvexBody):
    """Single-point body; the endpoint of a shrinking flow."""


class SegmentBody(ConvexBody):
    """Segment body stored as its two endpoints."""


class ConvexPolygon(ConvexBody):
    """CCW polygon in strictly convex position, at least 3 vertices."""

    def __post_init__(self):
        super().__post_init__()
        if len(self.vertices) < 3:
            raise InputError("a convex polygon needs at least 3 vertices")

    @property
    def is_degenerate(self) -> bool:
        return False

    @property
    def area(self) -> float:
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))

    @property
    def perimeter(self) -> float:
        _, d = self.edges()
        return float(np.linalg.norm(d, axis=1).sum())

    @property
    def centroid(self) -> np.ndarray:
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        cross = v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]
        return ((v + w) * cross[:, None]).sum(axis=0) / (3.0 * cross.sum())

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        pts = _as_points(points)
        starts, _ = self.edges()
        normals = self.edge_normals()
        offsets = np.einsum("ij,ij->i", normals, starts)
        return np.all(pts @ normals.T <= offsets[None, :] + tol, axis=1)


@dataclass(frozen=True)
class Ball:
    """Closed disc of the given radius; the target domain B_r."""

    radius: float
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (math.isfinite(self.radius) and self.radius > 0):
            raise InputError(f"ball radius must be positive, got {self.radius}")

    def support(self, directions) -> np.ndarray:
        directions = np.asarray(directions, dtype=float).reshape(-1, 2)
        return self.radius + directions @ np.asarray(self.center, dtype=float)

    @property
    def area(self) -> float:
        return math.pi * self.radius**2

    @property
    def perimeter(self) -> float:
        return 2.0 * math.pi * self.radius

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    @property
    def centroid(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)

    @property
    def is_degenerate(self) -> bool:
        return False

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        pts = _as_points(points)
        return np.linalg.norm(pts - self.centroid, axis=1) <= self.radius + tol

    def polygon(self, M: int = 512) -> ConvexPolygon:
        return ConvexPolygon(self.centroid + self.radius * unit_normals(M))


def _segment_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    denom = float(d @ d)
    if denom == 0.0:
        return np.linalg.norm(pts - a, axis=1)
    s = np.clip((pts - a) @ d / denom, 0.0, 1.0)
    return np.linalg.norm(pts - (a + s[:, None] * d), axis=1)


def _prune(vertices: np.ndarray, tol: float) -> np.ndarray:
    """Drop repeated and collinear vertices from a CCW cycle."""
    v = [p for p in vertices]
    changed = True
    while changed and len(v) > 2:
        changed = False
        for i in range(len(v)):
            a, b, c = v[i - 1], v[i], v[(i + 1) % len(v)]
            ac = c - a
            span = math.hypot(ac[0], ac[1])
            height = abs((b[0] - a[0]) * ac[1] - (b[1] - a[1]) * ac[0]) / span if span > 0 else 0.0
            if np.linalg.norm(b - a) <= tol or height <= tol:
                del v[i]
                changed = True
                break
    return np.array(v)


def _canonical_start(vertices: np.ndarray) -> np.ndarray:
    start = np.lexsort((vertices[:, 0], vertices[:, 1]))[0]
    return np.roll(vertices, -start, axis=0)


def convex_hull(points) -> ConvexBody:
    """Minimal CCW convex polygon containing `points`.

    Coincident inputs give a PointBody and collinear inputs a SegmentBody.
    """
    pts = _as_points(points)
    if len(pts) == 0:
        raise InputError("convex_hull needs at least one point")
    extent = float(np.linalg.norm(np.ptp(pts, axis=0)))
    scale = 1.0 + float(np.abs(pts).max())
    if extent <= 1e-12 * scale:
        return PointBody(pts[:1])
    tol = COINCIDENCE_TOL * extent

    try:
        hull = ConvexHull(pts)
        vertices = _prune(pts[hull.vertices], tol)
    except QhullError:
        vertices = np.empty((0, 2))

    if len(vertices) < 3:
        # collinear: the extreme projections along the spread direction
        far = pts[np.argmax(np.linalg.norm(pts - pts[0], axis=1))] - pts[0]
        proj = pts @ far
        a, b = pts[np.argmin(proj)], pts[np.argmax(proj)]
        return SegmentBody(np.vstack([a, b]))

    return ConvexPolygon(_canonical_start(vertices))


def support_value(body, v) -> float:
    """S(v) = max over the body of ⟨v, x⟩ for a unit vector v."""
    v = np.asarray(v, dtype=float)
    if v.shape != (2,) or not np.all(np.isfinite(v)):
        raise InputError("direction must be a finite 2-vector")
    if abs(math.hypot(v[0], v[1]) - 1.0) > UNIT_TOL:
        raise InputError(f"direction must be a unit vector, |v| = {math.hypot(v[0], v[1])!r}")
    return float(body.support(v[None, :])[0])


def hausdorff_distance(b1, b2, M: int = HAUSDORFF_ANGLES) -> float:
    directions = unit_normals(M)
    return float(np.max(np.abs(b1.support(directions) - b2.support(directions))))


@dataclass(frozen=True)
class NormalCone:
    """Arc [alpha_lo, alpha_hi] of outward unit normals at a boundary point."""

    base: tuple[float, float]
    alpha_lo: float
    alpha_hi: float

    @property
    def width(self) -> float:
        return self.alpha_hi - self.alpha_lo

    @property
    def is_single(self) -> bool:
        return self.width == 0.0

    def midpoint(self) -> np.ndarray:
        alpha = 0.5 * (self.alpha_lo + self.alpha_hi)
        return np.array([math.cos(alpha), math.sin(alpha)])

    def contains(self, direction, tol: float = 1e-12) -> bool:
        alpha = math.atan2(direction[1], direction[0])
        offset = (alpha - self.alpha_lo) % (2.0 * math.pi)
        return offset <= self.width + tol or offset >= 2.0 * math.pi - tol


def normal_cone(body: ConvexBody, x) -> NormalCone:
    """Normal cone of `body` at the boundary point `x`.

    Edge interiors give a single direction; vertices give the arc from the
    incoming edge normal CCW to the outgoing one.
    """
    x = _as_points(x)[0]
    base = (float(x[0]), float(x[1]))
    tol = max(COINCIDENCE_TOL * body.diameter, 1e-12)
    vertices = body.vertices

    if len(vertices) == 1:
        if np.linalg.norm(x - vertices[0]) > tol:
            raise InputError(f"point {base} is not on the body boundary")
        return NormalCone(base, 0.0, 2.0 * math.pi)

    normals = body.edge_normals()
    angles = np.arctan2(normals[:, 1], normals[:, 0])
    vertex_dist = np.linalg.norm(vertices - x, axis=1)
    k = int(np.argmin(vertex_dist))
    if vertex_dist[k] <= tol:
        lo = float(angles[k - 1])
        hi = lo + float((angles[k] - lo) % (2.0 * math.pi))
        return NormalCone(base, lo, hi)

    starts, d = body.edges()
    dist = np.array([_segment_distance(x[None, :], a, a + e)[0] for a, e in zip(starts, d)])
    k = int(np.argmin(dist))
    if dist[k] > tol:
        raise InputError(f"point {base} is not on the body boundary (distance {dist[k]:.3e})")
    return NormalCone(base, float(angles[k]), float(angles[k]))


@dataclass(frozen=True, eq=False)
class SupportSamples:
    """Support function sampled at θ_k = 2πk/M."""

    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float).ravel().copy()
        if h.size < MIN_ANGLES:
            raise InputError(f"support samples need M >= {MIN_ANGLES}, got {h.size}")
        if not np.all(np.isfinite(h)):
            raise InputError("support samples must be finite")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @property
    def M(self) -> int:
        return self.h.size

    @property
    def dtheta(self) -> float:
        return 2.0 * math.pi / self.M

    @property
    def theta(self) -> np.ndarray:
        return self.dtheta * np.arange(self.M)

    @property
    def normals(self) -> np.ndarray:
        return unit_normals(self.M)

    def radii_of_curvature(self) -> np.ndarray:
        """ρ_k = (h[k-1] + h[k+1] - 2h[k]cosΔθ) / (2(1 - cosΔθ))."""
        c = math.cos(self.dtheta)
        second = np.roll(self.h, 1) + np.roll(self.h, -1) - 2.0 * c * self.h
        return second / (2.0 * (1.0 - c))

    def convexity_margin(self) -> np.ndarray:
        c = math.cos(self.dtheta)
        return np.roll(self.h, 1) - 2.0 * c * self.h + np.roll(self.h, -1)

    def is_convex(self) -> bool:
        scale = max(1.0, float(np.abs(self.h).max()))
        return bool(np.all(self.convexity_margin() >= CONVEXITY_TOL * scale))

    def widths(self) -> np.ndarray:
        """h(θ) + h(θ + π); needs even M."""
        return self.h + np.roll(self.h, -self.M // 2)

    def boundary_points(self) -> np.ndarray:
        """x(θ) = h·n + h′·n^⊥ with a central difference for h′."""
        dh = (np.roll(self.h, -1) - np.roll(self.h, 1)) / (2.0 * self.dtheta)
        n = self.normals
        tangent = np.column_stack([-n[:, 1], n[:, 0]])
        return self.h[:, None] * n + dh[:, None] * tangent


def support_samples(body, M: int) -> SupportSamples:
    return SupportSamples(body.support(unit_normals(M)))


def curvatures(s: SupportSamples) -> np.ndarray:
    """Curvature K_k = 1/ρ_k at every angle; raises on the first ρ_k ≤ 0."""
    rho = s.radii_of_curvature()
    bad = np.flatnonzero(rho <= 0.0)
    if bad.size:
        k = int(bad[0])
        raise ConvexityLossError(f"radius of curvature {rho[k]:.3e} <= 0 at angle index {k}", index=k)
    return 1.0 / rho


def curvature_from_support(s: SupportSamples, k: int) -> float:
    M = s.M
    c = math.cos(s.dtheta)
    rho = (s.h[(k - 1) % M] + s.h[(k + 1) % M] - 2.0 * c * s.h[k % M]) / (2.0 * (1.0 - c))
    if rho <= 0.0:
        raise ConvexityLossError(f"radius of curvature {rho:.3e} <= 0 at angle index {k}", index=k)
    return 1.0 / rho


def body_from_support(s: SupportSamples) -> ConvexBody:
    """Polygon cut out by the M support lines; exact on the sampled directions."""
    if not s.is_convex():
        k = int(np.argmin(s.convexity_margin()))
        raise ConvexityLossError("support samples violate discrete convexity", index=k)
    theta = s.theta
    a, b = theta, np.roll(theta, -1)
    b = np.where(b < a, b + 2.0 * math.pi, b)
    h0, h1 = s.h, np.roll(s.h, -1)
    det = math.sin(s.dtheta)
    x = (h0 * np.sin(b) - h1 * np.sin(a)) / det
    y = (h1 * np.cos(a) - h0 * np.cos(b)) / det
    return convex_hull(np.column_stack([x, y]))


def support_area(s: SupportSamples) -> float:
    """½ Σ h_k ρ_k Δθ, the periodic sum form of ½∫(h² − h′²)dθ."""
    return 0.5 * float(np.sum(s.h * s.radii_of_curvature())) * s.dtheta


def support_perimeter(s: SupportSamples) -> float:
    return float(np.sum(s.h)) * s.dtheta


def isoperimetric_ratio(s: SupportSamples) -> float:
    """L²/(4πA); 1 for discs."""
    area = support_area(s)
    if area <= 0.0:
        return math.inf
    return support_perimeter(s) ** 2 / (4.0 * math.pi * area)


@lru_cache(maxsize=8)
def _triangle_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Edge-midpoint rule on n² congruent sub-triangles of the reference triangle."""
    corners = []
    for i in range(n):
        for j in range(n - i):
            corners.append(((i, j), (i + 1, j), (i, j + 1)))
            if i + j <= n - 2:
                corners.append(((i + 1, j), (i, j + 1), (i + 1, j + 1)))
    tri = np.asarray(corners, dtype=float) / n
    mids = 0.5 * (tri + np.roll(tri, -1, axis=1))
    points = mids.reshape(-1, 2)
    weights = np.full(len(points), 1.0 / len(points))
    return points, weights


def _ball_mass(ball: Ball, density: Density, angles: int = BALL_MASS_ANGLES) -> float:
    """∫_0^R s ∫ ρ(c + s·θ) dθ ds: adaptive in the radius, midpoint rule in the angle."""
    theta = 2.0 * np.pi * (np.arange(angles) + 0.5) / angles
    directions = np.column_stack([np.cos(theta), np.sin(theta)])
    centre = np.asarray(ball.center, dtype=float)

    def ring(s: float) -> float:
        return 2.0 * math.pi * s * float(np.mean(density(centre + s * directions)))

    return float(quad(ring, 0.0, ball.radius, limit=200)[0])


def weighted_mass(body, density: Density, refine: int = 24) -> float:
    """Integral of `density` over `body`.

    Balls are integrated in polar coordinates, polygons by a fan triangulation
    from the centroid.
    """
    if isinstance(body, Ball):
        return _ball_mass(body, density)
    if body.is_degenerate:
        return 0.0
    ref, w = _triangle_rule(refine)
    c = body.centroid
    v0 = body.vertices
    v1 = np.roll(v0, -1, axis=0)
    e0, e1 = v0 - c, v1 - c
    areas = 0.5 * np.abs(e0[:, 0] * e1[:, 1] - e0[:, 1] * e1[:, 0])
    pts = c + ref[None, :, 0:1] * e0[:, None, :] + ref[None, :, 1:2] * e1[:, None, :]
    values = np.asarray(density(pts.reshape(-1, 2)), dtype=float).reshape(len(v0), -1)
    return float(np.sum(areas * (values @ w)))


def inner_parallel(polygon: ConvexPolygon, eps: float) -> ConvexPolygon:
    """Polygon whose edges are moved inward by `eps`."""
    if eps <= 0:
        return polygon
    normals = polygon.edge_normals()
    prev = np.roll(normals, 1, axis=0)
    miter = (prev + normals) / (1.0 + np.einsum("ij,ij->i", prev, normals))[:, None]
    moved = polygon.vertices - eps * miter
    old_edges = np.roll(polygon.vertices, -1, axis=0) - polygon.vertices
    new_edges = np.roll(moved, -1, axis=0) - moved
    if np.any(np.einsum("ij,ij->i", old_edges, new_edges) <= 0.0):
        raise InputError(f"inner offset {eps:g} exceeds the polygon inradius")
    return ConvexPolygon(moved)


def regular_polygon(n: int, radius: float = 1.0, center=(0.0, 0.0), phase: float = 0.0) -> ConvexPolygon:
    theta = phase + 2.0 * np.pi * np.arange(n) / n
    return ConvexPolygon(np.asarray(center, dtype=float) + radius * np.column_stack([np.cos(theta), np.sin(theta)]))


def ellipse_polygon(a: float, b: float, n: int = 1024) -> ConvexPolygon:
    theta = 2.0 * np.pi * np.arange(n) / n
    return ConvexPolygon(np.column_stack([a * np.cos(theta), b * np.sin(theta)]))


def ellipse_support(a: float, b: float, M: int) -> SupportSamples:
    n = unit_normals(M)
    return SupportSamples(np.sqrt((a * n[:, 0]) ** 2 + (b * n[:, 1]) ** 2))
