import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import RegularGridInterpolator
from scipy.stats import qmc

from gaussmap.errors import InputError
from gaussmap.geometry import Ball, ConvexBody, ConvexPolygon, weighted_mass

logger = logging.getLogger(__name__)

DENSITY_KINDS = ("uniform", "radial-power", "tabulated-grid")
SCHEMES = ("grid", "low-discrepancy")
CDF_CELLS = 2048
MASS_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class DensityField:
    """Probability density on a convex body or a centred ball.

    `__call__` is zero outside the domain; `profile` is the unclipped formula
    and is what flow integrators evaluate near the boundary.
    """

    kind: str
    domain: object
    exponent: float = 0.0
    normalization: float = 1.0
    interpolator: Optional[RegularGridInterpolator] = field(default=None, repr=False)

    @property
    def is_radial(self) -> bool:
        if not isinstance(self.domain, Ball) or tuple(self.domain.center) != (0.0, 0.0):
            return False
        return self.kind in ("uniform", "radial-power")

    def radial_profile(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.kind == "uniform":
            return np.full_like(s, self.normalization)
        if self.kind == "radial-power":
            return self.normalization * np.power(np.maximum(s, 1e-300), self.exponent)
        raise InputError(f"{self.kind} density has no radial profile")

    def profile(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if self.kind == "tabulated-grid":
            return self.normalization * self.interpolator(pts)
        return self.radial_profile(np.linalg.norm(pts, axis=1))

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        inside = self.domain.contains(pts, tol=1e-12 * max(1.0, self.domain.diameter))
        return np.where(inside, self.profile(pts), 0.0)


def uniform_density(domain) -> DensityField:
    if domain.area <= 0.0:
        raise InputError("uniform density needs a domain of positive area")
    return DensityField("uniform", domain, normalization=1.0 / domain.area)


def radial_power_density(domain, exponent: float) -> DensityField:
    """ρ(x) = C|x|^p normalized on `domain`; p = -1 on a ball is the classical Gauss flow density."""
    if not exponent > -2.0:
        raise InputError(f"radial-power exponent must exceed -2, got {exponent}")
    if isinstance(domain, Ball):
        if domain.center != (0.0, 0.0):
            raise InputError("radial densities need a ball centred at the origin")
        C = (exponent + 2.0) / (2.0 * math.pi * domain.radius ** (exponent + 2.0))
        return DensityField("radial-power", domain, exponent=exponent, normalization=C)
    raw = DensityField("radial-power", domain, exponent=exponent, normalization=1.0)
    mass = weighted_mass(domain, raw.profile)
    return DensityField("radial-power", domain, exponent=exponent, normalization=1.0 / mass)


def tabulated_density(domain, xs, ys, values) -> DensityField:
    """Bilinear density from a rectilinear table `values[i, j]` at (xs[i], ys[j])."""
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)) or np.any(values <= 0.0):
        raise InputError("tabulated density must be finite and strictly positive")
    interpolator = RegularGridInterpolator(
        (np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)), values,
        method="linear", bounds_error=False, fill_value=None,
    )
    raw = DensityField("tabulated-grid", domain, interpolator=interpolator)
    mass = weighted_mass(domain, raw.profile)
    return DensityField("tabulated-grid", domain, normalization=1.0 / mass, interpolator=interpolator)


@dataclass(frozen=True, eq=False)
class WeightedCloud:
    """Point discretization of a measure; weights positive and summing to one."""

    points: np.ndarray
    weights: np.ndarray
    pitch: float

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=float).ravel()
        if len(points) == 0 or len(points) != len(weights):
            raise InputError("cloud needs matching, nonempty points and weights")
        if np.any(weights <= 0.0) or not np.all(np.isfinite(weights)):
            raise InputError("cloud weights must be positive")
        weights = weights / weights.sum()
        for a in (points, weights):
            a.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def is_uniform(self) -> bool:
        return bool(np.ptp(self.weights) <= 1e-12 * self.weights.max())

    @property
    def centroid(self) -> np.ndarray:
        return self.weights @ self.points


@dataclass(frozen=True, eq=False)
class RadialCDF:
    """G(s) = ν(B_s) tabulated on 0 = s_0 < ... < s_M = r, linear in between."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.shape != values.shape or grid.size < 2 or np.any(np.diff(grid) <= 0):
            raise InputError("radial CDF grid must be increasing and match its values")
        if np.any(np.diff(values) < 0):
            raise InputError("radial CDF values must be nondecreasing")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @property
    def radius(self) -> float:
        return float(self.grid[-1])

    def cdf(self, s) -> np.ndarray:
        return np.interp(s, self.grid, self.values, left=0.0, right=1.0)

    def ppf(self, p) -> np.ndarray:
        """Generalized inverse inf{s: G(s) >= p}, linear within a grid cell."""
        p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
        idx = np.clip(np.searchsorted(self.values, p, side="left"), 1, len(self.grid) - 1)
        g0, g1 = self.values[idx - 1], self.values[idx]
        s0, s1 = self.grid[idx - 1], self.grid[idx]
        gap = np.where(g1 > g0, g1 - g0, 1.0)
        frac = np.where(g1 > g0, (p - g0) / gap, 1.0)
        s = s0 + np.clip(frac, 0.0, 1.0) * (s1 - s0)
        return np.where(p <= self.values[0], self.grid[0], s)


def radial_cdf(density: DensityField, M: int = CDF_CELLS) -> RadialCDF:
    """Law of |x| under `density` on its ball."""
    ball = density.domain
    if not isinstance(ball, Ball) or ball.center != (0.0, 0.0):
        raise InputError("radial_cdf needs a density on a ball centred at the origin")
    grid = np.linspace(0.0, ball.radius, M + 1)

    if density.kind in ("uniform", "radial-power"):
        cells = np.array([
            quad(lambda s: 2.0 * math.pi * s * float(density.radial_profile(s)), a, b)[0]
            for a, b in zip(grid[:-1], grid[1:])
        ])
    else:
        n_angles = 256
        theta = 2.0 * np.pi * (np.arange(n_angles) + 0.5) / n_angles
        mid = 0.5 * (grid[:-1] + grid[1:])
        pts = mid[:, None, None] * np.stack([np.cos(theta), np.sin(theta)], axis=-1)[None, :, :]
        rho = density.profile(pts.reshape(-1, 2)).reshape(M, n_angles)
        cells = rho.mean(axis=1) * 2.0 * math.pi * mid * np.diff(grid)

    values = np.concatenate([[0.0], np.cumsum(cells)])
    total = values[-1]
    if not total > 0.0:
        raise InputError("density has no mass on its ball")
    return RadialCDF(grid, values / total)


def quantile(cdf: RadialCDF, p):
    out = cdf.ppf(p)
    return float(out) if np.ndim(out) == 0 else out


def weighted_ecdf(values, weights, tiebreak=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sort order plus weighted CDF just before and just after each sorted value.

    Equal values are ordered by `tiebreak` when given, otherwise by position.
    """
    values = np.asarray(values, dtype=float).ravel()
    weights = np.asarray(weights, dtype=float).ravel()
    if values.size == 0:
        raise InputError("empirical CDF of an empty sample")
    if values.shape != weights.shape:
        raise InputError("values and weights differ in length")
    if tiebreak is None:
        order = np.argsort(values, kind="mergesort")
    else:
        tiebreak = np.asarray(tiebreak).ravel()
        if tiebreak.shape != values.shape:
            raise InputError("tiebreak and values differ in length")
        order = np.lexsort((tiebreak, values))
    w = weights[order] / weights.sum()
    after = np.cumsum(w)
    before = after - w
    return order, before, after


def _tie_midranks(values, weights, tiebreak=None) -> np.ndarray:
    values = np.asarray(values, dtype=float).ravel()
    order, before, after = weighted_ecdf(values, weights, tiebreak)
    sorted_values = values[order]
    new_block = np.r_[True, sorted_values[1:] != sorted_values[:-1]]
    if tiebreak is not None:
        sorted_ties = np.asarray(tiebreak).ravel()[order]
        new_block |= np.r_[True, sorted_ties[1:] != sorted_ties[:-1]]
    starts = np.flatnonzero(new_block)
    ends = np.r_[starts[1:], len(values)] - 1
    block = np.cumsum(new_block) - 1
    mid = 0.5 * (before[starts][block] + after[ends][block])
    ranks = np.empty_like(mid)
    ranks[order] = mid
    return ranks


def monotone_rearrangement(values, weights, target: RadialCDF, tiebreak=None) -> np.ndarray:
    """Order-preserving recoupling of `values` to the law `target`.

    Tied values share the midpoint rank of their block unless `tiebreak` separates them.
    """
    values = np.asarray(values, dtype=float).ravel()
    if not np.all(np.isfinite(values)):
        raise InputError("rearranged values must be finite")
    return target.ppf(_tie_midranks(values, weights, tiebreak))


def ks_distance(values, weights, target: RadialCDF) -> float:
    values = np.asarray(values, dtype=float).ravel()
    order, before, after = weighted_ecdf(values, weights)
    G = target.cdf(values[order])
    return float(max(np.max(np.abs(after - G)), np.max(np.abs(before - G))))


def _split_counts(N: int, shares: np.ndarray) -> np.ndarray:
    """Largest-remainder split of N into parts proportional to `shares`, each at least 1."""
    raw = N * shares / shares.sum()
    counts = np.maximum(np.floor(raw).astype(int), 1)
    while counts.sum() > N:
        counts[np.argmax(counts)] -= 1
    remainder = raw - counts
    for k in np.argsort(-remainder, kind="mergesort")[: N - counts.sum()]:
        counts[k] += 1
    return counts


def _ball_grid(density: DensityField, N: int) -> tuple[np.ndarray, np.ndarray]:
    ball = density.domain
    K = max(1, int(round(math.sqrt(N / 3.0))))
    counts = _split_counts(N, 2.0 * np.arange(K) + 1.0)
    bounds = np.concatenate([[0], np.cumsum(counts)]) / N

    if density.is_radial:
        # equal-mass cells: radii from the law of |x|, weights are exact cell masses
        G = radial_cdf(density)
        centres = np.concatenate([np.full(n, (lo + hi) / 2.0) for n, lo, hi in zip(counts, bounds[:-1], bounds[1:])])
        radii = G.ppf(centres)
        weights = np.full(N, 1.0 / N)
    else:
        r2 = ball.radius**2
        radii = np.concatenate([
            np.full(n, math.sqrt(r2 * (lo + hi) / 2.0)) for n, lo, hi in zip(counts, bounds[:-1], bounds[1:])
        ])
        weights = None

    angles = np.concatenate([2.0 * np.pi * (np.arange(n) + 0.5) / n for n in counts])
    points = np.asarray(ball.center) + radii[:, None] * np.column_stack([np.cos(angles), np.sin(angles)])
    if weights is None:
        weights = density(points)
    return points, weights


def _polygon_grid(density: DensityField, N: int) -> tuple[np.ndarray, np.ndarray]:
    body = density.domain
    lo = body.vertices.min(axis=0)
    hi = body.vertices.max(axis=0)
    pitch = math.sqrt(body.area / N)
    best = None
    for _ in range(8):
        nx = max(1, int(round((hi[0] - lo[0]) / pitch)))
        ny = max(1, int(round((hi[1] - lo[1]) / pitch)))
        xs = lo[0] + (hi[0] - lo[0]) * (np.arange(nx) + 0.5) / nx
        ys = lo[1] + (hi[1] - lo[1]) * (np.arange(ny) + 0.5) / ny
        gx, gy = np.meshgrid(xs, ys, indexing="xy")
        cand = np.column_stack([gx.ravel(), gy.ravel()])
        cand = cand[body.contains(cand)]
        if best is None or abs(len(cand) - N) < abs(len(best) - N):
            best = cand
        if len(cand) == N or len(cand) == 0:
            break
        pitch *= math.sqrt(len(cand) / N)
    return best, density(best)


def _low_discrepancy(density: DensityField, N: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    sampler = qmc.Halton(d=2, scramble=True, seed=seed)
    domain = density.domain
    if isinstance(domain, Ball):
        u = sampler.random(N)
        radius = domain.radius * np.sqrt(u[:, 0])
        angle = 2.0 * np.pi * u[:, 1]
        points = np.asarray(domain.center) + radius[:, None] * np.column_stack([np.cos(angle), np.sin(angle)])
        return points, density(points)

    lo = domain.vertices.min(axis=0)
    hi = domain.vertices.max(axis=0)
    kept = []
    count = 0
    while count < N:
        cand = qmc.scale(sampler.random(2 * N), lo, hi)
        cand = cand[domain.contains(cand)]
        kept.append(cand)
        count += len(cand)
    points = np.vstack(kept)[:N]
    return points, density(points)


def discretize(density: DensityField, N: int, scheme: str = "grid", seed: int = 0) -> WeightedCloud:
    """Weighted point cloud standing in for `density`.

    Weights are ρ at the cell centre times the cell area (equal areas), except
    for radial densities on balls, whose polar cells carry equal mass.
    """
    if N < 4:
        raise InputError(f"discretize needs N >= 4, got {N}")
    if scheme not in SCHEMES:
        raise InputError(f"unknown discretization scheme {scheme!r}")
    domain = density.domain
    if isinstance(domain, ConvexBody) and not isinstance(domain, ConvexPolygon):
        raise InputError("cannot discretize a degenerate body")

    if scheme == "grid":
        points, weights = _ball_grid(density, N) if isinstance(domain, Ball) else _polygon_grid(density, N)
    else:
        points, weights = _low_discrepancy(density, N, seed)

    weights = np.asarray(weights, dtype=float)
    if len(points) == 0 or np.any(weights <= 0.0):
        raise InputError(f"{density.kind} density vanishes inside its domain; it must be positive there")
    pitch = math.sqrt(domain.area / len(points))
    cloud = WeightedCloud(points, weights, pitch)
    logger.debug("Discretized %s density: %d points (%s), pitch %.4g", density.kind, len(cloud), scheme, pitch)
    return cloud
