"""t → ∞ continuation of lifted transports and assembly of the limit map T = φ·n."""

import logging
import math
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Optional

import numpy as np
from sklearn.neighbors import NearestNeighbors

from gaussmap.errors import InputError, MapInversionError, SolverError
from gaussmap.geometry import (
    Ball,
    PointBody,
    convex_hull,
    hausdorff_distance,
    normal_cone,
    unit_normals,
    weighted_mass,
)
from gaussmap.measures import (
    DensityField,
    RadialCDF,
    WeightedCloud,
    discretize,
    ks_distance,
    monotone_rearrangement,
    radial_cdf,
)
from gaussmap.schemas import (
    DEFAULT_SCHEDULE,
    ContinuationReport,
    ContinuationStep,
    DiscretizationAgreement,
    PowergradStatistic,
    ResidualReport,
    TransportSummary,
)
from gaussmap.transport import (
    BrenierPotential,
    DualPair,
    LiftedTarget,
    brenier_potential,
    cost_matrix,
    lift_target,
    solve_entropic,
    solve_exact,
)

logger = logging.getLogger(__name__)

POWERGRAD_DELTA = 0.05
FAR_FROM_LEVEL = 2.0
INTERIOR_DEPTH = 3.0
KNN = 12
SUPPORT_FIT_STEP = 0.15
RANGE_TOL = 1e-6
INVERSE_PITCHES = 2.0
# W_t below this fraction of the dual scale is rounding noise
W_RESOLUTION = 1e-12


@dataclass(frozen=True, eq=False)
class PotentialField:
    """Values of W_t, φ_t or the limit φ on a source cloud.

    `rank`, when set, is a strict ordering of the points consistent with
    `values`; it separates points whose values tie.
    """

    cloud: WeightedCloud
    values: np.ndarray
    kind: str
    t: float
    rank: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if len(values) != len(self.cloud):
            raise InputError("potential values do not match the cloud size")
        object.__setattr__(self, "values", values)
        if self.rank is not None:
            rank = np.asarray(self.rank).ravel()
            if len(rank) != len(values):
                raise InputError("potential rank does not match the cloud size")
            object.__setattr__(self, "rank", rank)

    @property
    def points(self) -> np.ndarray:
        return self.cloud.points

    @property
    def weights(self) -> np.ndarray:
        return self.cloud.weights

    def out_of_range(self, r: float) -> np.ndarray:
        """Indices whose value leaves [0, r] by more than the range tolerance."""
        return np.flatnonzero((self.values < -RANGE_TOL * r) | (self.values > r + RANGE_TOL * r))


@dataclass(frozen=True, eq=False)
class TransportProblem:
    source: WeightedCloud
    target: WeightedCloud
    rho0: DensityField
    rho1: DensityField
    nu_cdf: RadialCDF

    @property
    def body(self):
        return self.rho0.domain

    @property
    def radius(self) -> float:
        return self.rho1.domain.radius

    @property
    def diameter(self) -> float:
        return self.body.diameter


def make_problem(rho0: DensityField, rho1: DensityField, N: int, scheme: str = "grid", seed: int = 0) -> TransportProblem:
    """Discretize ρ0 and ρ1; the target always uses the polar grid with the source's point count."""
    if not isinstance(rho1.domain, Ball):
        raise InputError("target density must live on a ball")
    source = discretize(rho0, N, scheme=scheme, seed=seed)
    target = discretize(rho1, len(source), scheme="grid", seed=seed)
    return TransportProblem(source, target, rho0, rho1, radial_cdf(rho1))


def phi_from_W(W: PotentialField, t: float) -> PotentialField:
    """φ_t = ((t+2)W)^(1/(t+2))."""
    values = W.values
    scale = max(1.0, float(np.abs(values).max()))
    if np.any(values < -1e-12 * scale):
        raise InputError(f"W_t has negative values (min {values.min():.3e}); normalization failed upstream")
    phi = np.power((t + 2.0) * np.maximum(values, 0.0), 1.0 / (t + 2.0))
    return PotentialField(W.cloud, phi, kind="phi_t", t=t)


def sup_bound(t: float, diameter: float, r: float) -> float:
    """(2+t)^(1/(2+t)) diam^(1/(2+t)) r^((1+t)/(2+t))."""
    p = 1.0 / (2.0 + t)
    return (2.0 + t) ** p * diameter**p * r ** ((1.0 + t) * p)


def check_sup_bound(phi: PotentialField, t: float, diameter: float, r: float) -> float:
    return sup_bound(t, diameter, r) - float(np.max(phi.values))


def powergrad_statistic(images, weights, t: float, r: float, nu_cdf: RadialCDF, delta: float = POWERGRAD_DELTA) -> PowergradStatistic:
    """μ-mass with (|T_t|/r)^(1/(2+t)) ≤ 1-δ against the ν-mass of the same event."""
    images = np.asarray(images, dtype=float).reshape(-1, 2)
    weights = np.asarray(weights, dtype=float)
    norm = np.linalg.norm(images, axis=1) / r
    mu_fraction = float(weights[norm ** (1.0 / (2.0 + t)) <= 1.0 - delta].sum() / weights.sum())
    nu_fraction = float(nu_cdf.cdf(r * (1.0 - delta) ** (2.0 + t)))
    difference = abs(mu_fraction - nu_fraction)
    return PowergradStatistic(
        t=t,
        mu_fraction=mu_fraction,
        nu_fraction=nu_fraction,
        difference=difference,
        flagged=difference > 2.0 / math.sqrt(len(weights)),
    )


def knn_gradients(points, values, k: int = KNN) -> np.ndarray:
    """Least-squares plane fit over the k nearest neighbours of every point."""
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float)
    n_neighbors = min(k + 1, len(points))
    nn = NearestNeighbors(n_neighbors=n_neighbors, algorithm="kd_tree").fit(points)
    _, idx = nn.kneighbors(points)
    offsets = points[idx] - points[:, None, :]
    design = np.concatenate([offsets, np.ones(offsets.shape[:2] + (1,))], axis=2)
    coef = np.linalg.pinv(design) @ values[idx][:, :, None]
    return coef[:, :2, 0]


def _boundary_samples(body, n: int = 512) -> tuple[np.ndarray, float]:
    if isinstance(body, Ball):
        body = body.polygon(n)
    starts, d = body.edges()
    lengths = np.linalg.norm(d, axis=1)
    total = float(lengths.sum())
    s = (np.arange(n) + 0.5) * total / n
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    e = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(lengths) - 1)
    frac = (s - cum[e]) / lengths[e]
    return starts[e] + frac[:, None] * d[e], total / n


def gradient_l1_estimate(phi: PotentialField, body) -> tuple[float, float]:
    """(∫_A |∇φ| dx, ∫_∂A φ dH¹) from kNN gradients and nearest-point boundary values."""
    grads = knn_gradients(phi.points, phi.values)
    interior = float(np.linalg.norm(grads, axis=1).sum()) * body.area / len(phi.values)
    samples, ds = _boundary_samples(body)
    nn = NearestNeighbors(n_neighbors=1).fit(phi.points)
    _, idx = nn.kneighbors(samples)
    boundary = float(phi.values[idx[:, 0]].sum()) * ds
    return interior, boundary


def _gradient_discrepancy(phi: PotentialField, images, t: float) -> Optional[float]:
    """Median relative gap between kNN |∇φ_t| and the magnitude (|T_t|/φ_t)^(1+t) the pairing implies."""
    norms = np.linalg.norm(images, axis=1)
    ok = (phi.values > 0) & (norms > 0)
    if not np.any(ok):
        return None
    fd = np.linalg.norm(knn_gradients(phi.points, phi.values), axis=1)[ok]
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        implied = np.exp((1.0 + t) * (np.log(norms[ok]) - np.log(phi.values[ok])))
        rel = np.abs(fd - implied) / implied
    rel = rel[np.isfinite(rel)]
    return float(np.median(rel)) if rel.size else None


@dataclass(frozen=True, eq=False)
class StepResult:
    """Everything one continuation step produced.

    `W`, `phi` and `images` are in true units; `lifted`, `potential` and `duals`
    belong to the problem rescaled to r = 1.
    """

    t: float
    W: PotentialField
    phi: PotentialField
    pairing: np.ndarray
    resolved: np.ndarray
    images: np.ndarray
    lifted: LiftedTarget
    potential: BrenierPotential
    duals: DualPair
    duality_gap: float

    @property
    def dual_scale(self) -> float:
        return dual_scale(self.potential, self.duals)


@dataclass(eq=False)
class ContinuationResult:
    steps: list[StepResult]
    report: ContinuationReport
    phi_pre: PotentialField


def dual_scale(potential: BrenierPotential, duals: DualPair) -> float:
    """Size of the terms W_t is a difference of."""
    return max(float(np.abs(duals.u).max()), float(np.abs(duals.v).max()), abs(float(potential.offset)))


def _resolved_mask(W_scaled: PotentialField, potential: BrenierPotential, duals: DualPair, lifted_norm, sigma, resolution_floor: float) -> np.ndarray:
    """Points whose lifted image clears the floor and whose W_t stands above rounding noise."""
    scale = dual_scale(potential, duals)
    return (lifted_norm[sigma] >= resolution_floor) & (W_scaled.values > W_RESOLUTION * scale)


def _solve_step(
    problem: TransportProblem, t: float, solver: str, epsilon: float, max_iter: int, resolution_floor: float
) -> StepResult:
    r = problem.radius
    src, tgt = problem.source, problem.target
    lifted = lift_target(tgt.points, t, radius=r)
    costs = cost_matrix(src, lifted)
    solve = solve_exact if solver == "exact" else partial(solve_entropic, epsilon=epsilon, max_iter=max_iter)
    plan, duals = solve(src, tgt, costs)
    potential = brenier_potential(duals, lifted, src)
    W_scaled = PotentialField(src, potential(src.points), kind="W_t", t=t)
    phi_scaled = phi_from_W(W_scaled, t)
    sigma = plan.pairing()
    resolved = _resolved_mask(W_scaled, potential, duals, np.linalg.norm(lifted.z, axis=1), sigma, resolution_floor)
    # targets were divided by r: W scales by r^(1+t), φ by r^((1+t)/(2+t))
    W = replace(W_scaled, values=W_scaled.values * r ** (1.0 + t))
    phi = replace(phi_scaled, values=phi_scaled.values * r ** ((1.0 + t) / (2.0 + t)))
    return StepResult(
        t=t, W=W, phi=phi, pairing=sigma, resolved=resolved,
        images=tgt.points[sigma], lifted=lifted, potential=potential, duals=duals,
        duality_gap=duals.value(src.weights, tgt.weights) - plan.objective(costs),
    )


def _strict_rank(values: np.ndarray, previous: np.ndarray) -> np.ndarray:
    order = np.lexsort((previous, values))
    rank = np.empty(len(values), dtype=np.int64)
    rank[order] = np.arange(len(values))
    return rank


def cascade_order(steps: list[StepResult]) -> tuple[np.ndarray, np.ndarray]:
    """φ at the largest t and a strict rank of the points.

    Unresolved points take the slots of their own values in the order the
    previous step gave them; ties fall back to the previous step's rank, and
    ties at the first step keep cloud order.
    """
    key = steps[0].phi.values.copy()
    rank = _strict_rank(key, np.arange(len(key)))
    for step in steps[1:]:
        values = step.phi.values.copy()
        unresolved = np.flatnonzero(~step.resolved)
        if unresolved.size:
            by_previous = unresolved[np.argsort(rank[unresolved], kind="mergesort")]
            values[by_previous] = np.sort(values[unresolved], kind="mergesort")
        rank = _strict_rank(values, rank)
        key = values
    return key, rank


def _resolved_delta(step: StepResult, previous: StepResult) -> float:
    """sup |φ_t - φ_s| over points both steps resolved."""
    both = step.resolved & previous.resolved
    if not np.any(both):
        return 0.0
    return float(np.max(np.abs(step.phi.values[both] - previous.phi.values[both])))


def continuation(
    problem: TransportProblem,
    t_schedule=DEFAULT_SCHEDULE,
    solver: str = "exact",
    epsilon: float = 1e-2,
    max_iter: int = 5000,
    resolution_floor: float = 1e-10,
) -> ContinuationResult:
    """Solve the lifted transports along `t_schedule` and report convergence diagnostics."""
    schedule = [float(t) for t in t_schedule]
    if not schedule or schedule[0] != 0.0 or any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise InputError("t_schedule must be strictly increasing and start at 0")
    r = problem.radius
    weights = problem.source.weights
    report = ContinuationReport()
    steps: list[StepResult] = []

    for t in schedule:
        try:
            step = _solve_step(problem, t, solver, epsilon, max_iter, resolution_floor)
        except SolverError as exc:
            report.aborted_at = t
            logger.error("Continuation aborted at t=%g: %s", t, exc.detail)
            failure = SolverError(exc.detail, t=t)
            failure.report = report
            raise failure from exc

        steps.append(step)

        powergrad = powergrad_statistic(step.images, weights, t, r, problem.nu_cdf)
        interior, boundary = gradient_l1_estimate(step.phi, problem.body)
        entry = ContinuationStep(
            t=t,
            max_phi=float(step.phi.values.max()),
            bound=sup_bound(t, problem.diameter, r),
            bound_margin=check_sup_bound(step.phi, t, problem.diameter, r),
            sup_delta=None if len(steps) == 1 else _resolved_delta(step, steps[-2]),
            duality_gap=float(step.duality_gap),
            powergrad_mu=powergrad.mu_fraction,
            powergrad_nu=powergrad.nu_fraction,
            powergrad_flagged=powergrad.flagged,
            ks_radial=ks_distance(step.phi.values, weights, problem.nu_cdf),
            resolved_fraction=float(weights[step.resolved].sum()),
            gradient_l1=interior,
            boundary_integral=boundary,
            gradient_discrepancy=_gradient_discrepancy(step.phi, step.images, t),
        )
        report.steps.append(entry)
        logger.info(
            "t=%g: max phi %.4f, bound margin %.3e, sup delta %s, KS %.4f, resolved %.1f%%",
            t, entry.max_phi, entry.bound_margin,
            "-" if entry.sup_delta is None else f"{entry.sup_delta:.4e}",
            entry.ks_radial, 100.0 * entry.resolved_fraction,
        )
        if entry.resolved_fraction < 1.0:
            logger.warning("t=%g: %.1f%% of the mass is unresolved and keeps the previous order", t, 100.0 * (1.0 - entry.resolved_fraction))
        if entry.bound_margin < -RANGE_TOL * r:
            logger.warning("t=%g: sup bound violated by %.3e", t, -entry.bound_margin)

    if not report.deltas_decreasing():
        logger.warning("Continuation deltas are not monotone after the first two steps: %s", report.deltas())

    values, rank = cascade_order(steps)
    phi_pre = PotentialField(problem.source, values, kind="phi_t", t=schedule[-1], rank=rank)
    return ContinuationResult(steps=steps, report=report, phi_pre=phi_pre)


def radial_recalibrate(phi_pre: PotentialField, nu_cdf: RadialCDF) -> PotentialField:
    """Keep the ordering of φ_pre, take the values from the law of |y| under ν."""
    values = monotone_rearrangement(phi_pre.values, phi_pre.weights, nu_cdf, tiebreak=phi_pre.rank)
    return PotentialField(phi_pre.cloud, values, kind="phi_limit", t=math.inf)


def level_grid(nu_cdf: RadialCDF, count: int) -> np.ndarray:
    """λ_i = G⁻¹(i/(count+1)): equal ν-mass between consecutive levels."""
    return nu_cdf.ppf(np.arange(1, count + 1) / (count + 1.0))


@dataclass(frozen=True, eq=False)
class LevelSetFamily:
    """Sub-level hulls {φ ≤ λ} at increasing levels."""

    levels: np.ndarray
    bodies: tuple

    def __len__(self) -> int:
        return len(self.levels)

    def index_for(self, values) -> np.ndarray:
        """Smallest level ≥ each value (the last level for anything above it)."""
        idx = np.searchsorted(self.levels, values, side="left")
        return np.clip(idx, 0, len(self.levels) - 1)

    def is_nested(self, tol: float = 1e-9, M: int = 256) -> bool:
        directions = unit_normals(M)
        supports = np.array([b.support(directions) for b in self.bodies])
        return bool(np.all(np.diff(supports, axis=0) >= -tol))

    def masses(self, density: DensityField) -> np.ndarray:
        return np.array([weighted_mass(b, density) for b in self.bodies])


def extract_levels(phi: PotentialField, levels) -> LevelSetFamily:
    """body(λ) = convex hull of {x_i : φ(x_i) ≤ λ}, built incrementally in λ."""
    levels = np.asarray(levels, dtype=float).ravel()
    if np.any(levels <= 0.0):
        raise InputError("levels must be positive")
    order = np.argsort(levels, kind="mergesort")
    by_phi = np.argsort(phi.values, kind="mergesort")
    sorted_phi = phi.values[by_phi]
    points = phi.points[by_phi]

    bodies = [None] * len(levels)
    hull_points = np.empty((0, 2))
    taken = 0
    degenerate = 0
    for k in order:
        upto = int(np.searchsorted(sorted_phi, levels[k], side="right"))
        if upto > taken:
            hull_points = np.vstack([hull_points, points[taken:upto]])
            taken = upto
        if taken == 0:
            bodies[k] = PointBody(points[:1])
            degenerate += 1
            continue
        body = convex_hull(hull_points)
        hull_points = body.vertices
        degenerate += int(body.is_degenerate)
        bodies[k] = body

    family = LevelSetFamily(levels=levels[order], bodies=tuple(bodies[k] for k in order))
    if degenerate:
        logger.debug("%d of %d levels are degenerate bodies", degenerate, len(levels))
    if not family.is_nested(tol=1e-9 * max(1.0, float(np.abs(phi.points).max()))):
        logger.warning("Level family is not nested; check the φ field")
    return family


def convexity_defect(phi: PotentialField, family: LevelSetFamily) -> float:
    """Largest μ-fraction of points with φ > λ lying strictly inside body(λ)."""
    worst = 0.0
    for level, body in zip(family.levels, family.bodies):
        if body.is_degenerate:
            continue
        above = phi.values > level
        inside = body.contains(phi.points[above], tol=-1e-9 * body.diameter)
        worst = max(worst, float(phi.weights[above][inside].sum()))
    return worst


@dataclass(frozen=True, eq=False)
class TransportMap:
    """Images T(x_i) of a source cloud, with an optional index pairing to a target cloud."""

    source: np.ndarray
    images: np.ndarray
    target: Optional[np.ndarray] = None
    pairing: Optional[np.ndarray] = None
    inverse: Optional[np.ndarray] = None
    far_from_level: int = 0
    pushforward_w2: Optional[float] = None


def _nearest_boundary(body, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest boundary points of `body` to each row of `x`, and their distances."""
    if len(body.vertices) == 1:
        p = np.repeat(body.vertices, len(x), axis=0)
        return p, np.linalg.norm(x - p, axis=1)
    starts, d = body.edges()
    length2 = np.maximum(np.einsum("ij,ij->i", d, d), 1e-300)
    rel = x[:, None, :] - starts[None, :, :]
    s = np.clip(np.einsum("pej,ej->pe", rel, d) / length2, 0.0, 1.0)
    proj = starts[None, :, :] + s[:, :, None] * d[None, :, :]
    dist = np.linalg.norm(x[:, None, :] - proj, axis=2)
    e = np.argmin(dist, axis=1)
    rows = np.arange(len(x))
    return proj[rows, e], dist[rows, e]


def assemble_map(phi: PotentialField, family: LevelSetFamily, pitch: Optional[float] = None) -> TransportMap:
    """T(x) = φ(x)·n(x), n the outward normal of body(λ ≥ φ(x)) at the boundary point nearest x.

    Vertices use the midpoint of their normal cone.
    """
    pitch = phi.cloud.pitch if pitch is None else pitch
    n = len(phi.values)
    normals = np.zeros((n, 2))
    distances = np.zeros(n)
    idx = family.index_for(phi.values)
    for k in np.unique(idx):
        members = np.flatnonzero(idx == k)
        body = family.bodies[k]
        nearest, dist = _nearest_boundary(body, phi.points[members])
        distances[members] = dist
        for i, p in zip(members, nearest):
            normals[i] = normal_cone(body, p).midpoint()

    far = int(np.sum(distances > FAR_FROM_LEVEL * pitch))
    if far:
        logger.warning("%d points lie more than %.0f pitches inside their level boundary", far, FAR_FROM_LEVEL)
    images = phi.values[:, None] * normals
    return TransportMap(source=phi.points, images=images, far_from_level=far)


def limit_pairing(tmap: TransportMap, source_weights, target: WeightedCloud) -> TransportMap:
    """Pair T#μ with the ν cloud by exact transport; also records the pushforward W2 distance."""
    costs = cost_matrix(tmap.images, target.points)
    plan, _ = solve_exact(source_weights, target.weights, costs)
    sq = costs.squared()[plan.rows, plan.cols]
    w2 = math.sqrt(max(0.0, float(np.sum(plan.mass * sq))))
    pairing = plan.pairing()
    inverse = None
    if plan.is_bijection:
        inverse = np.empty_like(pairing)
        inverse[pairing] = np.arange(len(pairing))
    return replace(tmap, target=target.points, pairing=pairing, inverse=inverse, pushforward_w2=w2)


def invert_map(tmap: TransportMap) -> TransportMap:
    """T⁻¹ as a map on the target cloud; requires a bijective pairing."""
    if tmap.pairing is None or tmap.target is None:
        raise MapInversionError("map has no pairing to a target cloud")
    pairing = np.asarray(tmap.pairing)
    n = len(tmap.target)
    if len(pairing) != n or np.any(pairing < 0) or len(np.unique(pairing)) != n:
        raise MapInversionError("pairing is not a bijection between the clouds")
    inverse = np.empty_like(pairing)
    inverse[pairing] = np.arange(n)
    return TransportMap(
        source=tmap.target,
        images=tmap.source[inverse],
        target=tmap.source,
        pairing=inverse,
        inverse=pairing,
    )


def _depth(body, points) -> np.ndarray:
    """Distance from inside points to the body boundary."""
    if isinstance(body, Ball):
        return body.radius - np.linalg.norm(points - body.centroid, axis=1)
    starts, _ = body.edges()
    normals = body.edge_normals()
    offsets = np.einsum("ij,ij->i", normals, starts)
    return np.min(offsets[None, :] - points @ normals.T, axis=1)


def _support_curvature(body, normal: np.ndarray, step: float = SUPPORT_FIT_STEP) -> float:
    """K = 1/(h + h″) from a quadratic fit of the support at five directions around `normal`."""
    alpha = math.atan2(normal[1], normal[0]) + step * np.arange(-2, 3)
    h = body.support(np.column_stack([np.cos(alpha), np.sin(alpha)]))
    c2, _, c0 = np.polyfit(step * np.arange(-2, 3), h, 2)
    rho = c0 + 2.0 * c2
    return 1.0 / rho if rho > 0 else math.nan


def monge_ampere_residual(
    phi: PotentialField, family: LevelSetFamily, tmap: TransportMap, rho0: DensityField, rho1: DensityField
) -> tuple[np.ndarray, ResidualReport]:
    """|ρ0 - ρ1(φn)|∇φ|φK| / ρ0 at points at least three pitches inside A."""
    pitch = phi.cloud.pitch
    residual = np.full(len(phi.values), np.nan)
    eligible = (_depth(rho0.domain, phi.points) >= INTERIOR_DEPTH * pitch) & (phi.values > 0)
    grads = np.linalg.norm(knn_gradients(phi.points, phi.values), axis=1)
    idx = family.index_for(phi.values)
    normals = tmap.images / np.where(phi.values > 0, phi.values, 1.0)[:, None]
    r0 = rho0.profile(phi.points)
    r1 = rho1.profile(tmap.images)

    for i in np.flatnonzero(eligible):
        body = family.bodies[idx[i]]
        if body.is_degenerate:
            continue
        K = _support_curvature(body, normals[i])
        if math.isfinite(K):
            residual[i] = abs(r0[i] - r1[i] * grads[i] * phi.values[i] * K) / r0[i]

    valid = residual[np.isfinite(residual)]
    report = ResidualReport(
        check="monge_ampere",
        max=float(valid.max()) if valid.size else math.nan,
        median=float(np.median(valid)) if valid.size else math.nan,
        p90=float(np.percentile(valid, 90)) if valid.size else math.nan,
        n_points=int(valid.size),
        skipped=int(len(residual) - valid.size),
    )
    return residual, report


def inverse_convergence(pre_limit_inverses, limit_inverse: np.ndarray, weights, threshold: float) -> list[float]:
    """ν-mass where |T_t⁻¹(y) - T⁻¹(y)| ≥ threshold, one entry per pre-limit inverse."""
    weights = np.asarray(weights, dtype=float)
    return [
        float(weights[np.linalg.norm(np.asarray(inv) - limit_inverse, axis=1) >= threshold].sum())
        for inv in pre_limit_inverses
    ]


def pre_limit_inverse(step: StepResult, source_points: np.ndarray) -> Optional[np.ndarray]:
    """T_t⁻¹(y_j) = x_σ⁻¹(j) when the step's pairing is a bijection."""
    sigma = step.pairing
    if len(np.unique(sigma)) != len(sigma) or np.any(sigma < 0):
        return None
    inverse = np.empty_like(sigma)
    inverse[sigma] = np.arange(len(sigma))
    return source_points[inverse]


@dataclass(eq=False)
class GaussMapResult:
    problem: TransportProblem
    continuation: ContinuationResult
    phi: PotentialField
    levels: LevelSetFamily
    map_family: LevelSetFamily
    tmap: TransportMap
    summary: TransportSummary
    ma_residual: Optional[np.ndarray] = field(default=None, repr=False)


def gauss_map(
    problem: TransportProblem,
    t_schedule=DEFAULT_SCHEDULE,
    levels=None,
    n_levels: int = 32,
    map_levels: int = 128,
    solver: str = "exact",
    epsilon: float = 1e-2,
    max_iter: int = 5000,
    resolution_floor: float = 1e-10,
    residual: bool = True,
) -> GaussMapResult:
    """Continuation, radial recalibration, level extraction and map assembly in one call.

    `map_levels = 0` uses every distinct φ value as a level of the map family.
    """
    result = continuation(problem, t_schedule, solver, epsilon, max_iter, resolution_floor)
    weights = problem.source.weights
    ks_before = ks_distance(result.phi_pre.values, weights, problem.nu_cdf)
    phi = radial_recalibrate(result.phi_pre, problem.nu_cdf)
    ks_after = ks_distance(phi.values, weights, problem.nu_cdf)
    logger.info("Radial recalibration: KS %.4f -> %.4f", ks_before, ks_after)

    level_values = level_grid(problem.nu_cdf, n_levels) if levels is None else np.asarray(levels, dtype=float)
    family = extract_levels(phi, level_values)
    if map_levels:
        map_values = problem.nu_cdf.ppf(np.arange(1, map_levels + 1) / float(map_levels))
    else:
        map_values = np.unique(phi.values[phi.values > 0])
    map_family = extract_levels(phi, map_values)
    tmap = limit_pairing(assemble_map(phi, map_family), weights, problem.target)

    ma_values, ma_report = (None, None)
    if residual:
        ma_values, ma_report = monge_ampere_residual(phi, map_family, tmap, problem.rho0, problem.rho1)

    inverse_mass = None
    try:
        limit_inverse = invert_map(tmap).images
    except MapInversionError as exc:
        logger.warning("No limit inverse to compare the schedule against: %s", exc.detail)
    else:
        pre = [pre_limit_inverse(step, problem.source.points) for step in result.steps]
        if all(inv is not None for inv in pre):
            inverse_mass = inverse_convergence(pre, limit_inverse, problem.target.weights, INVERSE_PITCHES * problem.source.pitch)
            logger.info("Inverse maps off by >= %.3g: %s", INVERSE_PITCHES * problem.source.pitch, ", ".join(f"{m:.3f}" for m in inverse_mass))

    summary = TransportSummary(
        n_source=len(problem.source),
        n_target=len(problem.target),
        pitch=problem.source.pitch,
        continuation=result.report,
        ks_before=ks_before,
        ks_after=ks_after,
        pushforward_w2=float(tmap.pushforward_w2),
        far_from_level=tmap.far_from_level,
        nested=family.is_nested(tol=1e-9),
        convexity_defect=convexity_defect(phi, family),
        monge_ampere=ma_report,
        inverse_mass=inverse_mass,
    )
    return GaussMapResult(problem, result, phi, family, map_family, tmap, summary, ma_values)


def discretization_agreement(a: GaussMapResult, b: GaussMapResult, pitches: float = 5.0) -> DiscretizationAgreement:
    """Compare two runs of one problem on different clouds.

    φ is compared at points of `a` with a point of `b` within one pitch; the
    level hulls are compared at the levels both runs share.
    """
    pitch = max(a.problem.source.pitch, b.problem.source.pitch)
    nn = NearestNeighbors(n_neighbors=1).fit(b.phi.points)
    dist, idx = nn.kneighbors(a.phi.points)
    overlap = dist[:, 0] <= pitch
    gaps = np.abs(a.phi.values[overlap] - b.phi.values[idx[overlap, 0]])
    phi_sup = float(gaps.max()) if gaps.size else math.inf

    hausdorff = []
    for level, body in zip(a.levels.levels, a.levels.bodies):
        match = np.flatnonzero(np.isclose(b.levels.levels, level, rtol=1e-9, atol=0.0))
        if match.size:
            hausdorff.append(hausdorff_distance(body, b.levels.bodies[match[0]]))

    bound = pitches * pitch
    passed = phi_sup <= bound and all(h <= bound for h in hausdorff)
    if not passed:
        logger.warning("Discretizations disagree: sup |φ_a - φ_b| %.4g, worst level %.4g, bound %.4g",
                       phi_sup, max(hausdorff, default=0.0), bound)
    return DiscretizationAgreement(
        pitch=pitch, phi_sup=phi_sup, overlap=int(overlap.sum()), level_hausdorff=hausdorff, bound=bound, passed=passed
    )
