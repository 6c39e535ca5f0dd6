import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from gaussmap.errors import ConvexityLossError, FlowCollapsedError, InputError
from gaussmap.gauss_limit import LevelSetFamily
from gaussmap.geometry import (
    Ball,
    ConvexPolygon,
    SupportSamples,
    body_from_support,
    curvatures,
    hausdorff_distance,
    inner_parallel,
    isoperimetric_ratio,
    support_area,
    support_samples,
    weighted_mass,
)
from gaussmap.measures import RadialCDF
from gaussmap.schemas import LevelComparison, MassResidual

logger = logging.getLogger(__name__)

DLAMBDA_FRACTION = 1.0 / 2048.0
LAMBDA_MIN_FRACTION = 0.02
COLLAPSE_FRACTION = 1e-3
MAX_HALVINGS = 20
CFL = 0.4
READINGS = ("level", "literal")


@dataclass(frozen=True, eq=False)
class FlowState:
    """Support samples at level λ (or time, for the classical flow)."""

    s: SupportSamples
    level: float
    steps: int = 0
    halvings: int = 0


@dataclass(eq=False)
class FlowTrace:
    states: list[FlowState] = field(default_factory=list)
    areas: list[float] = field(default_factory=list)
    masses: list[float] = field(default_factory=list)
    collapsed_at: Optional[float] = None
    reading: str = "level"

    @property
    def levels(self) -> np.ndarray:
        return np.array([s.level for s in self.states])

    @property
    def halvings(self) -> int:
        return self.states[-1].halvings if self.states else 0

    def bodies(self) -> list:
        return [body_from_support(s.s) for s in self.states]

    def append(self, state: FlowState, mass: float = math.nan):
        self.states.append(state)
        self.areas.append(support_area(state.s))
        self.masses.append(mass)


def _evaluate(density, points: np.ndarray) -> np.ndarray:
    profile = getattr(density, "profile", density)
    return np.asarray(profile(points), dtype=float)


def _density_radius(state: FlowState, reading: str, r: Optional[float]) -> float:
    if reading == "level":
        return state.level
    if reading == "literal":
        if r is None:
            raise InputError("the literal reading needs the target radius")
        return r - state.level
    raise InputError(f"unknown flow reading {reading!r}")


def flow_speeds(state: FlowState, rho0, rho1, reading: str = "level", r: Optional[float] = None) -> np.ndarray:
    """v_k = λ·ρ1(λn_k)/ρ0(x_k)·K_k at every angle."""
    K = curvatures(state.s)
    lam = _density_radius(state, reading, r)
    r0 = _evaluate(rho0, state.s.boundary_points())
    if np.any(r0 <= 0.0):
        raise InputError("source density vanishes on the flowing curve")
    r1 = _evaluate(rho1, lam * state.s.normals)
    return lam * r1 / r0 * K


def flow_speed(state: FlowState, k: int, rho0, rho1, reading: str = "level", r: Optional[float] = None) -> float:
    return float(flow_speeds(state, rho0, rho1, reading, r)[k])


def _admissible(s: SupportSamples) -> bool:
    return bool(np.all(s.radii_of_curvature() > 0.0) and np.all(s.widths() > 0.0))


def stable_step(s: SupportSamples, v: np.ndarray) -> float:
    """Largest explicit step keeping the linearized curvature update stable, scaled by CFL."""
    moving = v > 0
    if not np.any(moving):
        return math.inf
    rho = s.radii_of_curvature()
    return CFL * 2.0 * (1.0 - math.cos(s.dtheta)) * float(np.min(rho[moving] / v[moving]))


def _advance(state: FlowState, v: np.ndarray, dlam: float, direction: float) -> FlowState:
    """h ← h - v·dλ, halving dλ on convexity or width loss."""
    halvings = 0
    while True:
        candidate = SupportSamples(state.s.h - v * dlam)
        if _admissible(candidate):
            return FlowState(candidate, state.level + direction * dlam, state.steps + 1, state.halvings + halvings)
        if halvings == MAX_HALVINGS:
            raise FlowCollapsedError(f"step rejected after {MAX_HALVINGS} halvings at level {state.level:.6g}")
        halvings += 1
        dlam *= 0.5
        logger.debug("Flow step rejected at %.6g, halving to %.3e", state.level, dlam)


def step(state: FlowState, rho0, rho1, dlam: float, reading: str = "level", r: Optional[float] = None) -> FlowState:
    """One explicit step from level λ to λ - dλ (less after halvings)."""
    if not dlam > 0:
        raise InputError(f"flow step must be positive, got {dlam}")
    v = flow_speeds(state, rho0, rho1, reading, r)
    return _advance(state, v, dlam, -1.0)


def initial_support(A, M: int, smoothing: float = 0.01) -> SupportSamples:
    """Support of ∂A, with polygon corners rounded by radius smoothing·diam(A)."""
    if isinstance(A, Ball):
        return support_samples(A, M)
    if not isinstance(A, ConvexPolygon):
        raise InputError("flows need a body of positive area")
    eps = smoothing * A.diameter
    while eps > 0:
        try:
            core = inner_parallel(A, eps)
            break
        except InputError:
            eps *= 0.5
    else:
        core = A
    return SupportSamples(support_samples(core, M).h + eps)


def _collapsed(s: SupportSamples, scale: float) -> bool:
    return float(s.widths().max()) < COLLAPSE_FRACTION * scale


def run_flow(
    A,
    rho0,
    rho1,
    r: float,
    record_levels,
    M: int = 256,
    dlambda: Optional[float] = None,
    smoothing: float = 0.01,
    reading: str = "level",
    lambda_min: Optional[float] = None,
) -> FlowTrace:
    """Integrate from ∂A at λ = r down to λ_min, recording states at the requested levels."""
    if reading not in READINGS:
        raise InputError(f"unknown flow reading {reading!r}")
    if M % 2:
        raise InputError("flow angle count must be even")
    lambda_min = LAMBDA_MIN_FRACTION * r if lambda_min is None else lambda_min
    dl0 = DLAMBDA_FRACTION * r if dlambda is None else dlambda
    pending = sorted({float(x) for x in record_levels if lambda_min <= x <= r}, reverse=True)
    dropped = len(set(record_levels)) - len(pending)
    if dropped:
        logger.warning("%d record levels lie outside [%.4g, %.4g] and are skipped", dropped, lambda_min, r)

    s0 = initial_support(A, M, smoothing)
    try:
        curvatures(s0)
    except ConvexityLossError as exc:
        raise InputError(f"initial body is not strictly convex on the angle grid: {exc.detail}") from exc
    state = FlowState(s0, r)
    trace = FlowTrace(reading=reading)

    def record(st: FlowState):
        mass = weighted_mass(body_from_support(st.s), rho0)
        trace.append(st, mass)
        logger.info("Flow level %.4f: area %.5g, mass %.5f, %d steps", st.level, trace.areas[-1], mass, st.steps)

    if pending and abs(pending[0] - r) <= 1e-12 * r:
        record(state)
        pending.pop(0)

    while state.level > lambda_min + 1e-12 * r:
        stop = max(pending[0] if pending else lambda_min, lambda_min)
        try:
            v = flow_speeds(state, rho0, rho1, reading, r)
            dl = min(dl0, stable_step(state.s, v), state.level - stop)
            state = _advance(state, v, dl, -1.0)
        except (FlowCollapsedError, ConvexityLossError) as exc:
            trace.collapsed_at = state.level
            logger.warning("Flow degenerated at level %.6g: %s", state.level, exc)
            break
        if abs(state.level - stop) <= 1e-9 * r:
            state = replace(state, level=stop)
            if pending and stop == pending[0]:
                record(state)
                pending.pop(0)
        if _collapsed(state.s, r):
            trace.collapsed_at = state.level
            logger.info("Flow collapsed to a point at level %.6g", state.level)
            break

    if len(record_levels) > 0 and not trace.states and trace.collapsed_at is not None:
        raise FlowCollapsedError(f"flow collapsed at level {trace.collapsed_at:.6g} before the first recorded level")
    if pending:
        logger.warning("Levels %s were not reached", ", ".join(f"{x:.4g}" for x in pending))
    return trace


def classical_flow(A, c: float, dt: float, T_end: Optional[float] = None, M: int = 256, smoothing: float = 0.01) -> FlowTrace:
    """ẋ = -cKn; `level` holds elapsed time and every accepted step is recorded."""
    if not c > 0:
        raise InputError(f"classical flow speed must be positive, got {c}")
    s0 = initial_support(A, M, smoothing)
    try:
        curvatures(s0)
    except ConvexityLossError as exc:
        raise InputError(f"initial body is not strictly convex on the angle grid: {exc.detail}") from exc
    scale = float(s0.widths().max())
    if T_end is None:
        T_end = support_area(s0) / (2.0 * math.pi * c)

    state = FlowState(s0, 0.0)
    trace = FlowTrace(reading="classical")
    trace.append(state)
    while state.level < T_end - 1e-15 * T_end:
        try:
            v = c * curvatures(state.s)
            dtau = min(dt, stable_step(state.s, v), T_end - state.level)
            state = _advance(state, v, dtau, 1.0)
        except (FlowCollapsedError, ConvexityLossError) as exc:
            trace.collapsed_at = state.level
            logger.info("Classical flow degenerated at t=%.6g: %s", state.level, exc)
            break
        trace.append(state)
        if _collapsed(state.s, scale):
            trace.collapsed_at = state.level
            break
    logger.info("Classical flow: %d steps, final area %.4g", len(trace.states) - 1, trace.areas[-1])
    return trace


def area_rate(trace: FlowTrace, fraction: float = 0.8) -> float:
    """Least-squares dArea/dt over the part of the trace before the area drops below (1 - fraction) of its start."""
    times = trace.levels
    areas = np.asarray(trace.areas)
    keep = areas >= (1.0 - fraction) * areas[0]
    if np.sum(keep) < 2:
        raise InputError("trace too short to fit an area rate")
    slope, _ = np.polyfit(times[keep], areas[keep], 1)
    return float(slope)


def isoperimetric_ratios(trace: FlowTrace) -> np.ndarray:
    return np.array([isoperimetric_ratio(s.s) for s in trace.states])


def mass_calibration(trace: FlowTrace, rho0, nu_cdf: RadialCDF) -> list[MassResidual]:
    """|∫_{A_λ} ρ0 - G(λ)| at each recorded level."""
    if not trace.states:
        raise InputError("mass calibration needs a nonempty trace")
    out = []
    for state, mass in zip(trace.states, trace.masses):
        if not math.isfinite(mass):
            mass = weighted_mass(body_from_support(state.s), rho0)
        target = float(nu_cdf.cdf(state.level))
        out.append(MassResidual(level=state.level, mass=mass, target=target, residual=abs(mass - target)))
    return out


def compare_with_levels(trace: FlowTrace, family: LevelSetFamily, bound: Optional[float] = None) -> list[LevelComparison]:
    """Hausdorff distance between flow bodies and sub-level hulls at each common level."""
    rows = []
    flow_levels = trace.levels
    for level, body in zip(family.levels, family.bodies):
        match = np.flatnonzero(np.abs(flow_levels - level) <= 1e-9 * max(1.0, abs(level)))
        if match.size == 0:
            rows.append(LevelComparison(level=float(level), note="no flow record at this level"))
            continue
        flow_body = body_from_support(trace.states[int(match[0])].s)
        distance = hausdorff_distance(flow_body, body)
        rows.append(LevelComparison(
            level=float(level),
            hausdorff=distance,
            bound=bound,
            passed=None if bound is None else distance <= bound,
        ))
    missing = sum(r.hausdorff is None for r in rows)
    if missing:
        logger.warning("%d of %d levels have no flow counterpart", missing, len(rows))
    return rows
