import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from gaussmap.errors import InputError, MapInversionError
from gaussmap.gauss_limit import (
    GaussMapResult,
    LevelSetFamily,
    PotentialField,
    StepResult,
    W_RESOLUTION,
    TransportMap,
    invert_map,
    knn_gradients,
    pre_limit_inverse,
)
from gaussmap.geometry import PointBody, SupportSamples, convex_hull, unit_normals
from gaussmap.schemas import DualityDiagnostics, PsiStep, ResidualReport
from gaussmap.transport import legendre_transform, lift_target

logger = logging.getLogger(__name__)

TANGENTIAL_MIN_RADIUS = 0.1
FD_PITCHES = 1.0
UPPER_TOL = 1e-9


def residual_report(check: str, values, skipped: int = 0) -> ResidualReport:
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return ResidualReport(check=check, max=math.nan, median=math.nan, n_points=0, skipped=skipped)
    return ResidualReport(
        check=check,
        max=float(values.max()),
        median=float(np.median(values)),
        p90=float(np.percentile(values, 90)),
        n_points=int(values.size),
        skipped=skipped,
    )


@dataclass(frozen=True, eq=False)
class SupportPotential:
    """ψ on the ν cloud and where it came from ("direct" or "limit-of-psi_t")."""

    points: np.ndarray
    values: np.ndarray
    provenance: str


class DirectPsi:
    """ψ(y) = |y|·S_{A_|y|}(y/|y|), linear in the level between extracted bodies.

    Level 0 is the minimizer of φ and the top level the hull of the whole cloud.
    """

    def __init__(self, phi: PotentialField, family: LevelSetFamily, radius: float):
        levels = list(family.levels)
        bodies = list(family.bodies)
        bottom = PointBody(phi.points[np.argmin(phi.values)][None, :])
        levels.insert(0, 0.0)
        bodies.insert(0, bottom)
        if levels[-1] < radius:
            levels.append(radius)
            bodies.append(convex_hull(phi.points))
        self.levels = np.asarray(levels)
        self.bodies = bodies
        self.radius = radius

    def __call__(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        s = np.linalg.norm(y, axis=1)
        out = np.zeros(len(y))
        nz = s > 0
        if not np.any(nz):
            return out
        directions = y[nz] / s[nz, None]
        supports = np.array([b.support(directions) for b in self.bodies])
        level = np.clip(s[nz], 0.0, self.levels[-1])
        k = np.clip(np.searchsorted(self.levels, level, side="right") - 1, 0, len(self.levels) - 2)
        lo, hi = self.levels[k], self.levels[k + 1]
        frac = (level - lo) / (hi - lo)
        cols = np.arange(len(k))
        h = (1.0 - frac) * supports[k, cols] + frac * supports[k + 1, cols]
        out[nz] = s[nz] * h
        return out

    def sphere_support(self, level: float, M: int = 256) -> SupportSamples:
        """ψ(λ·n)/λ over the direction grid; a support function for every λ."""
        return SupportSamples(self(level * unit_normals(M)) / level)


def psi_direct(phi: PotentialField, family: LevelSetFamily, y, radius: Optional[float] = None) -> float:
    y = np.asarray(y, dtype=float)
    radius = float(np.max(phi.values)) if radius is None else radius
    if np.linalg.norm(y) > radius * (1.0 + 1e-9):
        raise InputError("psi_direct needs |y| <= r")
    return float(DirectPsi(phi, family, radius)(y)[0])


class LiftedPsi:
    """ψ_t(y) = W_t*(y|y|^t)/|y|^t from a continuation step.

    Evaluated in units where r = 1 and rescaled by r; NaN where |y| = 0 or the
    lifted point falls below the resolution floor.
    """

    def __init__(self, step: StepResult, source_points: np.ndarray, radius: float, resolution_floor: float = 1e-10):
        self.t = step.t
        self.radius = radius
        self.floor = resolution_floor
        self.transform = legendre_transform(step.potential, source_points)

    def __call__(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        scaled = y / self.radius
        norm = np.linalg.norm(scaled, axis=1)
        out = np.full(len(y), np.nan)
        z = lift_target(np.clip(norm, 0.0, 1.0)[:, None] * _unit(scaled), self.t).z
        ok = (norm > 0) & (np.linalg.norm(z, axis=1) >= self.floor)
        if np.any(ok):
            out[ok] = self.radius * self.transform(z[ok]) * np.exp(-self.t * np.log(norm[ok]))
        return out


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=1)
    return v / np.where(n > 0, n, 1.0)[:, None]


def psi_t(evaluator: LiftedPsi, y) -> float:
    return float(evaluator(y)[0])


def psi_bound_violations(psi_values, points, bound_radius: float, tol: float = 1e-9) -> int:
    """Count of |ψ(y)| > bound_radius·|y|."""
    limit = bound_radius * np.linalg.norm(points, axis=1)
    vals = np.asarray(psi_values, dtype=float)
    ok = np.isfinite(vals)
    return int(np.sum(np.abs(vals[ok]) > limit[ok] * (1.0 + tol) + tol))


def check_ST(psi: SupportPotential, inverse: TransportMap) -> ResidualReport:
    """|ψ(y) - ⟨T⁻¹(y), y⟩| over the ν cloud."""
    inner = np.einsum("ij,ij->i", inverse.images, inverse.source)
    residual = np.abs(psi.values - inner)
    skipped = int(np.sum(~np.isfinite(residual)))
    return residual_report("ST", residual, skipped)


def check_graph_duality(psi: DirectPsi, tmap: TransportMap) -> ResidualReport:
    """|ψ(T(x)) - ⟨x, T(x)⟩| over the μ cloud."""
    residual = np.abs(psi(tmap.images) - np.einsum("ij,ij->i", tmap.source, tmap.images))
    return residual_report("graph_duality", residual)


def check_graph_duality_pre_limit(step: StepResult, source_points: np.ndarray, radius: float) -> ResidualReport:
    """(1/(t+2))φ_t²|∇φ_t|^(-t/(t+1)) + ψ_t(T_t(x)) = ⟨x, T_t(x)⟩ with kNN gradients."""
    t = step.t
    phi = step.phi.values
    grads = np.linalg.norm(knn_gradients(source_points, phi), axis=1)
    psi = LiftedPsi(step, source_points, radius)(step.images)
    ok = step.resolved & (phi > 0) & (grads > 0) & np.isfinite(psi)
    first = np.zeros_like(phi)
    first[ok] = phi[ok] ** 2 * grads[ok] ** (-t / (t + 1.0)) / (t + 2.0)
    residual = np.abs(first + psi - np.einsum("ij,ij->i", source_points, step.images))
    return residual_report(f"graph_duality_t{t:g}", residual[ok], skipped=int(np.sum(~ok)))


def _central_gradient(f, y: np.ndarray, h: float) -> np.ndarray:
    ex = np.array([h, 0.0])
    ey = np.array([0.0, h])
    gx = (f(y + ex) - f(y - ex)) / (2.0 * h)
    gy = (f(y + ey) - f(y - ey)) / (2.0 * h)
    return np.column_stack([gx, gy])


@dataclass(frozen=True)
class TtStResult:
    identity: ResidualReport
    tangential: ResidualReport
    gradient_term: float


def check_TtSt(evaluator: LiftedPsi, step: StepResult, source_points: np.ndarray, target_points: np.ndarray, h: float) -> TtStResult:
    """⟨T_t⁻¹(y), y⟩ = (t/(1+t))ψ_t(y) + (1/(1+t))⟨∇ψ_t(y), y⟩ with a central stencil of step h.

    Also reports the pre-limit tangential identity ∂_vψ_t(y) = ⟨T_t⁻¹(y), v⟩ for v ⊥ y and
    the cloud mean of the gradient term.
    """
    t = step.t
    r = evaluator.radius
    inverse = pre_limit_inverse(step, source_points)
    if inverse is None:
        raise InputError("check_TtSt needs a bijective pre-limit pairing")
    y = np.asarray(target_points, dtype=float)
    norm = np.linalg.norm(y, axis=1)
    eligible = (norm > 0) & (norm <= r - 2.0 * h)

    psi = evaluator(y)
    grad = _central_gradient(evaluator, y, h)
    ok = eligible & np.isfinite(psi) & np.all(np.isfinite(grad), axis=1)

    radial = np.einsum("ij,ij->i", grad, y)
    identity = np.abs(np.einsum("ij,ij->i", inverse, y) - (t / (1.0 + t)) * psi - radial / (1.0 + t))
    v = np.column_stack([-y[:, 1], y[:, 0]]) / np.where(norm > 0, norm, 1.0)[:, None]
    tangential = np.abs(np.einsum("ij,ij->i", grad, v) - np.einsum("ij,ij->i", inverse, v))
    skipped = int(np.sum(~ok))
    return TtStResult(
        identity=residual_report(f"TtSt_t{t:g}", identity[ok], skipped),
        tangential=residual_report(f"tangential_t{t:g}", tangential[ok], skipped),
        gradient_term=float(np.mean(np.abs(radial[ok]) / (1.0 + t))) if np.any(ok) else math.nan,
    )


def check_TP(evaluator: LiftedPsi, step: StepResult, source_points: np.ndarray, target_points: np.ndarray, h: float) -> ResidualReport:
    """|T_t⁻¹(y) - [(t/(1+t))ψ_t y/|y|² + (I - (t/(1+t))I_y)∇ψ_t]|, I_y the projection onto y."""
    t = step.t
    r = evaluator.radius
    inverse = pre_limit_inverse(step, source_points)
    if inverse is None:
        raise InputError("check_TP needs a bijective pre-limit pairing")
    y = np.asarray(target_points, dtype=float)
    norm = np.linalg.norm(y, axis=1)
    eligible = (norm > 0) & (norm <= r - 2.0 * h)
    psi = evaluator(y)
    grad = _central_gradient(evaluator, y, h)
    ok = eligible & np.isfinite(psi) & np.all(np.isfinite(grad), axis=1)

    k = t / (1.0 + t)
    safe2 = np.where(norm > 0, norm**2, 1.0)
    along = np.einsum("ij,ij->i", grad, y) / safe2
    recon = k * (psi / safe2)[:, None] * y + grad - k * along[:, None] * y
    residual = np.linalg.norm(recon - inverse, axis=1)
    return residual_report(f"TP_t{t:g}", residual[ok], int(np.sum(~ok)))


def tangential_reconstruction(psi: DirectPsi, y, h: float) -> Optional[np.ndarray]:
    """T⁻¹(y) ≈ (ψ(y)/|y|)e_1 + ∂_{e_2}ψ(y)e_2 with a finite difference along the circle |y|.

    None when |y| < 0.1r.
    """
    y = np.asarray(y, dtype=float)
    s = float(np.linalg.norm(y))
    if s < TANGENTIAL_MIN_RADIUS * psi.radius or s > psi.radius * (1.0 + 1e-9):
        return None
    e1 = y / s
    e2 = np.array([-e1[1], e1[0]])
    delta = h / s
    c, sn = math.cos(delta), math.sin(delta)
    plus = np.array([c * y[0] - sn * y[1], sn * y[0] + c * y[1]])
    minus = np.array([c * y[0] + sn * y[1], -sn * y[0] + c * y[1]])
    values = psi(np.vstack([y, plus, minus]))
    derivative = (values[1] - values[2]) / (2.0 * h)
    return (values[0] / s) * e1 + derivative * e2


def tangential_agreement(psi: DirectPsi, inverse: TransportMap, h: float, tolerance: float) -> tuple[float, int]:
    """Fraction of eligible ν points whose reconstruction lies within `tolerance` of T⁻¹(y), and the count."""
    hits = []
    for y, x in zip(inverse.source, inverse.images):
        recon = tangential_reconstruction(psi, y, h)
        if recon is not None:
            hits.append(np.linalg.norm(recon - x) <= tolerance)
    if not hits:
        return math.nan, 0
    return float(np.mean(hits)), len(hits)


def _gradient_term(evaluator: LiftedPsi, y: np.ndarray, h: float) -> Optional[float]:
    """Cloud mean of |⟨∇ψ_t(y), y⟩|/(1+t) away from the boundary of B_r."""
    norm = np.linalg.norm(y, axis=1)
    eligible = (norm > 0) & (norm <= evaluator.radius - 2.0 * h)
    if not np.any(eligible):
        return None
    radial = np.einsum("ij,ij->i", _central_gradient(evaluator, y[eligible], h), y[eligible])
    radial = radial[np.isfinite(radial)]
    return float(np.mean(np.abs(radial)) / (1.0 + evaluator.t)) if radial.size else None


def psi_schedule(result: GaussMapResult, h: float) -> list[PsiStep]:
    """ψ_t on the ν cloud at every schedule step.

    Per step: |ψ_t| ≤ diam(A)|y| violations, ψ_t(y) ≤ ⟨T_t⁻¹(y), y⟩ violations,
    the sup change from the previous step and the radial gradient term.
    The upper comparison allows the rounding of W_t amplified by |y/r|^(-t).
    """
    problem = result.problem
    r = problem.radius
    diameter = problem.diameter
    source_points = problem.source.points
    y = problem.target.points
    scaled_norm = np.linalg.norm(y, axis=1) / r
    entries = []
    previous = None
    for step in result.continuation.steps:
        evaluator = LiftedPsi(step, source_points, r)
        values = evaluator(y)
        finite = np.isfinite(values)
        entry = PsiStep(t=step.t, evaluated=int(finite.sum()), bound_violations=psi_bound_violations(values, y, diameter))

        inverse = pre_limit_inverse(step, source_points)
        if inverse is not None and np.any(finite):
            excess = values[finite] - np.einsum("ij,ij->i", inverse[finite], y[finite])
            noise = r * W_RESOLUTION * step.dual_scale * np.exp(-step.t * np.log(scaled_norm[finite]))
            entry.upper_violations = int(np.sum(excess > UPPER_TOL * r * diameter + noise))
            entry.upper_excess = float(excess.max())
        if previous is not None:
            both = finite & np.isfinite(previous)
            if np.any(both):
                entry.sup_change = float(np.max(np.abs(values[both] - previous[both])))
        entry.gradient_term = _gradient_term(evaluator, y, h)

        logger.debug("psi_t at t=%g: %d points, %d bound violations, upper excess %s, change %s",
                     step.t, entry.evaluated, entry.bound_violations, entry.upper_excess, entry.sup_change)
        entries.append(entry)
        previous = values
    return entries


def duality_diagnostics(result: GaussMapResult, fd_pitches: float = FD_PITCHES, tolerance_pitches: float = 5.0) -> DualityDiagnostics:
    """ψ_t across the schedule, pre-limit identities at the last step, plus the limit ∂_vψ agreement with T⁻¹.

    Finite differences in y use `fd_pitches` pitches of the ν cloud.
    """
    problem = result.problem
    r = problem.radius
    h = fd_pitches * problem.target.pitch
    step = result.continuation.steps[-1]
    source_points = problem.source.points
    target_points = problem.target.points
    report = DualityDiagnostics(t=step.t, fd_step=h, steps=psi_schedule(result, h))
    if report.bound_violations() or report.upper_violations():
        logger.warning("psi_t leaves its bounds: %d |psi_t| <= diam|y| and %d psi_t <= <T_t^-1 y, y> violations",
                       report.bound_violations(), report.upper_violations())

    if pre_limit_inverse(step, source_points) is None:
        logger.warning("Pairing at t=%g is not a bijection; pre-limit identities skipped", step.t)
    else:
        evaluator = LiftedPsi(step, source_points, r)
        ttst = check_TtSt(evaluator, step, source_points, target_points, h)
        report.tt_st = ttst.identity
        report.tangential = ttst.tangential
        report.gradient_term = None if math.isnan(ttst.gradient_term) else ttst.gradient_term
        report.tp = check_TP(evaluator, step, source_points, target_points, h)
        report.graph_duality = check_graph_duality_pre_limit(step, source_points, r)
        logger.info("Pre-limit identities at t=%g: TtSt max %s, TP max %s", step.t, report.tt_st.max, report.tp.max)

    try:
        inverse = invert_map(result.tmap)
    except MapInversionError as exc:
        logger.warning("Tangential agreement skipped: %s", exc.detail)
        return report
    psi = DirectPsi(result.phi, result.map_family, r)
    fraction, count = tangential_agreement(psi, inverse, h, tolerance_pitches * problem.source.pitch * r)
    report.tangential_agreement = None if math.isnan(fraction) else fraction
    report.tangential_count = count
    return report
