import logging
import math
import os
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import ot
from scipy.sparse import coo_matrix

from gaussmap.errors import (
    CostMatrixTooLargeError,
    InfeasibleWeightsError,
    InputError,
    SolverConvergenceError,
    SolverError,
)
from gaussmap.measures import WeightedCloud

logger = logging.getLogger(__name__)

MAX_COST_ENTRIES = int(float(os.getenv("GAUSSMAP_MAX_COST_ENTRIES", "25e6")))
WEIGHT_TOL = 1e-9
GAP_TOL = 1e-7
MARGINAL_TOL = 1e-6
EMD_MAX_ITER = 10_000_000


@dataclass(frozen=True, eq=False)
class LiftedTarget:
    """z = y|y|^t for one point (shape (2,)) or a batch (shape (n, 2))."""

    y: np.ndarray
    z: np.ndarray
    t: float


def lift_target(y, t: float, radius: float = 1.0) -> LiftedTarget:
    """Lift `y / radius` by z = y|y|^t; |z| = |y|^(1+t) is formed in log-space."""
    if t < 0:
        raise InputError(f"lift exponent must be nonnegative, got {t}")
    y = np.asarray(y, dtype=float) / radius
    pts = y.reshape(-1, 2)
    norm = np.linalg.norm(pts, axis=1)
    if np.any(norm > 1.0 + 1e-9):
        raise InputError("lifted points must lie in the target ball")
    z = np.zeros_like(pts)
    nz = norm > 0.0
    z[nz] = pts[nz] / norm[nz, None] * np.exp((1.0 + t) * np.log(norm[nz]))[:, None]
    return LiftedTarget(y=y, z=z.reshape(y.shape), t=float(t))


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """Inner products ⟨x_i, z_j⟩; the squared-distance and POT views derive from it."""

    inner: np.ndarray
    src_sq: np.ndarray
    tgt_sq: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.inner.shape

    @property
    def scale(self) -> float:
        return max(1e-300, float(np.abs(self.inner).max()))

    def squared(self) -> np.ndarray:
        return np.maximum(self.src_sq[:, None] + self.tgt_sq[None, :] - 2.0 * self.inner, 0.0)

    def minimization(self) -> tuple[np.ndarray, float]:
        """Nonnegative cost max(inner) - inner, with the shift used."""
        shift = float(self.inner.max())
        return np.ascontiguousarray(shift - self.inner), shift


def _points(x) -> np.ndarray:
    if isinstance(x, WeightedCloud):
        return x.points
    if isinstance(x, LiftedTarget):
        return x.z.reshape(-1, 2)
    return np.asarray(x, dtype=float).reshape(-1, 2)


def _weights(x) -> np.ndarray:
    if isinstance(x, WeightedCloud):
        return np.asarray(x.weights, dtype=float)
    return np.asarray(x, dtype=float).ravel()


def cost_matrix(src, tgt) -> CostMatrix:
    xs, zs = _points(src), _points(tgt)
    if len(xs) == 0 or len(zs) == 0:
        raise InputError("cost matrix needs nonempty clouds")
    entries = len(xs) * len(zs)
    if entries > MAX_COST_ENTRIES:
        raise CostMatrixTooLargeError(
            f"dense cost matrix of {entries} entries exceeds GAUSSMAP_MAX_COST_ENTRIES={MAX_COST_ENTRIES}; "
            "reduce N or use transport.solver = entropic with a raised cap"
        )
    return CostMatrix(inner=xs @ zs.T, src_sq=np.einsum("ij,ij->i", xs, xs), tgt_sq=np.einsum("ij,ij->i", zs, zs))


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Coupling stored as its support (i, j, mass); `permutation` is set on the assignment path."""

    rows: np.ndarray
    cols: np.ndarray
    mass: np.ndarray
    shape: tuple[int, int]
    permutation: Optional[np.ndarray] = None

    def as_sparse(self) -> coo_matrix:
        return coo_matrix((self.mass, (self.rows, self.cols)), shape=self.shape)

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        a = np.bincount(self.rows, weights=self.mass, minlength=self.shape[0])
        b = np.bincount(self.cols, weights=self.mass, minlength=self.shape[1])
        return a, b

    def objective(self, costs: CostMatrix) -> float:
        return float(np.sum(self.mass * costs.inner[self.rows, self.cols]))

    def pairing(self) -> np.ndarray:
        """σ(i); for general plans the target receiving most of row i (smallest index on ties)."""
        if self.permutation is not None:
            return self.permutation
        order = np.lexsort((self.cols, -self.mass, self.rows))
        rows = self.rows[order]
        first = np.r_[True, rows[1:] != rows[:-1]]
        sigma = np.full(self.shape[0], -1, dtype=int)
        sigma[rows[first]] = self.cols[order][first]
        return sigma

    @property
    def is_bijection(self) -> bool:
        if self.shape[0] != self.shape[1]:
            return False
        sigma = self.pairing()
        return bool(np.all(sigma >= 0) and len(np.unique(sigma)) == len(sigma))


@dataclass(frozen=True, eq=False)
class DualPair:
    """Maximization-form duals: u_i + v_j >= ⟨x_i, z_j⟩, equality on the plan support."""

    u: np.ndarray
    v: np.ndarray

    def value(self, a, b) -> float:
        return float(np.dot(a, self.u) + np.dot(b, self.v))

    def min_slack(self, costs: CostMatrix) -> float:
        return float(np.min(self.u[:, None] + self.v[None, :] - costs.inner))


def _check_weights(a: np.ndarray, b: np.ndarray):
    if np.any(a < 0) or np.any(b < 0):
        raise InfeasibleWeightsError("transport weights must be nonnegative")
    if abs(a.sum() - b.sum()) > WEIGHT_TOL:
        raise InfeasibleWeightsError(f"source and target masses differ: {a.sum():.12g} vs {b.sum():.12g}")


def _emd(a: np.ndarray, b: np.ndarray, costs: CostMatrix) -> tuple[np.ndarray, DualPair]:
    M, shift = costs.minimization()
    b = b * (a.sum() / b.sum())
    G, log = ot.emd(a, b, M, numItermax=EMD_MAX_ITER, log=True)
    if log.get("result_code", 1) != 1:
        raise SolverError(f"network simplex did not reach optimality: {log.get('warning')}")
    # POT returns min-form potentials f_i + g_j <= M_ij
    return G, DualPair(u=-np.asarray(log["u"]), v=shift - np.asarray(log["v"]))


def solve_exact(src, tgt, costs: CostMatrix) -> tuple[TransportPlan, DualPair]:
    """Exact discrete transport maximizing Σ m_ij ⟨x_i, z_j⟩ by the network simplex.

    Equal-size, equal-weight problems land on a vertex of the assignment
    polytope, so the plan is read back as a permutation.
    """
    a, b = _weights(src), _weights(tgt)
    if costs.shape != (len(a), len(b)):
        raise InputError(f"cost matrix shape {costs.shape} does not match weights ({len(a)}, {len(b)})")
    _check_weights(a, b)

    uniform = len(a) == len(b) and np.ptp(a) <= 1e-12 * a.max() and np.ptp(b) <= 1e-12 * b.max()
    G, duals = _emd(a, b, costs)
    best = np.argmax(G, axis=1)
    if uniform and len(np.unique(best)) == len(best):
        rows = np.arange(len(a))
        plan = TransportPlan(rows=rows, cols=best, mass=a.copy(), shape=costs.shape, permutation=best)
    else:
        if uniform:
            logger.warning("Network simplex plan on an assignment problem is not a permutation; keeping the split plan")
        rows, cols = np.nonzero(G > 0)
        plan = TransportPlan(rows=rows, cols=cols, mass=G[rows, cols], shape=costs.shape)

    primal = plan.objective(costs)
    gap = duals.value(a, b) - primal
    tolerance = GAP_TOL * max(costs.scale, abs(primal))
    logger.debug("Exact transport %dx%d: primal %.12g, duality gap %.3e", *costs.shape, primal, gap)
    if abs(gap) > tolerance:
        raise SolverError(f"duality gap {gap:.3e} exceeds {tolerance:.3e}")
    return plan, duals


def solve_entropic(src, tgt, costs: CostMatrix, epsilon: float = 1e-2, max_iter: int = 5000) -> tuple[TransportPlan, DualPair]:
    """Log-domain Sinkhorn; the plan carries an O(epsilon log N) cost bias."""
    if not epsilon > 0:
        raise InputError(f"entropic epsilon must be positive, got {epsilon}")
    a, b = _weights(src), _weights(tgt)
    _check_weights(a, b)
    M, shift = costs.minimization()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        P, log = ot.sinkhorn(a, b, M, epsilon, method="sinkhorn_log", numItermax=max_iter, stopThr=1e-10, log=True)
    violation = float(np.abs(P.sum(axis=1) - a).sum() + np.abs(P.sum(axis=0) - b).sum())
    logger.debug("Sinkhorn eps=%g: %d iterations, marginal violation %.3e", epsilon, log.get("niter", -1), violation)
    if not np.isfinite(violation) or violation > MARGINAL_TOL:
        raise SolverConvergenceError(f"Sinkhorn did not converge in {max_iter} iterations", violation)
    duals = DualPair(u=-epsilon * np.asarray(log["log_u"]), v=shift - epsilon * np.asarray(log["log_v"]))
    rows, cols = np.nonzero(P > 0)
    plan = TransportPlan(rows=rows, cols=cols, mass=P[rows, cols], shape=costs.shape)
    return plan, duals


@dataclass(frozen=True, eq=False)
class BrenierPotential:
    """W(x) = max_j(⟨x, z_j⟩ - b_j) - offset."""

    z: np.ndarray
    b: np.ndarray
    offset: float = 0.0

    def _affine(self, x) -> np.ndarray:
        return np.atleast_2d(np.asarray(x, dtype=float)) @ self.z.T - self.b[None, :]

    def __call__(self, x) -> np.ndarray:
        return self._affine(x).max(axis=1) - self.offset

    def argmax(self, x) -> np.ndarray:
        """Maximizing piece; the smallest index among ties."""
        return np.argmax(self._affine(x), axis=1)


def brenier_potential(duals: DualPair, lifted, src=None) -> BrenierPotential:
    """Max-affine potential from the target duals, shifted to vanish at its minimum over `src`."""
    z = _points(lifted)
    W = BrenierPotential(z=z, b=np.asarray(duals.v, dtype=float))
    if src is None:
        return W
    return BrenierPotential(z=z, b=W.b, offset=float(W(_points(src)).min()))


@dataclass(frozen=True, eq=False)
class LegendreTransform:
    """W*(y) = max_i(⟨x_i, y⟩ - W(x_i)) over a source cloud."""

    points: np.ndarray
    values: np.ndarray

    def __call__(self, y) -> np.ndarray:
        return (np.atleast_2d(np.asarray(y, dtype=float)) @ self.points.T - self.values[None, :]).max(axis=1)

    def argmax(self, y) -> np.ndarray:
        return np.argmax(np.atleast_2d(np.asarray(y, dtype=float)) @ self.points.T - self.values[None, :], axis=1)


def legendre_transform(W: BrenierPotential, src) -> LegendreTransform:
    pts = _points(src)
    return LegendreTransform(points=pts, values=W(pts))


def legendre(W: BrenierPotential, src, y) -> float:
    return float(legendre_transform(W, src)(y)[0])


def check_cyclical_monotonicity(plan: TransportPlan, src, lifted, n_cycles: int = 1000, seed: int = 0) -> float:
    """Worst value of -Σ⟨x_k, z_k - z_(k+1)⟩ over random support cycles of length 2 to 5; 0 if none is negative."""
    xs, zs = _points(src), _points(lifted)
    rows, cols = plan.rows, plan.cols
    if len(rows) < 2:
        return 0.0
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cycles):
        length = int(rng.integers(2, min(5, len(rows)) + 1))
        pick = rng.choice(len(rows), size=length, replace=False)
        x = xs[rows[pick]]
        z = zs[cols[pick]]
        total = float(np.sum(np.einsum("ij,ij->i", x, z - np.roll(z, -1, axis=0))))
        worst = max(worst, -total)
    return worst


def wasserstein2(a: WeightedCloud, b: WeightedCloud) -> float:
    """Discrete W2 distance between two weighted clouds."""
    costs = cost_matrix(a.points, b.points)
    plan, _ = solve_exact(a.weights, b.weights, costs)
    sq = costs.squared()[plan.rows, plan.cols]
    return math.sqrt(max(0.0, float(np.sum(plan.mass * sq))))
