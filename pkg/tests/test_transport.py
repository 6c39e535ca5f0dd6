import itertools
import math

import numpy as np
import pytest

import gaussmap.transport as transport
from gaussmap.errors import CostMatrixTooLargeError, InfeasibleWeightsError, InputError, SolverConvergenceError
from gaussmap.measures import WeightedCloud
from gaussmap.transport import (
    brenier_potential,
    check_cyclical_monotonicity,
    cost_matrix,
    legendre,
    legendre_transform,
    lift_target,
    solve_entropic,
    solve_exact,
    wasserstein2,
)


def random_instance(rng, n, t=2.0):
    x = rng.uniform(-0.5, 0.5, size=(n, 2))
    angle = rng.uniform(0, 2 * math.pi, n)
    radius = np.sqrt(rng.uniform(0, 1, n))
    y = radius[:, None] * np.column_stack([np.cos(angle), np.sin(angle)])
    return x, lift_target(y, t)


@pytest.fixture
def instance():
    rng = np.random.default_rng(7)
    x, lifted = random_instance(rng, 40)
    return x, lifted, np.full(40, 1.0 / 40)


class TestLiftTarget:
    """Tests for the power lift z = y|y|^t."""

    def test_norm_and_direction(self):
        y = np.array([[0.6, 0.0], [0.0, -0.5], [0.3, 0.4]])
        lifted = lift_target(y, 3.0)
        assert np.allclose(np.linalg.norm(lifted.z, axis=1), np.linalg.norm(y, axis=1) ** 4)
        assert np.allclose(lifted.z[2] / np.linalg.norm(lifted.z[2]), [0.6, 0.8])

    def test_zero_lift_is_identity(self):
        y = np.array([[0.2, -0.1]])
        assert np.allclose(lift_target(y, 0.0).z, y)

    def test_origin_stays_at_origin(self):
        assert np.array_equal(lift_target(np.zeros(2), 5.0).z, np.zeros(2))

    def test_radius_rescales(self):
        lifted = lift_target(np.array([[1.4, 0.0]]), 1.0, radius=2.0)
        assert lifted.z[0, 0] == pytest.approx(0.49)

    def test_outside_ball_raises(self):
        with pytest.raises(InputError):
            lift_target(np.array([[1.5, 0.0]]), 1.0)

    def test_negative_exponent_raises(self):
        with pytest.raises(InputError):
            lift_target(np.array([[0.5, 0.0]]), -1.0)


class TestCostMatrix:
    """Tests for cost matrices and the memory guard."""

    def test_inner_products(self):
        costs = cost_matrix(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0], [0.0, 1.0]]))
        assert np.allclose(costs.inner, [[11.0, 2.0]])
        assert np.allclose(costs.squared(), [[8.0, 2.0]])

    def test_too_large_raises(self, monkeypatch):
        monkeypatch.setattr(transport, "MAX_COST_ENTRIES", 10)
        with pytest.raises(CostMatrixTooLargeError):
            cost_matrix(np.zeros((4, 2)), np.zeros((4, 2)))


class TestSolveExact:
    """Tests for the exact solver."""

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2024)
        for trial in range(100):
            n = 2 + trial % 7
            x, lifted = random_instance(rng, n, t=float(trial % 4))
            costs = cost_matrix(x, lifted)
            plan, _ = solve_exact(np.full(n, 1.0 / n), np.full(n, 1.0 / n), costs)
            perms = np.array(list(itertools.permutations(range(n))))
            totals = costs.inner[np.arange(n), perms].sum(axis=1)
            best = perms[np.argmax(totals)]
            assert plan.objective(costs) == pytest.approx(totals.max() / n, abs=1e-12)
            assert np.array_equal(plan.pairing(), best)

    def test_duals_are_feasible_and_tight(self, instance):
        x, lifted, w = instance
        costs = cost_matrix(x, lifted)
        plan, duals = solve_exact(w, w, costs)
        assert duals.min_slack(costs) >= -1e-9
        tight = duals.u[plan.rows] + duals.v[plan.cols] - costs.inner[plan.rows, plan.cols]
        assert np.allclose(tight, 0.0, atol=1e-9)
        assert duals.value(w, w) == pytest.approx(plan.objective(costs), abs=1e-9)

    def test_uniform_plan_is_a_permutation(self, instance):
        x, lifted, w = instance
        plan, _ = solve_exact(w, w, cost_matrix(x, lifted))
        assert plan.is_bijection
        a, b = plan.marginals()
        assert np.allclose(a, w) and np.allclose(b, w)

    def test_uniform_plan_comes_from_one_simplex_solve(self, instance, monkeypatch):
        x, lifted, w = instance
        calls = []
        emd = transport.ot.emd

        def counting_emd(*args, **kwargs):
            calls.append(1)
            return emd(*args, **kwargs)

        monkeypatch.setattr(transport.ot, "emd", counting_emd)
        plan, duals = solve_exact(w, w, cost_matrix(x, lifted))
        assert len(calls) == 1
        assert plan.permutation is not None
        assert np.array_equal(np.sort(plan.permutation), np.arange(len(w)))
        assert duals.value(w, w) == pytest.approx(plan.objective(cost_matrix(x, lifted)), abs=1e-9)

    def test_unequal_weights_use_network_simplex(self):
        x = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        y = np.array([[0.5, 0.0], [0.0, 0.5], [0.3, 0.3]])
        a = np.array([0.5, 0.3, 0.2])
        b = np.array([0.2, 0.3, 0.5])
        plan, duals = solve_exact(a, b, cost_matrix(x, y))
        got_a, got_b = plan.marginals()
        assert np.allclose(got_a, a) and np.allclose(got_b, b)
        assert plan.permutation is None
        assert duals.min_slack(cost_matrix(x, y)) >= -1e-9

    def test_mass_mismatch_raises(self):
        costs = cost_matrix(np.zeros((2, 2)), np.zeros((2, 2)))
        with pytest.raises(InfeasibleWeightsError):
            solve_exact(np.array([0.5, 0.5]), np.array([0.5, 0.6]), costs)

    def test_cyclically_monotone(self, instance):
        x, lifted, w = instance
        plan, _ = solve_exact(w, w, cost_matrix(x, lifted))
        assert check_cyclical_monotonicity(plan, x, lifted) <= 1e-12


class TestSolveEntropic:
    """Tests for log-domain Sinkhorn."""

    def test_two_point_plan(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        plan, _ = solve_entropic(np.full(2, 0.5), np.full(2, 0.5), cost_matrix(x, x), epsilon=1.0)
        P = plan.as_sparse().toarray()
        assert np.allclose(P, [[0.3655, 0.1345], [0.1345, 0.3655]], atol=1e-4)
        assert np.allclose(P, P.T)

    def test_marginals_hold(self, instance):
        x, lifted, w = instance
        plan, duals = solve_entropic(w, w, cost_matrix(x, lifted), epsilon=0.1)
        a, b = plan.marginals()
        assert np.abs(a - w).sum() + np.abs(b - w).sum() <= 1e-6
        assert len(duals.u) == len(duals.v) == 40

    def test_non_convergence_raises(self, instance):
        x, lifted, w = instance
        with pytest.raises(SolverConvergenceError):
            solve_entropic(w, w, cost_matrix(x, lifted), epsilon=1e-3, max_iter=1)

    def test_nonpositive_epsilon_raises(self, instance):
        x, lifted, w = instance
        with pytest.raises(InputError):
            solve_entropic(w, w, cost_matrix(x, lifted), epsilon=0.0)


class TestPotentials:
    """Tests for the Brenier potential and its Legendre transform."""

    def test_potential_reproduces_duals(self, instance):
        x, lifted, w = instance
        plan, duals = solve_exact(w, w, cost_matrix(x, lifted))
        W = brenier_potential(duals, lifted, x)
        assert W(x).min() == pytest.approx(0.0, abs=1e-12)
        assert np.allclose(W(x) + W.offset, duals.u, atol=1e-9)

    def test_legendre_transform_on_targets(self, instance):
        x, lifted, w = instance
        _, duals = solve_exact(w, w, cost_matrix(x, lifted))
        W = brenier_potential(duals, lifted, x)
        star = legendre_transform(W, x)
        assert np.allclose(star(lifted.z), duals.v + W.offset, atol=1e-9)

    def test_single_point_legendre(self, instance):
        x, lifted, w = instance
        _, duals = solve_exact(w, w, cost_matrix(x, lifted))
        W = brenier_potential(duals, lifted, x)
        assert legendre(W, x, lifted.z[3]) == pytest.approx(duals.v[3] + W.offset, abs=1e-9)

    def test_potential_is_convex(self, instance):
        x, lifted, w = instance
        _, duals = solve_exact(w, w, cost_matrix(x, lifted))
        W = brenier_potential(duals, lifted, x)
        rng = np.random.default_rng(0)
        p, q = rng.uniform(-0.5, 0.5, size=(2, 100, 2))
        mid = W(0.5 * (p + q))
        assert np.all(mid <= 0.5 * (W(p) + W(q)) + 1e-12)


class TestWasserstein2:
    """Tests for the discrete W2 distance."""

    def test_translation(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(size=(30, 2))
        a = WeightedCloud(pts, np.ones(30), 0.1)
        b = WeightedCloud(pts + [0.3, 0.4], np.ones(30), 0.1)
        assert wasserstein2(a, b) == pytest.approx(0.5, abs=1e-7)

    def test_self_distance_is_zero(self):
        pts = np.random.default_rng(6).uniform(size=(20, 2))
        cloud = WeightedCloud(pts, np.ones(20), 0.1)
        assert wasserstein2(cloud, cloud) <= 1e-6
