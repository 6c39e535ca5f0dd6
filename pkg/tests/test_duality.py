import math

import numpy as np
import pytest

from gaussmap.duality import (
    DirectPsi,
    LiftedPsi,
    SupportPotential,
    check_graph_duality,
    check_ST,
    check_TtSt,
    duality_diagnostics,
    psi_bound_violations,
    psi_direct,
    psi_schedule,
    psi_t,
    tangential_agreement,
    tangential_reconstruction,
)
from gaussmap.errors import InputError
from gaussmap.gauss_limit import LevelSetFamily, PotentialField, TransportMap, continuation, gauss_map, make_problem
from gaussmap.geometry import Ball
from gaussmap.measures import WeightedCloud, uniform_density


@pytest.fixture
def radial_phi():
    """φ(x) = |x| on the unit disc, whose level sets are the discs B_λ."""
    rng = np.random.default_rng(11)
    angle = rng.uniform(0, 2 * math.pi, 200)
    radius = np.sqrt(rng.uniform(0, 1, 200))
    pts = np.vstack([[0.0, 0.0], radius[:, None] * np.column_stack([np.cos(angle), np.sin(angle)])])
    cloud = WeightedCloud(pts, np.ones(len(pts)), 0.07)
    phi = PotentialField(cloud, np.linalg.norm(pts, axis=1), kind="phi_limit", t=math.inf)
    levels = np.array([0.25, 0.5, 0.75, 1.0])
    family = LevelSetFamily(levels=levels, bodies=tuple(Ball(float(x)) for x in levels))
    return phi, family


@pytest.fixture
def radial_psi(radial_phi):
    phi, family = radial_phi
    return DirectPsi(phi, family, 1.0)


class TestDirectPsi:
    """Tests for ψ(y) = |y|·S_{A_|y|}(y/|y|)."""

    def test_matches_closed_form(self, radial_psi):
        # ψ(y) = |y|² when A_λ = B_λ
        y = np.array([[0.3, 0.4], [0.0, 0.6], [-0.1, 0.05], [0.7, -0.7]])
        assert np.allclose(radial_psi(y), np.sum(y**2, axis=1))

    def test_vanishes_at_origin(self, radial_psi):
        assert radial_psi(np.zeros((1, 2)))[0] == 0.0

    def test_single_point_helper(self, radial_phi):
        phi, family = radial_phi
        assert psi_direct(phi, family, [0.3, 0.4], radius=1.0) == pytest.approx(0.25)

    def test_outside_ball_raises(self, radial_phi):
        phi, family = radial_phi
        with pytest.raises(InputError):
            psi_direct(phi, family, [1.0, 1.0], radius=1.0)

    def test_sphere_support_is_the_level_body(self, radial_psi):
        assert np.allclose(radial_psi.sphere_support(0.6, 64).h, 0.6)

    def test_bound_violations(self):
        points = np.array([[0.2, 0.0], [0.0, 0.2], [0.0, 0.0]])
        assert psi_bound_violations([0.1, 0.5, math.nan], points, 1.0) == 1


class TestIdentities:
    """Tests for the graph and support-function dualities on an exact map."""

    def test_graph_duality_is_exact(self, radial_phi, radial_psi):
        phi, _ = radial_phi
        # T(x) = φ(x)·x/|x| = x
        tmap = TransportMap(source=phi.points, images=phi.points)
        report = check_graph_duality(radial_psi, tmap)
        assert report.max <= 1e-12
        assert report.n_points == len(phi.points)

    def test_support_identity_detects_offsets(self, radial_phi):
        phi, _ = radial_phi
        y = phi.points
        inverse = TransportMap(source=y, images=y)
        exact = SupportPotential(y, np.sum(y**2, axis=1), provenance="direct")
        assert check_ST(exact, inverse).max <= 1e-12
        shifted = SupportPotential(y, np.sum(y**2, axis=1) + 0.1, provenance="direct")
        assert check_ST(shifted, inverse).max == pytest.approx(0.1)

    def test_tangential_reconstruction(self, radial_psi):
        recon = tangential_reconstruction(radial_psi, np.array([0.3, 0.4]), 1e-4)
        assert np.allclose(recon, [0.3, 0.4], atol=1e-6)

    def test_reconstruction_skips_small_radii(self, radial_psi):
        assert tangential_reconstruction(radial_psi, np.array([0.05, 0.0]), 1e-4) is None

    def test_tangential_agreement(self, radial_phi, radial_psi):
        phi, _ = radial_phi
        inverse = TransportMap(source=phi.points, images=phi.points)
        fraction, count = tangential_agreement(radial_psi, inverse, 1e-4, 1e-3)
        assert fraction == pytest.approx(1.0)
        assert count == int(np.sum(np.linalg.norm(phi.points, axis=1) >= 0.1))


class TestLiftedPsi:
    """Tests for ψ_t from a continuation step."""

    @pytest.fixture(scope="class")
    def lifted(self):
        problem = make_problem(uniform_density(Ball(1.0)), uniform_density(Ball(0.5)), 64)
        result = continuation(problem, t_schedule=[0.0, 1.0])
        return problem, result.steps[-1]

    def test_matches_target_duals(self, lifted):
        problem, step = lifted
        r = problem.radius
        y = problem.target.points
        evaluator = LiftedPsi(step, problem.source.points, r)
        values = evaluator(y)
        ok = np.isfinite(values)
        # ψ_t(y)|y/r|^t / r = W_t*(z) = v + offset in the rescaled problem
        norm = np.linalg.norm(y[ok], axis=1) / r
        recovered = values[ok] * norm**step.t / r
        assert np.allclose(recovered, step.duals.v[ok] + step.potential.offset, atol=1e-9)

    def test_origin_is_undefined(self, lifted):
        problem, step = lifted
        assert math.isnan(psi_t(LiftedPsi(step, problem.source.points, problem.radius), [0.0, 0.0]))

    def test_pre_limit_identity_report(self, lifted):
        problem, step = lifted
        evaluator = LiftedPsi(step, problem.source.points, problem.radius)
        result = check_TtSt(evaluator, step, problem.source.points, problem.target.points, 1e-6)
        assert result.identity.n_points + result.identity.skipped == len(problem.target)
        assert result.identity.n_points > 0


class TestDualityDiagnostics:
    """Tests for the report written next to the transport artifacts."""

    @pytest.fixture(scope="class")
    def report(self):
        problem = make_problem(uniform_density(Ball(1.0)), uniform_density(Ball(0.5)), 64)
        result = gauss_map(problem, t_schedule=[0.0, 1.0, 2.0], n_levels=4, map_levels=16, residual=False)
        return duality_diagnostics(result)

    def test_reports_last_step(self, report):
        assert report.t == 2.0
        # one pitch of the 64-point cloud on the disc of radius 0.5
        assert report.fd_step == pytest.approx(math.sqrt(math.pi * 0.25 / 64))

    def test_pre_limit_identities_cover_the_target(self, report):
        for residual in (report.tt_st, report.tangential, report.tp):
            assert residual.n_points + residual.skipped == 64
        assert report.graph_duality is not None

    def test_tangential_agreement_is_a_fraction(self, report):
        assert report.tangential_count > 0
        assert 0.0 <= report.tangential_agreement <= 1.0

    def test_covers_every_step(self, report):
        assert [s.t for s in report.steps] == [0.0, 1.0, 2.0]
        assert report.steps[0].sup_change is None
        assert all(s.sup_change is not None for s in report.steps[1:])

    def test_psi_t_within_bounds(self, report):
        assert report.bound_violations() == 0
        assert report.upper_violations() == 0
        assert all(s.evaluated == 64 for s in report.steps)


class TestPsiSchedule:
    """Tests for ψ_t along the full schedule on disc to disc."""

    @pytest.fixture(scope="class")
    def disc(self):
        problem = make_problem(uniform_density(Ball(1.0)), uniform_density(Ball(0.5)), 200)
        result = gauss_map(problem, n_levels=4, map_levels=16, residual=False)
        return problem, result, psi_schedule(result, problem.target.pitch)

    def test_approaches_quadratic_limit(self, disc):
        problem, result, _ = disc
        y = problem.target.points
        outer = np.linalg.norm(y, axis=1) >= 0.15
        # radius 1 onto radius 0.5: ψ(y) = |y|²/0.5, and ψ_t falls short of it by the factor (t+1)/(t+2)
        limit = np.sum(y[outer] ** 2, axis=1) / 0.5
        errors = []
        for step in result.continuation.steps:
            values = LiftedPsi(step, problem.source.points, 0.5)(y[outer])
            ok = np.isfinite(values)
            errors.append(float(np.max(np.abs(values[ok] - limit[ok]))))
            assert errors[-1] <= 0.5 / (step.t + 2.0) + 2.0 * 0.5 * problem.source.pitch
        assert errors[-1] < errors[0]

    def test_bounds_hold_across_schedule(self, disc):
        _, _, steps = disc
        assert all(s.bound_violations == 0 for s in steps)
        assert all(s.upper_violations == 0 for s in steps)

    def test_gradient_term_decays(self, disc):
        _, _, steps = disc
        terms = [s.gradient_term for s in steps]
        assert all(term is not None for term in terms)
        assert terms[-1] < terms[0]

    def test_changes_stay_within_limit_gaps(self, disc):
        problem, _, steps = disc
        slack = 4.0 * 0.5 * problem.source.pitch
        for previous, step in zip(steps, steps[1:]):
            assert step.sup_change is not None
            assert step.sup_change <= 0.5 / (previous.t + 2.0) + 0.5 / (step.t + 2.0) + slack
