import math

import numpy as np
import pytest

from gaussmap.errors import ConvexityLossError, InputError
from gaussmap.geometry import (
    Ball,
    ConvexPolygon,
    PointBody,
    SegmentBody,
    SupportSamples,
    body_from_support,
    convex_hull,
    curvature_from_support,
    curvatures,
    ellipse_support,
    hausdorff_distance,
    inner_parallel,
    isoperimetric_ratio,
    normal_cone,
    regular_polygon,
    support_area,
    support_perimeter,
    support_samples,
    support_value,
    weighted_mass,
)
from gaussmap.measures import radial_power_density, uniform_density


@pytest.fixture
def unit_square():
    return convex_hull([[0, 0], [1, 0], [1, 1], [0, 1]])


class TestConvexHull:
    """Tests for hull construction and degenerate inputs."""

    def test_square_with_interior_points(self, unit_square):
        rng = np.random.default_rng(0)
        pts = np.vstack([[[0, 0], [1, 0], [1, 1], [0, 1]], rng.uniform(0.1, 0.9, size=(50, 2))])
        hull = convex_hull(pts)
        assert isinstance(hull, ConvexPolygon)
        assert len(hull.vertices) == 4
        assert hull.area == pytest.approx(1.0)

    def test_counter_clockwise_from_lowest_vertex(self, unit_square):
        assert unit_square.area > 0
        assert np.allclose(unit_square.vertices[0], [0, 0])

    def test_collinear_points_give_segment(self):
        hull = convex_hull([[0, 0], [1, 1], [2, 2], [0.5, 0.5]])
        assert isinstance(hull, SegmentBody)
        assert hull.area == 0.0
        assert hull.diameter == pytest.approx(math.sqrt(8.0))

    def test_coincident_points_give_point(self):
        hull = convex_hull([[0.3, 0.4]] * 5)
        assert isinstance(hull, PointBody)
        assert hull.perimeter == 0.0
        assert hull.support(np.array([[1.0, 0.0]]))[0] == pytest.approx(0.3)

    def test_collinear_boundary_points_are_pruned(self):
        hull = convex_hull([[0, 0], [0.5, 0], [1, 0], [1, 1], [0, 1]])
        assert len(hull.vertices) == 4

    def test_empty_input_raises(self):
        with pytest.raises(InputError):
            convex_hull(np.empty((0, 2)))


class TestSupportValue:
    """Tests for the support function."""

    def test_square_support(self, unit_square):
        assert support_value(unit_square, [1.0, 0.0]) == pytest.approx(1.0)
        assert support_value(unit_square, [-1.0, 0.0]) == pytest.approx(0.0)
        assert support_value(unit_square, [math.sqrt(0.5), math.sqrt(0.5)]) == pytest.approx(math.sqrt(2.0))

    def test_non_unit_direction_raises(self, unit_square):
        with pytest.raises(InputError):
            support_value(unit_square, [2.0, 0.0])

    def test_ball_support_is_radius(self):
        ball = Ball(0.7)
        assert support_value(ball, [0.6, 0.8]) == pytest.approx(0.7)

    def test_hausdorff_of_translate(self, unit_square):
        moved = ConvexPolygon(unit_square.vertices + [0.25, 0.0])
        assert hausdorff_distance(unit_square, moved) == pytest.approx(0.25, abs=1e-12)


class TestNormalCone:
    """Tests for normal cones at boundary points."""

    def test_vertex_cone_is_quarter_turn(self, unit_square):
        cone = normal_cone(unit_square, [1.0, 1.0])
        assert cone.width == pytest.approx(math.pi / 2)
        assert np.allclose(cone.midpoint(), [math.sqrt(0.5), math.sqrt(0.5)])

    def test_edge_point_has_single_normal(self, unit_square):
        cone = normal_cone(unit_square, [1.0, 0.4])
        assert cone.is_single
        assert np.allclose(cone.midpoint(), [1.0, 0.0])

    def test_interior_point_raises(self, unit_square):
        with pytest.raises(InputError):
            normal_cone(unit_square, [0.5, 0.5])

    def test_point_body_has_full_circle(self):
        cone = normal_cone(PointBody(np.array([[0.0, 0.0]])), [0.0, 0.0])
        assert cone.width == pytest.approx(2 * math.pi)
        assert cone.contains([0.0, -1.0])


class TestCurvatures:
    """Tests for discrete curvature of support samples."""

    def test_circle_curvature(self):
        s = support_samples(Ball(2.0), 64)
        assert np.allclose(curvatures(s), 0.5)
        assert curvature_from_support(s, 5) == pytest.approx(0.5)

    def test_translation_leaves_curvature_unchanged(self):
        s = support_samples(Ball(1.0), 64)
        moved = SupportSamples(s.h + s.normals @ np.array([0.3, -0.2]))
        assert np.allclose(curvatures(moved), 1.0)

    def test_ellipse_curvature_at_axes(self):
        a, b = 2.0, 1.0
        s = ellipse_support(a, b, 512)
        K = curvatures(s)
        # K = a/b² at the end of the major axis (normal along x)
        assert K[0] == pytest.approx(a / b**2, rel=1e-3)
        assert K[128] == pytest.approx(b / a**2, rel=1e-3)

    def test_moderate_perturbation_stays_convex(self):
        s = support_samples(Ball(1.0), 64)
        h = s.h.copy()
        h[10] += 0.6 * (1.0 - math.cos(s.dtheta))
        assert np.all(curvatures(SupportSamples(h)) > 0)

    def test_large_perturbation_raises(self):
        s = support_samples(Ball(1.0), 64)
        h = s.h.copy()
        h[10] += 1.5 * (1.0 - math.cos(s.dtheta))
        with pytest.raises(ConvexityLossError) as info:
            curvatures(SupportSamples(h))
        assert info.value.index == 10

    def test_too_few_angles_raise(self):
        with pytest.raises(InputError):
            SupportSamples(np.ones(8))


class TestBodyFromSupport:
    """Tests for reconstructing bodies from sampled support functions."""

    def test_reconstruction_matches_samples(self):
        body = regular_polygon(7, 1.3, phase=0.2)
        s = support_samples(body, 128)
        rebuilt = body_from_support(s)
        assert np.allclose(rebuilt.support(s.normals), s.h, atol=1e-9)

    def test_circle_area_and_perimeter(self):
        s = support_samples(Ball(1.5), 256)
        assert support_area(s) == pytest.approx(math.pi * 1.5**2, rel=1e-12)
        assert support_perimeter(s) == pytest.approx(2 * math.pi * 1.5, rel=1e-12)
        assert isoperimetric_ratio(s) == pytest.approx(1.0, rel=1e-12)

    def test_square_is_less_round(self, unit_square):
        assert isoperimetric_ratio(support_samples(unit_square, 256)) > 1.2


class TestWeightedMass:
    """Tests for density integration over bodies."""

    def test_uniform_mass_is_area(self, unit_square):
        assert weighted_mass(unit_square, lambda p: np.ones(len(p))) == pytest.approx(1.0)

    def test_linear_density(self, unit_square):
        # ∫ x over the unit square
        assert weighted_mass(unit_square, lambda p: p[:, 0]) == pytest.approx(0.5)

    def test_degenerate_body_has_no_mass(self):
        assert weighted_mass(SegmentBody(np.array([[0, 0], [1, 0]])), lambda p: np.ones(len(p))) == 0.0

    @pytest.mark.parametrize("radius", [0.5, 1.0, 2.0])
    def test_uniform_ball_has_unit_mass(self, radius):
        ball = Ball(radius)
        assert abs(weighted_mass(ball, uniform_density(ball)) - 1.0) <= 1e-6

    def test_radial_power_ball_has_unit_mass(self):
        ball = Ball(1.0)
        assert abs(weighted_mass(ball, radial_power_density(ball, 1.5)) - 1.0) <= 1e-6

    def test_off_centre_ball(self):
        ball = Ball(0.5, center=(0.3, -0.2))
        # ∫ x over a disc is the centre's x times the area
        assert weighted_mass(ball, lambda p: p[:, 0]) == pytest.approx(0.3 * math.pi * 0.25, rel=1e-8)


class TestInnerParallel:
    """Tests for inward offsets."""

    def test_square_offset(self, unit_square):
        inner = inner_parallel(unit_square, 0.1)
        assert inner.area == pytest.approx(0.64)

    def test_offset_beyond_inradius_raises(self, unit_square):
        with pytest.raises(InputError):
            inner_parallel(unit_square, 0.6)
