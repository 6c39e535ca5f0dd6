import math

import numpy as np
import pytest

from gaussmap.errors import InputError
from gaussmap.geometry import Ball, regular_polygon, weighted_mass
from gaussmap.measures import (
    RadialCDF,
    WeightedCloud,
    discretize,
    ks_distance,
    monotone_rearrangement,
    quantile,
    radial_cdf,
    radial_power_density,
    tabulated_density,
    uniform_density,
    weighted_ecdf,
)


@pytest.fixture
def square():
    return regular_polygon(4, math.sqrt(0.5), phase=math.pi / 4)


@pytest.fixture
def disc_cdf():
    return radial_cdf(uniform_density(Ball(0.7)))


class TestDensities:
    """Tests for density construction and normalization."""

    def test_uniform_square(self, square):
        rho = uniform_density(square)
        assert weighted_mass(square, rho) == pytest.approx(1.0)
        assert rho(np.array([[5.0, 5.0]]))[0] == 0.0

    def test_radial_power_on_ball_is_normalized(self):
        rho = radial_power_density(Ball(1.0), 1.0)
        assert weighted_mass(Ball(1.0), rho) == pytest.approx(1.0, rel=1e-3)

    def test_radial_power_on_polygon_is_normalized(self, square):
        rho = radial_power_density(square, 2.0)
        assert weighted_mass(square, rho) == pytest.approx(1.0, rel=1e-9)

    def test_exponent_must_exceed_minus_two(self):
        with pytest.raises(InputError):
            radial_power_density(Ball(1.0), -2.0)

    def test_constant_table_matches_uniform(self, square):
        xs = ys = np.linspace(-1.0, 1.0, 5)
        rho = tabulated_density(square, xs, ys, np.full((5, 5), 3.0))
        assert np.allclose(rho.profile(np.array([[0.1, 0.2], [-0.3, 0.4]])), 1.0)

    def test_table_must_be_positive(self, square):
        xs = ys = np.linspace(-1.0, 1.0, 3)
        values = np.ones((3, 3))
        values[1, 1] = 0.0
        with pytest.raises(InputError):
            tabulated_density(square, xs, ys, values)


class TestRadialCDF:
    """Tests for the law of |y| under ν."""

    def test_uniform_disc(self, disc_cdf):
        assert float(disc_cdf.cdf(0.35)) == pytest.approx(0.25, abs=1e-7)
        assert quantile(disc_cdf, 0.25) == pytest.approx(0.35, abs=1e-6)
        assert disc_cdf.radius == pytest.approx(0.7)

    def test_radial_power(self):
        cdf = radial_cdf(radial_power_density(Ball(1.0), 1.0))
        # G(s) = s³ for ρ ∝ |y| on the unit disc
        assert float(cdf.cdf(0.5)) == pytest.approx(0.125, abs=1e-6)

    def test_ppf_inverts_cdf(self, disc_cdf):
        p = np.linspace(0.01, 0.99, 25)
        assert np.allclose(disc_cdf.cdf(disc_cdf.ppf(p)), p, atol=1e-12)

    def test_decreasing_values_rejected(self):
        with pytest.raises(InputError):
            RadialCDF(np.array([0.0, 0.5, 1.0]), np.array([0.0, 0.6, 0.5]))


class TestDiscretize:
    """Tests for point-cloud discretization."""

    def test_ball_grid_has_exact_count(self):
        cloud = discretize(uniform_density(Ball(1.0)), 300)
        assert len(cloud) == 300
        assert np.allclose(cloud.weights, 1.0 / 300)
        assert np.all(np.linalg.norm(cloud.points, axis=1) <= 1.0)

    def test_square_grid(self, square):
        cloud = discretize(uniform_density(square), 400)
        assert abs(len(cloud) - 400) <= 40
        assert cloud.is_uniform
        assert np.all(np.abs(cloud.points) <= 0.5)
        assert cloud.pitch == pytest.approx(math.sqrt(1.0 / len(cloud)))

    def test_low_discrepancy_is_seeded(self, square):
        a = discretize(uniform_density(square), 200, scheme="low-discrepancy", seed=3)
        b = discretize(uniform_density(square), 200, scheme="low-discrepancy", seed=3)
        assert len(a) == 200
        assert np.array_equal(a.points, b.points)

    def test_radial_cloud_matches_radial_law(self, disc_cdf):
        cloud = discretize(uniform_density(Ball(0.7)), 300)
        radii = np.linalg.norm(cloud.points, axis=1)
        assert ks_distance(radii, cloud.weights, disc_cdf) <= 0.1

    def test_too_few_points(self, square):
        with pytest.raises(InputError):
            discretize(uniform_density(square), 3)

    def test_unknown_scheme(self, square):
        with pytest.raises(InputError):
            discretize(uniform_density(square), 100, scheme="random")


class TestWeightedCloud:
    """Tests for weighted clouds."""

    def test_weights_are_normalized(self):
        cloud = WeightedCloud(np.zeros((4, 2)), np.array([1.0, 1.0, 2.0, 4.0]), 0.1)
        assert cloud.weights.sum() == pytest.approx(1.0)
        assert cloud.weights[-1] == pytest.approx(0.5)

    def test_nonpositive_weight_rejected(self):
        with pytest.raises(InputError):
            WeightedCloud(np.zeros((2, 2)), np.array([1.0, 0.0]), 0.1)


class TestRearrangement:
    """Tests for the monotone rearrangement and KS distance."""

    def test_preserves_order_and_law(self, disc_cdf):
        rng = np.random.default_rng(1)
        values = rng.uniform(size=500)
        weights = np.full(500, 1.0 / 500)
        out = monotone_rearrangement(values, weights, disc_cdf)
        assert np.array_equal(np.argsort(values), np.argsort(out))
        assert ks_distance(out, weights, disc_cdf) <= 1.0 / 500

    def test_ties_share_a_value(self, disc_cdf):
        values = np.array([0.2, 0.5, 0.5, 0.9])
        out = monotone_rearrangement(values, np.full(4, 0.25), disc_cdf)
        assert out[1] == out[2]
        assert out[0] < out[1] < out[3]

    def test_quantile_sample_distance(self, disc_cdf):
        N = 100
        values = disc_cdf.ppf((np.arange(N) + 0.5) / N)
        assert ks_distance(values, np.full(N, 1.0 / N), disc_cdf) == pytest.approx(0.5 / N, abs=1e-9)

    def test_empty_sample_raises(self):
        with pytest.raises(InputError):
            weighted_ecdf([], [])
