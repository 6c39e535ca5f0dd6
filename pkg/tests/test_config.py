import math

import numpy as np
import pytest

from gaussmap.config import (
    build_body,
    build_source,
    build_target,
    canonical_json,
    load_config,
    parse_config_text,
    record_levels,
)
from gaussmap.errors import ConfigError
from gaussmap.geometry import Ball, ConvexPolygon
from gaussmap.measures import radial_cdf


@pytest.fixture
def write_config(tmp_path):
    def _write(text, name="run.cfg"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write


class TestParsing:
    """Tests for the flat key = value format."""

    def test_comments_and_dotted_keys(self):
        flat = parse_config_text("# header\nsource.shape = disc  # inline\ntarget.radius = 0.5\n")
        assert flat == {"source.shape": "disc", "target.radius": "0.5"}

    def test_defaults(self, write_config):
        config = load_config(write_config(""))
        assert config.source.shape == "square"
        assert config.target.radius == 1.0
        assert config.transport.t_schedule[0] == 0.0
        assert config.flow.reading == "level"

    def test_lists_and_nested_values(self, write_config):
        config = load_config(write_config(
            "transport.t_schedule = 0, 1, 2, 4\n"
            "flow.records = 0.2, 0.6\n"
            "target.density.kind = radial-power\n"
            "target.density.exponent = 1\n"
        ))
        assert config.transport.t_schedule == [0.0, 1.0, 2.0, 4.0]
        assert config.flow.records == [0.2, 0.6]
        assert config.target.density.kind == "radial-power"

    def test_overrides_win(self, write_config, tmp_path):
        out = tmp_path / "elsewhere"
        config = load_config(write_config("seed = 3\n"), {"output.dir": str(out), "seed": 9, "levels": None})
        assert config.output_dir == str(out)
        assert config.seed == 9
        assert config.levels is None


class TestValidation:
    """Tests for config errors naming the offending key."""

    def test_negative_radius(self, write_config):
        with pytest.raises(ConfigError, match="target.radius"):
            load_config(write_config("target.radius = -1\n"))

    def test_unknown_key(self, write_config):
        with pytest.raises(ConfigError, match="source.colour"):
            load_config(write_config("source.colour = red\n"))

    def test_too_few_points(self, write_config):
        with pytest.raises(ConfigError, match="discretization.n"):
            load_config(write_config("discretization.n = 10\n"))

    def test_schedule_must_start_at_zero(self, write_config):
        with pytest.raises(ConfigError, match="transport.t_schedule"):
            load_config(write_config("transport.t_schedule = 1, 2\n"))

    def test_bad_list(self, write_config):
        with pytest.raises(ConfigError, match="transport.t_schedule"):
            load_config(write_config("transport.t_schedule = 0, one\n"))

    def test_records_outside_ball(self, write_config):
        with pytest.raises(ConfigError, match="flow.records"):
            load_config(write_config("target.radius = 0.5\nflow.records = 0.2, 0.7\n"))

    def test_odd_angle_count(self, write_config):
        with pytest.raises(ConfigError, match="flow.angles"):
            load_config(write_config("flow.angles = 65\n"))

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigError) as info:
            load_config(tmp_path / "absent.cfg")
        assert info.value.exit_code == 2

    def test_missing_polygon_file(self, write_config):
        with pytest.raises(ConfigError, match="source.polygon_file"):
            load_config(write_config("source.shape = polygon\nsource.polygon_file = nowhere.csv\n"))

    def test_polygon_needs_a_file(self, write_config):
        with pytest.raises(ConfigError):
            load_config(write_config("source.shape = polygon\n"))


class TestBuilders:
    """Tests for turning a config into bodies and densities."""

    @pytest.mark.parametrize(
        "shape, area",
        [
            ("square", 4.0),
            ("disc", 4.0 * math.pi),
            ("triangle", 3.0 * math.sqrt(3.0)),
        ],
    )
    def test_body_area(self, write_config, shape, area):
        body = build_body(load_config(write_config(f"source.shape = {shape}\nsource.size = 2\n")))
        assert body.area == pytest.approx(area, rel=1e-9)

    def test_ellipse(self, write_config):
        body = build_body(load_config(write_config("source.shape = ellipse\nsource.size = 2\nsource.aspect = 0.5\n")))
        assert body.area == pytest.approx(2.0 * math.pi, rel=1e-4)

    def test_polygon_file_is_relative_to_config(self, write_config, tmp_path):
        (tmp_path / "hexagon.csv").write_text(
            "x,y\n" + "\n".join(f"{math.cos(k * math.pi / 3)},{math.sin(k * math.pi / 3)}" for k in range(6)) + "\n"
        )
        config = load_config(write_config("source.shape = polygon\nsource.polygon_file = hexagon.csv\n"))
        body = build_body(config)
        assert isinstance(body, ConvexPolygon)
        assert len(body.vertices) == 6

    def test_density_grid_file(self, write_config, tmp_path):
        rows = [f"{x},{y},{1.0 + x}" for x in (-1.0, 0.0, 1.0) for y in (-1.0, 0.0, 1.0)]
        (tmp_path / "rho.csv").write_text("x,y,value\n" + "\n".join(rows) + "\n")
        config = load_config(write_config(
            "source.density.kind = tabulated-grid\nsource.density.grid_file = rho.csv\n"
        ))
        rho = build_source(config)
        # profile 1 + x normalized over the unit square
        assert rho.profile(np.array([[0.25, 0.0]]))[0] == pytest.approx(1.25)

    def test_target_is_a_ball(self, write_config):
        rho1 = build_target(load_config(write_config("target.radius = 0.5\n")))
        assert isinstance(rho1.domain, Ball)
        assert rho1.domain.radius == 0.5

    def test_record_levels_default_to_transport_grid(self, write_config):
        config = load_config(write_config("target.radius = 0.5\ntransport.levels = 4\n"))
        values = record_levels(config, radial_cdf(build_target(config)))
        assert len(values) == 4
        assert np.all(np.diff(values) < 0)

    def test_record_levels_prefer_explicit_records(self, write_config):
        config = load_config(write_config("levels = 0.1, 0.3\nflow.records = 0.2, 0.4\n"))
        assert list(record_levels(config, None)) == [0.4, 0.2]

    def test_canonical_json_ignores_formatting(self, write_config):
        a = load_config(write_config("target.radius = 0.5\nseed = 1\n", "a.cfg"))
        b = load_config(write_config("seed=1   # same run\n\ntarget.radius=5e-1\n", "b.cfg"))
        assert canonical_json(a) == canonical_json(b)
