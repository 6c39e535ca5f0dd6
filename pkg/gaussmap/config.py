import configparser
import logging
import math
import os
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from gaussmap.errors import ConfigError, InputError
from gaussmap.geometry import Ball, ConvexPolygon, convex_hull, ellipse_polygon, regular_polygon
from gaussmap.gauss_limit import level_grid
from gaussmap.measures import DensityField, RadialCDF, radial_power_density, tabulated_density, uniform_density
from gaussmap.schemas import DensitySpec, RunConfig

logger = logging.getLogger(__name__)

SECTION = "run"
LIST_KEYS = {"transport.t_schedule", "flow.records", "levels"}
KEY_ALIASES = {"output.dir": "output_dir"}
FILE_KEYS = ("source.polygon_file", "source.density.grid_file", "target.density.grid_file")
ELLIPSE_VERTICES = int(os.getenv("GAUSSMAP_ELLIPSE_VERTICES", "1024"))


def parse_config_text(text: str) -> dict[str, str]:
    """Flat `key = value` lines (with `#` comments) into a dict of raw strings."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string(f"[{SECTION}]\n{text}")
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    return dict(parser[SECTION])


def _split_list(key: str, raw: str) -> list[float]:
    try:
        return [float(item) for item in raw.replace(";", ",").split(",") if item.strip()]
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a comma-separated list of numbers, got {raw!r}") from exc


def _nest(flat: dict[str, str]) -> dict:
    nested: dict = {}
    for key, raw in flat.items():
        value = _split_list(key, raw) if key in LIST_KEYS else raw
        parts = KEY_ALIASES.get(key, key).split(".")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: conflicts with a scalar key of the same prefix")
        node[parts[-1]] = value
    return nested


def _dotted(loc) -> str:
    key = ".".join(str(part) for part in loc if not isinstance(part, int))
    return {v: k for k, v in KEY_ALIASES.items()}.get(key, key)


def _resolve_files(flat: dict[str, str], base: Path):
    for key in FILE_KEYS:
        if key not in flat:
            continue
        path = Path(flat[key])
        if not path.is_absolute():
            path = base / path
        if not path.is_file():
            raise ConfigError(f"{key}: file not found: {path}")
        flat[key] = str(path)


def load_config(path, overrides: Optional[dict[str, str]] = None) -> RunConfig:
    """Read, merge CLI overrides into, and validate a run config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    flat = parse_config_text(path.read_text(encoding="utf-8"))
    flat.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    _resolve_files(flat, path.parent)
    try:
        config = RunConfig.model_validate(_nest(flat))
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(f"{_dotted(first['loc']) or 'config'}: {first['msg']}") from exc
    logger.info("Loaded config %s (%s, N=%d, r=%g)", path, config.source.shape, config.discretization.n, config.target.radius)
    return config


def read_polygon(path) -> ConvexPolygon:
    frame = pd.read_csv(path)
    if not {"x", "y"} <= set(frame.columns):
        raise ConfigError(f"{path}: polygon file needs x,y columns")
    hull = convex_hull(frame[["x", "y"]].to_numpy(dtype=float))
    if not isinstance(hull, ConvexPolygon):
        raise ConfigError(f"{path}: polygon has no interior")
    if len(hull.vertices) < len(frame):
        logger.warning("%s: %d points are not hull vertices and were dropped", path, len(frame) - len(hull.vertices))
    return hull


def build_body(config: RunConfig):
    """The source body A described by `source.*`, centred at the origin."""
    src = config.source
    size = src.size
    if src.shape == "square":
        return regular_polygon(4, size / math.sqrt(2.0), phase=math.pi / 4.0)
    if src.shape == "disc":
        return Ball(size)
    if src.shape == "ellipse":
        return ellipse_polygon(size, size * src.aspect, ELLIPSE_VERTICES)
    if src.shape == "triangle":
        return regular_polygon(3, size, phase=math.pi / 2.0)
    return read_polygon(src.polygon_file)


def read_density_grid(path, domain) -> DensityField:
    """x,y,value rows on a rectilinear grid."""
    frame = pd.read_csv(path)
    if not {"x", "y", "value"} <= set(frame.columns):
        raise ConfigError(f"{path}: density grid needs x,y,value columns")
    table = frame.pivot_table(index="x", columns="y", values="value", aggfunc="mean")
    if table.isna().to_numpy().any():
        raise ConfigError(f"{path}: density grid is not rectilinear")
    return tabulated_density(domain, table.index.to_numpy(), table.columns.to_numpy(), table.to_numpy())


def build_density(spec: DensitySpec, domain, key: str) -> DensityField:
    try:
        if spec.kind == "uniform":
            return uniform_density(domain)
        if spec.kind == "radial-power":
            return radial_power_density(domain, spec.exponent)
        return read_density_grid(spec.grid_file, domain)
    except InputError as exc:
        raise ConfigError(f"{key}: {exc.detail}") from exc


def build_source(config: RunConfig) -> DensityField:
    return build_density(config.source.density, build_body(config), "source.density")


def build_target(config: RunConfig) -> DensityField:
    return build_density(config.target.density, Ball(config.target.radius), "target.density")


def record_levels(config: RunConfig, nu_cdf: RadialCDF) -> np.ndarray:
    """Flow record levels: `flow.records`, else `levels`, else the transport level grid."""
    values = config.flow.records or config.levels
    if values is None:
        return level_grid(nu_cdf, config.transport.levels)[::-1]
    return np.asarray(sorted(values, reverse=True), dtype=float)


def canonical_json(config: RunConfig) -> str:
    return config.model_dump_json(exclude_none=True)
