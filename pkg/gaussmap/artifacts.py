import hashlib
import json
import logging
from importlib import metadata
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from pydantic import BaseModel  # noqa: E402

from gaussmap.errors import InputError  # noqa: E402
from gaussmap.geometry import Ball, SupportSamples, body_from_support, convex_hull  # noqa: E402
from gaussmap.gauss_limit import LevelSetFamily  # noqa: E402
from gaussmap.schemas import DEFAULT_OUTPUT_DIR, Manifest  # noqa: E402

logger = logging.getLogger(__name__)

OUTPUT_DIR = DEFAULT_OUTPUT_DIR
FLOAT_FORMAT = "%.17g"
SVG_SIZE = (6.0, 6.0)
VERSIONED_PACKAGES = ("gaussmap", "numpy", "scipy", "pot", "scikit-learn", "pandas", "matplotlib", "pydantic")

plt.rcParams["svg.hashsalt"] = "gaussmap"


def package_versions() -> dict[str, str]:
    versions = {}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            if name == "gaussmap":
                from gaussmap import __version__

                versions[name] = __version__
            else:
                versions[name] = "unknown"
    return versions


def config_hash(canonical: str) -> str:
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ArtifactDir:
    """An output directory that remembers what it wrote, for the manifest."""

    def __init__(self, root: Optional[str] = None):
        self.root = Path(root or OUTPUT_DIR)
        self.root.mkdir(parents=True, exist_ok=True)
        self.written: list[str] = []

    def path(self, name: str) -> Path:
        return self.root / name

    def exists(self, name: str) -> bool:
        return self.path(name).is_file()

    def _record(self, name: str):
        if name not in self.written:
            self.written.append(name)

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(target, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        self._record(name)
        logger.info("Wrote %s (%d rows)", target, len(frame))
        return target

    def write_json(self, name: str, data) -> Path:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(data, BaseModel):
            text = data.model_dump_json(indent=2)
        else:
            text = json.dumps(data, indent=2, sort_keys=True)
        target.write_text(text + "\n", encoding="utf-8")
        self._record(name)
        logger.info("Wrote %s", target)
        return target

    def write_svg(self, name: str, fig) -> Path:
        target = self.path(name)
        fig.savefig(target, format="svg", metadata={"Date": None})
        plt.close(fig)
        self._record(name)
        logger.info("Wrote %s", target)
        return target

    def write_manifest(self, command: str, canonical_config: str) -> Manifest:
        """manifest.json next to the artifacts; merges with any earlier manifest in the directory."""
        artifacts = list(self.written)
        previous = self.path("manifest.json")
        if previous.is_file():
            try:
                old = Manifest.model_validate_json(previous.read_text(encoding="utf-8"))
                artifacts = sorted(set(old.artifacts) | set(artifacts))
            except ValueError:
                logger.warning("Replacing unreadable manifest %s", previous)
        manifest = Manifest(
            command=command,
            config_hash=config_hash(canonical_config),
            versions=package_versions(),
            artifacts=sorted(artifacts),
        )
        self.write_json("manifest.json", manifest)
        return manifest

    def read_csv(self, name: str, columns) -> pd.DataFrame:
        target = self.path(name)
        if not target.is_file():
            raise InputError(f"missing artifact {target}")
        frame = pd.read_csv(target)
        missing = set(columns) - set(frame.columns)
        if missing:
            raise InputError(f"{target}: missing columns {sorted(missing)}")
        return frame

    def read_json(self, name: str) -> dict:
        target = self.path(name)
        if not target.is_file():
            raise InputError(f"missing artifact {target}")
        return json.loads(target.read_text(encoding="utf-8"))


def cloud_frame(points: np.ndarray, weights: np.ndarray, **columns) -> pd.DataFrame:
    frame = pd.DataFrame({"x": points[:, 0], "y": points[:, 1], "w": weights})
    for key, values in columns.items():
        frame[key] = values
    return frame


def map_frame(source: np.ndarray, images: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame({"x": source[:, 0], "y": source[:, 1], "Tx": images[:, 0], "Ty": images[:, 1]})


def body_frame(body) -> pd.DataFrame:
    vertices = body.polygon(256).vertices if isinstance(body, Ball) else body.vertices
    return pd.DataFrame({"x": vertices[:, 0], "y": vertices[:, 1]})


def support_frame(s: SupportSamples) -> pd.DataFrame:
    return pd.DataFrame({"theta": s.theta, "h": s.h})


def level_file(kind: str, k: int) -> str:
    return f"{kind}/level_{k:02d}.csv"


def read_level_family(out: ArtifactDir) -> LevelSetFamily:
    """Sub-level hulls written by the transport pipeline."""
    index = out.read_json("levels.json")
    entries = sorted(index["levels"], key=lambda e: e["level"])
    bodies = tuple(convex_hull(out.read_csv(e["file"], ("x", "y"))[["x", "y"]].to_numpy()) for e in entries)
    return LevelSetFamily(levels=np.array([e["level"] for e in entries]), bodies=bodies)


def read_flow_samples(out: ArtifactDir) -> list[tuple[float, SupportSamples]]:
    index = out.read_json("flow.json")
    return [
        (entry["level"], SupportSamples(out.read_csv(entry["file"], ("theta", "h"))["h"].to_numpy()))
        for entry in index["records"]
    ]


def _outline(ax, vertices: np.ndarray, **style):
    closed = np.vstack([vertices, vertices[:1]])
    ax.plot(closed[:, 0], closed[:, 1], **style)


def _figure(title: str):
    fig, ax = plt.subplots(figsize=SVG_SIZE)
    ax.set_aspect("equal")
    ax.set_title(title)
    return fig, ax


def level_figure(family: LevelSetFamily, domain, title: str = "sub-level hulls of phi"):
    fig, ax = _figure(title)
    _outline(ax, body_frame(domain).to_numpy(), color="black", linewidth=1.0)
    for body in family.bodies:
        if len(body.vertices) == 1:
            ax.plot(*body.vertices[0], marker=".", color="tab:blue")
        else:
            _outline(ax, body.vertices, color="tab:blue", linewidth=0.6)
    return fig


def flow_figure(samples, domain, title: str = "flow curves"):
    fig, ax = _figure(title)
    _outline(ax, body_frame(domain).to_numpy(), color="black", linewidth=1.0)
    for _, s in samples:
        _outline(ax, s.boundary_points(), color="tab:red", linewidth=0.6)
    return fig


def compare_figure(family: LevelSetFamily, samples, domain, title: str = "transport levels vs flow"):
    fig, ax = _figure(title)
    _outline(ax, body_frame(domain).to_numpy(), color="black", linewidth=1.0)
    for body in family.bodies:
        if len(body.vertices) > 2:
            _outline(ax, body.vertices, color="tab:blue", linewidth=0.8)
    for _, s in samples:
        _outline(ax, body_from_support(s).vertices, color="tab:red", linewidth=0.6, linestyle="--")
    return fig


def area_figure(times, areas, title: str = "area under the classical flow"):
    fig, ax = plt.subplots(figsize=SVG_SIZE)
    ax.plot(times, areas, color="tab:red")
    ax.set_xlabel("time")
    ax.set_ylabel("area")
    ax.set_title(title)
    return fig

