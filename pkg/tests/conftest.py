"""Shared fixtures.  The overfit models are trained once per session and reused."""

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from texfield.mesh_io import BBox, TexturedMesh, unit_bbox
from texfield.sampling import OccupancySamplingConfig, carve_holes
from texfield.shapes import two_color_atlas, uv_sphere
from texfield.training import TrainConfig, TrainResult, make_geometry_example, make_texture_example, train

RESOLUTION = 32
STEPS = 300
LR = 1e-3
POINTS = 4096
HOLE_RADIUS = 0.15
# inside the red (z > 0) hemisphere, clear of the colour seam at the equator
HOLE_CENTER = 0.35 * np.array([np.sin(np.pi / 4), 0.0, np.cos(np.pi / 4)])


@dataclass
class OverfitRun:
    full: TexturedMesh
    partial: TexturedMesh
    bbox: BBox
    geometry: TrainResult
    texture: TrainResult
    geometry_seconds: float
    texture_seconds: float
    hole_center: np.ndarray
    hole_radius: float

    @property
    def geo_ckpt(self) -> Path:
        return self.geometry.checkpoint

    @property
    def tex_ckpt(self) -> Path:
        return self.texture.checkpoint


def two_color_sphere() -> TexturedMesh:
    return uv_sphere(0.35, atlas=two_color_atlas())


def hemisphere_color(points) -> np.ndarray:
    """Ground truth of the synthetic shape: red above the equator, blue below."""
    z = np.asarray(points)[:, 2]
    return np.where(z[:, None] > 0, [1.0, 0.0, 0.0], [0.0, 0.0, 1.0])


@pytest.fixture(scope="session")
def overfit(tmp_path_factory) -> OverfitRun:
    full = two_color_sphere()
    partial = carve_holes(full, [HOLE_CENTER], [HOLE_RADIUS])
    bbox = unit_bbox()
    root = tmp_path_factory.mktemp("overfit")

    geo_ex = make_geometry_example(full, partial, bbox, RESOLUTION, OccupancySamplingConfig(),
                                   np.random.default_rng(0))
    cfg = TrainConfig(points_per_item=POINTS, steps=STEPS, lr=LR, seed=0, checkpoint_every=STEPS)
    t0 = time.perf_counter()
    geo = train([geo_ex], cfg, "geometry", root / "geometry")
    t_geo = time.perf_counter() - t0

    tex_ex = make_texture_example(full, partial, bbox, RESOLUTION, 100_000, np.random.default_rng(1))
    t0 = time.perf_counter()
    tex = train([tex_ex], cfg, "texture", root / "texture")
    t_tex = time.perf_counter() - t0
    return OverfitRun(full, partial, bbox, geo, tex, t_geo, t_tex, HOLE_CENTER, HOLE_RADIUS)


# acceptance lines, printed again in the terminal summary so they survive output capture
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture()
def report(capsys):
    def _report(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
