"""Dense voxel encodings of point samples.

Grids are indexed ``[channel, i, j, k]`` with ``i, j, k`` along x, y, z.  A
point marks the cell that contains it, i.e. the voxel whose centre is its
nearest neighbour.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh_io import BBox

log = logging.getLogger(__name__)

MIN_RES, MAX_RES = 8, 512
UNMARKED = -1.0


class VoxelConfigError(ValueError):
    pass


@dataclass
class VoxelGridStack:
    data: np.ndarray     # (channels, R, R, R) float64
    bbox: BBox

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or len(set(self.data.shape[1:])) != 1:
            raise ValueError(f"grid data must be (C, R, R, R), got {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def resolution(self) -> int:
        return self.data.shape[1]

    def marked(self) -> np.ndarray:
        """Boolean (R, R, R) mask of marked cells (occupancy == 1 or colour != -1)."""
        if self.channels == 1:
            return self.data[0] > 0.5
        return self.data[0] != UNMARKED


def _check_res(resolution: int) -> None:
    if not MIN_RES <= resolution <= MAX_RES:
        raise VoxelConfigError(f"resolution {resolution} outside [{MIN_RES}, {MAX_RES}]")


def cell_indices(points, bbox: BBox, resolution: int):
    """Containing-cell indices of ``points``; returns ``(ijk, inside_mask)``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = bbox.contains(pts)
    rel = (pts[inside] - bbox.lo_arr) / bbox.size * resolution
    ijk = np.clip(np.floor(rel).astype(np.int64), 0, resolution - 1)
    return ijk, inside


def cell_centers(bbox: BBox, resolution: int) -> np.ndarray:
    """World-space centres of all cells, shape (R, R, R, 3)."""
    axes = [bbox.lo[a] + (np.arange(resolution) + 0.5) * bbox.size[a] / resolution for a in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _flat(ijk, resolution):
    return (ijk[:, 0] * resolution + ijk[:, 1]) * resolution + ijk[:, 2]


def voxelize_occupancy(points, bbox: BBox, resolution: int) -> VoxelGridStack:
    """1 where at least one point falls in the cell, else 0."""
    _check_res(resolution)
    ijk, inside = cell_indices(points, bbox, resolution)
    dropped = int((~inside).sum())
    if dropped:
        log.warning("voxelize_occupancy: dropped %d points outside the bbox", dropped)
    grid = np.zeros(resolution ** 3)
    grid[_flat(ijk, resolution)] = 1.0
    return VoxelGridStack(grid.reshape(1, resolution, resolution, resolution), bbox)


def voxelize_colored(points, colors, bbox: BBox, resolution: int) -> VoxelGridStack:
    """Mean colour of the points in each cell; -1 in all channels for empty cells."""
    _check_res(resolution)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(colors) != len(np.asarray(points).reshape(-1, 3)):
        raise ValueError("one colour per point required")
    ijk, inside = cell_indices(points, bbox, resolution)
    dropped = int((~inside).sum())
    if dropped:
        log.warning("voxelize_colored: dropped %d points outside the bbox", dropped)
    flat = _flat(ijk, resolution)
    n = resolution ** 3
    counts = np.bincount(flat, minlength=n)
    grid = np.full((3, n), UNMARKED)
    hit = counts > 0
    for c in range(3):
        sums = np.bincount(flat, weights=colors[inside, c], minlength=n)
        grid[c, hit] = sums[hit] / counts[hit]
    return VoxelGridStack(grid.reshape(3, resolution, resolution, resolution), bbox)


def stack_input(colored: VoxelGridStack, geometry: VoxelGridStack) -> VoxelGridStack:
    """Channels ordered [R, G, B, occupancy]."""
    if colored.channels != 3 or geometry.channels != 1:
        raise ValueError("stack_input expects a 3-channel colour grid and a 1-channel geometry grid")
    if colored.resolution != geometry.resolution or colored.bbox != geometry.bbox:
        raise ValueError(f"grids disagree: R={colored.resolution}/{geometry.resolution}, "
                         f"bbox={colored.bbox}/{geometry.bbox}")
    return VoxelGridStack(np.concatenate([colored.data, geometry.data]), colored.bbox)


def split_input(stack: VoxelGridStack) -> tuple[VoxelGridStack, VoxelGridStack]:
    if stack.channels != 4:
        raise ValueError("split_input expects a 4-channel grid")
    return VoxelGridStack(stack.data[:3].copy(), stack.bbox), VoxelGridStack(stack.data[3:].copy(), stack.bbox)


# VOXL: b"VOXL" | u32 version | u32 channels | u32 R | 6 x f64 bbox (lo xyz, hi xyz) | f32 payload
VOXL_MAGIC = b"VOXL"
VOXL_VERSION = 1


def save_voxl(grid: VoxelGridStack, path) -> None:
    head = VOXL_MAGIC + struct.pack("<3I6d", VOXL_VERSION, grid.channels, grid.resolution,
                                    *grid.bbox.as_list())
    Path(path).write_bytes(head + grid.data.astype("<f4").tobytes())


def load_voxl(path) -> VoxelGridStack:
    buf = Path(path).read_bytes()
    if buf[:4] != VOXL_MAGIC:
        raise ValueError(f"{path}: not a VOXL file")
    version, channels, res, *box = struct.unpack_from("<3I6d", buf, 4)
    if version != VOXL_VERSION:
        raise ValueError(f"{path}: unsupported VOXL version {version}")
    off = 4 + struct.calcsize("<3I6d")
    data = np.frombuffer(buf, dtype="<f4", count=channels * res ** 3, offset=off)
    return VoxelGridStack(data.reshape(channels, res, res, res).astype(np.float64), BBox.from_list(box))
