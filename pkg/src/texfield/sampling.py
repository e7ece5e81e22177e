"""Training-signal generation on meshes.

Area-weighted surface samples, ground-truth colours from the texture atlas,
inside/outside labels by axis-ray parity, near-surface Gaussian samples for
the occupancy model, and spherical-hole partial scans.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh_io import TexturedMesh

DEGENERATE_AREA = 1e-14


@dataclass
class PointSampleSet:
    points: np.ndarray   # (N, 3)
    labels: np.ndarray   # (N,) uint8 for occupancy, (N, 3) float in [0, 1] for color
    kind: str            # "occupancy" | "color"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.kind == "occupancy":
            self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
            if np.any(self.labels > 1):
                raise ValueError("occupancy labels must be 0 or 1")
        elif self.kind == "color":
            self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1, 3)
        else:
            raise ValueError(f"unknown sample kind {self.kind!r}")
        if len(self.labels) != len(self.points):
            raise ValueError("one label per point required")

    def __len__(self) -> int:
        return len(self.points)

    def take(self, idx) -> "PointSampleSet":
        return PointSampleSet(self.points[idx], self.labels[idx], self.kind)

    def subsample(self, k: int, rng: np.random.Generator) -> "PointSampleSet":
        """``k`` points drawn uniformly without replacement (all points if ``k >= len``)."""
        if k >= len(self):
            return self.take(rng.permutation(len(self)))
        return self.take(rng.choice(len(self), size=k, replace=False))


@dataclass(frozen=True)
class OccupancySamplingConfig:
    total_points: int = 100_000
    sub_sample: int = 50_000
    sigma_small: float = 0.015
    sigma_large: float = 0.2
    split: float = 0.5

    def __post_init__(self):
        if not 0 < self.sub_sample <= self.total_points:
            raise ValueError("need 0 < sub_sample <= total_points")
        if self.sigma_small <= 0 or self.sigma_large <= 0:
            raise ValueError("sigmas must be positive")
        if not 0 < self.split < 1:
            raise ValueError("split must lie in (0, 1)")


@dataclass(frozen=True)
class HoleSpec:
    hole_count: int
    radius_range: tuple[float, float]
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.radius_range
        if self.hole_count < 1:
            raise ValueError("hole_count must be >= 1")
        if not 0 < lo <= hi:
            raise ValueError("radius_range must satisfy 0 < min <= max")


# ---------------------------------------------------------------------------
# surface samples and colours

def sample_surface(mesh: TexturedMesh, n: int, rng: np.random.Generator):
    """Uniform surface samples.

    Returns ``(points, face_index, bary)`` with triangles drawn proportional to
    area and positions uniform inside each triangle.
    """
    areas = mesh.face_areas()
    valid = areas > DEGENERATE_AREA
    if not np.any(valid):
        raise ValueError("mesh has no non-degenerate triangle to sample")
    prob = np.where(valid, areas, 0.0)
    prob /= prob.sum()
    faces = rng.choice(len(areas), size=n, p=prob)
    r1 = rng.random(n)
    r2 = rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    tri = mesh.vertices[mesh.faces[faces]]
    points = np.einsum("ni,nij->nj", bary, tri)
    return points, faces, bary


def atlas_lookup(atlas, uv) -> np.ndarray:
    """Nearest texel at ``uv`` (v = 0 is the bottom row), scaled to [0, 1]; uv is clamped to [0, 1]."""
    uv = np.clip(np.asarray(uv, dtype=np.float64), 0.0, 1.0)
    col = np.floor(uv[..., 0] * (atlas.width - 1) + 0.5).astype(np.int64)
    row = np.floor((1.0 - uv[..., 1]) * (atlas.height - 1) + 0.5).astype(np.int64)
    return atlas.pixels[row, col].astype(np.float64) / 255.0


def surface_color(mesh: TexturedMesh, face, bary) -> np.ndarray:
    """Colour at barycentric position ``bary`` of ``face`` via the interpolated uv.

    Works for a single face/bary pair or for arrays of them.
    """
    if mesh.atlas is None or mesh.face_uvs is None:
        raise ValueError("surface_color needs a mesh with a texture atlas")
    face = np.asarray(face)
    bary = np.asarray(bary, dtype=np.float64)
    corner_uv = mesh.uvs[mesh.face_uvs[face]]          # (..., 3, 2)
    uv = np.einsum("...i,...ij->...j", bary, corner_uv)
    return atlas_lookup(mesh.atlas, uv)


# ---------------------------------------------------------------------------
# inside / outside

_JITTER_DIRS = np.array([[0.7548776662466927, 0.5698402909980532],
                         [-0.4196433776070806, 0.8191725133961645],
                         [0.3248198, -0.9457660]])
_BARY_EPS = 1e-10
_CHUNK = 20_000


def _axis_parity(tris: np.ndarray, points: np.ndarray, axis: int, offset: np.ndarray):
    """Ray-crossing parity along +axis.

    Returns ``(odd, degenerate)`` boolean arrays; a point is degenerate when
    its ray passes within ``_BARY_EPS`` of a triangle edge or vertex.
    """
    u, v = [a for a in range(3) if a != axis]
    t2 = tris[:, :, [u, v]]
    q = points[:, [u, v]] + offset
    n = len(points)
    odd = np.zeros(n, dtype=bool)
    degenerate = np.zeros(n, dtype=bool)
    if len(tris) == 0 or n == 0:
        return odd, degenerate

    tmin = t2.min(axis=1)
    tmax = t2.max(axis=1)
    lo = tmin.min(axis=0)
    hi = tmax.max(axis=0)
    g = int(np.clip(np.sqrt(len(tris)), 1, 256))
    cs = np.maximum((hi - lo) / g, 1e-12)
    c0 = np.clip(np.floor((tmin - lo) / cs).astype(np.int64), 0, g - 1)
    c1 = np.clip(np.floor((tmax - lo) / cs).astype(np.int64), 0, g - 1)
    nx = c1[:, 0] - c0[:, 0] + 1
    ny = c1[:, 1] - c0[:, 1] + 1
    cnt = nx * ny
    tri_rep = np.repeat(np.arange(len(tris)), cnt)
    local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    cx = c0[tri_rep, 0] + local % nx[tri_rep]
    cy = c0[tri_rep, 1] + local // nx[tri_rep]
    cell = cx * g + cy
    order = np.argsort(cell, kind="stable")
    cell_tris = tri_rep[order]
    starts = np.searchsorted(cell[order], np.arange(g * g), side="left")
    ends = np.searchsorted(cell[order], np.arange(g * g), side="right")

    a0, b0, c0_ = t2[:, 0], t2[:, 1], t2[:, 2]
    det = (b0[:, 0] - a0[:, 0]) * (c0_[:, 1] - a0[:, 1]) - (b0[:, 1] - a0[:, 1]) * (c0_[:, 0] - a0[:, 0])

    for s in range(0, n, _CHUNK):
        qs = q[s:s + _CHUNK]
        ps = points[s:s + _CHUNK, axis]
        ok = np.all((qs >= lo) & (qs <= hi), axis=1)
        qc = np.clip(np.floor((qs - lo) / cs).astype(np.int64), 0, g - 1)
        qcell = qc[:, 0] * g + qc[:, 1]
        st = np.where(ok, starts[qcell], 0)
        en = np.where(ok, ends[qcell], 0)
        k = en - st
        pid = np.repeat(np.arange(len(qs)), k)
        off = np.arange(k.sum()) - np.repeat(np.cumsum(k) - k, k)
        tid = cell_tris[np.repeat(st, k) + off]
        d = det[tid]
        flat = np.abs(d) < 1e-300
        d = np.where(flat, 1.0, d)
        qq = qs[pid]
        A, B, C = a0[tid], b0[tid], c0_[tid]
        l1 = ((qq[:, 0] - A[:, 0]) * (C[:, 1] - A[:, 1]) - (qq[:, 1] - A[:, 1]) * (C[:, 0] - A[:, 0])) / d
        l2 = ((B[:, 0] - A[:, 0]) * (qq[:, 1] - A[:, 1]) - (B[:, 1] - A[:, 1]) * (qq[:, 0] - A[:, 0])) / d
        l0 = 1.0 - l1 - l2
        lmin = np.minimum(np.minimum(l0, l1), l2)
        inside = (lmin > _BARY_EPS) & ~flat
        touch = (lmin >= -_BARY_EPS) & (lmin <= _BARY_EPS) & ~flat
        tri3 = tris[tid]
        h = l0 * tri3[:, 0, axis] + l1 * tri3[:, 1, axis] + l2 * tri3[:, 2, axis]
        ahead = h > ps[pid]
        hits = np.bincount(pid[inside & ahead], minlength=len(qs))
        odd[s:s + _CHUNK] = hits % 2 == 1
        degenerate[s:s + _CHUNK] = np.bincount(pid[touch & ahead], minlength=len(qs)) > 0
    return odd, degenerate


def occupancy_label(mesh: TexturedMesh, points, max_jitter: int = 6) -> np.ndarray:
    """1 inside, 0 outside: majority vote of +x, +y, +z ray parity.

    A ray grazing an edge or vertex is re-cast from a deterministically
    jittered origin.  Accepts one point or an (N, 3) array.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    tris = mesh.triangles()
    areas = mesh.face_areas()
    tris = tris[areas > 0]
    extent = float(np.max(np.ptp(mesh.vertices, axis=0))) if len(mesh.vertices) else 1.0
    votes = np.zeros(len(pts), dtype=np.int64)
    for axis in range(3):
        odd, deg = _axis_parity(tris, pts, axis, np.zeros(2))
        for attempt in range(1, max_jitter + 1):
            if not deg.any():
                break
            idx = np.flatnonzero(deg)
            offset = _JITTER_DIRS[axis] * (1e-7 * extent * attempt)
            odd_j, deg_j = _axis_parity(tris, pts[idx], axis, offset)
            odd[idx] = odd_j
            deg[idx] = deg_j
        votes += odd
    labels = (votes >= 2).astype(np.uint8)
    return labels[0] if single else labels


def displaced_samples(mesh: TexturedMesh, cfg: OccupancySamplingConfig, rng: np.random.Generator):
    """Surface samples and their Gaussian displacements.

    Returns ``(surface_points, displaced_points, sigma_per_point)``; the first
    ``round(split * total_points)`` points use ``sigma_small``.
    """
    n = cfg.total_points
    n_small = int(round(cfg.split * n))
    surf, _, _ = sample_surface(mesh, n, rng)
    sigma = np.where(np.arange(n) < n_small, cfg.sigma_small, cfg.sigma_large)
    noise = rng.standard_normal((n, 3)) * sigma[:, None]
    return surf, surf + noise, sigma


def sample_occupancy(mesh: TexturedMesh, cfg: OccupancySamplingConfig,
                     rng: np.random.Generator) -> PointSampleSet:
    _, pts, _ = displaced_samples(mesh, cfg, rng)
    return PointSampleSet(pts, occupancy_label(mesh, pts), "occupancy")


def sample_colors(mesh: TexturedMesh, n: int, rng: np.random.Generator) -> PointSampleSet:
    """Surface points labelled with their atlas colour."""
    pts, faces, bary = sample_surface(mesh, n, rng)
    return PointSampleSet(pts, surface_color(mesh, faces, bary), "color")


# ---------------------------------------------------------------------------
# partial scans

MAX_REMOVED_AREA = 0.6


def carve_holes(mesh: TexturedMesh, centers, radii) -> TexturedMesh:
    """Remove every face whose centroid lies inside any of the given balls."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    radii = np.asarray(radii, dtype=np.float64).reshape(-1)
    centroids = mesh.triangles().mean(axis=1)
    d2 = ((centroids[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    removed = np.any(d2 < radii[None, :] ** 2, axis=1)
    return mesh.subset(~removed)


def synthesize_partial(mesh: TexturedMesh, spec: HoleSpec, max_attempts: int = 32) -> TexturedMesh:
    """Shoot ``spec.hole_count`` spherical holes at random surface points.

    Draws are repeated while more than 60% of the surface area would vanish.
    """
    if mesh.n_faces == 0:
        raise ValueError("cannot carve holes into an empty mesh")
    rng = np.random.default_rng(spec.seed)
    total = mesh.face_areas().sum()
    lo, hi = spec.radius_range
    for _ in range(max_attempts):
        centers, _, _ = sample_surface(mesh, spec.hole_count, rng)
        radii = rng.uniform(lo, hi, spec.hole_count)
        out = carve_holes(mesh, centers, radii)
        if out.face_areas().sum() >= (1.0 - MAX_REMOVED_AREA) * total:
            return out
    raise ValueError(f"hole spec {spec} removes more than {MAX_REMOVED_AREA:.0%} of the "
                     f"surface in all {max_attempts} attempts")


def derive_seed(global_seed: int, shape_id: int) -> int:
    return (int(global_seed) ^ int(shape_id)) & 0xFFFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# PSET files: b"PSET" | u8 kind | u64 count | f32 xyz * count | labels

PSET_MAGIC = b"PSET"
_KINDS = {"occupancy": 0, "color": 1}


def save_pset(samples: PointSampleSet, path) -> None:
    head = PSET_MAGIC + struct.pack("<BQ", _KINDS[samples.kind], len(samples))
    body = samples.points.astype("<f4").tobytes()
    if samples.kind == "occupancy":
        body += samples.labels.astype(np.uint8).tobytes()
    else:
        body += samples.labels.astype("<f4").tobytes()
    Path(path).write_bytes(head + body)


def load_pset(path) -> PointSampleSet:
    buf = Path(path).read_bytes()
    if buf[:4] != PSET_MAGIC:
        raise ValueError(f"{path}: not a PSET file")
    kind_id, count = struct.unpack_from("<BQ", buf, 4)
    kinds = {v: k for k, v in _KINDS.items()}
    if kind_id not in kinds:
        raise ValueError(f"{path}: unknown sample kind {kind_id}")
    pos = 4 + struct.calcsize("<BQ")
    pts = np.frombuffer(buf, dtype="<f4", count=3 * count, offset=pos).reshape(count, 3)
    pos += 12 * count
    if kinds[kind_id] == "occupancy":
        labels = np.frombuffer(buf, dtype=np.uint8, count=count, offset=pos)
    else:
        labels = np.frombuffer(buf, dtype="<f4", count=3 * count, offset=pos).reshape(count, 3)
    return PointSampleSet(pts.astype(np.float64), labels, kinds[kind_id])
