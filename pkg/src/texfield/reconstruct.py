"""Inference: dense occupancy field -> marching cubes -> per-vertex colour."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from ._mc_tables import CORNERS, EDGES, TRI_TABLE
from .ifnet import IFNet
from .mesh_io import BBox, ColoredMesh, TexturedMesh
from .sampling import occupancy_label, sample_colors, sample_surface
from .voxel import VoxelGridStack, cell_centers, stack_input, voxelize_colored, voxelize_occupancy


class ReconstructionError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage


@dataclass
class ScalarField:
    values: np.ndarray   # (R, R, R) sampled at cell centres of bbox
    bbox: BBox

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or len(set(self.values.shape)) != 1:
            raise ValueError(f"field must be (R, R, R), got {self.values.shape}")

    @property
    def resolution(self) -> int:
        return self.values.shape[0]


def evaluate_field(model, x: VoxelGridStack, resolution: int, chunk: int = 65536) -> ScalarField:
    """Occupancy probability at every cell centre of an R_eval^3 grid over ``x.bbox``."""
    model_res = getattr(getattr(model, "cfg", None), "resolution", x.resolution)
    if model_res != x.resolution:
        raise ValueError(f"geometry model expects R={model_res}, input grid has R={x.resolution}")
    pts = cell_centers(x.bbox, resolution).reshape(-1, 3)
    logits = model.predict(x, pts, chunk=chunk)
    probs = T.stable_sigmoid(np.asarray(logits, dtype=np.float64).reshape(-1))
    return ScalarField(probs.reshape(resolution, resolution, resolution), x.bbox)


# ---------------------------------------------------------------------------
# marching cubes

def _tables():
    tri = np.full((256, 16), -1, dtype=np.int64)
    for case, row in enumerate(TRI_TABLE):
        tri[case, :len(row)] = row
    corners = np.array(CORNERS, dtype=np.int64)
    edges = np.array(EDGES, dtype=np.int64)
    lo_corner = np.where((corners[edges[:, 0]] <= corners[edges[:, 1]]).all(axis=1),
                         edges[:, 0], edges[:, 1])
    edge_axis = np.argmax(corners[edges[:, 0]] != corners[edges[:, 1]], axis=1)
    return tri, corners, corners[lo_corner], edge_axis


_TRI, _CORNER_OFF, _EDGE_ORIGIN, _EDGE_AXIS = _tables()


def marching_cubes(field: ScalarField, iso: float = 0.5) -> TexturedMesh:
    """Triangulate the ``iso`` level set of ``field``.

    Nodes sit at cell centres.  Vertices on shared lattice edges are welded
    and faces are wound so that normals point toward lower field values.
    """
    v = field.values
    r = v.shape[0]
    if not np.all(np.isfinite(v)):
        raise ValueError("field contains non-finite values")
    if r < 2:
        return TexturedMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    m = r - 1
    case = np.zeros((m, m, m), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(_CORNER_OFF):
        case |= (v[dx:dx + m, dy:dy + m, dz:dz + m] < iso).astype(np.int64) << c
    case = case.reshape(-1)
    active = np.flatnonzero((case != 0) & (case != 255))
    if len(active) == 0:
        return TexturedMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    rows = _TRI[case[active]]                               # (A, 16)
    cube_ijk = np.stack(np.unravel_index(active, (m, m, m)), axis=1)
    cube_rep = np.repeat(np.arange(len(active)), 16).reshape(-1, 16)
    ok = rows >= 0
    e = rows[ok]
    cube = cube_rep[ok]
    origin = cube_ijk[cube] + _EDGE_ORIGIN[e]
    node = (origin[:, 0] * r + origin[:, 1]) * r + origin[:, 2]
    edge_id = node * 3 + _EDGE_AXIS[e]
    uniq, inverse = np.unique(edge_id, return_inverse=True)
    faces = inverse.reshape(-1, 3)

    n0 = uniq // 3
    axis = uniq % 3
    stride = np.array([r * r, r, 1])
    n1 = n0 + stride[axis]
    flat = v.reshape(-1)
    v0, v1 = flat[n0], flat[n1]
    t = (iso - v0) / (v1 - v0)
    ijk0 = np.stack(np.unravel_index(n0, (r, r, r)), axis=1).astype(np.float64)
    ijk0[np.arange(len(axis)), axis] += t
    h = field.bbox.size / r
    verts = field.bbox.lo_arr + (ijk0 + 0.5) * h
    # table winding already faces the below-iso side
    return TexturedMesh(verts, faces)


def mesh_area(mesh: TexturedMesh) -> float:
    return float(mesh.face_areas().sum())


def mesh_volume(mesh: TexturedMesh) -> float:
    """Signed volume via the divergence theorem (positive for outward winding)."""
    t = mesh.triangles()
    return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)


def edge_incidence(faces: np.ndarray) -> np.ndarray:
    """Number of faces incident to each undirected edge."""
    f = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


def is_watertight(mesh: TexturedMesh) -> bool:
    return mesh.n_faces > 0 and bool(np.all(edge_incidence(mesh.faces) == 2))


# ---------------------------------------------------------------------------
# texture stage and full pipeline

@dataclass(frozen=True)
class ReconstructConfig:
    bbox: BBox
    eval_resolution: int = 64
    iso: float = 0.5
    surface_points: int = 30_000
    seed: int = 0
    chunk: int = 65536


def geometry_input(partial: TexturedMesh, bbox: BBox, resolution: int, n_points: int,
                   rng: np.random.Generator) -> VoxelGridStack:
    pts, _, _ = sample_surface(partial, n_points, rng)
    return voxelize_occupancy(pts, bbox, resolution)


def texture_input(partial: TexturedMesh, geometry: TexturedMesh, bbox: BBox, resolution: int,
                  n_points: int, rng: np.random.Generator) -> VoxelGridStack:
    colored = sample_colors(partial, n_points, rng)
    geo_pts, _, _ = sample_surface(geometry, n_points, rng)
    return stack_input(voxelize_colored(colored.points, colored.labels, bbox, resolution),
                       voxelize_occupancy(geo_pts, bbox, resolution))


def colorize(mesh: TexturedMesh, texture_model: IFNet, partial: TexturedMesh, bbox: BBox,
             resolution: int | None = None, n_points: int = 30_000, seed: int = 0,
             chunk: int = 65536) -> ColoredMesh:
    """Regress an rgb colour for every vertex of ``mesh``.

    The geometry channel is rebuilt by resampling the surface of ``mesh``
    itself.
    """
    res = resolution or texture_model.cfg.resolution
    x = texture_input(partial, mesh, bbox, res, n_points, np.random.default_rng(seed))
    colors = texture_model.predict(x, mesh.vertices, chunk=chunk) if len(mesh.vertices) else np.zeros((0, 3))
    return ColoredMesh(mesh.vertices, mesh.faces, np.clip(colors, 0.0, 1.0))


def _as_model(m) -> IFNet:
    return m if isinstance(m, IFNet) else IFNet.load(m)[0]


def reconstruct_full(partial: TexturedMesh, geo_model, tex_model, cfg: ReconstructConfig) -> ColoredMesh:
    """Partial textured scan -> complete mesh, coloured when a texture model is given."""
    rng = np.random.default_rng(cfg.seed)

    def stage(name, fn):
        try:
            return fn()
        except Exception as exc:  # noqa: BLE001 - re-raised with stage tag
            raise ReconstructionError(name, exc) from exc

    geo = stage("load-geometry-model", lambda: _as_model(geo_model))
    if geo.cfg.kind != "occupancy":
        raise ReconstructionError("load-geometry-model", ValueError("checkpoint is not a geometry model"))
    x = stage("voxelize", lambda: geometry_input(partial, cfg.bbox, geo.cfg.resolution,
                                                 cfg.surface_points, rng))
    fld = stage("evaluate-field", lambda: evaluate_field(geo, x, cfg.eval_resolution, cfg.chunk))
    mesh = stage("marching-cubes", lambda: marching_cubes(fld, cfg.iso))
    if tex_model is None:
        return ColoredMesh(mesh.vertices, mesh.faces, None)
    tex = stage("load-texture-model", lambda: _as_model(tex_model))
    if tex.cfg.kind != "rgb":
        raise ReconstructionError("load-texture-model", ValueError("checkpoint is not a texture model"))
    if mesh.n_faces == 0:
        return ColoredMesh(mesh.vertices, mesh.faces, np.zeros((0, 3)))
    if partial.atlas is None:
        raise ReconstructionError("colorize", ValueError("partial scan carries no texture atlas"))
    return stage("colorize", lambda: colorize(mesh, tex, partial, cfg.bbox, tex.cfg.resolution,
                                              cfg.surface_points, cfg.seed + 1, cfg.chunk))


def mesh_iou(a: TexturedMesh, b: TexturedMesh, bbox: BBox, n: int = 100_000, seed: int = 0) -> float:
    """Volumetric IoU estimated from ``n`` uniform samples in ``bbox`` and ray-parity labels."""
    rng = np.random.default_rng(seed)
    pts = bbox.lo_arr + rng.random((n, 3)) * bbox.size
    ia = occupancy_label(a, pts).astype(bool) if a.n_faces else np.zeros(n, dtype=bool)
    ib = occupancy_label(b, pts).astype(bool) if b.n_faces else np.zeros(n, dtype=bool)
    union = np.count_nonzero(ia | ib)
    return 1.0 if union == 0 else np.count_nonzero(ia & ib) / union


# FELD: b"FELD" | u32 R | 6 x f64 bbox | f32 payload (R^3, x-major)
FELD_MAGIC = b"FELD"


def save_field(fld: ScalarField, path) -> None:
    head = FELD_MAGIC + struct.pack("<I6d", fld.resolution, *fld.bbox.as_list())
    Path(path).write_bytes(head + fld.values.astype("<f4").tobytes())


def load_field(path) -> ScalarField:
    buf = Path(path).read_bytes()
    if buf[:4] != FELD_MAGIC:
        raise ValueError(f"{path}: not a FELD file")
    r, *box = struct.unpack_from("<I6d", buf, 4)
    data = np.frombuffer(buf, dtype="<f4", count=r ** 3, offset=4 + struct.calcsize("<I6d"))
    return ScalarField(data.reshape(r, r, r).astype(np.float64), BBox.from_list(box))
