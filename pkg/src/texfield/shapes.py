"""Synthetic closed meshes used by the tests, the self-test and the overfit runs."""

from __future__ import annotations

import numpy as np

from .mesh_io import AtlasImage, TexturedMesh

RED = (255, 0, 0)
BLUE = (0, 0, 255)


def two_color_atlas(top=RED, bottom=BLUE, size: int = 64) -> AtlasImage:
    """Atlas whose upper half (v > 0.5) is ``top`` and lower half ``bottom``."""
    px = np.empty((size, size, 3), dtype=np.uint8)
    px[: size // 2] = top
    px[size // 2:] = bottom
    return AtlasImage(size, size, px)


def uv_sphere(radius: float = 0.35, n_lat: int = 32, n_lon: int = 64, center=(0.0, 0.0, 0.0),
              atlas: AtlasImage | None = None) -> TexturedMesh:
    """Latitude/longitude sphere with outward winding.

    ``n_lat`` must be even so that a vertex ring lies exactly on the
    equator (z = 0) and no triangle crosses it.  uv is equirectangular with
    v = 0 at the south pole; the ``u = 1`` seam has its own uv column.
    """
    if n_lat % 2 or n_lat < 2 or n_lon < 3:
        raise ValueError("need even n_lat >= 2 and n_lon >= 3")
    theta = np.linspace(0.0, np.pi, n_lat + 1)[1:-1]           # polar angle of inner rings
    phi = 2.0 * np.pi * np.arange(n_lon) / n_lon
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    ring = np.stack([st * np.cos(phi), st * np.sin(phi), np.repeat(ct, n_lon, axis=1)],
                    axis=-1).reshape(-1, 3)
    # snap equator ring to exactly z = 0
    ring[np.abs(ring[:, 2]) < 1e-12, 2] = 0.0
    north = np.array([[0.0, 0.0, 1.0]])
    south = np.array([[0.0, 0.0, -1.0]])
    verts = np.concatenate([north, ring, south]) * radius + np.asarray(center, dtype=np.float64)
    n_inner = n_lat - 1
    vid = lambda r, c: 1 + r * n_lon + (c % n_lon)  # noqa: E731
    south_id = 1 + n_inner * n_lon

    # uv grid: (n_lat + 1) rows x (n_lon + 1) columns
    us = np.arange(n_lon + 1) / n_lon
    vs = 1.0 - np.arange(n_lat + 1) / n_lat
    uvs = np.stack(np.meshgrid(us, vs), axis=-1).reshape(-1, 2)
    tid = lambda r, c: r * (n_lon + 1) + c  # noqa: E731

    faces, fuv = [], []
    for c in range(n_lon):
        faces.append((0, vid(0, c), vid(0, c + 1)))
        fuv.append((tid(0, c), tid(1, c), tid(1, c + 1)))
    for r in range(n_inner - 1):
        for c in range(n_lon):
            a, b = vid(r, c), vid(r, c + 1)
            d, e = vid(r + 1, c), vid(r + 1, c + 1)
            ta, tb = tid(r + 1, c), tid(r + 1, c + 1)
            td, te = tid(r + 2, c), tid(r + 2, c + 1)
            faces += [(a, d, e), (a, e, b)]
            fuv += [(ta, td, te), (ta, te, tb)]
    last = n_inner - 1
    for c in range(n_lon):
        faces.append((vid(last, c), south_id, vid(last, c + 1)))
        fuv.append((tid(n_lat - 1, c), tid(n_lat, c), tid(n_lat - 1, c + 1)))

    faces = np.array(faces, dtype=np.int64)
    fuv = np.array(fuv, dtype=np.int64)
    # enforce outward orientation
    tri = verts[faces] - np.asarray(center)
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", normal, tri.mean(axis=1)) < 0
    faces[flip] = faces[flip][:, ::-1]
    fuv[flip] = fuv[flip][:, ::-1]
    if atlas is None:
        return TexturedMesh(verts, faces)
    return TexturedMesh(verts, faces, uvs, fuv, atlas)


def box_mesh(lo=(-0.3, -0.2, -0.25), hi=(0.3, 0.2, 0.25), subdiv: int = 1) -> TexturedMesh:
    """Closed axis-aligned box, each face split into ``subdiv``^2 quads."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    verts: list[np.ndarray] = []
    faces: list[tuple[int, int, int]] = []
    t = np.linspace(0.0, 1.0, subdiv + 1)
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for side in (0, 1):
            base = len(verts)
            for i in t:
                for j in t:
                    p = np.empty(3)
                    p[axis] = hi[axis] if side else lo[axis]
                    p[u] = lo[u] + i * (hi[u] - lo[u])
                    p[v] = lo[v] + j * (hi[v] - lo[v])
                    verts.append(p)
            n = subdiv + 1
            for i in range(subdiv):
                for j in range(subdiv):
                    a = base + i * n + j
                    b, c, d = a + n, a + n + 1, a + 1
                    faces += [(a, b, c), (a, c, d)]
    verts_arr = np.array(verts)
    # weld duplicated edge/corner vertices
    key = np.round(verts_arr, 12)
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    faces_arr = inverse.reshape(-1)[np.array(faces)]
    center = 0.5 * (lo + hi)
    tri = uniq[faces_arr] - center
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", normal, tri.mean(axis=1)) < 0
    faces_arr[flip] = faces_arr[flip][:, ::-1]
    return TexturedMesh(uniq, faces_arr)


def sphere_field(resolution: int, radius: float = 0.35, center=(0.0, 0.0, 0.0),
                 lo=(-0.5, -0.5, -0.5), hi=(0.5, 0.5, 0.5), sharpness: float = 20.0) -> np.ndarray:
    """Smooth occupancy-like field on cell centres, 0.5 exactly on the sphere."""
    axes = [lo[a] + (np.arange(resolution) + 0.5) * (hi[a] - lo[a]) / resolution for a in range(3)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    r = np.sqrt((x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2)
    return 1.0 / (1.0 + np.exp(sharpness * (r - radius) / radius))
