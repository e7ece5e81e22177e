"""Mesh containers and file formats.

Reads textured Wavefront OBJ (+ MTL + atlas image), writes binary PLY with
per-vertex colours, and implements the object normalisation and fixed human
bounding box used to place the voxel grid.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class MeshFormatError(ValueError):
    """Malformed mesh or image file."""


@dataclass(frozen=True)
class BBox:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if any(h <= l for l, h in zip(lo, hi)):
            raise ValueError(f"degenerate bbox lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def lo_arr(self) -> np.ndarray:
        return np.asarray(self.lo)

    @property
    def hi_arr(self) -> np.ndarray:
        return np.asarray(self.hi)

    @property
    def size(self) -> np.ndarray:
        return self.hi_arr - self.lo_arr

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return np.all((p >= self.lo_arr) & (p <= self.hi_arr), axis=-1)

    def as_list(self) -> list[float]:
        return [*self.lo, *self.hi]

    @classmethod
    def from_list(cls, values) -> "BBox":
        values = [float(v) for v in values]
        if len(values) != 6:
            raise ValueError(f"bbox needs 6 numbers, got {len(values)}")
        return cls(tuple(values[:3]), tuple(values[3:]))


def human_bbox() -> BBox:
    """Box enclosing every human scan: x in [-0.8, 0.8], y in [-0.15, 2.1], z in [-0.8, 0.8]."""
    return BBox((-0.8, -0.15, -0.8), (0.8, 2.1, 0.8))


def unit_bbox() -> BBox:
    return BBox((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))


@dataclass
class AtlasImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8, row 0 is the top row

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, 3):
            raise ValueError(f"pixel array {self.pixels.shape} does not match {self.width}x{self.height}")


@dataclass
class TexturedMesh:
    vertices: np.ndarray                   # (V, 3) float64
    faces: np.ndarray                      # (F, 3) int64 vertex indices
    uvs: np.ndarray | None = None          # (T, 2) float64
    face_uvs: np.ndarray | None = None     # (F, 3) int64 uv indices
    atlas: AtlasImage | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.uvs is not None:
            self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        if self.face_uvs is not None:
            self.face_uvs = np.asarray(self.face_uvs, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshFormatError("face vertex index out of range")
        if self.face_uvs is not None:
            if self.uvs is None or len(self.face_uvs) != len(self.faces):
                raise MeshFormatError("face uv table does not match faces")
            if len(self.face_uvs) and (self.face_uvs.min() < 0 or self.face_uvs.max() >= len(self.uvs)):
                raise MeshFormatError("face uv index out of range")
        if self.atlas is not None and self.face_uvs is None:
            raise MeshFormatError("mesh with an atlas needs uv indices on every face corner")

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def subset(self, keep: np.ndarray) -> "TexturedMesh":
        """Mesh restricted to the faces selected by boolean mask ``keep``; vertex tables unchanged."""
        keep = np.asarray(keep, dtype=bool)
        return replace(self, faces=self.faces[keep],
                       face_uvs=None if self.face_uvs is None else self.face_uvs[keep])


@dataclass
class ColoredMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None   # (V, 3) in [0, 1]; None for geometry-only output

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise ValueError("one colour per vertex required")
            if np.any(self.colors < 0) or np.any(self.colors > 1):
                raise ValueError("colours must lie in [0, 1]")


# ---------------------------------------------------------------------------
# images

def read_ppm(path) -> AtlasImage:
    """Binary P6 reader (maxval <= 255)."""
    buf = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MeshFormatError(f"{path}: truncated PPM header")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace before raster
    if tokens[0] != b"P6":
        raise MeshFormatError(f"{path}: only binary P6 PPM is supported, got {tokens[0]!r}")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise MeshFormatError(f"{path}: 16-bit PPM not supported")
    raster = np.frombuffer(buf, dtype=np.uint8, count=width * height * 3, offset=pos)
    pixels = raster.reshape(height, width, 3)
    if maxval != 255:
        pixels = np.round(pixels.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return AtlasImage(width, height, pixels)


def write_ppm(image: AtlasImage, path) -> None:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.pixels.tobytes())


def load_image(path) -> AtlasImage:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"))
    return AtlasImage(rgb.shape[1], rgb.shape[0], rgb)


# ---------------------------------------------------------------------------
# OBJ / MTL

def _parse_mtl_map_kd(mtl_path: Path) -> Path | None:
    for line in mtl_path.read_text(encoding="utf-8", errors="replace").splitlines():
        toks = line.split()
        if toks and toks[0] == "map_Kd" and len(toks) > 1:
            # options like -s are not supported; the file name is the last token
            return mtl_path.parent / toks[-1]
    return None


def load_obj(path) -> TexturedMesh:
    """Parse ``v``/``vt``/``f`` records; polygons are fan-triangulated.

    The first ``map_Kd`` of the first ``mtllib`` becomes the atlas.  A missing
    material or image only produces a warning.
    """
    path = Path(path)
    verts: list[list[float]] = []
    uvs: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    face_uvs: list[tuple[int, int, int]] = []
    mtllibs: list[str] = []
    any_uv = False
    missing_uv = False

    def resolve(idx: int, count: int, lineno: int) -> int:
        i = idx - 1 if idx > 0 else count + idx
        if idx == 0 or not 0 <= i < count:
            raise MeshFormatError(f"{path}:{lineno}: index {idx} out of range")
        return i

    with path.open("r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks or toks[0].startswith("#"):
                continue
            tag = toks[0]
            try:
                if tag == "v":
                    if len(toks) < 4:
                        raise ValueError("vertex needs 3 coordinates")
                    verts.append([float(t) for t in toks[1:4]])
                elif tag == "vt":
                    if len(toks) < 3:
                        raise ValueError("texture coordinate needs u and v")
                    uvs.append([float(toks[1]), float(toks[2])])
                elif tag == "f":
                    if len(toks) < 4:
                        raise ValueError("face needs at least 3 corners")
                    vi, ti = [], []
                    for corner in toks[1:]:
                        parts = corner.split("/")
                        vi.append(resolve(int(parts[0]), len(verts), lineno))
                        if len(parts) > 1 and parts[1]:
                            ti.append(resolve(int(parts[1]), len(uvs), lineno))
                    if ti and len(ti) != len(vi):
                        raise ValueError("face mixes corners with and without uv")
                    any_uv |= bool(ti)
                    missing_uv |= not ti
                    for j in range(1, len(vi) - 1):
                        faces.append((vi[0], vi[j], vi[j + 1]))
                        face_uvs.append((ti[0], ti[j], ti[j + 1]) if ti else (-1, -1, -1))
                elif tag == "mtllib":
                    mtllibs.append(line.split(None, 1)[1].strip())
            except MeshFormatError:
                raise
            except (ValueError, IndexError) as exc:
                raise MeshFormatError(f"{path}:{lineno}: malformed {tag!r} record: {exc}") from None

    if any_uv and missing_uv:
        raise MeshFormatError(f"{path}: some faces carry uv indices and some do not")

    atlas = None
    if mtllibs and any_uv:
        mtl_path = path.parent / mtllibs[0]
        img_path = _parse_mtl_map_kd(mtl_path) if mtl_path.is_file() else None
        if img_path is None:
            warnings.warn(f"{path}: material {mtllibs[0]!r} has no readable map_Kd; atlas absent")
        elif not img_path.is_file():
            warnings.warn(f"{path}: atlas image {img_path} not found; atlas absent")
        else:
            atlas = load_image(img_path)

    return TexturedMesh(
        vertices=np.array(verts, dtype=np.float64).reshape(-1, 3),
        faces=np.array(faces, dtype=np.int64).reshape(-1, 3),
        uvs=np.array(uvs, dtype=np.float64).reshape(-1, 2) if any_uv else None,
        face_uvs=np.array(face_uvs, dtype=np.int64).reshape(-1, 3) if any_uv else None,
        atlas=atlas,
    )


def save_obj(mesh: TexturedMesh, path) -> None:
    """Write OBJ; a textured mesh also gets ``<stem>.mtl`` and a ``<stem>.ppm`` atlas beside it."""
    path = Path(path)
    lines = []
    if mesh.atlas is not None:
        mtl_name = path.stem + ".mtl"
        img_name = path.stem + ".ppm"
        write_ppm(mesh.atlas, path.parent / img_name)
        (path.parent / mtl_name).write_text(f"newmtl material0\nmap_Kd {img_name}\n", encoding="utf-8")
        lines += [f"mtllib {mtl_name}", "usemtl material0"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    if mesh.uvs is not None:
        lines += [f"vt {u!r} {v!r}" for u, v in mesh.uvs.tolist()]
    if mesh.face_uvs is not None:
        for (a, b, c), (ta, tb, tc) in zip(mesh.faces.tolist(), mesh.face_uvs.tolist()):
            lines.append(f"f {a + 1}/{ta + 1} {b + 1}/{tb + 1} {c + 1}/{tc + 1}")
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# PLY

def color_to_uchar(colors) -> np.ndarray:
    """[0, 1] -> {0..255}, rounding half up (0.5 -> 128)."""
    c = np.clip(np.asarray(colors, dtype=np.float64), 0.0, 1.0)
    return np.floor(c * 255.0 + 0.5).astype(np.uint8)


def save_colored_ply(mesh: ColoredMesh, path) -> None:
    """Binary little-endian PLY; colour properties are omitted when ``mesh.colors`` is None."""
    path = Path(path)
    nv, nf = len(mesh.vertices), len(mesh.faces)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {nv}",
              "property float x", "property float y", "property float z"]
    if mesh.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {nf}", "property list uchar int vertex_indices", "end_header"]
    head = ("\n".join(header) + "\n").encode("ascii")

    if mesh.colors is not None:
        vdt = np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3)])
        vrec = np.empty(nv, dtype=vdt)
        vrec["rgb"] = color_to_uchar(mesh.colors)
    else:
        vdt = np.dtype([("xyz", "<f4", 3)])
        vrec = np.empty(nv, dtype=vdt)
    vrec["xyz"] = mesh.vertices
    frec = np.empty(nf, dtype=np.dtype([("n", "u1"), ("idx", "<i4", 3)]))
    frec["n"] = 3
    frec["idx"] = mesh.faces
    try:
        path.write_bytes(head + vrec.tobytes() + frec.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write PLY to {path}: {exc}") from exc


_PLY_TYPES = {"char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "<i2",
              "int16": "<i2", "ushort": "<u2", "uint16": "<u2", "int": "<i4", "int32": "<i4",
              "uint": "<u4", "uint32": "<u4", "float": "<f4", "float32": "<f4",
              "double": "<f8", "float64": "<f8"}


def load_ply(path) -> ColoredMesh:
    """Read binary little-endian triangle PLY files as written by :func:`save_colored_ply`."""
    buf = Path(path).read_bytes()
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply") or end < 0:
        raise MeshFormatError(f"{path}: not a PLY file")
    lines = buf[:end].decode("ascii").splitlines()
    pos = end + len(b"end_header\n")
    if "format binary_little_endian 1.0" not in lines:
        raise MeshFormatError(f"{path}: only binary_little_endian PLY is supported")
    elements: list[tuple[str, int, list]] = []
    for line in lines:
        toks = line.split()
        if toks[:1] == ["element"]:
            elements.append((toks[1], int(toks[2]), []))
        elif toks[:1] == ["property"]:
            elements[-1][2].append(toks[1:])
    verts = np.zeros((0, 3))
    colors = None
    faces = np.zeros((0, 3), dtype=np.int64)
    for name, count, props in elements:
        if name == "face":
            if len(props) != 1 or props[0][0] != "list":
                raise MeshFormatError(f"{path}: unsupported face layout")
            ct, it = _PLY_TYPES[props[0][1]], _PLY_TYPES[props[0][2]]
            rec = np.dtype([("n", ct), ("idx", it, 3)])
            arr = np.frombuffer(buf, dtype=rec, count=count, offset=pos)
            if count and np.any(arr["n"] != 3):
                raise MeshFormatError(f"{path}: only triangle faces are supported")
            faces = arr["idx"].astype(np.int64)
            pos += rec.itemsize * count
        else:
            rec = np.dtype([(p[1], _PLY_TYPES[p[0]]) for p in props])
            arr = np.frombuffer(buf, dtype=rec, count=count, offset=pos)
            pos += rec.itemsize * count
            if name == "vertex":
                verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
                if "red" in rec.names:
                    colors = np.stack([arr["red"], arr["green"], arr["blue"]], axis=1) / 255.0
    return ColoredMesh(verts, faces, colors)


# ---------------------------------------------------------------------------
# normalisation

@dataclass(frozen=True)
class Normalization:
    """``normalized = (v - center) * scale``."""

    center: tuple[float, float, float]
    scale: float

    def apply(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.center)) * self.scale

    def invert(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + np.asarray(self.center)


def normalize_object(mesh: TexturedMesh) -> tuple[TexturedMesh, Normalization]:
    """Centre on the bounding-box midpoint and divide by the longest bounding-box edge."""
    if len(mesh.vertices) == 0:
        raise ValueError("cannot normalise an empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    longest = float(np.max(hi - lo))
    if longest <= 0:
        raise ValueError("cannot normalise a mesh with zero extent")
    tf = Normalization(tuple((0.5 * (lo + hi)).tolist()), 1.0 / longest)
    out = replace(mesh, vertices=np.clip(tf.apply(mesh.vertices), -0.5, 0.5))
    return out, tf
