"""Implicit feature networks.

A 3D CNN turns the input voxel grid into multi-scale feature grids that stay
aligned with world space.  A point is encoded by trilinearly sampling the
raw input and every feature grid at its position; a point-wise MLP then
decodes an occupancy logit (geometry model) or an rgb colour (texture model).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .mesh_io import BBox
from .tensor import Tensor
from .voxel import VoxelGridStack


@dataclass(frozen=True)
class EncoderConfig:
    input_channels: int = 1
    n_scales: int = 4
    channels_per_scale: tuple[int, ...] = (8, 16, 24, 32)
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels_per_scale", tuple(int(c) for c in self.channels_per_scale))
        if self.input_channels not in (1, 4):
            raise ValueError("input_channels must be 1 (geometry) or 4 (rgb + geometry)")
        if self.n_scales < 2:
            raise ValueError("n_scales must be >= 2")
        if len(self.channels_per_scale) != self.n_scales:
            raise ValueError("need one channel count per scale")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError("kernel must be a positive odd integer")

    @property
    def feature_dim(self) -> int:
        return self.input_channels + sum(self.channels_per_scale)

    def check_resolution(self, resolution: int) -> None:
        step = 2 ** (self.n_scales - 1)
        if resolution % step or resolution // step < 2:
            raise ValueError(f"resolution {resolution} incompatible with {self.n_scales} scales "
                             f"(needs a multiple of {step} with a coarsest grid of >= 2 cells)")


@dataclass(frozen=True)
class IFNetConfig:
    kind: str                      # "occupancy" | "rgb"
    encoder: EncoderConfig
    resolution: int = 32
    hidden: int = 128
    hidden_layers: int = 3

    def __post_init__(self):
        if self.kind not in ("occupancy", "rgb"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        expected = 1 if self.kind == "occupancy" else 4
        if self.encoder.input_channels != expected:
            raise ValueError(f"{self.kind} model needs {expected} input channels")
        self.encoder.check_resolution(self.resolution)

    @property
    def out_dim(self) -> int:
        return 1 if self.kind == "occupancy" else 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["channels_per_scale"] = list(self.encoder.channels_per_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IFNetConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)

    @classmethod
    def default(cls, kind: str, resolution: int = 32, **kw) -> "IFNetConfig":
        enc_kw = {k: kw.pop(k) for k in ("n_scales", "channels_per_scale", "kernel") if k in kw}
        enc = EncoderConfig(input_channels=1 if kind == "occupancy" else 4, **enc_kw)
        return cls(kind=kind, encoder=enc, resolution=resolution, **kw)


def init_params(cfg: IFNetConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """He-normal weights, zero biases, zero output head (logit 0 / grey at start)."""
    params: dict[str, Tensor] = {}
    enc = cfg.encoder
    k = enc.kernel
    c_prev = enc.input_channels
    for s, c in enumerate(enc.channels_per_scale):
        for j in range(2):
            fan_in = c_prev * k ** 3
            params[f"enc.{s}.conv{j}.weight"] = rng.standard_normal((c, c_prev, k, k, k)) * np.sqrt(2.0 / fan_in)
            params[f"enc.{s}.conv{j}.bias"] = np.zeros(c)
            c_prev = c
    f_prev = enc.feature_dim
    for j in range(cfg.hidden_layers):
        params[f"dec.fc{j}.weight"] = rng.standard_normal((cfg.hidden, f_prev)) * np.sqrt(2.0 / f_prev)
        params[f"dec.fc{j}.bias"] = np.zeros(cfg.hidden)
        f_prev = cfg.hidden
    params["dec.out.weight"] = np.zeros((cfg.out_dim, f_prev))
    params["dec.out.bias"] = np.zeros(cfg.out_dim)
    return {name: T.parameter(arr, name=name) for name, arr in params.items()}


@dataclass
class FeatureGrids:
    grids: list[Tensor]
    bbox: BBox

    @property
    def resolutions(self) -> list[int]:
        return [g.shape[-1] for g in self.grids]


def _as_input(x) -> tuple[np.ndarray, BBox | None]:
    if isinstance(x, VoxelGridStack):
        return x.data, x.bbox
    if isinstance(x, Sequence) and x and isinstance(x[0], VoxelGridStack):
        return np.stack([g.data for g in x]), x[0].bbox
    return np.asarray(x, dtype=np.float64), None


def encode(x, cfg: EncoderConfig, params: dict[str, Tensor], bbox: BBox | None = None) -> FeatureGrids:
    """Multi-scale features: per scale two (conv, ReLU) layers, a max-pool between scales."""
    data, box = _as_input(x)
    box = bbox or box
    if box is None:
        raise ValueError("encode needs a bbox (pass a VoxelGridStack or bbox=...)")
    if data.shape[-4] != cfg.input_channels:
        raise T.ShapeError(f"encoder expects {cfg.input_channels} input channels, got {data.shape[-4]}")
    cfg.check_resolution(data.shape[-1])
    pad = (cfg.kernel - 1) // 2
    h = Tensor(data)
    grids = []
    for s in range(cfg.n_scales):
        if s:
            h = T.maxpool3d(h, 2)
        for j in range(2):
            w = params[f"enc.{s}.conv{j}.weight"]
            if w.shape[1] != h.shape[-4]:
                raise T.ShapeError(f"enc.{s}.conv{j}: weight {w.shape} does not fit input {h.shape}")
            h = T.relu(T.conv3d(h, w, params[f"enc.{s}.conv{j}.bias"], pad))
        grids.append(h)
    return FeatureGrids(grids, box)


def interpolation_matrix(bbox: BBox, resolution: int, points: np.ndarray) -> sp.csr_matrix:
    """Sparse trilinear weights from cell-centre nodes to query points.

    ``points`` is (B, P, 3); the matrix maps a (B * R^3, C) node table to
    (B * P, C) samples.  Coordinates outside the node lattice are clamped to
    its border.
    """
    b, p, _ = points.shape
    r = resolution
    u = (points - bbox.lo_arr) / bbox.size * r - 0.5
    u = np.clip(u, 0.0, r - 1.0)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, r - 2)
    t = u - i0
    rows = np.repeat(np.arange(b * p), 8)
    cols = np.empty((b * p, 8), dtype=np.int64)
    vals = np.empty((b * p, 8))
    base = (np.arange(b)[:, None] * r ** 3).repeat(p, axis=1).reshape(-1)
    i0 = i0.reshape(-1, 3)
    t = t.reshape(-1, 3)
    n = 0
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1.0 - t[:, 0]
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1.0 - t[:, 1]
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1.0 - t[:, 2]
                cols[:, n] = base + ((i0[:, 0] + dx) * r + (i0[:, 1] + dy)) * r + (i0[:, 2] + dz)
                vals[:, n] = wx * wy * wz
                n += 1
    return sp.csr_matrix((vals.reshape(-1), (rows, cols.reshape(-1))), shape=(b * p, b * r ** 3))


def _sample_with(matrix: sp.csr_matrix, grid: Tensor, batched: bool) -> Tensor:
    g = grid.data if batched else grid.data[None]
    b, c = g.shape[:2]
    r3 = int(np.prod(g.shape[2:]))
    table = g.reshape(b, c, r3).transpose(0, 2, 1).reshape(b * r3, c)
    out = np.asarray(matrix @ table)
    p = out.shape[0] // b
    out = out.reshape(b, p, c)
    spatial = g.shape[2:]

    def backward(gout):
        gt = np.asarray(matrix.T @ gout.reshape(b * p, c))
        gg = gt.reshape(b, r3, c).transpose(0, 2, 1).reshape(b, c, *spatial)
        return (gg if batched else gg[0],)

    return T.make_node(out if batched else out[0], (grid,), backward)


def _points_array(points, batched: bool) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if batched:
        return pts.reshape(pts.shape[0], -1, 3)
    return pts.reshape(1, -1, 3)


def trilinear_sample(grid, bbox: BBox, points) -> Tensor:
    """Sample a (C, D, D, D) or (B, C, D, D, D) grid at world-space points.

    Points are (P, 3) (or a single xyz) for an unbatched grid and (B, P, 3)
    for a batched one; the result is (P, C) / (B, P, C), or (C,) for a single
    xyz.  Differentiable with respect to the grid values.
    """
    grid = grid if isinstance(grid, Tensor) else Tensor(grid)
    batched = grid.ndim == 5
    single = not batched and np.ndim(points) == 1
    pts = _points_array(points, batched)
    m = interpolation_matrix(bbox, grid.shape[-1], pts)
    out = _sample_with(m, grid, batched)
    return T.reshape(out, (grid.shape[-4],)) if single else out


def query(g: FeatureGrids, x, points) -> Tensor:
    """Point encoding: raw input features followed by every scale, in scale order.

    Returns (P, F) for unbatched input or (B, P, F) for a batch.
    """
    data, _ = _as_input(x)
    batched = data.ndim == 5
    pts = _points_array(points, batched)
    mats: dict[int, sp.csr_matrix] = {}

    def mat(res):
        if res not in mats:
            mats[res] = interpolation_matrix(g.bbox, res, pts)
        return mats[res]

    parts = [_sample_with(mat(data.shape[-1]), Tensor(data), batched)]
    parts += [_sample_with(mat(grid.shape[-1]), grid, batched) for grid in g.grids]
    return T.concat(parts, axis=-1)


def _mlp(feat: Tensor, params: dict[str, Tensor]) -> Tensor:
    lead = feat.shape[:-1]
    h = T.reshape(feat, (-1, feat.shape[-1]))
    j = 0
    while f"dec.fc{j}.weight" in params:
        w = params[f"dec.fc{j}.weight"]
        if w.shape[1] != h.shape[1]:
            raise T.ShapeError(f"dec.fc{j}: expects features of length {w.shape[1]}, got {h.shape[1]}")
        h = T.relu(T.linear(h, w, params[f"dec.fc{j}.bias"]))
        j += 1
    out = T.linear(h, params["dec.out.weight"], params["dec.out.bias"])
    return T.reshape(out, (*lead, out.shape[-1]))


def decode_rgb(feat: Tensor, params: dict[str, Tensor]) -> Tensor:
    """rgb in (0, 1) per point, shape (..., 3)."""
    return T.sigmoid(_mlp(feat, params))


def decode_occupancy(feat: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Occupancy logit per point, shape (...)."""
    out = _mlp(feat, params)
    return T.reshape(out, out.shape[:-1])


class IFNet:
    """A configuration plus its named parameters."""

    def __init__(self, cfg: IFNetConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        expected = init_params(cfg, np.random.default_rng(0))
        for name, p in expected.items():
            if name not in params or params[name].shape != p.shape:
                got = params[name].shape if name in params else None
                raise T.ShapeError(f"parameter {name}: expected shape {p.shape}, got {got}")

    @classmethod
    def create(cls, cfg: IFNetConfig, seed: int = 0) -> "IFNet":
        return cls(cfg, init_params(cfg, np.random.default_rng(seed)))

    def forward(self, x, points, bbox: BBox | None = None) -> Tensor:
        """Logits (..., P) for the geometry model, rgb (..., P, 3) for the texture model."""
        data, box = _as_input(x)
        if data.shape[-1] != self.cfg.resolution:
            raise ValueError(f"model trained at R={self.cfg.resolution}, input has R={data.shape[-1]}")
        g = encode(data, self.cfg.encoder, self.params, bbox=bbox or box)
        feat = query(g, data, points)
        if self.cfg.kind == "rgb":
            return decode_rgb(feat, self.params)
        return decode_occupancy(feat, self.params)

    def predict(self, x: VoxelGridStack, points, chunk: int = 65536) -> np.ndarray:
        """Inference over many points of one input; the encoder runs once."""
        if x.resolution != self.cfg.resolution:
            raise ValueError(f"model trained at R={self.cfg.resolution}, input has R={x.resolution}")
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        with T.no_grad():
            g = encode(x, self.cfg.encoder, self.params)
            outs = []
            for s in range(0, len(pts), chunk):
                feat = query(g, x, pts[s:s + chunk])
                dec = decode_rgb if self.cfg.kind == "rgb" else decode_occupancy
                outs.append(dec(feat, self.params).data)
        if not outs:
            return np.zeros((0, 3) if self.cfg.kind == "rgb" else (0,))
        return np.concatenate(outs)

    def header(self) -> dict:
        return {"model": self.cfg.to_dict()}

    def save(self, path, adam: T.AdamState | None = None, extra: dict | None = None) -> None:
        T.save_checkpoint(path, self.params, adam, {**self.header(), **(extra or {})})

    @classmethod
    def load(cls, path) -> tuple["IFNet", T.AdamState | None, dict]:
        params, adam, header = T.load_checkpoint(path)
        if "model" not in header:
            raise T.CheckpointError(f"{path}: checkpoint header carries no model configuration")
        return cls(IFNetConfig.from_dict(header["model"]), params), adam, header
