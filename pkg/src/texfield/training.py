"""Example construction and mini-batch training for both models.

All randomness inside :func:`train` is keyed by ``(seed, epoch)`` or
``(seed, step)``, so a run resumed from a checkpoint replays the exact same
batches and point subsets as an uninterrupted one.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .ifnet import IFNet, IFNetConfig
from .mesh_io import BBox, TexturedMesh
from .sampling import (OccupancySamplingConfig, PointSampleSet, sample_colors, sample_occupancy,
                       sample_surface)
from .voxel import VoxelGridStack, stack_input, voxelize_colored, voxelize_occupancy

log = logging.getLogger(__name__)

DEFAULT_SURFACE_POINTS = 30_000


@dataclass
class TrainExample:
    input: VoxelGridStack
    samples: PointSampleSet


@dataclass
class TrainBatch:
    inputs: list[VoxelGridStack]
    point_sets: list[PointSampleSet]

    def __post_init__(self):
        if not self.inputs or len(self.inputs) != len(self.point_sets):
            raise ValueError("a batch needs one point set per input and at least one item")
        shapes = {g.data.shape for g in self.inputs}
        if len(shapes) != 1:
            raise ValueError(f"batch inputs disagree in shape: {shapes}")
        sizes = {len(s) for s in self.point_sets}
        if 0 in sizes or len(sizes) != 1:
            raise ValueError("every point set must be non-empty and of equal size")

    def stacked(self):
        x = np.stack([g.data for g in self.inputs])
        pts = np.stack([s.points for s in self.point_sets])
        labels = np.stack([s.labels for s in self.point_sets]).astype(np.float64)
        return x, pts, labels


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1
    points_per_item: int = 4096
    steps: int = 1000
    lr: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        for name in ("batch_size", "points_per_item", "steps", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


# ---------------------------------------------------------------------------
# examples

def make_texture_example(full: TexturedMesh, partial: TexturedMesh, bbox: BBox, resolution: int,
                         n_points: int, rng: np.random.Generator,
                         surface_points: int = DEFAULT_SURFACE_POINTS) -> TrainExample:
    """4-channel input (partial colours + complete geometry) and colour labels on the complete surface."""
    colored = sample_colors(partial, surface_points, rng)
    geo_pts, _, _ = sample_surface(full, surface_points, rng)
    x = stack_input(voxelize_colored(colored.points, colored.labels, bbox, resolution),
                    voxelize_occupancy(geo_pts, bbox, resolution))
    return TrainExample(x, sample_colors(full, n_points, rng))


def make_geometry_example(full: TexturedMesh, partial: TexturedMesh, bbox: BBox, resolution: int,
                          cfg: OccupancySamplingConfig, rng: np.random.Generator,
                          surface_points: int = DEFAULT_SURFACE_POINTS) -> TrainExample:
    """1-channel partial-surface input and occupancy labels around the complete surface."""
    pts, _, _ = sample_surface(partial, surface_points, rng)
    return TrainExample(voxelize_occupancy(pts, bbox, resolution), sample_occupancy(full, cfg, rng))


# ---------------------------------------------------------------------------
# losses and steps

def texture_loss(net: IFNet, batch: TrainBatch) -> T.Tensor:
    """Sum over items and points of the L1 colour error."""
    x, pts, labels = batch.stacked()
    pred = net.forward(x, pts, bbox=batch.inputs[0].bbox)
    return T.l1_loss(pred, T.Tensor(labels))


def geometry_loss(net: IFNet, batch: TrainBatch) -> T.Tensor:
    x, pts, labels = batch.stacked()
    logits = net.forward(x, pts, bbox=batch.inputs[0].bbox)
    return T.bce_loss(logits, T.Tensor(labels))


def _step(loss_fn, batch: TrainBatch, net: IFNet, opt: T.Adam) -> float:
    opt.zero_grad()
    loss = loss_fn(net, batch)
    value = loss.item()
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} at optimiser step {opt.state.step_count + 1}; "
                                 f"param norms: " + ", ".join(
                                     f"{k}={np.linalg.norm(p.data):.3g}" for k, p in net.params.items()))
    loss.backward()
    opt.step()
    return value


def train_step_texture(batch: TrainBatch, net: IFNet, opt: T.Adam) -> float:
    """One Adam step on the L1 colour loss; returns the loss before the update."""
    return _step(texture_loss, batch, net, opt)


def train_step_geometry(batch: TrainBatch, net: IFNet, opt: T.Adam) -> float:
    """One Adam step on the occupancy BCE; returns the loss before the update."""
    return _step(geometry_loss, batch, net, opt)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    checkpoint: Path
    trace: list[tuple[int, float, float]] = field(default_factory=list)
    net: IFNet | None = None


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0]).permutation(n)


def _epoch_subset(seed: int, epoch: int, item: int, n_points: int, sub_sample: int | None) -> np.ndarray:
    if sub_sample is None or sub_sample >= n_points:
        return np.arange(n_points)
    rng = np.random.default_rng([seed, epoch, 1, item])
    return np.sort(rng.choice(n_points, size=sub_sample, replace=False))


def batch_for_step(dataset: Sequence[TrainExample], cfg: TrainConfig, step: int,
                   sub_sample: int | None = None) -> TrainBatch:
    """The batch consumed at 1-based ``step``; a pure function of (dataset, cfg, step)."""
    n = len(dataset)
    inputs, sets = [], []
    for slot in range(cfg.batch_size):
        q = (step - 1) * cfg.batch_size + slot
        epoch, pos = divmod(q, n)
        item = int(_epoch_order(cfg.seed, epoch, n)[pos])
        ex = dataset[item]
        subset = _epoch_subset(cfg.seed, epoch, item, len(ex.samples), sub_sample)
        rng = np.random.default_rng([cfg.seed, step, 2, slot])
        k = min(cfg.points_per_item, len(subset))
        pick = subset[rng.choice(len(subset), size=k, replace=False)]
        inputs.append(ex.input)
        sets.append(ex.samples.take(pick))
    return TrainBatch(inputs, sets)


def _write_trace(path: Path, trace) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "mean_loss"])
        for step, loss, mean in trace:
            w.writerow([step, repr(loss), repr(mean)])
    tmp.replace(path)


def read_trace(path) -> list[tuple[int, float, float]]:
    with Path(path).open(encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["step"]), float(r["loss"]), float(r["mean_loss"])) for r in rows]


def train(dataset: Sequence[TrainExample], cfg: TrainConfig, mode: str, out_dir,
          model_cfg: IFNetConfig | None = None,
          sampling: OccupancySamplingConfig | None = None,
          resume=None) -> TrainResult:
    """Train a geometry (``mode="geometry"``) or texture (``mode="texture"``) model.

    Writes ``trace.csv``, periodic ``ckpt_<step>.ifck`` files and the final
    ``model.ifck`` into ``out_dir``.  With ``resume`` set to a checkpoint
    written by an earlier call, training continues from its step.
    """
    if mode not in ("geometry", "texture"):
        raise ValueError(f"unknown training mode {mode!r}")
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kind = "occupancy" if mode == "geometry" else "rgb"
    res = dataset[0].input.resolution
    sub_sample = (sampling or OccupancySamplingConfig()).sub_sample if mode == "geometry" else None

    trace: list[tuple[int, float, float]] = []
    if resume is not None:
        net, adam, header = IFNet.load(resume)
        if net.cfg.kind != kind:
            raise ValueError(f"checkpoint {resume} holds a {net.cfg.kind} model, not {kind}")
        start = int(header["train"]["step"])
        trace_path = out_dir / "trace.csv"
        if trace_path.exists():
            trace = [row for row in read_trace(trace_path) if row[0] <= start]
        opt = T.Adam(net.params, state=adam or T.AdamState(lr=cfg.lr))
    else:
        model_cfg = model_cfg or IFNetConfig.default(kind, res)
        if model_cfg.kind != kind:
            raise ValueError(f"model config kind {model_cfg.kind!r} does not match mode {mode!r}")
        net = IFNet.create(model_cfg, seed=cfg.seed)
        opt = T.Adam(net.params, lr=cfg.lr)
        start = 0
    if net.cfg.resolution != res:
        raise ValueError(f"model resolution {net.cfg.resolution} != data resolution {res}")

    step_fn = train_step_geometry if mode == "geometry" else train_step_texture
    trace_path = out_dir / "trace.csv"

    def checkpoint(step: int, path: Path) -> None:
        net.save(path, opt.state, {"train": {"step": step, "mode": mode, "config": asdict(cfg)}})

    for step in range(start + 1, cfg.steps + 1):
        batch = batch_for_step(dataset, cfg, step, sub_sample)
        loss = step_fn(batch, net, opt)
        n_pts = sum(len(s) for s in batch.point_sets)
        trace.append((step, loss, loss / n_pts if mode == "texture" else loss))
        if step % cfg.checkpoint_every == 0 or step == cfg.steps:
            checkpoint(step, out_dir / f"ckpt_{step:06d}.ifck")
            _write_trace(trace_path, trace)
            log.info("%s step %d loss %.6g", mode, step, trace[-1][2])

    final = out_dir / "model.ifck"
    checkpoint(cfg.steps, final)
    _write_trace(trace_path, trace)
    return TrainResult(final, trace, net)
