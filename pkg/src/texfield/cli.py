"""Command-line entry point: prepare, train, reconstruct, selftest.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .ifnet import IFNet, IFNetConfig
from .mesh_io import (BBox, ColoredMesh, Normalization, human_bbox, load_obj, normalize_object,
                      save_colored_ply, save_obj, unit_bbox)
from .reconstruct import (ReconstructConfig, ReconstructionError, geometry_input, reconstruct_full,
                          save_field, evaluate_field, texture_input)
from .sampling import (HoleSpec, OccupancySamplingConfig, derive_seed, load_pset, sample_colors,
                       sample_occupancy, save_pset, synthesize_partial)
from .training import TrainConfig, TrainExample, train

log = logging.getLogger("texfield")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DEFAULT_COLOR_SAMPLES = 100_000


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run manifest

def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    wall_time: float = 0.0
    git_describe: str = ""

    def write(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        tmp.replace(path)


def _manifest(args, inputs, outputs, t0) -> RunManifest:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "required")}
    return RunManifest(args.command, cfg, int(getattr(args, "seed", 0) or 0),
                       [str(p) for p in inputs], [str(p) for p in outputs],
                       time.perf_counter() - t0, git_describe())


# ---------------------------------------------------------------------------
# helpers

def _triple(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in str(text).split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def resolve_bbox(kind: str, lo=None, hi=None) -> BBox:
    if kind == "human":
        return human_bbox()
    if kind == "unit":
        return unit_bbox()
    if kind == "custom":
        if lo is None or hi is None:
            raise UsageError("--bbox custom needs --bbox-min and --bbox-max")
        return BBox(tuple(lo), tuple(hi))
    raise UsageError(f"unknown bbox {kind!r}")


def worker_count(n_jobs: int) -> int:
    env = os.environ.get("TEXFIELD_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer TEXFIELD_THREADS=%r", env)
    return max(1, min(cap, n_jobs))


# ---------------------------------------------------------------------------
# prepare

def _prepare_one(path: Path, index: int, args, out_dir: Path) -> list[Path]:
    mesh = load_obj(path)
    if mesh.n_faces == 0:
        raise ValueError("mesh has no faces")
    norm = None
    if args.bbox == "unit":
        mesh, norm = normalize_object(mesh)
    bbox = resolve_bbox(args.bbox, args.bbox_min, args.bbox_max)
    shape_seed = derive_seed(args.seed, index)
    dest = out_dir / path.stem
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    full_path = dest / "full.obj"
    save_obj(mesh, full_path)
    written.append(full_path)
    for v in range(args.variants):
        seed = int(np.random.SeedSequence([shape_seed, v]).generate_state(1)[0])
        spec = HoleSpec(args.holes, (args.radius_min, args.radius_max), seed)
        part = synthesize_partial(mesh, spec)
        p = dest / f"partial_{v:02d}.obj"
        save_obj(part, p)
        written.append(p)
    rng = np.random.default_rng([shape_seed, 1])
    occ_cfg = OccupancySamplingConfig(total_points=args.occupancy_points,
                                      sub_sample=min(args.sub_sample, args.occupancy_points))
    save_pset(sample_occupancy(mesh, occ_cfg, rng), dest / "occupancy.pset")
    written.append(dest / "occupancy.pset")
    if mesh.atlas is not None:
        save_pset(sample_colors(mesh, args.color_points, rng), dest / "color.pset")
        written.append(dest / "color.pset")
    else:
        log.warning("%s: no texture atlas, color samples skipped", path)
    meta = {"source": str(path), "bbox": bbox.as_list(), "seed": shape_seed,
            "normalization": None if norm is None else {"center": list(norm.center), "scale": norm.scale},
            "variants": args.variants, "sub_sample": occ_cfg.sub_sample}
    (dest / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(dest / "meta.json")
    return written


def cmd_prepare(args) -> int:
    t0 = time.perf_counter()
    in_dir, out_dir = Path(args.input_dir), Path(args.out_dir)
    if not in_dir.is_dir():
        raise UsageError(f"--input-dir {in_dir} is not a directory")
    if args.variants < 1 or args.holes < 1:
        raise UsageError("--variants and --holes must be >= 1")
    if not 0 < args.radius_min <= args.radius_max:
        raise UsageError("need 0 < --radius-min <= --radius-max")
    meshes = sorted(in_dir.glob("*.obj"))
    if not meshes:
        log.error("no .obj files in %s", in_dir)
        return EXIT_FAIL
    out_dir.mkdir(parents=True, exist_ok=True)

    def job(item):
        i, path = item
        try:
            return path, _prepare_one(path, i, args, out_dir), None
        except Exception as exc:  # noqa: BLE001 - skipped and reported
            return path, [], exc

    with ThreadPoolExecutor(max_workers=worker_count(len(meshes))) as pool:
        results = list(pool.map(job, enumerate(meshes)))
    outputs, ok = [], 0
    for path, written, exc in results:
        if exc is not None:
            log.error("skipping %s: %s: %s", path, type(exc).__name__, exc)
        else:
            ok += 1
            outputs += written
            log.info("prepared %s (%d files)", path.name, len(written))
    _manifest(args, meshes, outputs, t0).write(out_dir / "manifest.json")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# train

def load_dataset(data_dir: Path, mode: str, resolution: int, seed: int,
                 surface_points: int) -> tuple[list[TrainExample], BBox, int]:
    """One example per partial scan found under the prepared ``data_dir``."""
    shape_dirs = sorted(p.parent for p in data_dir.glob("*/meta.json"))
    if not shape_dirs:
        raise FileNotFoundError(f"no prepared shapes (*/meta.json) under {data_dir}")
    examples, bbox, sub_sample = [], None, None
    for s, d in enumerate(shape_dirs):
        meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
        box = BBox.from_list(meta["bbox"])
        if bbox is not None and box != bbox:
            raise ValueError(f"{d}: bbox {box} differs from {bbox} used by earlier shapes")
        bbox = box
        sub_sample = meta.get("sub_sample")
        samples = load_pset(d / ("occupancy.pset" if mode == "geometry" else "color.pset"))
        full = load_obj(d / "full.obj") if mode == "texture" else None
        for v, part_path in enumerate(sorted(d.glob("partial_*.obj"))):
            part = load_obj(part_path)
            rng = np.random.default_rng([seed, s, v])
            if mode == "geometry":
                x = geometry_input(part, bbox, resolution, surface_points, rng)
            else:
                x = texture_input(part, full, bbox, resolution, surface_points, rng)
            examples.append(TrainExample(x, samples))
    return examples, bbox, sub_sample or OccupancySamplingConfig().sub_sample


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    if args.data is None:
        raise UsageError("--data is required")
    if args.mode is None:
        raise UsageError("--mode is required")
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise UsageError(f"--data {data_dir} is not a directory")
    out = Path(args.ckpt_out)
    dataset, bbox, sub_sample = load_dataset(data_dir, args.mode, args.res, args.seed, args.surface_points)
    log.info("loaded %d examples from %s", len(dataset), data_dir)
    cfg = TrainConfig(batch_size=args.batch_size, points_per_item=args.points, steps=args.steps,
                      lr=args.lr, seed=args.seed, checkpoint_every=args.checkpoint_every or args.steps)
    kind = "occupancy" if args.mode == "geometry" else "rgb"
    model_cfg = IFNetConfig.default(kind, args.res)
    sampling = OccupancySamplingConfig(sub_sample=sub_sample)
    res = train(dataset, cfg, args.mode, out, model_cfg=model_cfg, sampling=sampling, resume=args.resume)
    _manifest(args, [data_dir], [res.checkpoint, out / "trace.csv"], t0).write(out / "manifest.json")
    log.info("final loss %.6g -> %s", res.trace[-1][2] if res.trace else float("nan"), res.checkpoint)
    return EXIT_OK


# ---------------------------------------------------------------------------
# reconstruct

def _load_model(path: str, expect: str, role: str) -> IFNet:
    try:
        net, _, _ = IFNet.load(path)
    except (T.CheckpointError, T.ShapeError, OSError, KeyError, ValueError) as exc:
        raise ReconstructionError(f"load-{role}-model", exc) from exc
    if net.cfg.kind != expect:
        raise ReconstructionError(f"load-{role}-model", ValueError(
            f"{path} holds a {net.cfg.kind!r} model, expected {expect!r}; config {net.cfg.to_dict()}"))
    return net


def check_compatible(geo: IFNet, tex: IFNet | None) -> None:
    if tex is None:
        return
    if geo.cfg.resolution != tex.cfg.resolution:
        raise ReconstructionError("load-texture-model", ValueError(
            "geometry and texture checkpoints disagree on input resolution: "
            f"geometry config {geo.cfg.to_dict()} vs texture config {tex.cfg.to_dict()}"))


def cmd_reconstruct(args) -> int:
    t0 = time.perf_counter()
    partial = load_obj(args.partial)
    norm: Normalization | None = None
    if args.bbox == "unit":
        partial, norm = normalize_object(partial)
    bbox = resolve_bbox(args.bbox, args.bbox_min, args.bbox_max)
    geo = _load_model(args.geo_ckpt, "occupancy", "geometry")
    tex = _load_model(args.tex_ckpt, "rgb", "texture") if args.tex_ckpt else None
    check_compatible(geo, tex)
    cfg = ReconstructConfig(bbox=bbox, eval_resolution=args.res_eval, iso=args.iso,
                            surface_points=args.surface_points, seed=args.seed, chunk=args.chunk)
    mesh = reconstruct_full(partial, geo, tex, cfg)
    if args.field_out:
        x = geometry_input(partial, bbox, geo.cfg.resolution, cfg.surface_points,
                           np.random.default_rng(cfg.seed))
        save_field(evaluate_field(geo, x, cfg.eval_resolution, cfg.chunk), args.field_out)
    if norm is not None:
        mesh = ColoredMesh(norm.invert(mesh.vertices), mesh.faces, mesh.colors)
    if mesh.faces.shape[0] == 0:
        log.warning("reconstruction is empty (no iso crossing in the field)")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    save_colored_ply(mesh, tmp)
    tmp.replace(out)
    outputs = [out] + ([Path(args.field_out)] if args.field_out else [])
    inputs = [args.partial, args.geo_ckpt] + ([args.tex_ckpt] if args.tex_ckpt else [])
    _manifest(args, inputs, outputs, t0).write(out.with_name(out.name + ".manifest.json"))
    log.info("wrote %s: %d vertices, %d faces", out, len(mesh.vertices), len(mesh.faces))
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest

def cmd_selftest(args) -> int:
    from .selftest import run_all

    t0 = time.perf_counter()
    if args.inject_fault:
        with T.inject_fault(args.inject_fault):
            results = run_all(args.seed)
    else:
        results = run_all(args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.ok]
    total = time.perf_counter() - t0
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {total:.1f}s"
          + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def read_config_file(path) -> dict[str, str]:
    """``key=value`` lines; keys mirror long flag names with or without dashes."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _bbox_flags(p: argparse.ArgumentParser, default: str) -> None:
    p.add_argument("--bbox", choices=["human", "unit", "custom"], default=default)
    p.add_argument("--bbox-min", type=_triple, default=None, help="x,y,z for --bbox custom")
    p.add_argument("--bbox-max", type=_triple, default=None, help="x,y,z for --bbox custom")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="texfield", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value file; explicit flags win")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("prepare", help="synthesize partial scans and sample sets")
    common(p)
    p.add_argument("--input-dir", default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--holes", type=int, default=3)
    p.add_argument("--radius-min", type=float, default=0.05)
    p.add_argument("--radius-max", type=float, default=0.15)
    p.add_argument("--variants", type=int, default=4)
    p.add_argument("--occupancy-points", type=int, default=OccupancySamplingConfig().total_points)
    p.add_argument("--sub-sample", type=int, default=OccupancySamplingConfig().sub_sample)
    p.add_argument("--color-points", type=int, default=DEFAULT_COLOR_SAMPLES)
    _bbox_flags(p, "human")
    p.set_defaults(func=cmd_prepare, required=("input_dir", "out_dir"))

    p = sub.add_parser("train", help="train a geometry or texture model")
    common(p)
    p.add_argument("--mode", choices=["geometry", "texture"], default=None)
    p.add_argument("--data", default=None, help="directory written by `prepare`")
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--ckpt-out", default="checkpoints")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--points", type=int, default=4096, help="query points per item per step")
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--surface-points", type=int, default=30_000)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train, required=("mode", "data"))

    p = sub.add_parser("reconstruct", help="complete a partial scan")
    common(p)
    p.add_argument("--partial", default=None)
    p.add_argument("--geo-ckpt", default=None)
    p.add_argument("--tex-ckpt", default=None)
    p.add_argument("--res-eval", type=int, default=64)
    p.add_argument("--iso", type=float, default=0.5)
    p.add_argument("--surface-points", type=int, default=30_000)
    p.add_argument("--chunk", type=int, default=65536)
    p.add_argument("--field-out", default=None, help="optional FELD dump of the occupancy field")
    p.add_argument("--out", default=None)
    _bbox_flags(p, "human")
    p.set_defaults(func=cmd_reconstruct, required=("partial", "geo_ckpt", "out"))

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    common(p)
    p.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest, required=())
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    subparser = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    if args.config:
        try:
            values = read_config_file(args.config)
        except (OSError, UsageError) as exc:
            parser.error(str(exc))
        known = {a.dest for a in subparser._actions}  # noqa: SLF001
        unknown = sorted(set(values) - known)
        if unknown:
            subparser.error(f"unknown config keys: {', '.join(unknown)}")
        # string defaults go through each flag's type conversion on re-parse
        subparser.set_defaults(**{k: v for k, v in values.items() if k != "config"})
        args = parser.parse_args(argv)
    missing = [k for k in args.required if getattr(args, k) is None]
    if missing:
        subparser.error("missing required: " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("usage: %s", exc)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported, exit 1
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
