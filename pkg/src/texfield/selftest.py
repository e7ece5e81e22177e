"""Built-in verification suite: every check compares against an independent oracle."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .gradcheck import layer_checks, network_checks
from .mesh_io import unit_bbox
from .shapes import box_mesh, sphere_field, uv_sphere

GRAD_TOL = 1e-4
TRILINEAR_TOL = 1e-9
L1_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.2f}s)"


def check_gradients(seed: int = 0) -> list[CheckResult]:
    out = []
    t0 = time.perf_counter()
    errs = {**layer_checks(seed), **network_checks(seed)}
    dt = time.perf_counter() - t0
    for name, err in errs.items():
        out.append(CheckResult(f"grad/{name}", err < GRAD_TOL, f"max rel err {err:.2e}", dt / len(errs)))
    return out


def linear_field(p: np.ndarray) -> np.ndarray:
    return 2 * p[..., 0] - p[..., 1] + 3 * p[..., 2] + 1


def trilinear_error(n_points: int = 100, resolution: int = 8, seed: int = 0) -> float:
    """Max deviation of trilinear queries from an affine field sampled on the grid nodes."""
    from .ifnet import trilinear_sample
    from .voxel import cell_centers

    bbox = unit_bbox()
    grid = linear_field(cell_centers(bbox, resolution))[None]
    # interior: between the outermost node centres, where no clamping applies
    h = 0.5 / resolution
    pts = np.random.default_rng(seed).uniform(-0.5 + h, 0.5 - h, (n_points, 3))
    got = trilinear_sample(T.Tensor(grid), bbox, pts).data[:, 0]
    return float(np.max(np.abs(got - linear_field(pts))))


def l1_oracle_error(seed: int = 0, batch: int = 2, n_points: int = 64) -> float:
    """Vectorised L1 loss versus an explicit triple loop."""
    rng = np.random.default_rng(seed)
    pred = rng.random((batch, n_points, 3))
    target = rng.random((batch, n_points, 3))
    fast = T.l1_loss(T.Tensor(pred), T.Tensor(target)).item()
    slow = 0.0
    for b in range(batch):
        for p in range(n_points):
            for c in range(3):
                slow += abs(pred[b, p, c] - target[b, p, c])
    return abs(fast - slow)


def mc_sphere_stats(radius: float = 0.35, resolution: int = 64) -> dict:
    from .reconstruct import ScalarField, is_watertight, marching_cubes, mesh_area, mesh_volume

    t0 = time.perf_counter()
    mesh = marching_cubes(ScalarField(sphere_field(resolution, radius), unit_bbox()))
    return {
        "watertight": is_watertight(mesh),
        "area_ratio": mesh_area(mesh) / (4 * np.pi * radius ** 2),
        "volume_ratio": mesh_volume(mesh) / (4 / 3 * np.pi * radius ** 3),
        "seconds": time.perf_counter() - t0,
        "faces": mesh.n_faces,
    }


def occupancy_agreement(n: int = 10_000, margin: float = 0.01, seed: int = 0) -> dict[str, float]:
    """Fraction of points off the surface by ``> margin`` where ray parity matches the analytic test."""
    from .sampling import occupancy_label

    rng = np.random.default_rng(seed)
    out = {}
    r = 0.35
    pts = rng.uniform(-0.5, 0.5, (4 * n, 3))
    d = np.linalg.norm(pts, axis=1)
    pts = pts[np.abs(d - r) > margin][:n]
    truth = np.linalg.norm(pts, axis=1) < r
    out["sphere"] = float(np.mean(occupancy_label(uv_sphere(r), pts).astype(bool) == truth))

    lo, hi = np.array([-0.3, -0.2, -0.25]), np.array([0.3, 0.2, 0.25])
    pts = rng.uniform(-0.5, 0.5, (4 * n, 3))
    inside = np.all((pts > lo) & (pts < hi), axis=1)
    # distance to the box boundary, inside or outside
    outside_d = np.linalg.norm(np.maximum(np.maximum(lo - pts, pts - hi), 0), axis=1)
    inside_d = np.min(np.minimum(pts - lo, hi - pts), axis=1)
    dist = np.where(inside, inside_d, outside_d)
    keep = dist > margin
    pts, truth = pts[keep][:n], inside[keep][:n]
    out["box"] = float(np.mean(occupancy_label(box_mesh(lo, hi, subdiv=2), pts).astype(bool) == truth))
    return out


def run_all(seed: int = 0) -> list[CheckResult]:
    results = check_gradients(seed)

    t0 = time.perf_counter()
    err = trilinear_error(seed=seed)
    results.append(CheckResult("trilinear", err < TRILINEAR_TOL, f"max abs err {err:.2e}",
                               time.perf_counter() - t0))

    t0 = time.perf_counter()
    err = l1_oracle_error(seed)
    results.append(CheckResult("l1-oracle", err < L1_TOL, f"abs diff {err:.2e}", time.perf_counter() - t0))

    mc = mc_sphere_stats()
    ok = mc["watertight"] and abs(mc["area_ratio"] - 1) < 0.05 and abs(mc["volume_ratio"] - 1) < 0.05
    results.append(CheckResult("marching-cubes-sphere", ok,
                               f"watertight={mc['watertight']} area={mc['area_ratio']:.4f} "
                               f"volume={mc['volume_ratio']:.4f}", mc["seconds"]))

    t0 = time.perf_counter()
    agree = occupancy_agreement(seed=seed)
    results.append(CheckResult("occupancy-oracle", min(agree.values()) >= 0.99,
                               " ".join(f"{k}={v:.4f}" for k, v in agree.items()), time.perf_counter() - t0))
    return results
