"""Central finite-difference checks of the reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .mesh_io import unit_bbox

H = 1e-5
REL_FLOOR = 1e-6


def rel_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor absorbs round-off on zero gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


KINK_TOL = 1e-6


def _central(loss_fn, flat: np.ndarray, i: int, h: float) -> float:
    orig = flat[i]
    flat[i] = orig + h
    up = loss_fn().item()
    flat[i] = orig - h
    down = loss_fn().item()
    flat[i] = orig
    return (up - down) / (2 * h)


def max_rel_error(loss_fn: Callable[[], T.Tensor], tensors: Mapping[str, T.Tensor],
                  rng: np.random.Generator, n_probe: int = 6, h: float = H) -> dict[str, float]:
    """Compare analytic and central-difference gradients on ``n_probe`` random entries per tensor.

    ReLU, max-pool and L1 make the loss piecewise smooth.  An entry whose
    ``[-h, h]`` stencil straddles a kink has no meaningful finite difference;
    such entries are recognised because the central difference at ``h``
    disagrees with the one at ``h / 10`` (both agree to O(h^2) on a smooth
    piece) and another entry is drawn in their place.  Only forward
    evaluations enter this test, so it cannot mask a wrong backward pass.
    """
    for t in tensors.values():
        t.grad = None
    loss_fn().backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros(t.shape)) for k, t in tensors.items()}
    out = {}
    with T.no_grad():
        for name, t in tensors.items():
            flat = t.data.reshape(-1)
            order = rng.permutation(flat.size)
            errs, fallback = [], []
            for i in order[:4 * n_probe]:
                num = _central(loss_fn, flat, i, h)
                fine = _central(loss_fn, flat, i, h / 10)
                err = float(rel_error(analytic[name].reshape(-1)[i], num))
                if rel_error(num, fine) > KINK_TOL:
                    fallback.append(err)
                    continue
                errs.append(err)
                if len(errs) == n_probe:
                    break
            # a tensor with no smooth entry at all is reported as measured
            out[name] = float(np.max(errs if errs else fallback))
    return out


def _weighted(rng, shape):
    # random linear functional so every output element matters
    w = T.Tensor(rng.standard_normal(shape))
    return lambda y: T.sum_all(T.mul(y, w))


def layer_checks(seed: int = 0, n_probe: int = 6) -> dict[str, float]:
    """Max relative error per layer on small random inputs."""
    from .ifnet import trilinear_sample

    rng = np.random.default_rng(seed)
    res: dict[str, float] = {}

    x = T.parameter(rng.standard_normal((2, 5, 4, 6)))
    w = T.parameter(rng.standard_normal((3, 2, 3, 3, 3)) * 0.3)
    b = T.parameter(rng.standard_normal(3))
    f = _weighted(rng, (3, 5, 4, 6))
    res["conv3d"] = max(max_rel_error(lambda: f(T.conv3d(x, w, b, 1)), {"x": x, "w": w, "b": b},
                                      rng, n_probe).values())

    # only one entry per window gets gradient, so probe them all
    xp = T.parameter(rng.standard_normal((2, 2, 4, 4)))
    f = _weighted(rng, (2, 1, 2, 2))
    res["maxpool3d"] = max(max_rel_error(lambda: f(T.maxpool3d(xp)), {"x": xp}, rng, xp.data.size).values())

    xl = T.parameter(rng.standard_normal((5, 4)))
    wl = T.parameter(rng.standard_normal((3, 4)))
    bl = T.parameter(rng.standard_normal(3))
    f = _weighted(rng, (5, 3))
    res["linear"] = max(max_rel_error(lambda: f(T.linear(xl, wl, bl)), {"x": xl, "w": wl, "b": bl},
                                      rng, n_probe).values())

    xr = T.parameter(rng.standard_normal((4, 5)))
    f = _weighted(rng, (4, 5))
    res["relu"] = max(max_rel_error(lambda: f(T.relu(xr)), {"x": xr}, rng, n_probe).values())
    res["sigmoid"] = max(max_rel_error(lambda: f(T.sigmoid(xr)), {"x": xr}, rng, n_probe).values())

    pred = T.parameter(rng.random((2, 3, 3)))
    target = T.Tensor(rng.random((2, 3, 3)))
    res["l1_loss"] = max(max_rel_error(lambda: T.l1_loss(pred, target), {"pred": pred}, rng, n_probe).values())

    logits = T.parameter(rng.standard_normal((2, 6)) * 2)
    labels = T.Tensor(rng.integers(0, 2, (2, 6)).astype(float))
    res["bce_loss"] = max(max_rel_error(lambda: T.bce_loss(logits, labels), {"logits": logits},
                                        rng, n_probe).values())

    grid = T.parameter(rng.standard_normal((3, 4, 4, 4)))
    pts = rng.uniform(-0.6, 0.6, (7, 3))
    f = _weighted(rng, (7, 3))
    res["trilinear"] = max(max_rel_error(lambda: f(trilinear_sample(grid, unit_bbox(), pts)),
                                         {"grid": grid}, rng, n_probe).values())
    return res


def network_checks(seed: int = 0, n_probe: int = 3, resolution: int = 8) -> dict[str, float]:
    """Max relative error of the full texture (L1) and geometry (BCE) losses at R=8, two scales."""
    from .ifnet import IFNet, IFNetConfig, init_params

    rng = np.random.default_rng(seed)
    bbox = unit_bbox()
    out = {}
    for kind in ("rgb", "occupancy"):
        cfg = IFNetConfig.default(kind, resolution, n_scales=2, channels_per_scale=(3, 4), hidden=16)
        params = init_params(cfg, rng)
        # random head so that every layer receives gradient; random biases because
        # zero biases put ReLU pre-activations exactly on the kink wherever the
        # layer input is zero, where no finite difference is meaningful
        for name, p in params.items():
            if name.startswith("dec.out") or name.endswith(".bias"):
                p.data = rng.standard_normal(p.shape) * 0.5
        net = IFNet(cfg, params)
        c = cfg.encoder.input_channels
        x = rng.random((2, c, resolution, resolution, resolution))
        pts = rng.uniform(-0.45, 0.45, (2, 5, 3))
        if kind == "rgb":
            target = T.Tensor(rng.random((2, 5, 3)))
            loss = lambda: T.l1_loss(net.forward(x, pts, bbox=bbox), target)  # noqa: E731
        else:
            labels = T.Tensor(rng.integers(0, 2, (2, 5)).astype(float))
            loss = lambda: T.bce_loss(net.forward(x, pts, bbox=bbox), labels)  # noqa: E731
        errs = max_rel_error(loss, params, rng, n_probe)
        out["texture_network" if kind == "rgb" else "geometry_network"] = max(errs.values())
    return out
