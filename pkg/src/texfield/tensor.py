"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the layers the two implicit networks need are provided: 3D convolution,
max pooling, fully connected layers, ReLU/sigmoid, an L1 sum loss and a
stabilised binary cross-entropy, plus an Adam optimiser and a checkpoint
format.  The graph is define-by-run: every op returns a :class:`Tensor`
holding its parents and a closure that maps the output gradient to parent
gradients.
"""

from __future__ import annotations

import contextlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_grad_enabled = True
# names of layers whose backward pass is deliberately corrupted (self-test hook)
_faults: set[str] = set()


class ShapeError(ValueError):
    """Raised when an op receives tensors of incompatible shape."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def inject_fault(layer: str):
    """Perturb the backward pass of ``layer`` while the block is active.

    Used by the self-test to prove that the gradient checks catch a broken
    layer.
    """
    _faults.add(layer)
    try:
        yield
    finally:
        _faults.discard(layer)


def _faulty(layer: str, g: np.ndarray) -> np.ndarray:
    return g * 1.01 if layer in _faults else g


class Tensor:
    """N-dimensional float64 array that participates in the gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``.grad`` of every leaf reachable from this scalar.

        Leaf gradients accumulate across calls until :meth:`zero_grad`.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic used by tests and the loss glue
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return sum_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def make_node(data: np.ndarray, parents: Sequence[Tensor],
              backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap an op result, recording it on the graph when any parent needs grads."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# elementwise / structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return make_node(a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    return make_node(np.array(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; gradients are split back per input."""
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return make_node(data, tuple(tensors), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0), (x,),
                     lambda g: (_faulty("relu", g * mask),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


stable_sigmoid = _sigmoid


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_node(s, (x,), lambda g: (_faulty("sigmoid", g * s * (1.0 - s)),))


# ---------------------------------------------------------------------------
# layers

_ROW_BLOCK = 128


def _rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` evaluated in zero-padded fixed-size row blocks.

    BLAS picks different kernels for different row counts, which changes
    rounding.  Fixed blocks make every output row bit-identical no matter how
    many other rows are in the batch.
    """
    n = a.shape[0]
    pad = (-n) % _ROW_BLOCK
    if pad:
        a = np.concatenate([a, np.zeros((pad, a.shape[1]))])
    out = np.empty((a.shape[0], b.shape[1]))
    for s in range(0, a.shape[0], _ROW_BLOCK):
        np.matmul(a[s:s + _ROW_BLOCK], b, out=out[s:s + _ROW_BLOCK])
    return out[:n]


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Row-wise affine map ``x @ weight.T + bias`` for ``x`` of shape [B, F_in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = _rowwise_matmul(x.data, weight.data.T) + bias.data

    def backward(g):
        g = _faulty("linear", g)
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return make_node(out, (x, weight, bias), backward)


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    # [N, C, D', H', W', k, k, k] strided view, no copy
    return sliding_window_view(x, (k, k, k), axis=(2, 3, 4))


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 3D cross-correlation with zero padding.

    ``x`` is [C_in, D, H, W] or batched [N, C_in, D, H, W]; ``weight`` is
    [C_out, C_in, k, k, k]. Output extents are ``D + 2*padding - k + 1``.
    """
    batched = x.ndim == 5
    if x.ndim not in (4, 5):
        raise ShapeError(f"conv3d: input must be 4D or 5D, got {x.shape}")
    if weight.ndim != 5 or weight.shape[2:] != (weight.shape[2],) * 3:
        raise ShapeError(f"conv3d: weight must be [C_out, C_in, k, k, k], got {weight.shape}")
    c_out, c_in, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"conv3d: kernel size {k} must be odd")
    if padding < 0:
        raise ShapeError(f"conv3d: padding {padding} must be nonnegative")
    xd = x.data if batched else x.data[None]
    if xd.shape[1] != c_in:
        raise ShapeError(f"conv3d: input has {xd.shape[1]} channels, weight expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv3d: bias {bias.shape} does not match C_out={c_out}")
    if min(xd.shape[2:]) + 2 * padding < k:
        raise ShapeError(f"conv3d: spatial extents {xd.shape[2:]} too small for k={k}, padding={padding}")

    p = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else xd
    n = xd.shape[0]
    do, ho, wo = (e - k + 1 for e in xp.shape[2:])
    # im2col: rows are output voxels, columns are (c_in, kz, ky, kx)
    cols = _windows(xp, k).transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * do * ho * wo, c_in * k ** 3)
    wmat = weight.data.reshape(c_out, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, do, ho, wo, c_out)
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))

    def backward(g):
        g = g if batched else g[None]
        gmat = g.transpose(0, 2, 3, 4, 1).reshape(-1, c_out)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gb = gmat.sum(axis=0)
        if not x.requires_grad:
            return None, gw, gb
        gcols = (gmat @ wmat).reshape(n, do, ho, wo, c_in, k, k, k)
        gxp = np.zeros(xp.shape)
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    gxp[:, :, a:a + do, b:b + ho, c:c + wo] += gcols[..., a, b, c].transpose(0, 4, 1, 2, 3)
        gx = gxp[:, :, p:p + xd.shape[2], p:p + xd.shape[3], p:p + xd.shape[4]] if p else gxp
        gx = _faulty("conv3d", np.ascontiguousarray(gx))
        return (gx if batched else gx[0]), gw, gb

    return make_node(out if batched else out[0], (x, weight, bias), backward)


def maxpool3d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; gradient goes to the first argmax in scan order."""
    batched = x.ndim == 5
    if x.ndim not in (4, 5):
        raise ShapeError(f"maxpool3d: input must be 4D or 5D, got {x.shape}")
    xd = x.data if batched else x.data[None]
    n, c, d, h, w = xd.shape
    s = window
    if d % s or h % s or w % s:
        raise ShapeError(f"maxpool3d: extents {(d, h, w)} not divisible by window {s}")
    blocks = xd.reshape(n, c, d // s, s, h // s, s, w // s, s)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d // s, h // s, w // s, s ** 3)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        g = g if batched else g[None]
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, d // s, h // s, w // s, s, s, s).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        gx = _faulty("maxpool3d", gb.reshape(n, c, d, h, w))
        return (gx if batched else gx[0],)

    return make_node(out if batched else out[0], (x,), backward)


# ---------------------------------------------------------------------------
# losses

def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Sum over batch items and points of the L1 norm of ``pred - target``."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    sign = np.sign(diff)

    def backward(g):
        g = _faulty("l1_loss", g * sign)
        return g, -g

    return make_node(np.array(np.abs(diff).sum()), (pred, target), backward)


def bce_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 labels."""
    if logits.shape != labels.shape:
        raise ShapeError(f"bce_loss: shapes {logits.shape} and {labels.shape} differ")
    y = labels.data
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce_loss: labels must be 0 or 1")
    z = logits.data
    n = z.size
    # max(z,0) - z*y + log(1 + exp(-|z|)) is log-sum-exp stable
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        return _faulty("bce_loss", g * (_sigmoid(z) - y) / n), None

    return make_node(np.array(per.sum() / n), (logits, labels), backward)


# ---------------------------------------------------------------------------
# optimiser

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None],
              state: AdamState) -> AdamState:
    """Apply one bias-corrected Adam update in place; missing grads count as zero."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad for {name!r} has shape {g.shape}, param {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    """Thin stateful wrapper reading ``.grad`` from named parameters."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 state: AdamState | None = None):
        self.params = dict(params)
        self.state = state or AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little endian):
#   b"IFCK" | u32 version | u32 header_len | header JSON (utf-8)
#   u32 n_params | n_params x (u32 name_len | name | u32 rank | rank x u64 extent | f64 payload)
#   u8 has_adam | [f64 lr, beta1, beta2, eps | u64 step_count | per param: f64 m, f64 v]

CKPT_MAGIC = b"IFCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Mapping[str, Tensor], adam: AdamState | None = None,
                    header: Mapping | None = None) -> None:
    path = Path(path)
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    hdr = json.dumps(dict(header or {}), sort_keys=True).encode("utf-8")
    chunks += [struct.pack("<I", len(hdr)), hdr, struct.pack("<I", len(params))]
    for name, p in params.items():
        raw = name.encode("utf-8")
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<I", p.ndim),
                   struct.pack(f"<{p.ndim}Q", *p.shape), p.data.astype("<f8").tobytes()]
    if adam is None:
        chunks.append(b"\x00")
    else:
        chunks += [b"\x01", struct.pack("<4dQ", adam.lr, adam.beta1, adam.beta2, adam.eps,
                                        adam.step_count)]
        for name, p in params.items():
            m = adam.first_moment.get(name, np.zeros(p.shape))
            v = adam.second_moment.get(name, np.zeros(p.shape))
            chunks += [m.astype("<f8").tobytes(), v.astype("<f8").tobytes()]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, Tensor], AdamState | None, dict]:
    """Return ``(params, adam_state_or_None, header)`` from an IFCK file."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not an IFCK checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = take("<I")
    header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = take("<I")
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}Q")
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        params[name] = parameter(arr.astype(DTYPE), name=name)
    (has_adam,) = take("<B")
    adam = None
    if has_adam:
        lr, b1, b2, eps, steps = take("<4dQ")
        adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step_count=steps)
        for name, p in params.items():
            size = p.data.size
            m = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(p.shape)
            pos += 8 * size
            v = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(p.shape)
            pos += 8 * size
            adam.first_moment[name] = m.astype(DTYPE)
            adam.second_moment[name] = v.astype(DTYPE)
    return params, adam, header


def parameters_from(named: Iterable[tuple[str, np.ndarray]]) -> dict[str, Tensor]:
    return {name: parameter(arr, name=name) for name, arr in named}
