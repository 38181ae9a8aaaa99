"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Forward operations executed inside an active :class:`Tape` are recorded in
execution order; :func:`backward` walks that record once, in reverse, and
accumulates gradients on every tensor that requires them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Sequence

import numpy as np

DTYPE = np.float64

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BCE_CLAMP = 1e-7


class Tensor:
    """Dense array with an optional gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad", "node_id", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=DTYPE)
        if arr.ndim > 4:
            raise ValueError(f"tensor rank {arr.ndim} exceeds 4")
        if arr.ndim and 0 in arr.shape:
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Records operations while active (``with Tape() as tape: ...``)."""

    _stack: list["Tape"] = []

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def __len__(self) -> int:
        return len(self.nodes)


def record(op: str, values: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``values`` as the output of ``op`` and put it on the active tape.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    if not np.all(np.isfinite(values)):
        raise FloatingPointError(f"{op} produced a non-finite value")
    tape = Tape.active()
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.requires_grad = needs_grad and tape is not None
    out.node_id = None
    out.name = None
    if out.requires_grad:
        if tape.consumed:
            raise RuntimeError("tape already consumed by backward(); open a new one")
        out.node_id = len(tape.nodes)
        tape.nodes.append(Node(tuple(inputs), out, backward_fn, op))
    return out


def backward(loss: Tensor, tape: Tape, params: Sequence[Tensor] = ()) -> None:
    """Populate ``.grad`` with d(loss)/d(tensor) for every tensor needing it.

    Leaf tensors reached through the tape start from zero; ``params`` not
    reachable from ``loss`` are given an all-zero gradient.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("backward() already ran on this tape")
    if loss.node_id is None or loss.node_id >= len(tape.nodes) or tape.nodes[loss.node_id].output is not loss:
        raise ValueError("loss was not recorded on this tape")
    tape.consumed = True

    for p in params:
        p.zero_grad()
    for node in tape.nodes:
        node.output.grad = None
        for t in node.inputs:
            if t.requires_grad and t.node_id is None:
                t.zero_grad()

    loss.grad = np.ones_like(loss.values)
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(gi, dtype=DTYPE)
            else:
                t.grad = t.grad + gi
        if node.output is not loss:
            node.output.grad = None  # free intermediate buffers


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        for axis, (da, db) in enumerate(zip(a.shape, b.shape)):
            if da != db:
                raise ValueError(f"{op}: shape mismatch at dim {axis}: {da} vs {db} ({a.shape} vs {b.shape})")
        raise ValueError(f"{op}: rank mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Cross-correlation of an N×C×H×W input with an O×C×k×k kernel."""
    if x.values.ndim != 4:
        raise ValueError(f"conv2d: input must be N×C×H×W, got rank {x.values.ndim}")
    if kernel.values.ndim != 4:
        raise ValueError(f"conv2d: kernel must be O×C×k×k, got rank {kernel.values.ndim}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d: channel dim mismatch: input C={c}, kernel C={kc}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {kh}×{kw}")
    if bias.shape != (o,):
        raise ValueError(f"conv2d: bias dim 0 must equal kernel O={o}, got {bias.shape}")
    k = kh
    if padding not in (0, (k - 1) // 2):
        raise ValueError(f"conv2d: padding must be 0 or {(k - 1) // 2}, got {padding}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"conv2d: spatial dims {h}×{w} too small for kernel {k}")

    xv = x.values
    if padding:
        xv = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = xv.shape[2] - k + 1, xv.shape[3] - k + 1
    # im2col, channel-first: cols[n, (c, di, dj), (i, j)]
    cols = np.empty((n, c, k, k, ho, wo))
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = xv[:, :, di:di + ho, dj:dj + wo]
    cols = cols.reshape(n, c * k * k, ho * wo)
    wmat = kernel.values.reshape(o, c * k * k)
    out = (wmat @ cols).reshape(n, o, ho, wo) + bias.values[None, :, None, None]

    def _backward(g):
        gm = g.reshape(n, o, ho * wo)
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gk = None
        if kernel.requires_grad:
            gk = sum(gm[i] @ cols[i].T for i in range(n)).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(n, c, k, k, ho, wo)
            gxp = np.zeros(xv.shape)
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, di:di + ho, dj:dj + wo] += dcols[:, :, di, dj]
            gx = np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + w]) if padding else gxp
        return gx, gk, gb

    return record("conv2d", out, (x, kernel, bias), _backward)


def maxpool2(x: Tensor) -> Tensor:
    """2×2 non-overlapping max pooling; ties route to the first row-major cell."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2: spatial dims must be even, got {h}×{w}")
    blocks = x.values.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        return (gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return record("maxpool2", out, (x,), _backward)


def upsample_nearest2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.values, 2, axis=2), 2, axis=3)

    def _backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record("upsample_nearest2", out, (x,), _backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalisation over N×H×W.

    In train mode the running statistics arrays are updated in place.
    """
    if x.values.ndim != 4:
        raise ValueError(f"batchnorm2d: input must be N×C×H×W, got rank {x.values.ndim}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: channel dim mismatch: input C={c}, gamma {gamma.shape}, beta {beta.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d: unknown mode {mode!r}")
    g4 = gamma.values[None, :, None, None]

    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.values - running_mean[None, :, None, None]) * inv[None, :, None, None]
        out = g4 * xhat + beta.values[None, :, None, None]

        def _backward_eval(g):
            gx = g * (g4 * inv[None, :, None, None]) if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return record("batchnorm2d", out, (x, gamma, beta), _backward_eval)

    m = x.values.size // c
    mean = x.values.mean(axis=(0, 2, 3))
    centered = x.values - mean[None, :, None, None]
    var = (centered**2).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv[None, :, None, None]
    out = g4 * xhat + beta.values[None, :, None, None]

    unbiased = var * m / (m - 1) if m > 1 else var
    running_mean *= 1.0 - momentum
    running_mean += momentum * mean
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased

    def _backward(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = g * g4
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        return gx, ggamma, gbeta

    return record("batchnorm2d", out, (x, gamma, beta), _backward)


# ---------------------------------------------------------------- elementwise

def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu: slope must lie in (0, 1), got {slope}")
    pos = x.values >= 0
    out = np.where(pos, x.values, slope * x.values)
    return record("leaky_relu", out, (x,), lambda g: (np.where(pos, g, slope * g),))


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 4 or b.values.ndim != 4:
        raise ValueError("concat_channels: both inputs must be N×C×H×W")
    for axis in (0, 2, 3):
        if a.shape[axis] != b.shape[axis]:
            raise ValueError(f"concat_channels: shape mismatch at dim {axis}: {a.shape[axis]} vs {b.shape[axis]}")
    ca = a.shape[1]
    out = np.concatenate([a.values, b.values], axis=1)
    return record("concat_channels", out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return record("add", a.values + b.values, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    av, bv = a.values, b.values
    return record("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return record("scale", a.values * s, (a,), lambda g: (g * s,))


def tsum(a: Tensor) -> Tensor:
    return record("sum", np.array(a.values.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def clamp_st(a: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Clamp to [lo, hi] with a straight-through (identity) gradient."""
    return record("clamp_st", np.clip(a.values, lo, hi), (a,), lambda g: (g,))


# ---------------------------------------------------------------- losses

def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    _check_same_shape("mse_loss", pred, target)
    diff = pred.values - target.values
    n = diff.size
    out = np.array(np.mean(diff * diff))

    def _backward(g):
        gd = (2.0 * float(g) / n) * diff
        return gd, -gd

    return record("mse_loss", out, (pred, target), _backward)


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy; ``pred`` is clamped to [1e-7, 1 - 1e-7]."""
    _check_same_shape("bce_loss", pred, target)
    t = target.values
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("bce_loss: target values must lie in [0, 1]")
    p = np.clip(pred.values, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (pred.values >= BCE_CLAMP) & (pred.values <= 1.0 - BCE_CLAMP)
    n = p.size
    out = np.array(-np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p)))

    def _backward(g):
        gp = float(g) / n * (p - t) / (p * (1.0 - p)) * inside
        gt = None
        if target.requires_grad:
            gt = float(g) / n * (np.log1p(-p) - np.log(p))
        return gp, gt

    return record("bce_loss", out, (pred, target), _backward)


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls([np.zeros_like(p.values) for p in params], [np.zeros_like(p.values) for p in params], **kw)


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update from each parameter's ``.grad``.

    Raises FloatingPointError (leaving parameters and state untouched) when
    any gradient is non-finite.
    """
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    if len(params) != len(state.m):
        raise ValueError(f"adam_step: state tracks {len(state.m)} tensors, got {len(params)}")
    grads = []
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        if g.shape != p.values.shape or state.m[i].shape != p.values.shape:
            raise ValueError(f"adam_step: shape mismatch for parameter {i} ({p.name})")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient for parameter {i} ({p.name}); step aborted")
        grads.append(g)

    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step_count
    bc2 = 1.0 - b2**state.step_count
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.values = p.values - lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


# ---------------------------------------------------------------- raw dumps

TENSOR_MAGIC = b"JNT1"


def dump_tensor(values: np.ndarray | Tensor, fh: BinaryIO) -> None:
    """Write ``JNT1``, u32 rank, u32 dims, then float32 LE values."""
    arr = values.values if isinstance(values, Tensor) else np.asarray(values)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(fh: BinaryIO) -> np.ndarray:
    pos = fh.tell() if fh.seekable() else -1
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r} at byte {pos}")
    raw = fh.read(4)
    if len(raw) != 4:
        raise ValueError(f"truncated tensor rank at byte {pos + 4}")
    (rank,) = struct.unpack("<I", raw)
    if rank > 4:
        raise ValueError(f"tensor rank {rank} exceeds 4 at byte {pos}")
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise ValueError(f"truncated tensor dims at byte {pos + 8}")
    dims = struct.unpack(f"<{rank}I", raw)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError(f"truncated tensor payload at byte {pos + 8 + 4 * rank}: expected {4 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(dims)
