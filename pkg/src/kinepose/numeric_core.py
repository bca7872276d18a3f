"""Dense float64 tensors and a recording tape for reverse-mode gradients.

Only the operations the pose pipeline needs are provided. Every public op
validates shapes, refuses non-finite results, and records a node on the
active :class:`Tape` (if any) so gradients can be pulled back later.
"""
from __future__ import annotations

import io
import struct
import threading
from dataclasses import dataclass
from typing import BinaryIO, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class Tensor:
    """Immutable n-d array of 64-bit floats.

    A tensor never changes after construction; ops return new tensors.
    """

    __slots__ = ("data",)

    def __init__(self, data, *, _trusted: bool = False):
        if _trusted:
            arr = data
        else:
            arr = np.array(data, dtype=np.float64, copy=True)
        if any(n <= 0 for n in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor of shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def tensor(data) -> Tensor:
    return Tensor(data)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


# ---------------------------------------------------------------------------
# Tape


@dataclass(eq=False)
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # Maps the output gradient to one gradient (or None) per input.
    backward: Callable[[np.ndarray], tuple]


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of ops executed while the tape is active.

    Use as a context manager; ops executed inside the ``with`` block are
    appended in execution order, which is already a topological order.
    Tapes are thread-local, so separate threads may each run their own.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.remove(self)

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of the scalar ``target`` with respect to ``sources``.

        Sources that ``target`` does not depend on get a zero gradient.
        Inputs used by several nodes accumulate the sum of all paths.
        """
        if target.size != 1:
            raise ShapeError(f"gradient target must be a scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones(target.shape)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros(s.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(s.shape))
        return out


def _emit(kind: str, inputs: tuple[Tensor, ...], value: np.ndarray, backward) -> Tensor:
    out = Tensor(np.ascontiguousarray(value, dtype=np.float64), _trusted=True)
    tape = _active_tape()
    if tape is not None:
        tape.nodes.append(Node(kind, inputs, out, backward))
    return out


# ---------------------------------------------------------------------------
# Operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _emit("matmul", (a, b), A @ B, backward)


def convex_mix(w: Tensor, v: Tensor) -> Tensor:
    """``w @ v`` for row-stochastic ``w``, kept inside each column's range of ``v``.

    In exact arithmetic every output entry is a convex combination of its
    column, so the clamp only absorbs last-ulp rounding; the gradient is
    that of the plain product.
    """
    if len(w.shape) != 2 or len(v.shape) != 2 or w.shape[1] != v.shape[0]:
        raise ShapeError(f"convex_mix: incompatible shapes {w.shape} and {v.shape}")
    W, V = w.data, v.data
    out = np.clip(W @ V, V.min(axis=0), V.max(axis=0))

    def backward(g):
        return g @ V.T, W.T @ g

    return _emit("convex_mix", (w, v), out, backward)


def softmax_rows(x: Tensor, scale: float = 1.0) -> Tensor:
    """Row-wise softmax of ``x / scale`` with max subtraction."""
    if len(x.shape) != 2:
        raise ShapeError(f"softmax_rows: expected a 2-d tensor, got {x.shape}")
    if not scale > 0:
        raise ValueError(f"softmax_rows: scale must be positive, got {scale}")
    z = x.data / scale
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot) / scale,)

    return _emit("softmax_rows", (x,), y, backward)


def relu(x: Tensor) -> Tensor:
    X = x.data
    mask = X > 0

    def backward(g):
        return (np.where(mask, g, 0.0),)

    return _emit("relu", (x,), np.where(mask, X, 0.0), backward)


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # xp: C x Hp x Wp, already padded -> (C*k*k) x (Ho*Wo)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[:3]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo), ho, wo


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation of a C_in x H x W input with C_out x C_in x k x k weights.

    ``k`` is 1 or 3. The 3x3 case zero-pads by one pixel, so with stride 1
    the spatial size is preserved and with stride 2 it is halved.
    """
    if len(x.shape) != 3 or len(w.shape) != 4:
        raise ShapeError(f"conv2d: expected input CxHxW and weights OxIxkxk, got {x.shape} and {w.shape}")
    c_out, c_in, k, k2 = w.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be 1x1 or 3x3, got {k}x{k2}")
    if x.shape[0] != c_in:
        raise ShapeError(
            f"conv2d: input has {x.shape[0]} channels, weights expect {c_in} (shapes {x.shape}, {w.shape})"
        )
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    X, Wt = x.data, w.data
    _, H, W = X.shape
    wmat = Wt.reshape(c_out, c_in * k * k)

    if k == 1:
        xs = X[:, ::stride, ::stride]
        ho, wo = xs.shape[1:]
        cols = xs.reshape(c_in, ho * wo)
        out = (wmat @ cols).reshape(c_out, ho, wo)

        def backward(g):
            g2 = g.reshape(c_out, ho * wo)
            gw = (g2 @ cols.T).reshape(Wt.shape)
            gx_s = (wmat.T @ g2).reshape(c_in, ho, wo)
            if stride == 1:
                return gx_s, gw
            gx = np.zeros_like(X)
            gx[:, ::stride, ::stride] = gx_s
            return gx, gw

        return _emit("conv2d", (x, w), out, backward)

    xp = np.pad(X, ((0, 0), (1, 1), (1, 1)))
    cols, ho, wo = _im2col(xp, 3, stride)
    out = (wmat @ cols).reshape(c_out, ho, wo)

    def backward(g):
        g2 = g.reshape(c_out, ho * wo)
        gw = (g2 @ cols.T).reshape(Wt.shape)
        gcols = (wmat.T @ g2).reshape(c_in, 3, 3, ho, wo)
        gxp = np.zeros((c_in, H + 2, W + 2))
        for di in range(3):
            for dj in range(3):
                gxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += gcols[:, di, dj]
        return gxp[:, 1:-1, 1:-1], gw

    return _emit("conv2d", (x, w), out, backward)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over every element; returns a 0-d tensor."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gd = (2.0 / n) * g * diff
        return gd, -gd

    return _emit("mse_loss", (pred, target), np.array((diff * diff).sum() / n), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (x,), x.data * c, lambda g: (g * c,))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = x.shape
    return _emit("sum", (x,), np.array(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(n) for n in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if len(x.shape) != 2:
        raise ShapeError(f"transpose: expected a 2-d tensor, got {x.shape}")
    return _emit("transpose", (x,), x.data.T, lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    try:
        value = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc} (shapes {[p.shape for p in parts]})") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", parts, value, backward)


# ---------------------------------------------------------------------------
# Finite-difference check


def grad_check(
    op: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-6,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``op`` takes the tensor(s) ``x`` and returns a scalar tensor. The error
    per coordinate is ``|a - b| / max(1, |a|, |b|)``. With ``coords`` set,
    only that many randomly chosen coordinates per input are probed.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"grad_check: step h={h} outside [1e-7, 1e-4]")
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)

    def call(args):
        return op(args[0]) if single else op(args)

    with Tape() as tape:
        out = call(xs)
    analytic = tape.gradient(out, xs)

    worst = 0.0
    for i, xi in enumerate(xs):
        flat = xi.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=coords, replace=False)
        for j in idx:
            vals = []
            for step in (h, -h):
                bumped = flat.copy()
                bumped[j] += step
                args = list(xs)
                args[i] = Tensor(bumped.reshape(xi.shape))
                vals.append(call(args).item())
            numeric = (vals[0] - vals[1]) / (2 * h)
            a = analytic[i].reshape(-1)[j]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# .ten serialization

_TEN_MAGIC = b"KTEN"
_TEN_VERSION = 1


def write_tensor(fh: BinaryIO, t: Tensor) -> None:
    fh.write(_TEN_MAGIC)
    fh.write(struct.pack("<BB", _TEN_VERSION, len(t.shape)))
    fh.write(struct.pack(f"<{len(t.shape)}I", *t.shape))
    fh.write(t.data.astype("<f8").tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> Tensor:
    head = fh.read(6)
    if len(head) != 6 or head[:4] != _TEN_MAGIC:
        raise ValueError("not a .ten payload (bad magic)")
    version, ndim = head[4], head[5]
    if version != _TEN_VERSION:
        raise ValueError(f"unsupported .ten version {version}")
    raw = fh.read(4 * ndim)
    if len(raw) != 4 * ndim:
        raise ValueError("truncated .ten header")
    dims = struct.unpack(f"<{ndim}I", raw)
    count = int(np.prod(dims)) if dims else 1
    body = fh.read(8 * count)
    if len(body) != 8 * count:
        raise ValueError("truncated .ten data")
    return Tensor(np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(dims))


def tensor_to_bytes(t: Tensor) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(blob: bytes) -> Tensor:
    return read_tensor(io.BytesIO(blob))


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)
