"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations the screening network needs are provided. Sequence
tensors use the layout ``(batch, time, channels)``; ragged batches carry an
integer ``lengths`` vector, and every op that mixes time steps (convolution
edges, pooling) treats frames past a sample's length as absent.
"""

from __future__ import annotations

import contextlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"RSPR1"
PROB_CLAMP = 1e-7

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a single reduction: any NaN or Inf makes the sum non-finite
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.add.reduce(arr, axis=None)
    # a sum can overflow on finite values, so confirm element-wise before raising
    if not np.isfinite(total) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        """Add ``g`` to the gradient; ``owned`` arrays are fresh and may be kept without copying."""
        if self.grad is None:
            if owned and g.dtype == np.float64 and g.flags.writeable and g.base is None:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            # interior nodes release their buffers once consumed
            node.grad = None
            node._backward = None
            node._parents = ()


def _result(data: np.ndarray, parents, backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def time_mask(lengths, T: int) -> np.ndarray:
    return np.arange(T)[None, :] < np.asarray(lengths)[:, None]


# ------------------------------------------------------------------ layer ops


# kernels with at most this many (tap, channel) pairs run as one im2col matmul
IM2COL_MAX = 32


def _im2col(xp: np.ndarray, k: int, T: int) -> np.ndarray:
    """(B, T + k - 1, C) -> (B, T, k * C) with column index ``tap * C + channel``."""
    return np.concatenate([xp[:, j : j + T] for j in range(k)], axis=2)


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded, stride-1 cross-correlation along time.

    ``x`` is (B, T, C_in), ``w`` is (k, C_in, C_out) with odd k, ``b`` is (C_out,).
    """
    if x.data.ndim != 3:
        raise ShapeError("conv1d input must be (batch, time, channels)")
    k, c_in, c_out = w.shape
    if k % 2 == 0:
        raise ShapeError("conv1d kernel size must be odd")
    if x.shape[2] != c_in:
        raise ShapeError(f"conv1d expects {c_in} input channels, got {x.shape[2]}")
    if b.shape != (c_out,):
        raise ShapeError("conv1d bias must have one entry per output channel")
    B, T, _ = x.shape
    if T < 1:
        raise ShapeError("conv1d needs at least one time step")
    p = k // 2
    xp = np.zeros((B, T + 2 * p, c_in))
    xp[:, p : p + T] = x.data
    w2 = w.data.reshape(k * c_in, c_out)
    if k * c_in <= IM2COL_MAX:
        out = _im2col(xp, k, T) @ w2
        out += b.data
    else:
        out = xp[:, 0:T] @ w.data[0]
        out += b.data
        for j in range(1, k):
            out += xp[:, j : j + T] @ w.data[j]

    def backward(g):
        small = k * c_in <= IM2COL_MAX
        if w.requires_grad:
            if small:
                cols = _im2col(xp, k, T).reshape(B * T, k * c_in)
                gw = (cols.T @ g.reshape(B * T, c_out)).reshape(k, c_in, c_out)
            else:
                # per-sample slices stay contiguous, so no im2col copy is needed
                gw = np.zeros((k, c_in, c_out))
                for i in range(B):
                    for j in range(k):
                        gw[j] += xp[i, j : j + T].T @ g[i]
            w._accumulate(gw, owned=True)
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 1)), owned=True)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(B):
                for j in range(k):
                    gxp[i, j : j + T] += g[i] @ w.data[j].T
            x._accumulate(gxp[:, p : p + T])

    return _result(out, (x, w, b), backward, "conv1d")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g):
        x._accumulate(g * (out > 0), owned=True)

    return _result(out, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return _result(out, (x,), backward, "sigmoid")


def _zero_tails(a: np.ndarray, lengths) -> np.ndarray:
    for i, n in enumerate(lengths):
        a[i, n:] = 0.0
    return a


def apply_mask(x: Tensor, lengths) -> Tensor:
    """Zero every frame at or beyond each sample's length."""
    T = x.shape[1]
    lengths = [int(n) for n in np.asarray(lengths)]
    if all(n >= T for n in lengths):
        return x
    out = _zero_tails(x.data.copy(), lengths)

    def backward(g):
        x._accumulate(_zero_tails(g.copy(), lengths), owned=True)

    return _result(out, (x,), backward, "mask")


def maxpool1d(x: Tensor) -> Tensor:
    """Non-overlapping width-2 max pooling along time, ceil mode.

    Ties send the gradient to the first element of the window.
    """
    B, T, C = x.shape
    if T < 1:
        raise ShapeError("maxpool1d needs at least one time step")
    h = T // 2
    first = x.data[:, 0::2]
    second = x.data[:, 1::2]
    take_second = second > first[:, :h]
    out = first.copy()
    np.maximum(out[:, :h], second, out=out[:, :h])

    def backward(g):
        gx = np.empty((B, T, C))
        gx[:, 1::2] = g[:, :h] * take_second
        gx[:, 0::2] = g
        gx[:, 0 : 2 * h : 2] *= ~take_second
        x._accumulate(gx, owned=True)

    return _result(out, (x,), backward, "maxpool1d")


def pooled_lengths(lengths) -> np.ndarray:
    return (np.asarray(lengths) + 1) // 2


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape, dtype=np.float32) >= rate) * (1.0 / (1.0 - rate))
    out = x.data * keep

    def backward(g):
        x._accumulate(g * keep, owned=True)

    return _result(out, (x,), backward, "dropout")


def global_pool_concat(x: Tensor, lengths=None) -> Tensor:
    """Masked time-mean followed by masked time-max: (B, T, C) -> (B, 2C)."""
    B, T, C = x.shape
    if T < 1:
        raise ShapeError("global pooling needs at least one time step")
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    if np.any(lengths < 1) or np.any(lengths > T):
        raise ShapeError("lengths must lie in [1, T]")
    m = time_mask(lengths, T)[:, :, None]
    full = bool(m.all())
    n = lengths[:, None].astype(np.float64)
    mean = (x.data if full else x.data * m).sum(axis=1) / n
    masked = x.data if full else np.where(m, x.data, -np.inf)
    idx = masked.argmax(axis=1)
    mx = np.take_along_axis(masked, idx[:, None, :], axis=1)[:, 0, :]
    out = np.concatenate([mean, mx], axis=1)

    def backward(g):
        gx = np.broadcast_to((g[:, None, :C] / n[:, :, None]), (B, T, C)) * m
        gx = np.array(gx)
        bi, ci = np.meshgrid(np.arange(B), np.arange(C), indexing="ij")
        gx[bi, idx, ci] += g[:, C:]
        x._accumulate(gx)

    return _result(out, (x,), backward, "global_pool_concat")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` for ``x`` of shape (B, n) or (n,)."""
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: cannot map {x.shape} with weights {w.shape} and bias {b.shape}")
    out = x.data @ w.data + b.data

    def backward(g):
        if w.requires_grad:
            w._accumulate(np.outer(x.data, g) if x.data.ndim == 1 else x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g if g.ndim == 1 else g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ w.data.T)

    return _result(out, (x, w, b), backward, "dense")


def concat(xs, axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(xs, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return _result(out, tuple(xs), backward, "concat")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(out, (x,), backward, "reshape")


def weighted_bce(y, y_hat: Tensor, lam: float, scale: float = 1.0) -> Tensor:
    """Class-weighted binary cross-entropy averaged over the batch.

    ``-(1/N) * sum(lam * y * log(p) + (1 - y) * log(1 - p))`` with ``p`` clamped
    to ``[1e-7, 1 - 1e-7]``. ``scale`` multiplies the result, which lets a batch
    be split into chunks whose losses sum to the full-batch loss.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    p_raw = y_hat.data.reshape(-1)
    if y.size == 0:
        raise ValueError("weighted_bce needs a non-empty batch")
    if y.size != p_raw.size:
        raise ShapeError("labels and predictions differ in length")
    p = np.clip(p_raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = y.size
    loss = -scale * np.sum(lam * y * np.log(p) + (1 - y) * np.log1p(-p)) / n
    inside = (p_raw >= PROB_CLAMP) & (p_raw <= 1.0 - PROB_CLAMP)

    def backward(g):
        dp = -scale * (lam * y / p - (1 - y) / (1 - p)) / n
        y_hat._accumulate((g * dp * inside).reshape(y_hat.shape))

    return _result(np.asarray(loss), (y_hat,), backward, "weighted_bce")


def binary_cross_entropy(y, p) -> float:
    """Plain (unweighted) mean binary cross-entropy on probabilities."""
    y = np.asarray(y, dtype=np.float64)
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


# ------------------------------------------------------------------ optimiser


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def copy(self) -> "AdamState":
        return AdamState(
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.t,
            self.beta1,
            self.beta2,
            self.eps,
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` (name -> array)."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {name} {params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        with np.errstate(over="ignore"):
            v += (1 - b2) * g * g
        if not np.isfinite(v).all():
            raise NonFiniteError(f"second-moment estimate overflowed for {name}")
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ----------------------------------------------------------------- checkpoints


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write ``RSPR1`` + u32 header length + JSON header + little-endian f8 arrays."""
    names = list(arrays)
    header = dict(meta or {})
    header["arrays"] = [{"name": n, "shape": list(np.shape(arrays[n]))} for n in names]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(blob)), blob]
    parts += [np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in names]
    atomic_write_bytes(path, b"".join(parts))


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        tmp.replace(path)
    finally:
        if tmp.exists():
            tmp.unlink()


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def load_arrays(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not an RSPR1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    arrays = {}
    for spec in header.pop("arrays"):
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        arrays[spec["name"]] = arr.astype(np.float64)
        pos += 8 * count
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after arrays")
    return arrays, header
