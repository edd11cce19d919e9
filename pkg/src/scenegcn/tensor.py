"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a :class:`TapeEntry` carrying a
monotonically increasing sequence number, its input tensors and a closure
that maps the output gradient to input gradients.  :func:`backward`
collects the entries reachable from a scalar loss into a
:class:`ComputeTape` and replays them in decreasing sequence order, which
is a reverse topological order because an entry can only consume tensors
created before it.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
COSINE_EPS = 1e-12

_seq = itertools.count()
_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateVectorError(ValueError):
    """A vector with (near) zero norm was passed where a direction is needed."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@dataclass
class TapeEntry:
    seq: int
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class Tensor:
    """An n-dimensional real array with an optional gradient accumulator.

    Leaves created with ``requires_grad=True`` own a zero-initialised ``grad``
    buffer that :func:`backward` adds into; call :meth:`zero_grad` between
    steps.  Tensors produced by operations get their ``grad`` assigned (not
    accumulated) when a backward pass reaches them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_entry", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._entry: TapeEntry | None = None
        self.name = name

    # --- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._entry is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # --- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _record(out: np.ndarray, inputs: Iterable[Tensor], backward_fn, name: str) -> Tensor:
    inputs = tuple(inputs)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.name = None
    result._entry = None
    result.requires_grad = False
    if _grad_enabled and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._entry = TapeEntry(next(_seq), inputs, backward_fn, name)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- tape -------------------------------------------------------------------
class ComputeTape:
    """Recorded operations reachable from one output, kept in creation order."""

    def __init__(self, records: list[tuple[TapeEntry, Tensor]], leaves: list[Tensor]):
        self.records = records
        self.leaves = leaves

    @classmethod
    def collect(cls, output: Tensor) -> "ComputeTape":
        records = []
        leaves = []
        seen: set[int] = set()
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._entry is None:
                if t.requires_grad:
                    leaves.append(t)
                continue
            records.append((t._entry, t))
            stack.extend(x for x in t._entry.inputs if x.requires_grad)
        records.sort(key=lambda r: r[0].seq)
        return cls(records, leaves)

    def __len__(self) -> int:
        return len(self.records)

    def replay(self, output: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(output): seed}
        for entry, out in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            for x, gx in zip(entry.inputs, entry.backward_fn(g)):
                if gx is None or not x.requires_grad:
                    continue
                if gx.shape != x.shape:
                    gx = _unbroadcast(gx, x.shape)
                key = id(x)
                grads[key] = grads[key] + gx if key in grads else gx
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            leaf.grad += g


def backward(loss: Tensor) -> None:
    """Populate gradients of scalar ``loss`` w.r.t. every reachable tensor.

    Leaf gradients accumulate additively, so a tensor used along several
    paths (or across several calls) receives the sum.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    ComputeTape.collect(loss).replay(loss, np.ones_like(loss.data))


# --- elementwise arithmetic -------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (g * bd if a.requires_grad else None), (g * ad if b.requires_grad else None)

    return _record(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


# --- reductions and shape plumbing -----------------------------------------
def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),), "transpose")


def expand_dims(a, axis) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(np.expand_dims(a.data, axis), (a,), lambda g: (g.reshape(old),), "expand_dims")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(np.ascontiguousarray(a.data[idx]), (a,), bw, "getitem")


def take_rows(table, indices) -> Tensor:
    """Gather rows ``table[indices]``; the gradient scatters back additively."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    shape, dtype = table.shape, table.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _record(table.data[idx], (table,), bw, "take_rows")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


# --- linear algebra -----------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product ``a @ b``.

    ``a`` may carry leading batch axes; ``b`` is either 2-D (shared weight)
    or carries the same batch axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    flat = ad.ndim > 2 and bd.ndim == 2
    if flat:
        # one BLAS call instead of numpy's per-batch loop
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))
    else:
        out = ad @ bd

    def bw(g):
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(g, ad, axes=(tuple(range(g.ndim)), tuple(range(ad.ndim - 1))))
            return ga, gb
        if ad.ndim == 1:
            return g @ bd.T, np.multiply.outer(ad, g)
        if bd.ndim == 2:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = ad.reshape(-1, ad.shape[-1]).T @ g2 if b.requires_grad else None
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), bw, "matmul")


# --- activations --------------------------------------------------------------
def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    # np.maximum keeps NaN visible so the training loop can catch it
    return _record(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis`` with max subtraction.

    ``mask`` (boolean, broadcastable to ``x``) marks admissible entries;
    excluded entries get weight exactly 0.  A slice with no admissible
    entry yields all zeros rather than NaN.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=axis, keepdims=True)
    out = e / np.where(denom > 0, denom, 1.0)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), bw, "softmax")


def logsumexp(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    zmax = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - zmax)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + zmax).squeeze(axis)
    p = e / s
    return _record(out, (x,), lambda g: (np.expand_dims(g, axis) * p,), "logsumexp")


def cosine_similarity(a, b, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity along the last axis; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine_similarity: widths differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(-1, keepdims=True))
    nb = np.sqrt((bd * bd).sum(-1, keepdims=True))
    if (na <= eps).any() or (nb <= eps).any():
        raise DegenerateVectorError("cosine_similarity: vector norm below 1e-12")
    au, bu = ad / na, bd / nb
    s = (au * bu).sum(-1, keepdims=True)

    def bw(g):
        g = g[..., None]
        ga = g * (bu - s * au) / na
        gb = g * (au - s * bu) / nb
        return ga, gb

    return _record(np.clip(s[..., 0], -1.0, 1.0), (a, b), bw, "cosine")


def bce_with_logits(logits, targets) -> Tensor:
    """Summed binary cross-entropy of sigmoid(logits) against ``targets``.

    Computed as ``softplus(z) - t*z`` so large logits never overflow.
    """
    z = as_tensor(logits)
    t = np.asarray(targets, dtype=z.data.dtype)
    if t.shape != z.shape:
        raise DimensionError(f"bce: logits {z.shape} vs targets {t.shape}")
    if (t < 0).any() or (t > 1).any():
        raise ValueError("bce targets must lie in [0, 1]")
    zd = z.data
    loss = np.maximum(zd, 0) - zd * t + np.log1p(np.exp(-np.abs(zd)))
    p = _stable_sigmoid(zd)
    return _record(np.asarray(loss.sum()), (z,), lambda g: (g * (p - t),), "bce")


# --- convolution --------------------------------------------------------------
def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (``[B,]C,H,W``) with ``kernel`` (``O,C,kh,kw``)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1:
        raise ValueError("stride must be positive")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected [B,]C,H,W input and O,C,kh,kw kernel, got {x.shape} and {kernel.shape}")
    n_out, c_in, kh, kw = kernel.shape
    if xd.shape[1] != c_in:
        raise DimensionError(f"conv2d: input channels {xd.shape[1]} != kernel channels {c_in} ({x.shape} vs {kernel.shape})")
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    B, _, H, W = xd.shape
    if kh > H or kw > W:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than input {x.shape}")
    ho, wo = (H - kh) // stride + 1, (W - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    kd = kernel.data
    out = np.tensordot(win, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bw(g):
        g4 = g[None] if unbatched else g
        gk = np.tensordot(g4, win, axes=([0, 2, 3], [0, 2, 3]))
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                    "bohw,oc->bchw", g4, kd[:, :, i, j], optimize=True
                )
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        return (gx[0] if unbatched else gx), gk

    return _record(out[0] if unbatched else out, (x, kernel), bw, "conv2d")


# --- regularisation -----------------------------------------------------------
def dropout(x, p: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval is identity."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# --- serialization ------------------------------------------------------------
TENSOR_MAGIC = b"SGT1"


class FormatError(ValueError):
    """A binary container is malformed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def tensor_to_bytes(x) -> bytes:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype="<f8", order="C")
    head = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor starting at ``offset``; return it and the end offset."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic", offset)
    pos = offset + 4
    if len(buf) < pos + 4:
        raise FormatError("truncated tensor rank", pos)
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + 8 * rank:
        raise FormatError("truncated tensor extents", pos)
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    nbytes = 8 * int(np.prod(shape, dtype=np.int64))
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated tensor data: need {nbytes} bytes", pos)
    arr = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
    return arr, pos + nbytes


def save_tensor(path, x) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor", end)
    return arr
