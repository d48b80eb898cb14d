"""Dense tensors with tape-based reverse-mode differentiation.

The operation set is closed: exactly what the UNETR forward pass and its
losses need. Operations are only recorded while a :class:`Tape` is active, so
inference outside a tape keeps no intermediates alive.

    with Tape() as tape:
        y = matmul(x, w)
        loss = sum_all(mul(y, y))
    backward(tape, loss)
    w.grad
"""
from __future__ import annotations

import functools
import hashlib
import json
import struct
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import NonScalarLoss, ShapeMismatch

_ACTIVE: list["Tape"] = []
_DEBUG = False


def set_debug(enabled: bool) -> None:
    """In debug mode every op checks its output is finite and its inputs were not mutated."""
    global _DEBUG
    _DEBUG = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple, backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed operations; use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result; register it on the active tape when any input needs a gradient."""
    needs = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _ACTIVE[-1].nodes.append(_Node(out, tuple(inputs), backward_fn))
    return out


def _digest(arr: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(arr).tobytes(), digest_size=16).hexdigest()


def op(fn):
    """Decorator adding the debug-mode purity and finiteness checks."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        if not _DEBUG:
            return fn(*args, **kwargs)
        tensors = [a for a in args if isinstance(a, Tensor)]
        before = [_digest(t.data) for t in tensors]
        out = fn(*args, **kwargs)
        after = [_digest(t.data) for t in tensors]
        if before != after:
            raise RuntimeError(f"{fn.__name__} mutated one of its inputs")
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError(f"{fn.__name__} produced non-finite values")
        return out

    return wrapper


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.out) for n in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = g.astype(t.data.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g
    if loss.requires_grad and id(loss) not in produced:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# elementwise and reductions

@op
def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b where b's shape equals a's shape or a trailing suffix of it."""
    lead = len(a.shape) - len(b.shape)
    if lead < 0 or a.shape[lead:] != b.shape:
        raise ShapeMismatch(f"cannot add {b.shape} onto {a.shape}")

    def back(g):
        gb = g.sum(axis=tuple(range(lead))) if lead else g
        return g, gb

    return _record(a.data + b.data, (a, b), back)


@op
def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot subtract {b.shape} from {a.shape}")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


@op
def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"elementwise product of {a.shape} and {b.shape}")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


@op
def scale(a: Tensor, factor: float) -> Tensor:
    f = a.data.dtype.type(factor)
    return _record(a.data * f, (a,), lambda g: (g * f,))


@op
def sum_all(a: Tensor) -> Tensor:
    def back(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _record(np.asarray(a.data.sum(), dtype=a.dtype), (a,), back)


@op
def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return _record(np.asarray(a.data.mean(), dtype=a.dtype), (a,), back)


@op
def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _record(s, (a,), lambda g: (g * s * (1 - s),))


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@op
def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = (0.5 * (1.0 + erf(x / x.dtype.type(_SQRT2)))).astype(x.dtype)

    def back(g):
        pdf = (_INV_SQRT_2PI * np.exp(-0.5 * x * x)).astype(x.dtype)
        return (g * (cdf + x * pdf),)

    return _record(x * cdf, (a,), back)


@op
def softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra and normalization

@op
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) < 2 or len(b.shape) < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None

    def reduce_to(g, shape):
        extra = g.ndim - len(shape)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
        return g.sum(axis=axes, keepdims=True) if axes else g

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return reduce_to(ga, a.shape), reduce_to(gb, b.shape)

    return _record(out, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


NORM_EPS = 1e-5


def _normalize_back(g, xhat, inv_std, axes):
    """Gradient of (x - mean)/sqrt(var + eps) over ``axes``."""
    gm = g.mean(axis=axes, keepdims=True)
    gxm = (g * xhat).mean(axis=axes, keepdims=True)
    return (g - gm - xhat * gxm) * inv_std


@op
def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm params {gain.shape}/{bias.shape} for width {d}")
    v = x.data
    mean = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv_std = 1 / np.sqrt(var + v.dtype.type(NORM_EPS))
    xhat = (v - mean) * inv_std
    out = xhat * gain.data + bias.data
    lead = tuple(range(v.ndim - 1))

    def back(g):
        gx = _normalize_back(g * gain.data, xhat, inv_std, (-1,))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gain, bias), back)


@op
def instance_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-channel normalization over the spatial axes of a (C, X, Y, Z) tensor."""
    c = x.shape[0]
    if len(x.shape) != 4 or gain.shape != (c,) or bias.shape != (c,):
        raise ShapeMismatch(f"instance_norm of {x.shape} with params {gain.shape}/{bias.shape}")
    v = x.data
    axes = (1, 2, 3)
    mean = v.mean(axis=axes, keepdims=True)
    var = v.var(axis=axes, keepdims=True)
    inv_std = 1 / np.sqrt(var + v.dtype.type(NORM_EPS))
    xhat = (v - mean) * inv_std
    gcol = gain.data.reshape(c, 1, 1, 1)
    out = xhat * gcol + bias.data.reshape(c, 1, 1, 1)

    def back(g):
        gx = _normalize_back(g * gcol, xhat, inv_std, axes)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _record(out, (x, gain, bias), back)


# ---------------------------------------------------------------------------
# convolutions (cross-correlation, no kernel flip)

def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


# upper bound on the im2col buffer; conv3d works through the output in x-slabs under it
IM2COL_BYTES = 96 * 2 ** 20


@op
def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """x (C_in, X, Y, Z), w (C_out, C_in, k, k, k) -> (C_out, X', Y', Z').

    im2col over slabs of output rows, one matmul per slab, so memory stays
    bounded at full 144^3 resolution.
    """
    if len(x.shape) != 4 or len(w.shape) != 5 or w.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"conv3d input {x.shape} with kernel {w.shape}")
    if stride not in (1, 2):
        raise ShapeMismatch(f"unsupported stride {stride}")
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    spatial = x.shape[1:]
    out_sp = tuple(_out_size(n, k, stride, pad) for n in spatial)
    if min(out_sp) < 1:
        raise ShapeMismatch(f"kernel {k} does not fit input {spatial} with pad {pad}")
    xp = np.pad(x.data, ((0, 0),) + ((pad, pad),) * 3) if pad else x.data
    ox, oy, oz = out_sp
    ckk = cin * k ** 3
    w2 = w.data.reshape(cout, ckk)
    row = ckk * oy * oz * xp.itemsize
    step = max(1, min(ox, IM2COL_BYTES // max(row, 1)))
    slabs = [(a, min(a + step, ox)) for a in range(0, ox, step)]

    def cols(arr, a, z):
        """(C_in*k^3, rows*Y'*Z') patch matrix for output rows a..z."""
        lo = a * stride
        hi = (z - 1) * stride + k
        view = np.lib.stride_tricks.sliding_window_view(arr[:, lo:hi], (k, k, k), axis=(1, 2, 3))
        view = view[:, ::stride, ::stride, ::stride]
        return np.ascontiguousarray(view.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(ckk, -1)

    out = np.empty((cout, ox, oy * oz), dtype=x.dtype)
    for a, z in slabs:
        out[:, a:z] = (w2 @ cols(xp, a, z)).reshape(cout, z - a, oy * oz)
    out = out.reshape((cout,) + out_sp)
    if b is not None:
        out += b.data.reshape(cout, 1, 1, 1)

    def back(g):
        g3 = g.reshape(cout, ox, oy * oz)
        gw = np.zeros((cout, ckk), dtype=w.dtype) if w.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for a, z in slabs:
            gs = g3[:, a:z].reshape(cout, -1)
            if gw is not None:
                gw += gs @ cols(xp, a, z).T
            if gxp is not None:
                gc = (w2.T @ gs).reshape(cin, k, k, k, z - a, oy, oz)
                base = a * stride
                for i in range(k):
                    for j in range(k):
                        for l in range(k):
                            gxp[:, base + i : base + i + stride * (z - a) : stride,
                                   j : j + stride * oy : stride,
                                   l : l + stride * oz : stride] += gc[:, i, j, l]
        gx = None
        if gxp is not None:
            gx = gxp[:, pad : pad + spatial[0], pad : pad + spatial[1], pad : pad + spatial[2]] if pad else gxp
        gb = g.sum(axis=(1, 2, 3)) if b is not None else None
        return gx, (gw.reshape(w.shape) if gw is not None else None), gb

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, back)


@op
def conv_transpose3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 2, pad: int = 0) -> Tensor:
    """Adjoint of conv3d. x (C_in, X, Y, Z), w (C_out, C_in, k, k, k).

    Output edge is (n - 1)*stride + k - 2*pad; stride 2, kernel 2, pad 0 doubles it.
    """
    if len(x.shape) != 4 or len(w.shape) != 5 or w.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"conv_transpose3d input {x.shape} with kernel {w.shape}")
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    spatial = x.shape[1:]
    full = tuple((n - 1) * stride + k for n in spatial)
    out_sp = tuple(f - 2 * pad for f in full)
    if min(out_sp) < 1:
        raise ShapeMismatch(f"transpose conv output {out_sp} is empty")
    npos = int(np.prod(spatial))
    xf = x.data.reshape(cin, npos)
    offsets = [(i, j, l) for i in range(k) for j in range(k) for l in range(k)]

    def window(arr, i, j, l):
        return arr[:, i : i + stride * spatial[0] : stride,
                      j : j + stride * spatial[1] : stride,
                      l : l + stride * spatial[2] : stride]

    outf = np.zeros((cout,) + full, dtype=x.dtype)
    for i, j, l in offsets:
        window(outf, i, j, l)[...] += (w.data[:, :, i, j, l] @ xf).reshape((cout,) + spatial)
    out = outf[:, pad : pad + out_sp[0], pad : pad + out_sp[1], pad : pad + out_sp[2]] if pad else outf
    if b is not None:
        out = out + b.data.reshape(cout, 1, 1, 1)

    def back(g):
        gf = np.zeros((cout,) + full, dtype=g.dtype)
        gf[:, pad : pad + out_sp[0], pad : pad + out_sp[1], pad : pad + out_sp[2]] = g
        gw = np.zeros_like(w.data) if w.requires_grad else None
        gx = np.zeros((cin, npos), dtype=x.dtype) if x.requires_grad else None
        for i, j, l in offsets:
            gwin = window(gf, i, j, l).reshape(cout, npos)
            if gw is not None:
                gw[:, :, i, j, l] = gwin @ xf.T
            if gx is not None:
                gx += w.data[:, :, i, j, l].T @ gwin
        gb = g.sum(axis=(1, 2, 3)) if b is not None else None
        return (gx.reshape(x.shape) if gx is not None else None), gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _record(np.ascontiguousarray(out), inputs, back)


# ---------------------------------------------------------------------------
# layout

@op
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}")
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


@op
def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(len(a.shape))):
        raise ShapeMismatch(f"invalid permutation {axes} for rank {len(a.shape)}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inverse),))


@op
def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along axis 0."""
    rest = {t.shape[1:] for t in tensors}
    if len(rest) != 1:
        raise ShapeMismatch(f"concat of incompatible shapes {[t.shape for t in tensors]}")
    sizes = np.cumsum([t.shape[0] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=0))

    return _record(np.concatenate([t.data for t in tensors], axis=0), tensors, back)


@op
def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = a.shape[axis]
    if not 0 <= start < stop <= n:
        raise ShapeMismatch(f"slice [{start}:{stop}] out of range for axis of length {n}")
    index = [slice(None)] * len(a.shape)
    index[axis] = slice(start, stop)
    index = tuple(index)

    def back(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(np.ascontiguousarray(a.data[index]), (a,), back)


# ---------------------------------------------------------------------------
# parameter checkpoints

CHECKPOINT_MAGIC = b"HNSGCKP1"


def save_tensors(named: dict, meta: Optional[dict] = None) -> bytes:
    """Ordered (name, shape, little-endian float32 values) records behind a version magic.

    ``meta`` is stored as a JSON header ahead of the records.
    """
    head = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(head)), head, struct.pack("<I", len(named))]
    for name, arr in named.items():
        arr = np.asarray(arr)
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def load_tensors(blob: bytes) -> tuple[dict, dict]:
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    meta = json.loads(blob[pos : pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    named = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        named[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    return named, meta
