"""Dense float32 tensor engine with taped reverse-mode differentiation.

A Tensor wraps a C-contiguous float32 ndarray plus an optional gradient
buffer.  Operations executed while a Tape is active append a backward
closure to the tape; Tape.backward walks the records in reverse and
accumulates gradients additively into every requires_grad leaf.  Tensors
are treated as immutable after creation (only .grad buffers mutate),
except for explicitly documented stateful buffers such as batch-norm
running statistics and optimizer-owned parameter data.

Broadcasting in the binary elementwise ops is limited to scalars (python
numbers or single-element tensors); anything richer must go through
expand() so shape changes stay visible at call sites.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .errors import ConfigError, ContractError, FormatError, ShapeError, StateError

_f32 = np.float32

# Largest number of im2col elements materialized per convolution chunk.
_COL_CHUNK_ELEMS = 6_000_000


class Tensor:
    """Dense N-dimensional float32 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_f32)
        if arr.size == 0 or 0 in arr.shape:
            raise ShapeError(f"tensor shape {arr.shape} contains a zero dimension")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar used throughout the network code.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed differentiable operations.

    Records form a DAG in execution (hence topological) order.  A tape
    supports exactly one backward traversal; a second call raises
    StateError.  Gradients accumulate additively, so callers zero
    parameter grads between optimizer steps.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPES.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise StateError("tape already consumed by a previous backward call")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            fn(g)
            out.grad = None  # free intermediate buffers as soon as consumed


def _tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def backward(loss: Tensor) -> None:
    """Run backward on the innermost active tape."""
    tp = _tape()
    if tp is None:
        raise StateError("backward called with no active tape")
    tp.backward(loss)


def _emit(out: Tensor, fn) -> Tensor:
    tp = _TAPES[-1] if _TAPES else None
    if tp is not None and out.requires_grad:
        tp._records.append((out, fn))
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    """Accumulate g into t.grad, copying on first store so buffers never alias."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=_f32)
    else:
        t.grad += g


def stop_gradient(x: Tensor) -> Tensor:
    """Value copy detached from the tape."""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def _as_operands(a: Tensor, b):
    """Classify the second operand: same-shape tensor, scalar tensor, or number."""
    if isinstance(b, Tensor):
        if b.shape == a.shape:
            return b, "tensor"
        if b.size == 1:
            return b, "scalar_tensor"
        if a.size == 1:
            return b, "scalar_self"
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape} (only scalar broadcast allowed)")
    return float(b), "number"


def add(a: Tensor, b) -> Tensor:
    b, kind = _as_operands(a, b)
    if kind == "number":
        out = Tensor(a.data + b, a.requires_grad)
        return _emit(out, lambda g: _acc(a, g))
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)

    def bwd(g):
        _acc_broadcast(a, g)
        _acc_broadcast(b, g)

    return _emit(out, bwd)


def sub(a: Tensor, b) -> Tensor:
    b, kind = _as_operands(a, b)
    if kind == "number":
        out = Tensor(a.data - b, a.requires_grad)
        return _emit(out, lambda g: _acc(a, g))
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)

    def bwd(g):
        _acc_broadcast(a, g)
        _acc_broadcast(b, -g)

    return _emit(out, bwd)


def _acc_broadcast(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = np.asarray(g.sum(), dtype=_f32).reshape(t.data.shape)
    _acc(t, g)


def mul(a: Tensor, b) -> Tensor:
    b, kind = _as_operands(a, b)
    if kind == "number":
        return scale(a, b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)

    def bwd(g):
        _acc_broadcast(a, g * b.data)
        _acc_broadcast(b, g * a.data)

    return _emit(out, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * _f32(s), a.requires_grad)
    return _emit(out, lambda g: _acc(a, g * _f32(s)))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), a.requires_grad)
    if out.requires_grad:
        mask = a.data > 0.0
        return _emit(out, lambda g: _acc(a, g * mask))
    return out


def sigmoid(a: Tensor) -> Tensor:
    e = np.exp(-np.abs(a.data))
    y = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(_f32)
    out = Tensor(y, a.requires_grad)
    return _emit(out, lambda g: _acc(a, g * (out.data * (1.0 - out.data))))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), a.requires_grad)
    return _emit(out, lambda g: _acc(a, g * out.data))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), a.requires_grad)
    return _emit(out, lambda g: _acc(a, g / a.data))


def reciprocal(a: Tensor) -> Tensor:
    out = Tensor(1.0 / a.data, a.requires_grad)
    return _emit(out, lambda g: _acc(a, -g * out.data * out.data))


def abs_(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data), a.requires_grad)
    if out.requires_grad:
        sgn = np.sign(a.data)
        return _emit(out, lambda g: _acc(a, g * sgn))
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(a.data, lo, hi), a.requires_grad)
    if out.requires_grad:
        mask = (a.data > lo) & (a.data < hi)
        return _emit(out, lambda g: _acc(a, g * mask))
    return out


_ELEMENTWISE_KINDS = ("add", "sub", "mul", "relu", "sigmoid", "exp", "log", "scale")


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Spec-surface dispatcher over the elementwise op kinds."""
    if kind not in _ELEMENTWISE_KINDS:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    if kind in ("add", "sub", "mul", "scale"):
        if b is None:
            raise ContractError(f"elementwise {kind!r} needs a second operand")
        return {"add": add, "sub": sub, "mul": mul, "scale": scale}[kind](a, b)
    if b is not None:
        raise ContractError(f"elementwise {kind!r} is unary")
    return {"relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log}[kind](a)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), a.requires_grad)
    return _emit(out, lambda g: _acc(a, g.reshape(a.data.shape)))


def moveaxis(a: Tensor, src, dst) -> Tensor:
    out = Tensor(np.ascontiguousarray(np.moveaxis(a.data, src, dst)), a.requires_grad)
    return _emit(out, lambda g: _acc(a, np.moveaxis(g, dst, src)))


def getitem(a: Tensor, slices) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.data[slices]), a.requires_grad)

    def bwd(g):
        if not a.requires_grad:
            return
        buf = np.zeros(a.data.shape, dtype=_f32)
        buf[slices] = g
        _acc(a, buf)

    return _emit(out, bwd)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    out = Tensor(data, any(p.requires_grad for p in parts))

    def bwd(g):
        ofs = 0
        for p in parts:
            n = p.data.shape[axis]
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(ofs, ofs + n)
            _acc(p, g[tuple(sl)])
            ofs += n

    return _emit(out, bwd)


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast of size-1 axes up to shape (the only broadcast path)."""
    shape = tuple(shape)
    if len(shape) != a.data.ndim:
        raise ShapeError(f"expand needs matching rank, {a.shape} vs {shape}")
    axes = []
    for i, (have, want) in enumerate(zip(a.data.shape, shape)):
        if have != want:
            if have != 1:
                raise ShapeError(f"cannot expand axis {i} from {have} to {want}")
            axes.append(i)
    out = Tensor(np.broadcast_to(a.data, shape).copy(), a.requires_grad)
    ax = tuple(axes)
    return _emit(out, lambda g: _acc(a, g.sum(axis=ax, keepdims=True)))


def gather(a: Tensor, flat_idx: np.ndarray) -> Tensor:
    """Pick elements of the flattened tensor; backward scatter-adds."""
    idx = np.asarray(flat_idx, dtype=np.int64)
    out = Tensor(a.data.reshape(-1)[idx], a.requires_grad)

    def bwd(g):
        if not a.requires_grad:
            return
        buf = np.zeros(a.data.size, dtype=_f32)
        np.add.at(buf, idx, g)
        _acc(a, buf.reshape(a.data.shape))

    return _emit(out, bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims, dtype=_f32), a.requires_grad)

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            _acc(a, np.broadcast_to(g.reshape(()), a.data.shape))
            return
        if not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, ax)
        _acc(a, np.broadcast_to(g, a.data.shape))

    return _emit(out, bwd)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return scale(sum_(a, axis, keepdims), 1.0 / float(n))


def max_reduce(a: Tensor, axis, keepdims: bool = False) -> Tensor:
    """Max over one or more axes; gradient routes to the first argmax."""
    ax = axis if isinstance(axis, tuple) else (axis,)
    ax = tuple(i % a.data.ndim for i in ax)
    keep = [i for i in range(a.data.ndim) if i not in ax]
    perm = keep + list(ax)
    moved = np.transpose(a.data, perm)
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(int(np.prod(lead)) if lead else 1, -1)
    arg = flat.argmax(axis=1)
    vals = flat[np.arange(flat.shape[0]), arg]
    out_shape = lead if not keepdims else tuple(
        1 if i in ax else a.data.shape[i] for i in range(a.data.ndim)
    )
    out = Tensor(vals.reshape(out_shape if out_shape else ()), a.requires_grad)

    def bwd(g):
        if not a.requires_grad:
            return
        buf = np.zeros_like(flat)
        buf[np.arange(flat.shape[0]), arg] = g.reshape(-1)
        buf = buf.reshape(moved.shape)
        _acc(a, np.transpose(buf, np.argsort(perm)))

    return _emit(out, bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            _acc(b, a.data.T @ g)

    return _emit(out, bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over a leading batch axis."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm needs rank-3 operands, got {a.shape} and {b.shape}")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"bmm shapes disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            _acc(b, a.data.transpose(0, 2, 1) @ g)

    return _emit(out, bwd)


def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of bounds for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, a.requires_grad)

    def bwd(g):
        yd = out.data
        _acc(a, yd * (g - (g * yd).sum(axis=axis, keepdims=True)))

    return _emit(out, bwd)


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------


def _depth_chunks(od: int, oh: int, ow: int, kvol: int) -> list[tuple[int, int]]:
    per_d = oh * ow * kvol
    dd = max(1, min(od, _COL_CHUNK_ELEMS // max(1, per_d)))
    return [(d0, min(d0 + dd, od)) for d0 in range(0, od, dd)]


def _tap_slices(k: int, s: int, dd: int, oh: int, ow: int, base: int):
    for t in range(k):
        for u in range(k):
            for v in range(k):
                yield (
                    slice(base + t, base + t + s * (dd - 1) + 1, s),
                    slice(u, u + s * (oh - 1) + 1, s),
                    slice(v, v + s * (ow - 1) + 1, s),
                )


def _tap_matrix(xp: np.ndarray, k: int, s: int, d0: int, d1: int, oh: int, ow: int) -> np.ndarray:
    """Copy the k^3 shifted views of the padded input into [Ci, k^3, dd, oh, ow]."""
    ci = xp.shape[0]
    dd = d1 - d0
    buf = np.empty((ci, k * k * k, dd, oh, ow), dtype=_f32)
    for j, sl in enumerate(_tap_slices(k, s, dd, oh, ow, d0 * s)):
        buf[:, j] = xp[:, sl[0], sl[1], sl[2]]
    return buf


def _pad_spatial(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    c, d, h, w = x.shape
    out = np.zeros((c, d + 2 * p, h + 2 * p, w + 2 * p), dtype=_f32)
    out[:, p : p + d, p : p + h, p : p + w] = x
    return out


def conv3d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a [Ci,D,H,W] input with a [Co,Ci,k,k,k] kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 5:
        raise ShapeError(f"conv3d expects [Ci,D,H,W] and [Co,Ci,k,k,k], got {x.shape}, {kernel.shape}")
    co, ci, k, k2, k3 = kernel.data.shape
    if k != k2 or k != k3 or k % 2 == 0:
        raise ConfigError(f"conv3d kernel must be cubic with odd side, got {kernel.shape}")
    if padding < 0:
        raise ConfigError("conv3d padding must be nonnegative")
    if ci != x.data.shape[0]:
        raise ShapeError(f"conv3d channel mismatch: input {x.data.shape[0]}, kernel {ci}")
    dims = x.data.shape[1:]
    outs = []
    for d in dims:
        num = d + 2 * padding - k
        if num < 0 or num % stride != 0:
            raise ConfigError(
                f"conv3d output dimension ({d}+2*{padding}-{k})/{stride}+1 is not integral"
            )
        outs.append(num // stride + 1)
    od, oh, ow = outs

    xp = _pad_spatial(x.data, padding)
    w2 = kernel.data.reshape(co, -1)
    chunks = _depth_chunks(od, oh, ow, w2.shape[1])
    y = np.empty((co, od, oh, ow), dtype=_f32)
    taps_cache = None
    for d0, d1 in chunks:
        taps = _tap_matrix(xp, k, stride, d0, d1, oh, ow)
        y[:, d0:d1] = (w2 @ taps.reshape(w2.shape[1], -1)).reshape(co, d1 - d0, oh, ow)
        if len(chunks) == 1:
            taps_cache = taps
    out = Tensor(y, x.requires_grad or kernel.requires_grad)

    def bwd(g):
        need_dx = x.requires_grad
        dxp = np.zeros_like(xp) if need_dx else None
        dw2 = np.zeros_like(w2) if kernel.requires_grad else None
        w2t = w2.T.copy() if need_dx else None
        for d0, d1 in chunks:
            g2 = g[:, d0:d1].reshape(co, -1)
            if dw2 is not None:
                taps = taps_cache if taps_cache is not None else _tap_matrix(
                    xp, k, stride, d0, d1, oh, ow
                )
                dw2 += g2 @ taps.reshape(w2.shape[1], -1).T
            if need_dx:
                dcol = (w2t @ g2).reshape(ci, k * k * k, d1 - d0, oh, ow)
                for j, sl in enumerate(_tap_slices(k, stride, d1 - d0, oh, ow, d0 * stride)):
                    dxp[:, sl[0], sl[1], sl[2]] += dcol[:, j]
        if dw2 is not None:
            _acc(kernel, dw2.reshape(kernel.data.shape))
        if need_dx:
            p = padding
            _acc(x, dxp[:, p : p + dims[0], p : p + dims[1], p : p + dims[2]] if p else dxp)

    return _emit(out, bwd)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias vector to a [C, ...] tensor."""
    if b.data.ndim != 1 or b.data.shape[0] != x.data.shape[0]:
        raise ShapeError(f"bias shape {b.shape} does not match channels of {x.shape}")
    view = b.data.reshape((-1,) + (1,) * (x.data.ndim - 1))
    out = Tensor(x.data + view, x.requires_grad or b.requires_grad)
    ax = tuple(range(1, x.data.ndim))

    def bwd(g):
        if x.requires_grad:
            _acc(x, g)
        if b.requires_grad:
            _acc(b, g.sum(axis=ax))

    return _emit(out, bwd)


def avg_pool2(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2 expects [C,D,H,W], got {x.shape}")
    c, d, h, w = x.data.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {x.shape}")
    y = x.data.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(2, 4, 6), dtype=_f32)
    out = Tensor(y, x.requires_grad)

    def bwd(g):
        gg = (g * _f32(0.125)).repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)
        _acc(x, gg)

    return _emit(out, bwd)


def nearest_upsample2(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"nearest_upsample2 expects [C,D,H,W], got {x.shape}")
    y = x.data.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)
    out = Tensor(y, x.requires_grad)
    c, d, h, w = x.data.shape

    def bwd(g):
        _acc(x, g.reshape(c, d, 2, h, 2, w, 2).sum(axis=(2, 4, 6), dtype=_f32))

    return _emit(out, bwd)


def pool_resize(x: Tensor, mode: str) -> Tensor:
    if mode == "avg_pool2":
        return avg_pool2(x)
    if mode == "nearest_upsample2":
        return nearest_upsample2(x)
    raise ContractError(f"unknown pool_resize mode {mode!r}")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over the spatial axes of [C,D,H,W].

    Training mode normalizes with the current patch statistics and updates
    the running buffers in place; eval mode normalizes with the buffers.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects [C,D,H,W], got {x.shape}")
    ax = (1, 2, 3)
    if training:
        mu = x.data.mean(axis=ax, dtype=_f32)
        var = x.data.var(axis=ax, dtype=_f32)
        running_mean *= _f32(1.0 - momentum)
        running_mean += _f32(momentum) * mu
        running_var *= _f32(1.0 - momentum)
        running_var += _f32(momentum) * var
    else:
        mu = running_mean
        var = running_var
    inv = (1.0 / np.sqrt(var + _f32(eps))).astype(_f32)
    xhat = (x.data - mu[:, None, None, None]) * inv[:, None, None, None]
    y = gamma.data[:, None, None, None] * xhat + beta.data[:, None, None, None]
    out = Tensor(y, x.requires_grad or gamma.requires_grad or beta.requires_grad)
    n = x.data.shape[1] * x.data.shape[2] * x.data.shape[3]

    def bwd(g):
        if beta.requires_grad:
            _acc(beta, g.sum(axis=ax))
        gxh = (g * xhat).sum(axis=ax)
        if gamma.requires_grad:
            _acc(gamma, gxh)
        if x.requires_grad:
            gi = (gamma.data * inv)[:, None, None, None]
            if training:
                gm = g.sum(axis=ax) / _f32(n)
                dx = gi * (g - gm[:, None, None, None] - xhat * (gxh / _f32(n))[:, None, None, None])
            else:
                dx = gi * g
            _acc(x, dx)

    return _emit(out, bwd)


# ---------------------------------------------------------------------------
# periodized filter bank primitives (last axis)
# ---------------------------------------------------------------------------


def _down_pass(xd: np.ndarray, filt: np.ndarray, start: int) -> np.ndarray:
    n = xd.shape[-1]
    m = n // 2
    y = np.zeros(xd.shape[:-1] + (m,), dtype=_f32)
    for t, ft in enumerate(filt):
        shift = (start + t) % n
        par, q = shift & 1, shift >> 1
        v = xd[..., par::2]
        y += ft * np.roll(v, -q, axis=-1)
    return y


def _up_pass(yd: np.ndarray, filt: np.ndarray, start: int, n: int) -> np.ndarray:
    outd = np.zeros(yd.shape[:-1] + (n,), dtype=_f32)
    for t, ft in enumerate(filt):
        shift = (start + t) % n
        par, q = shift & 1, shift >> 1
        outd[..., par::2] += ft * np.roll(yd, q, axis=-1)
    return outd


def circ_filter_down(x: Tensor, filt: np.ndarray, start: int) -> Tensor:
    """y[..., i] = sum_t filt[t] * x[..., (2i + start + t) mod n]; n must be even."""
    n = x.data.shape[-1]
    if n % 2:
        raise ShapeError(f"circ_filter_down needs an even last axis, got {n}")
    out = Tensor(_down_pass(x.data, filt, start), x.requires_grad)
    return _emit(out, lambda g: _acc(x, _up_pass(g, filt, start, n)))


def circ_up_filter(y: Tensor, filt: np.ndarray, start: int) -> Tensor:
    """Adjoint of circ_filter_down: scatter y through the filter taps onto 2n slots."""
    n = 2 * y.data.shape[-1]
    out = Tensor(_up_pass(y.data, filt, start, n), y.requires_grad)
    return _emit(out, lambda g: _acc(y, _down_pass(g, filt, start)))


# ---------------------------------------------------------------------------
# parameter serialization
# ---------------------------------------------------------------------------


def save_tensors(path, named: list[tuple[str, np.ndarray]], header: dict | None = None) -> None:
    """Write named float32 arrays as a JSON manifest line plus a raw LE stream.

    An optional header dict is written as its own JSON line before the
    manifest (used by checkpoints for iteration / RNG state / config hash).
    """
    manifest = [{"name": n, "shape": list(a.shape)} for n, a in named]
    with open(path, "wb") as fh:
        if header is not None:
            fh.write(json.dumps(header).encode() + b"\n")
        fh.write(json.dumps({"tensors": manifest}).encode() + b"\n")
        for _, a in named:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_tensors(path, with_header: bool = False):
    """Read a stream written by save_tensors; returns (header?, dict name->array)."""
    with open(path, "rb") as fh:
        header = None
        if with_header:
            header = json.loads(fh.readline().decode())
        manifest = json.loads(fh.readline().decode())["tensors"]
        payload = fh.read()
    expected = sum(int(np.prod(m["shape"])) if m["shape"] else 1 for m in manifest) * 4
    if len(payload) != expected:
        raise FormatError(
            f"tensor stream size mismatch: expected {expected} bytes, got {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    tensors: dict[str, np.ndarray] = {}
    ofs = 0
    for m in manifest:
        size = int(np.prod(m["shape"])) if m["shape"] else 1
        tensors[m["name"]] = flat[ofs : ofs + size].reshape(m["shape"]).astype(_f32)
        ofs += size
    if with_header:
        return header, tensors
    return tensors
