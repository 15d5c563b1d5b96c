"""Dense tensors with reverse-mode differentiation on an explicit tape.

Every differentiable op appends one record (inputs, output, backward closure)
to a per-thread tape.  ``backward`` walks that tape once in reverse and
accumulates gradients into leaf tensors.  Arrays are plain numpy; float32 is
the default and ``precision(np.float64)`` switches globally for gradient
checks.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

# tanh approximation of GeLU
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

_default_dtype = np.dtype(np.float32)
_local = threading.local()


def default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the global floating point dtype."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@dataclass
class _Record:
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


@dataclass
class MacCounter:
    macs: int = 0


def _thread_state():
    if not hasattr(_local, "tape"):
        _local.tape = Tape()
        _local.grad_enabled = True
        _local.detect_anomaly = False
        _local.counters = []
    return _local


def get_tape() -> Tape:
    return _thread_state().tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    st = _thread_state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


@contextlib.contextmanager
def detect_anomaly() -> Iterator[None]:
    """Raise FloatingPointError as soon as any op produces NaN or Inf."""
    st = _thread_state()
    prev = st.detect_anomaly
    st.detect_anomaly = True
    try:
        yield
    finally:
        st.detect_anomaly = prev


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count the scalar multiply-accumulates executed by matmul and conv2d."""
    st = _thread_state()
    counter = MacCounter()
    st.counters.append(counter)
    try:
        yield counter
    finally:
        st.counters.remove(counter)


def _add_macs(n: int) -> None:
    for c in _thread_state().counters:
        c.macs += int(n)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_record", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._record: _Record | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    arr = np.array(data, dtype=_default_dtype)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


def _make(data: np.ndarray, inputs: tuple, backward) -> Tensor:
    st = _thread_state()
    if st.detect_anomaly and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {backward.__qualname__}")
    out = Tensor(data)
    if st.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        rec = _Record(inputs, out, backward)
        out._record = rec
        st.tape.records.append(rec)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Gradients accumulate additively; callers zero them between steps.  The
    tape is consumed (cleared) afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    rec = loss._record
    if rec is None:
        if loss.requires_grad:
            loss.grad = (loss.grad if loss.grad is not None else 0) + np.ones_like(loss.data)
            return
        raise ContractError("loss is not on the tape")
    try:
        end = next(i for i in range(len(tape.records) - 1, -1, -1) if tape.records[i] is rec)
    except StopIteration:
        raise ContractError("loss is not on the current tape") from None

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for r in reversed(tape.records[: end + 1]):
        g = grads.pop(id(r.output), None)
        if g is None:
            continue
        for inp, gi in zip(r.inputs, r.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._record is None:
                inp.grad = gi.astype(inp.data.dtype, copy=True) if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    for r in tape.records:
        r.output._record = None
    tape.clear()


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting; ``b`` may be a scalar or array constant."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        sa = a.shape

        def bwc(g):
            return (_unbroadcast(g * c, sa),)

        return _make(a.data * c, (a,), bwc)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _make(ad * bd, (a, b), bw)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    inner = GELU_C * (xd + GELU_A * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xd * xd)
        return (g * d,)

    return _make(out, (x,), bw)


# --- shape ---------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if not axes:
        axes = tuple(range(x.ndim))[::-1]
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        if _is_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(x.data[idx], (x,), bw)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def zero_pad_channels(x: Tensor, target: int) -> Tensor:
    """Append zeros on the last axis up to ``target`` channels."""
    c = x.shape[-1]
    if target < c:
        raise DimensionError(f"cannot pad {c} channels down to {target}")
    if target == c:
        return x
    pad = [(0, 0)] * (x.ndim - 1) + [(0, target - c)]
    return _make(np.pad(x.data, pad), (x,), lambda g: (g[..., :c],))


def slice_channels(x: Tensor, c: int) -> Tensor:
    """Keep the first ``c`` channels of the last axis."""
    if not 1 <= c <= x.shape[-1]:
        raise DimensionError(f"cannot slice {c} of {x.shape[-1]} channels")
    return index(x, (Ellipsis, slice(0, c)))


def seq_to_grid(tokens: Tensor) -> Tensor:
    """[..., N, d] token sequence (row-major) -> [..., d, s, s] feature map."""
    *lead, n, d = tokens.shape
    s = math.isqrt(n)
    if s * s != n:
        raise DimensionError(f"sequence length {n} is not a perfect square")
    x = reshape(tokens, (*lead, s, s, d))
    nl = len(lead)
    return transpose(x, (*range(nl), nl + 2, nl, nl + 1))


def grid_to_seq(grid: Tensor) -> Tensor:
    """Inverse of :func:`seq_to_grid`."""
    *lead, d, h, w = grid.shape
    nl = len(lead)
    x = transpose(grid, (*range(nl), nl + 1, nl + 2, nl))
    return reshape(x, (*lead, h * w, d))


# --- reductions --------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# --- linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    m, k = a.shape[-2:]
    n = b.shape[-1]
    _add_macs(int(np.prod(out.shape[:-2], dtype=np.int64)) * m * k * n)
    ad, bd, sa, sb = a.data, b.data, a.shape, b.shape

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), sa)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, sb)
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b), with ``w`` stored as [d_in, d_out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# --- normalization and softmax --------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6, active=None) -> Tensor:
    """Normalize over the last axis.

    With ``active`` (int or integer array broadcastable to ``x.shape[:-1]``)
    the statistics are re-scaled to the active prefix: mean = sum(x)/active,
    var = sum(x^2)/active - mean^2 with sums over every slot, and slots at or
    beyond ``active`` are zeroed on output.  Inactive inputs are expected to be
    zero, in which case this equals plain layer norm on the prefix.
    """
    xd = x.data
    c = xd.shape[-1]
    if active is None:
        n = np.full(xd.shape[:-1] + (1,), float(c), dtype=xd.dtype)
        m = None
    else:
        act = np.broadcast_to(np.asarray(active), xd.shape[:-1])
        if np.any(act < 1) or np.any(act > c):
            raise ContractError(f"active width out of range [1, {c}]")
        n = act[..., None].astype(xd.dtype)
        m = (np.arange(c) < act[..., None]).astype(xd.dtype)
    mu = xd.sum(axis=-1, keepdims=True) / n
    diff = xd - mu
    if m is None:
        var = (diff * diff).sum(axis=-1, keepdims=True) / n
    else:
        # algebraically sum(x^2)/n - mu^2, arranged so zero inactive slots add nothing
        var = ((diff * diff * m).sum(axis=-1, keepdims=True) + (xd * (xd - 2 * mu) * (1 - m)).sum(axis=-1, keepdims=True)) / n
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = diff * rstd
    out = xhat * gamma.data + beta.data
    if m is not None:
        out = out * m
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gm = g if m is None else g * m
        gx = gm * gamma.data
        sg = gx.sum(axis=-1, keepdims=True)
        sgx = (gx * xhat).sum(axis=-1, keepdims=True)
        dx = rstd * (gx - sg / n - xhat * sgx / n)
        return dx, (gm * xhat).sum(axis=lead), gm.sum(axis=lead)

    return _make(out, (x, gamma, beta), bw)


# --- convolution and pooling ---------------------------------------------------


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B, C_in, H, W] with [C_out, C_in, k, k] weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and weight")
    bsz, cin, h, wid = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin or k != k2:
        raise DimensionError(f"conv2d weight {w.shape} incompatible with input {x.shape}")
    ho, wo = _out_extent(h, k, stride, padding), _out_extent(wid, k, stride, padding)
    if ho < 1 or wo < 1 or h + 2 * padding < k or wid + 2 * padding < k:
        raise DimensionError(f"conv2d output extent nonpositive for input {h}x{wid}, k={k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    _add_macs(bsz * ho * wo * k * k * cin * cout)
    wd, xshape = w.data, xp.shape

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros(xshape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(g, wd[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
        gx = gxp[:, :, padding : padding + h, padding : padding + wid] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make(np.ascontiguousarray(out), inputs, bw)


def avg_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping window mean (``k == stride``)."""
    if k != stride:
        raise ContractError("only non-overlapping pooling (k == stride) is supported")
    bsz, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"pooling {h}x{w} needs extents divisible by {k}")
    out = x.data.reshape(bsz, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _make(out, (x,), bw)


# --- gradient checking ----------------------------------------------------------


# antisymmetric central-difference stencils: order -> ((k, w), ...) with
# f'(x) ~ sum w * (f(x + k h) - f(x - k h)) / h
_STENCILS = {
    2: ((1, 1 / 2),),
    4: ((1, 8 / 12), (2, -1 / 12)),
    6: ((1, 45 / 60), (2, -9 / 60), (3, 1 / 60)),
}


def numerical_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-3, order: int = 4) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``t.data``.

    Higher ``order`` allows a larger ``h`` for the same truncation error,
    which keeps roundoff small on elements whose gradient is tiny.  Paired
    differences make the estimate exactly zero where ``f`` ignores the element.
    """
    if order not in _STENCILS:
        raise ValueError(f"order must be one of {sorted(_STENCILS)}")
    g = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            acc = 0.0
            for k, w in _STENCILS[order]:
                flat[i] = orig + k * h
                fp = float(f().data.sum())
                flat[i] = orig - k * h
                fm = float(f().data.sum())
                acc += w * (fp - fm)
            flat[i] = orig
            gflat[i] = acc / h
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradcheck(
    f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-3, floor: float = 1e-8, order: int = 4
) -> float:
    """Max relative error between tape gradients and central differences."""
    for t in inputs:
        t.grad = None
    backward(f())
    worst = 0.0
    for t in inputs:
        num = numerical_grad(f, t, h, order)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(ana, num, floor))
    return worst
