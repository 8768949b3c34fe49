"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything in the package computes on these tensors. Operations record
themselves on a linear gradient tape in execution order; ``backward`` replays
the tape in reverse (reverse execution order is a valid reverse-topological
order, so every recorded op is visited exactly once). Layout is row-major
dense float64 only; broadcasting follows numpy rules where an op supports it.

Every op output is checked for NaN/Inf (an error state per the numeric
contract). The check can be suspended for long training loops with
``finite_checks(False)``; the training step then checks the loss explicitly.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ContractError, NumericError, ParameterError, ShapeError

__all__ = [
    "Tensor", "GradTape", "tape", "no_grad", "is_grad_enabled", "finite_checks",
    "backward", "finite_diff_check",
    "matmul", "linear", "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt",
    "square", "absolute", "minimum_const", "tanh", "sigmoid", "gelu", "relu",
    "softmax", "log_softmax", "masked_softmax", "l2_normalize", "layer_norm",
    "bce_with_logits", "tsum", "tmean", "reshape", "transpose", "concat",
    "stack", "slice_take", "gather_last", "repeat_axis", "conv2d",
    "bilinear_resize", "sample_points", "sample_weighted", "deform_sample",
    "bilinear_sample", "ffn_2layer", "attention_core", "unstack_time",
]

_GRAD_ENABLED = True
_FINITE_CHECKS = True


class GradTape:
    """Ordered record of ops: (output tensor, adjoint function) pairs."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def reset(self):
        self.nodes.clear()


_TAPE = GradTape()


def tape() -> GradTape:
    """The active gradient tape (owned by one training step at a time)."""
    return _TAPE


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (streaming inference runs under this)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


class Tensor:
    """A dense float64 array, optionally participating in the gradient tape.

    ``data`` is row-major float64; ``grad``, when present, always has the same
    shape as ``data``. Tensors are treated as immutable values once created,
    except for gradient accumulation.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
            raise NumericError("tensor created with non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def numpy(self) -> np.ndarray:
        """A detached copy of the underlying buffer."""
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_take(self, key)


def _scalar_err(t):
    raise ContractError(f"expected a scalar tensor, got shape {t.data.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _out(arr) -> Tensor:
    """Wrap an op result without copying; run the finite check."""
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError("operation produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.grad = None
    t.requires_grad = False
    return t


def _rec(out: Tensor, back) -> None:
    out.requires_grad = True
    _TAPE.nodes.append((out, back))


def _track(*ts) -> bool:
    if not _GRAD_ENABLED:
        return False
    return any(t.requires_grad for t in ts)


def _acc(t: Tensor, g: np.ndarray, owned: bool = True) -> None:
    """Accumulate ``g`` into ``t.grad``. ``owned`` means g is not aliased."""
    if t.grad is None:
        t.grad = g if owned else g.copy()
    else:
        t.grad += g


def _unbcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    The tape is consumed: each recorded op's adjoint runs exactly once, in
    reverse execution order, and the tape is reset afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    nodes = _TAPE.nodes
    loss.grad = np.ones_like(loss.data)
    try:
        for out, back in reversed(nodes):
            g = out.grad
            if g is None:
                continue
            back(g)
            out.grad = None  # free intermediate storage early
    finally:
        _TAPE.nodes = []


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    out = _out(a.data + b.data)
    if _track(a, b):
        def back(g, a=a, b=b):
            if a.requires_grad:
                _acc(a, _unbcast(g, a.data.shape), owned=False)
            if b.requires_grad:
                _acc(b, _unbcast(g, b.data.shape), owned=False)
        _rec(out, back)
    return out


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    out = _out(a.data - b.data)
    if _track(a, b):
        def back(g, a=a, b=b):
            if a.requires_grad:
                _acc(a, _unbcast(g, a.data.shape), owned=False)
            if b.requires_grad:
                _acc(b, _unbcast(-g, b.data.shape))
        _rec(out, back)
    return out


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    out = _out(a.data * b.data)
    if _track(a, b):
        def back(g, a=a, b=b):
            if a.requires_grad:
                _acc(a, _unbcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _acc(b, _unbcast(g * a.data, b.data.shape))
        _rec(out, back)
    return out


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _out(a.data / b.data)
    if _track(a, b):
        def back(g, a=a, b=b, out=out):
            if a.requires_grad:
                _acc(a, _unbcast(g / b.data, a.data.shape))
            if b.requires_grad:
                _acc(b, _unbcast(-g * out.data / b.data, b.data.shape))
        _rec(out, back)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = _out(-a.data)
    if _track(a):
        def back(g, a=a):
            _acc(a, -g)
        _rec(out, back)
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = _out(np.exp(a.data))
    if _track(a):
        def back(g, a=a, out=out):
            _acc(a, g * out.data)
        _rec(out, back)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _out(np.log(a.data))
    if _track(a):
        def back(g, a=a):
            _acc(a, g / a.data)
        _rec(out, back)
    return out


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = _out(np.sqrt(a.data))
    if _track(a):
        def back(g, a=a, out=out):
            _acc(a, g / (2.0 * out.data))
        _rec(out, back)
    return out


def square(a) -> Tensor:
    a = _as_tensor(a)
    out = _out(a.data * a.data)
    if _track(a):
        def back(g, a=a):
            _acc(a, 2.0 * g * a.data)
        _rec(out, back)
    return out


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    out = _out(np.abs(a.data))
    if _track(a):
        def back(g, a=a):
            _acc(a, g * np.sign(a.data))
        _rec(out, back)
    return out


def minimum_const(a, cap: float) -> Tensor:
    """Elementwise min(a, cap); gradient flows only where a < cap."""
    a = _as_tensor(a)
    out = _out(np.minimum(a.data, cap))
    if _track(a):
        def back(g, a=a, cap=cap):
            _acc(a, g * (a.data < cap))
        _rec(out, back)
    return out


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = _out(np.tanh(a.data))
    if _track(a):
        def back(g, a=a, out=out):
            _acc(a, g * (1.0 - out.data * out.data))
        _rec(out, back)
    return out


def _sigmoid_data(d: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(d))
    return np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _out(_sigmoid_data(a.data))
    if _track(a):
        def back(g, a=a, out=out):
            _acc(a, g * out.data * (1.0 - out.data))
        _rec(out, back)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Smooth GELU (tanh form)."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    th = np.tanh(inner)
    out = _out(0.5 * x * (1.0 + th))
    if _track(a):
        def back(g, a=a, th=th, x=x, x2=x2):
            dinner = _GELU_C * (1.0 + 0.134145 * x2)
            d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
            _acc(a, g * d)
        _rec(out, back)
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = _out(np.maximum(a.data, 0.0))
    if _track(a):
        def back(g, a=a):
            _acc(a, g * (a.data > 0))
        _rec(out, back)
    return out


# ---------------------------------------------------------------------------
# matmul / linear
# ---------------------------------------------------------------------------


def _swapT(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def ffn_2layer(x, w1, b1, w2, b2) -> Tensor:
    """gelu-MLP fused into one node: gelu(x @ w1 + b1) @ w2 + b2."""
    x = _as_tensor(x)
    z = np.matmul(x.data, w1.data)
    z += b1.data
    z2 = z * z
    inner = _GELU_C * (z + 0.044715 * z2 * z)
    th = np.tanh(inner)
    a = 0.5 * z * (1.0 + th)
    out_data = np.matmul(a, w2.data)
    out_data += b2.data
    out = _out(out_data)
    if _track(x, w1, b1, w2, b2):
        def back(g, x=x, w1=w1, b1=b1, w2=w2, b2=b2, z=z, z2=z2, th=th, a=a):
            g2 = g.reshape(-1, g.shape[-1])
            a2 = a.reshape(-1, a.shape[-1])
            if b2.requires_grad:
                _acc(b2, g2.sum(axis=0))
            if w2.requires_grad:
                _acc(w2, np.matmul(a2.T, g2))
            da = np.matmul(g, w2.data.T)
            dinner = _GELU_C * (1.0 + 0.134145 * z2)
            dz = da * (0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * dinner)
            dz2 = dz.reshape(-1, dz.shape[-1])
            if b1.requires_grad:
                _acc(b1, dz2.sum(axis=0))
            if w1.requires_grad:
                x2 = x.data.reshape(-1, x.data.shape[-1])
                _acc(w1, np.matmul(x2.T, dz2))
            if x.requires_grad:
                _acc(x, np.matmul(dz, w1.data.T))
        _rec(out, back)
    return out


def attention_core(qh, kh, vh, excluded: np.ndarray | None) -> Tensor:
    """softmax(qh @ kh^T / sqrt(dh), masked) @ vh fused into one node.

    qh/kh/vh: [G,h,n,dh]; excluded broadcastable to [G,h,nq,nk]. Rows with all
    keys excluded yield zero context.
    """
    qh = _as_tensor(qh)
    kh = _as_tensor(kh)
    vh = _as_tensor(vh)
    scale = 1.0 / np.sqrt(qh.data.shape[-1])
    scores = np.matmul(qh.data, np.swapaxes(kh.data, -1, -2))
    scores *= scale
    if excluded is None:
        z = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(z)
        attn = e / e.sum(axis=-1, keepdims=True)
    else:
        excluded = np.broadcast_to(excluded, scores.shape)
        big = np.where(excluded, -np.inf, scores)
        m = big.max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.exp(scores - m)
        e[excluded] = 0.0
        ssum = e.sum(axis=-1, keepdims=True)
        attn = np.divide(e, ssum, out=np.zeros_like(e), where=ssum > 0)
    out = _out(np.matmul(attn, vh.data))
    if _track(qh, kh, vh):
        def back(g, qh=qh, kh=kh, vh=vh, attn=attn, scale=scale):
            if vh.requires_grad:
                _acc(vh, np.matmul(np.swapaxes(attn, -1, -2), g))
            dattn = np.matmul(g, np.swapaxes(vh.data, -1, -2))
            ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
            ds *= scale
            if qh.requires_grad:
                _acc(qh, np.matmul(ds, kh.data))
            if kh.requires_grad:
                _acc(kh, np.matmul(np.swapaxes(ds, -1, -2), qh.data))
        _rec(out, back)
    return out


def unstack_time(x, axis: int = 1) -> list:
    """Split a [B,T,...] tensor into T contiguous [B,...] tensors.

    All slices share one lazily-created gradient buffer on the parent, so the
    backward cost is a single allocation regardless of T.
    """
    x = _as_tensor(x)
    t_len = x.data.shape[axis]
    outs = []
    for t in range(t_len):
        piece = _out(np.ascontiguousarray(np.take(x.data, t, axis=axis)))
        if _track(x):
            def back(g, x=x, t=t, axis=axis):
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                sl = [slice(None)] * x.data.ndim
                sl[axis] = t
                x.grad[tuple(sl)] += g
            _rec(piece, back)
        outs.append(piece)
    return outs


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul expects operands with ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    out = _out(np.matmul(a.data, b.data))
    if _track(a, b):
        def back(g, a=a, b=b):
            if a.requires_grad:
                _acc(a, _unbcast(np.matmul(g, _swapT(b.data)), a.data.shape))
            if b.requires_grad:
                _acc(b, _unbcast(np.matmul(_swapT(a.data), g), b.data.shape))
        _rec(out, back)
    return out


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b) fused into one tape node. w: [din, dout], b: [dout]."""
    x = _as_tensor(x)
    w = _as_tensor(w)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear: {x.data.shape} @ {w.data.shape}")
    out_data = np.matmul(x.data, w.data)
    if b is not None:
        out_data += b.data
    out = _out(out_data)
    if _track(x, w) or (b is not None and _track(b)):
        def back(g, x=x, w=w, b=b):
            g2 = g.reshape(-1, g.shape[-1])
            if x.requires_grad:
                _acc(x, np.matmul(g, w.data.T))
            if w.requires_grad:
                x2 = x.data.reshape(-1, x.data.shape[-1])
                _acc(w, np.matmul(x2.T, g2))
            if b is not None and b.requires_grad:
                _acc(b, g2.sum(axis=0))
        _rec(out, back)
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = _out(a.data.sum(axis=axis, keepdims=keepdims))
    if _track(a):
        def back(g, a=a, axis=axis, keepdims=keepdims):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(g, a.data.shape).copy())
        _rec(out, back)
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = _out(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.data.size / out.data.size
    if _track(a):
        def back(g, a=a, axis=axis, keepdims=keepdims, n=n):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(g / n, a.data.shape).copy())
        _rec(out, back)
    return out


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = _out(a.data.reshape(shape))
    if _track(a):
        def back(g, a=a):
            _acc(a, g.reshape(a.data.shape), owned=False)
        _rec(out, back)
    return out


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    out = _out(np.transpose(a.data, axes))
    if _track(a):
        inv = np.argsort(axes)
        def back(g, a=a, inv=inv):
            _acc(a, np.transpose(g, inv))
        _rec(out, back)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _out(np.concatenate([t.data for t in tensors], axis=axis))
    if _track(*tensors):
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def back(g, tensors=tensors, offsets=offsets, axis=axis):
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(offsets[i], offsets[i + 1])
                    _acc(t, np.ascontiguousarray(g[tuple(sl)]))
        _rec(out, back)
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _out(np.stack([t.data for t in tensors], axis=axis))
    if _track(*tensors):
        def back(g, tensors=tensors, axis=axis):
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    _acc(t, np.ascontiguousarray(np.take(g, i, axis=axis)))
        _rec(out, back)
    return out


def slice_take(a, key) -> Tensor:
    """Basic (slice/int tuple) indexing on the tape."""
    a = _as_tensor(a)
    out = _out(np.ascontiguousarray(a.data[key]))
    if _track(a):
        def back(g, a=a, key=key):
            buf = np.zeros_like(a.data)
            buf[key] = g
            _acc(a, buf)
        _rec(out, back)
    return out


def repeat_axis(a, axis: int, times: int) -> Tensor:
    """Insert a new axis of length ``times`` at ``axis`` by repetition."""
    a = _as_tensor(a)
    expanded = np.expand_dims(a.data, axis)
    shape = list(expanded.shape)
    shape[axis] = times
    out = _out(np.broadcast_to(expanded, shape).copy())
    if _track(a):
        def back(g, a=a, axis=axis):
            _acc(a, g.sum(axis=axis))
        _rec(out, back)
    return out


def gather_last(a, idx: np.ndarray) -> Tensor:
    """out[...] = a[..., idx[...]] for integer idx of shape a.shape[:-1]."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    if idx.shape != a.data.shape[:-1]:
        raise ShapeError(f"gather_last index shape {idx.shape} vs {a.data.shape}")
    out = _out(np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0])
    if _track(a):
        def back(g, a=a, idx=idx):
            c = a.data.shape[-1]
            rows = a.data.size // c
            flat = np.arange(rows, dtype=np.int64) * c + idx.reshape(-1)
            buf = np.bincount(flat, weights=g.reshape(-1), minlength=rows * c)
            _acc(a, buf.reshape(a.data.shape))
        _rec(out, back)
    return out


# ---------------------------------------------------------------------------
# softmax family / normalization
# ---------------------------------------------------------------------------


def softmax(x, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """exp((x - max x) / temperature) normalized along ``axis``."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    x = _as_tensor(x)
    z = (x.data - x.data.max(axis=axis, keepdims=True)) / temperature
    e = np.exp(z)
    out = _out(e / e.sum(axis=axis, keepdims=True))
    if _track(x):
        def back(g, x=x, out=out, axis=axis, temperature=temperature):
            s = out.data
            inner = (g * s).sum(axis=axis, keepdims=True)
            _acc(x, s * (g - inner) / temperature)
        _rec(out, back)
    return out


def log_softmax(x, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    x = _as_tensor(x)
    z = (x.data - x.data.max(axis=axis, keepdims=True)) / temperature
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = _out(z - lse)
    if _track(x):
        def back(g, x=x, out=out, axis=axis, temperature=temperature):
            s = np.exp(out.data)
            _acc(x, (g - s * g.sum(axis=axis, keepdims=True)) / temperature)
        _rec(out, back)
    return out


def masked_softmax(x, excluded: np.ndarray | None, axis: int = -1) -> Tensor:
    """Softmax over non-excluded entries; fully-excluded rows yield zeros."""
    x = _as_tensor(x)
    d = x.data
    if excluded is None:
        z = d - d.max(axis=axis, keepdims=True)
        e = np.exp(z)
        out = _out(e / e.sum(axis=axis, keepdims=True))
    else:
        excluded = np.broadcast_to(excluded, d.shape)
        big = np.where(excluded, -np.inf, d)
        m = big.max(axis=axis, keepdims=True)
        any_ok = np.isfinite(m)
        m = np.where(any_ok, m, 0.0)
        e = np.exp(d - m)
        e = np.where(excluded, 0.0, e)
        s = e.sum(axis=axis, keepdims=True)
        out = _out(np.divide(e, s, out=np.zeros_like(e), where=s > 0))
    if _track(x):
        def back(g, x=x, out=out, axis=axis):
            s = out.data
            inner = (g * s).sum(axis=axis, keepdims=True)
            _acc(x, s * (g - inner))
        _rec(out, back)
    return out


def l2_normalize(x, axis: int = -1) -> Tensor:
    """x / ||x||; rows whose norm is ~0 map to the zero vector."""
    x = _as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    ok = n > 1e-12
    safe = np.where(ok, n, 1.0)
    out = _out(np.where(ok, x.data / safe, 0.0))
    if _track(x):
        def back(g, x=x, out=out, safe=safe, ok=ok, axis=axis):
            y = out.data
            inner = (g * y).sum(axis=axis, keepdims=True)
            _acc(x, np.where(ok, (g - y * inner) / safe, 0.0))
        _rec(out, back)
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = _out(xn * gamma.data + beta.data)
    if _track(x, gamma, beta):
        def back(g, x=x, gamma=gamma, beta=beta, xn=xn, inv=inv):
            if beta.requires_grad:
                _acc(beta, g.reshape(-1, g.shape[-1]).sum(axis=0))
            if gamma.requires_grad:
                _acc(gamma, (g * xn).reshape(-1, g.shape[-1]).sum(axis=0))
            if x.requires_grad:
                n = g.shape[-1]
                gx = g * gamma.data
                t1 = gx.sum(axis=-1, keepdims=True)
                t2 = (gx * xn).sum(axis=-1, keepdims=True)
                _acc(x, inv * (gx - (t1 + xn * t2) / n))
        _rec(out, back)
    return out


def bce_with_logits(z, target) -> Tensor:
    """Elementwise binary cross-entropy on logits (numerically stable)."""
    z = _as_tensor(z)
    t = np.asarray(target, dtype=np.float64)
    d = z.data
    out = _out(np.maximum(d, 0.0) - d * t + np.log1p(np.exp(-np.abs(d))))
    if _track(z):
        def back(g, z=z, t=t):
            _acc(z, g * (_sigmoid_data(z.data) - t))
        _rec(out, back)
    return out


# ---------------------------------------------------------------------------
# image-shaped ops: conv, resize, bilinear sampling
# ---------------------------------------------------------------------------


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """2-D convolution, SAME padding. x: [B,H,W,Cin], w: [kh,kw,Cin,Cout]."""
    x = _as_tensor(x)
    kh, kw, cin, cout = w.data.shape
    bsz, h, wd, cx = x.data.shape
    if cx != cin:
        raise ShapeError(f"conv2d channels: input {cx} vs kernel {cin}")
    ho = -(-h // stride)
    wo = -(-wd // stride)
    pad_h = max((ho - 1) * stride + kh - h, 0)
    pad_w = max((wo - 1) * stride + kw - wd, 0)
    pt, pl = pad_h // 2, pad_w // 2
    pb, pr = pad_h - pt, pad_w - pl
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, (bsz, ho, wo, kh, kw, cin),
        (s0, s1 * stride, s2 * stride, s1, s2, s3), writeable=False)
    cols = windows.reshape(bsz * ho * wo, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out_data = cols @ w2
    if b is not None:
        out_data += b.data
    out = _out(out_data.reshape(bsz, ho, wo, cout))
    if _track(x, w) or (b is not None and _track(b)):
        cols = np.ascontiguousarray(cols)  # keep for dW
        def back(g, x=x, w=w, b=b, cols=cols, geom=(bsz, h, wd, ho, wo, pt, pl, pad_h, pad_w, stride, kh, kw, cin, cout)):
            bsz, h, wd, ho, wo, pt, pl, pad_h, pad_w, stride, kh, kw, cin, cout = geom
            g2 = g.reshape(bsz * ho * wo, cout)
            if b is not None and b.requires_grad:
                _acc(b, g2.sum(axis=0))
            if w.requires_grad:
                _acc(w, (cols.T @ g2).reshape(w.data.shape))
            if x.requires_grad:
                dcols = (g2 @ w.data.reshape(-1, cout).T).reshape(bsz, ho, wo, kh, kw, cin)
                dxp = np.zeros((bsz, h + pad_h, wd + pad_w, cin))
                for ki in range(kh):
                    hi = ki + (ho - 1) * stride + 1
                    for kj in range(kw):
                        wi = kj + (wo - 1) * stride + 1
                        dxp[:, ki:hi:stride, kj:wi:stride, :] += dcols[:, :, :, ki, kj, :]
                _acc(x, np.ascontiguousarray(dxp[:, pt:pt + h, pl:pl + wd, :]))
        _rec(out, back)
    return out


_RESIZE_CACHE: dict = {}


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    key = (n_in, n_out)
    m = _RESIZE_CACHE.get(key)
    if m is None:
        m = np.zeros((n_out, n_in))
        if n_in == 1:
            m[:, 0] = 1.0
        else:
            src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
            src = np.clip(src, 0.0, n_in - 1)
            lo = np.minimum(np.floor(src).astype(np.int64), n_in - 2)
            f = src - lo
            m[np.arange(n_out), lo] = 1.0 - f
            m[np.arange(n_out), lo + 1] += f
        _RESIZE_CACHE[key] = m
    return m


def bilinear_resize(x, out_hw) -> Tensor:
    """Bilinear resize of [B,H,W,C] maps (pixel-center convention)."""
    x = _as_tensor(x)
    bsz, h, wd, c = x.data.shape
    ho, wo = out_hw
    if (ho, wo) == (h, wd):
        return reshape(x, x.data.shape)  # identity, still on tape
    my = _resize_matrix(h, ho)
    mx = _resize_matrix(wd, wo)
    t = np.tensordot(x.data, my, axes=([1], [1]))       # [B,W,C,Ho]
    t = np.tensordot(t, mx, axes=([1], [1]))            # [B,C,Ho,Wo]
    out = _out(np.ascontiguousarray(np.moveaxis(t, 1, 3)))
    if _track(x):
        def back(g, x=x, my=my, mx=mx):
            t = np.moveaxis(g, 3, 1)                    # [B,C,Ho,Wo]
            t = np.tensordot(t, mx, axes=([3], [0]))    # [B,C,Ho,W]
            t = np.tensordot(t, my, axes=([2], [0]))    # [B,C,W,H]
            _acc(x, np.ascontiguousarray(np.transpose(t, (0, 3, 2, 1))))
        _rec(out, back)
    return out


def _corner_setup(pts: np.ndarray, h: int, w: int):
    """Clamp points to the border and compute corner indices + fractions."""
    xs = np.clip(pts[..., 0], 0.0, w - 1)
    ys = np.clip(pts[..., 1], 0.0, h - 1)
    if w > 1:
        x0 = np.minimum(np.floor(xs), w - 2).astype(np.int64)
        fx = xs - x0
    else:
        x0 = np.zeros(xs.shape, dtype=np.int64)
        fx = np.zeros_like(xs)
    if h > 1:
        y0 = np.minimum(np.floor(ys), h - 2).astype(np.int64)
        fy = ys - y0
    else:
        y0 = np.zeros(ys.shape, dtype=np.int64)
        fy = np.zeros_like(ys)
    inside_x = (pts[..., 0] > 0.0) & (pts[..., 0] < w - 1) if w > 1 else np.zeros(xs.shape, bool)
    inside_y = (pts[..., 1] > 0.0) & (pts[..., 1] < h - 1) if h > 1 else np.zeros(ys.shape, bool)
    return x0, y0, fx, fy, inside_x, inside_y


def sample_points(values, points, batch_idx=None) -> Tensor:
    """Bilinear sampling of [B,H,W,D] maps at continuous grid coordinates.

    points: [..., 2] (x, y) in the map's own grid units; out-of-range points
    clamp to the border. batch_idx: integer array of shape points.shape[:-1]
    selecting the map per point (defaults to map 0).
    """
    values = _as_tensor(values)
    bsz, h, w, dim = values.data.shape
    pts_t = points if isinstance(points, Tensor) else None
    pts = points.data if pts_t is not None else np.asarray(points, dtype=np.float64)
    lead = pts.shape[:-1]
    if batch_idx is None:
        bidx = np.zeros(lead, dtype=np.int64)
    else:
        bidx = np.broadcast_to(np.asarray(batch_idx, dtype=np.int64), lead)
    x0, y0, fx, fy, inx, iny = _corner_setup(pts, h, w)
    base = (bidx * h + y0) * w + x0
    v2 = values.data.reshape(bsz * h * w, dim)
    v00 = v2[base]
    v01 = v2[base + (1 if w > 1 else 0)]
    v10 = v2[base + (w if h > 1 else 0)]
    v11 = v2[base + ((w + 1) if (h > 1 and w > 1) else 0)]
    wx1, wy1 = fx[..., None], fy[..., None]
    wx0, wy0 = 1.0 - wx1, 1.0 - wy1
    out = _out(wy0 * (wx0 * v00 + wx1 * v01) + wy1 * (wx0 * v10 + wx1 * v11))
    if _track(values) or (pts_t is not None and _track(pts_t)):
        def back(g, values=values, pts_t=pts_t, geom=(bsz, h, w, dim),
                 idx=(base, x0, y0, fx, fy, inx, iny),
                 corners=(v00, v01, v10, v11)):
            bsz, h, w, dim = geom
            base, x0, y0, fx, fy, inx, iny = idx
            v00, v01, v10, v11 = corners
            wx1, wy1 = fx[..., None], fy[..., None]
            wx0, wy0 = 1.0 - wx1, 1.0 - wy1
            if pts_t is not None and pts_t.requires_grad:
                dx = (wy0 * (v01 - v00) + wy1 * (v11 - v10)) * g
                dy = (wx0 * (v10 - v00) + wx1 * (v11 - v01)) * g
                dpts = np.stack([dx.sum(-1) * inx, dy.sum(-1) * iny], axis=-1)
                _acc(pts_t, dpts)
            if values.requires_grad:
                weights = [wy0 * wx0, wy0 * wx1, wy1 * wx0, wy1 * wx1]
                offs = [0, (1 if w > 1 else 0), (w if h > 1 else 0),
                        ((w + 1) if (h > 1 and w > 1) else 0)]
                flat_bins = []
                flat_vals = []
                ar = np.arange(dim, dtype=np.int64)
                for wt, off in zip(weights, offs):
                    contrib = wt * g
                    bins = (base + off)[..., None] * dim + ar
                    flat_bins.append(bins.reshape(-1))
                    flat_vals.append(contrib.reshape(-1))
                buf = np.bincount(np.concatenate(flat_bins),
                                  weights=np.concatenate(flat_vals),
                                  minlength=bsz * h * w * dim)
                _acc(values, buf.reshape(values.data.shape))
        _rec(out, back)
    return out


def sample_weighted(values, points, weights, batch_idx) -> Tensor:
    """Weighted multi-point bilinear sampling for deformable attention.

    values: [B,H,W,D] with D split into n_heads slices; points: [R,heads,P,2]
    in the map's grid units; weights: [R,heads,P]; batch_idx: [R].
    Returns [R,D]: per head, sum over P of weight * bilinear sample.
    """
    values = _as_tensor(values)
    bsz, h, w, dim = values.data.shape
    pts_t = points if isinstance(points, Tensor) else None
    pts = points.data if pts_t is not None else np.asarray(points, dtype=np.float64)
    wts_t = weights if isinstance(weights, Tensor) else None
    wts = weights.data if wts_t is not None else np.asarray(weights, dtype=np.float64)
    rr, heads, npts, _ = pts.shape
    dh = dim // heads
    if dh * heads != dim:
        raise ShapeError(f"head count {heads} must divide feature dim {dim}")
    bidx = np.asarray(batch_idx, dtype=np.int64).reshape(rr, 1, 1)
    x0, y0, fx, fy, inx, iny = _corner_setup(pts, h, w)
    base = (bidx * h + y0) * w + x0                      # [R,heads,P]
    v3 = values.data.reshape(bsz * h * w, heads, dh)
    hsel = np.arange(heads, dtype=np.int64).reshape(1, heads, 1)
    off_r = 1 if w > 1 else 0
    off_d = w if h > 1 else 0
    v00 = v3[base, hsel]                                 # [R,heads,P,dh]
    v01 = v3[base + off_r, hsel]
    v10 = v3[base + off_d, hsel]
    v11 = v3[base + off_r + off_d, hsel]
    wx1, wy1 = fx[..., None], fy[..., None]
    wx0, wy0 = 1.0 - wx1, 1.0 - wy1
    cw = (wy0 * wx0, wy0 * wx1, wy1 * wx0, wy1 * wx1)
    interp = cw[0] * v00 + cw[1] * v01 + cw[2] * v10 + cw[3] * v11
    out = _out((interp * wts[..., None]).sum(axis=2).reshape(rr, dim))
    if _track(values) or (pts_t is not None and _track(pts_t)) or (wts_t is not None and _track(wts_t)):
        def back(g, values=values, pts_t=pts_t, wts_t=wts_t, wts=wts,
                 geom=(bsz, h, w, dim, rr, heads, npts, dh, off_r, off_d),
                 idx=(base, fx, fy, inx, iny), hsel=hsel, cw=cw,
                 corners=(v00, v01, v10, v11), interp=interp):
            bsz, h, w, dim, rr, heads, npts, dh, off_r, off_d = geom
            base, fx, fy, inx, iny = idx
            v00, v01, v10, v11 = corners
            gh = g.reshape(rr, heads, 1, dh)
            if wts_t is not None and wts_t.requires_grad:
                _acc(wts_t, (interp * gh).sum(-1))
            gw = gh * wts[..., None]                     # [R,heads,P,dh]
            if pts_t is not None and pts_t.requires_grad:
                wy0, wy1 = 1.0 - fy[..., None], fy[..., None]
                wx0, wx1 = 1.0 - fx[..., None], fx[..., None]
                dx = ((wy0 * (v01 - v00) + wy1 * (v11 - v10)) * gw).sum(-1) * inx
                dy = ((wx0 * (v10 - v00) + wx1 * (v11 - v01)) * gw).sum(-1) * iny
                _acc(pts_t, np.stack([dx, dy], axis=-1))
            if values.requires_grad:
                head_ch = hsel[..., None] * dh + np.arange(dh, dtype=np.int64)
                sz = rr * heads * npts * dh
                bins = np.empty((4, rr, heads, npts, dh), dtype=np.int64)
                vals = np.empty((4, rr, heads, npts, dh))
                for i, off in enumerate((0, off_r, off_d, off_r + off_d)):
                    np.add((base + off)[..., None] * dim, head_ch, out=bins[i])
                    np.multiply(cw[i], gw, out=vals[i])
                buf = np.bincount(bins.reshape(4 * sz), weights=vals.reshape(4 * sz),
                                  minlength=bsz * h * w * dim)
                _acc(values, buf.reshape(values.data.shape))
        _rec(out, back)
    return out


def deform_sample(maps, points, weights, batch_idx) -> Tensor:
    """Multi-level weighted bilinear sampling fused into one tape node.

    maps: L tensors [B,Hl,Wl,D]; points: [R,heads,L,P,2] in each level's own
    grid units; weights: [R,heads,L,P]; batch_idx: [R].
    Returns [R,D]: per head, sum over levels and points of weight * sample.
    """
    from . import _kernels as _k

    maps = [_as_tensor(m) for m in maps]
    nlev = len(maps)
    pts_t = points if isinstance(points, Tensor) else None
    pts = points.data if pts_t is not None else np.asarray(points, dtype=np.float64)
    wts_t = weights if isinstance(weights, Tensor) else None
    wts = weights.data if wts_t is not None else np.asarray(weights, dtype=np.float64)
    rr, heads, nlev_p, npts, _ = pts.shape
    dim = maps[0].data.shape[3]
    dh = dim // heads
    if dh * heads != dim:
        raise ShapeError(f"head count {heads} must divide feature dim {dim}")
    if nlev_p != nlev or wts.shape[2] != nlev:
        raise ShapeError("points/weights level extent must match the map count")
    bidx = np.asarray(batch_idx, dtype=np.int64).reshape(rr, 1, 1)
    saved = []
    out_buf = np.zeros((rr, heads, dh))
    wts_c = np.ascontiguousarray(np.moveaxis(wts, 2, 0))   # [L,R,heads,P]
    for lv, mp in enumerate(maps):
        bsz, h, w, _ = mp.data.shape
        x0, y0, fx, fy, inx, iny = _corner_setup(pts[:, :, lv], h, w)
        base = np.ascontiguousarray((bidx * h + y0) * w + x0)
        fx = np.ascontiguousarray(fx)
        fy = np.ascontiguousarray(fy)
        off_r = 1 if w > 1 else 0
        off_d = w if h > 1 else 0
        v3 = mp.data.reshape(bsz * h * w, heads, dh)
        if not v3.flags.c_contiguous:
            v3 = np.ascontiguousarray(v3)
        _k.deform_forward(v3, base, fx, fy, wts_c[lv], off_r, off_d, out_buf)
        saved.append((v3, base, fx, fy, inx, iny, off_r, off_d))
    out = _out(out_buf.reshape(rr, dim))
    needs = _track(*maps) or (pts_t is not None and _track(pts_t)) \
        or (wts_t is not None and _track(wts_t))
    if needs:
        def back(g, maps=maps, pts_t=pts_t, wts_t=wts_t, wts_c=wts_c, saved=saved,
                 geom=(rr, heads, npts, dh, dim, nlev)):
            rr, heads, npts, dh, dim, nlev = geom
            gh = np.ascontiguousarray(g.reshape(rr, heads, dh))
            need_dw = wts_t is not None and wts_t.requires_grad
            need_dp = pts_t is not None and pts_t.requires_grad
            dw_all = np.empty((nlev, rr, heads, npts)) if need_dw else np.empty((1, 1, 1, 1))
            dp_all = np.empty((nlev, rr, heads, npts, 2)) if need_dp else np.empty((1, 1, 1, 1, 2))
            dummy = np.empty((1, heads, dh))
            for lv, mp in enumerate(maps):
                v3, base, fx, fy, inx, iny, off_r, off_d = saved[lv]
                need_dval = mp.requires_grad
                dval = np.zeros(v3.shape) if need_dval else dummy
                _k.deform_backward(v3, base, fx, fy,
                                   np.ascontiguousarray(inx, dtype=np.float64),
                                   np.ascontiguousarray(iny, dtype=np.float64),
                                   wts_c[lv], off_r, off_d, gh,
                                   need_dval, dval, need_dw, dw_all[lv],
                                   need_dp, dp_all[lv])
                if need_dval:
                    _acc(mp, dval.reshape(mp.data.shape))
            if need_dw:
                _acc(wts_t, np.moveaxis(dw_all, 0, 2))
            if need_dp:
                _acc(pts_t, np.moveaxis(dp_all, 0, 2))
        _rec(out, back)
    return out


def bilinear_sample(fmap, p) -> Tensor:
    """4-neighbor bilinear interpolation of a single [H,W,D] map at (x, y).

    Out-of-range points clamp to the border.
    """
    fmap = _as_tensor(fmap)
    if fmap.data.ndim != 3:
        raise ShapeError(f"bilinear_sample expects [H,W,D], got {fmap.data.shape}")
    h, w, dim = fmap.data.shape
    maps = reshape(fmap, (1, h, w, dim))
    if isinstance(p, Tensor):
        pts = reshape(p, (1, 2))
    else:
        pts = np.asarray(p, dtype=np.float64).reshape(1, 2)
    out = sample_points(maps, pts)
    return reshape(out, (dim,))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(f, x: Tensor, eps: float = 1e-3) -> float:
    """Compare analytic gradients of scalar ``f(x)`` against central differences.

    Returns max over coordinates of |analytic - central| / (|central| + 1e-8).
    """
    if not (1e-5 <= eps <= 1e-2):
        raise ParameterError(f"eps must be in [1e-5, 1e-2], got {eps}")
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ContractError("finite_diff_check requires a scalar-valued f")
    backward(out)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    x.grad = None
    numeric = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * eps)
    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    return float(rel.max())
