"""Dense tensor with reverse-mode automatic differentiation.

A deliberately small op set on top of numpy: exactly what the segmentation
pipeline needs (convolutions, attention arithmetic, reductions, layout ops)
plus a finite-difference gradient checker and flat binary weight I/O.

Values are numpy arrays; default compute precision is float32, and gradient
accuracy tests run the same graph in float64. The graph is tape-style: each
op records its parents and a backward closure, and ``Tensor.backward()``
replays them in reverse topological order. Tensors are treated as immutable
after construction; ops never write into their inputs.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "set_nan_checks",
    "add", "sub", "mul", "div", "neg",
    "matmul", "relu", "sigmoid", "exp", "log", "clip",
    "softmax", "masked_softmax", "layer_norm", "linear",
    "conv2d", "bilinear_upsample_2x",
    "concat", "reshape", "permute", "roll", "pad", "index", "gather_rows",
    "reduce_sum", "reduce_mean",
    "grad_check", "GradCheckReport",
    "save_weights", "load_weights",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's contract."""


_GRAD_ENABLED = [True]
_NAN_CHECKS = [False]


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def set_nan_checks(enabled: bool) -> None:
    """Toggle the per-op NaN/Inf guard. Non-finite forward values then raise."""
    _NAN_CHECKS[0] = bool(enabled)


class Tensor:
    """N-dimensional float array, optionally tracked by the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = ""

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    # -- autodiff engine -------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError(f"backward: output must be scalar, got shape {self.data.shape}")
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.astype(parent.data.dtype, copy=False)
                else:
                    parent.grad = parent.grad + g
            # free closure + intermediate grad as soon as the node is consumed
            node._backward = None
            node._parents = ()
            if node is not self:
                node.grad = None


def _toposort(root: Tensor) -> list[Tensor]:
    order, visited = [], set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            stack.pop()
            order.append(node)
    return order


def _result(data: np.ndarray, parents, backward, op: str) -> Tensor:
    if _NAN_CHECKS[0] and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite value in forward output")
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
        return out
    return Tensor(data)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _result(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _result(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        return (-g,)

    return _result(-a.data, (a,), backward, "neg")


# -- matmul ----------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """2-D or batched matrix product. Batch dims broadcast numpy-style."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree, {a.data.shape} @ {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _result(out, (a, b), backward, "matmul")


# -- simple nonlinearities -------------------------------------------------------


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)

    def backward(g):
        return (g * (a.data > 0),)

    return _result(out, (a,), backward, "relu")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), backward, "sigmoid")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _result(out, (a,), backward, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _result(out, (a,), backward, "log")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only through the interior."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        return (g * inside,)

    return _result(out, (a,), backward, "clip")


# -- softmax family ----------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _result(out, (a,), backward, "softmax")


def masked_softmax(scores: Tensor, mask: np.ndarray | None, axis: int = -1) -> Tensor:
    """Softmax over the entries where `mask` is True; zeros elsewhere.

    `mask` is a constant boolean array broadcastable to `scores`. Every
    reduced slice must keep at least one valid entry. With mask=None this
    is exactly an unfiltered softmax, which keeps filtered and unfiltered
    attention on one code path.
    """
    if mask is None:
        mask = np.ones(scores.data.shape, dtype=bool)
    mask = np.broadcast_to(mask, scores.data.shape)
    neg_inf = -np.inf
    masked_vals = np.where(mask, scores.data, neg_inf)
    row_max = masked_vals.max(axis=axis, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise ShapeError("masked_softmax: a row has no valid entries")
    # max subtraction uses a detached constant, so gradients stay exact
    shift = Tensor(row_max)
    e = mul(exp(sub(scores, shift)), Tensor(mask.astype(scores.data.dtype)))
    return div(e, reduce_sum(e, axis=axis, keepdims=True))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma, x)
    beta = _as_tensor(beta, x)
    if gamma.data.shape != x.data.shape[-1:] or beta.data.shape != x.data.shape[-1:]:
        raise ShapeError(
            f"layer_norm: gamma/beta {gamma.data.shape}/{beta.data.shape} "
            f"must match last axis of {x.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.data.shape[-1]

    def backward(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        reduce_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=reduce_axes)
        gbeta = g.sum(axis=reduce_axes)
        return gx, ggamma, gbeta

    _ = n
    return _result(out, (x, gamma, beta), backward, "layer_norm")


def linear(x, w, b=None) -> Tensor:
    """Affine projection over the last axis: x @ w (+ b)."""
    x = _as_tensor(x)
    w = _as_tensor(w)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear: input dim {x.data.shape} does not match weight {w.data.shape}")
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


# -- convolution and upsampling ---------------------------------------------------


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW layout, zero padding, stride 1 or 2."""
    x = _as_tensor(x)
    w = _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and weight, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch, input {x.data.shape} vs weight {w.data.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    n, cin, h, wd = x.data.shape
    cout, _, kh, kw = w.data.shape
    p, s = padding, stride
    oh = (h + 2 * p - kh) // s + 1
    ow = (wd + 2 * p - kw) // s + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {w.data.shape} too large for input {x.data.shape} (pad {p})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = cols @ wmat.T
    if b is not None:
        bt = _as_tensor(b, x)
        out = out + bt.data
    out = out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, cout)
        gw = (gmat.T @ cols).reshape(w.data.shape)
        gcols = (gmat @ wmat).reshape(n, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        hp, wp = h + 2 * p, wd + 2 * p
        gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += gcols[:, :, :, :, i, j]
        gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0)

    parents = (x, w) if b is None else (x, w, _as_tensor(b, x))
    return _result(out, parents, backward, "conv2d")


_UPSAMPLE_CACHE: dict = {}


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """(2n x n) bilinear interpolation matrix, half-pixel-centered sampling."""
    key = (n, np.dtype(dtype).str)
    got = _UPSAMPLE_CACHE.get(key)
    if got is not None:
        return got
    m = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = (o + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        i0c = min(max(i0, 0), n - 1)
        i1c = min(max(i0 + 1, 0), n - 1)
        m[o, i0c] += 1.0 - frac
        m[o, i1c] += frac
    _UPSAMPLE_CACHE[key] = m
    return m


def bilinear_upsample_2x(x) -> Tensor:
    """Upsample the last two axes by 2 with bilinear interpolation."""
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"bilinear_upsample_2x: need >= 2-D input, got {x.data.shape}")
    h, w = x.data.shape[-2:]
    uh = _upsample_matrix(h, x.data.dtype)
    uw = _upsample_matrix(w, x.data.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def backward(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return _result(out, (x,), backward, "bilinear_upsample_2x")


# -- layout ops ----------------------------------------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tuple(tensors), backward, "concat")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _result(out, (a,), backward, "reshape")


def permute(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _result(out, (a,), backward, "permute")


def roll(a, shifts, axes) -> Tensor:
    a = _as_tensor(a)
    shifts = tuple(shifts)
    axes = tuple(axes)
    out = np.roll(a.data, shifts, axis=axes)

    def backward(g):
        return (np.roll(g, tuple(-s for s in shifts), axis=axes),)

    return _result(out, (a,), backward, "roll")


def pad(a, pad_width) -> Tensor:
    """Zero-pad; `pad_width` is the numpy (before, after) per-axis spec."""
    a = _as_tensor(a)
    pad_width = tuple((int(b), int(e)) for b, e in pad_width)
    out = np.pad(a.data, pad_width)
    slices = tuple(slice(b, b + s) for (b, _), s in zip(pad_width, a.data.shape))

    def backward(g):
        return (g[slices],)

    return _result(out, (a,), backward, "pad")


def index(a, key) -> Tensor:
    """Basic indexing (ints and slices); backward scatters into zeros."""
    a = _as_tensor(a)
    out = a.data[key]
    out = np.ascontiguousarray(out)

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return _result(out, (a,), backward, "index")


def gather_rows(a, idx: np.ndarray) -> Tensor:
    """Select rows by an integer index array (repeats allowed)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _result(out, (a,), backward, "gather_rows")


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "reduce_sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, a.data.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "reduce_mean")


# -- gradient checking -----------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing reverse-mode gradients to central differences."""

    max_rel_err: float
    tol: float
    per_input: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def grad_check(f, inputs, eps: float = 1e-5, tol: float = 1e-4,
               samples_per_input: int | None = None, rng=None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar `f(*inputs)` with central differences.

    `inputs` are the Tensors to differentiate with respect to; their
    `requires_grad` flags are forced on for the check. With
    `samples_per_input` set, only a random subset of entries per input is
    perturbed (needed to keep whole-model checks tractable).
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    loss = f(*inputs)
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("grad_check: non-finite loss")
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    if rng is None:
        rng = np.random.default_rng(0)

    max_rel = 0.0
    per_input = []
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if samples_per_input is None or samples_per_input >= n:
            idxs = np.arange(n)
        else:
            idxs = rng.choice(n, size=samples_per_input, replace=False)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = float(f(*inputs).data)
            flat[i] = orig - eps
            with no_grad():
                fm = float(f(*inputs).data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            an = float(a.reshape(-1)[i])
            denom = max(abs(an), abs(fd))
            rel = 0.0 if denom < 1e-8 else abs(an - fd) / denom
            worst = max(worst, rel)
        per_input.append(worst)
        max_rel = max(max_rel, worst)
    return GradCheckReport(max_rel_err=max_rel, tol=tol, per_input=per_input)


# -- weight serialization ------------------------------------------------------------------

_WEIGHT_MAGIC = b"CVOSWGT\x00"
_WEIGHT_VERSION = 1


def save_weights(named: dict, path) -> None:
    """Write named arrays as flat binary records.

    Layout: magic, version byte, then per record: name length (u64 LE),
    utf-8 name, rank (u64 LE), dims (u64 LE each), float32 LE payload.
    """
    with open(path, "wb") as fh:
        fh.write(_WEIGHT_MAGIC)
        fh.write(struct.pack("<B", _WEIGHT_VERSION))
        for name, value in named.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<Q", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.tobytes())


def load_weights(path) -> dict:
    """Read a weight file written by `save_weights`; returns name -> float32 array."""
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(_WEIGHT_MAGIC))
        if magic != _WEIGHT_MAGIC:
            raise ValueError(f"{path}: not a weight file (bad magic)")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != _WEIGHT_VERSION:
            raise ValueError(f"{path}: unsupported weight file version {version}")
        while True:
            head = fh.read(8)
            if not head:
                break
            (name_len,) = struct.unpack("<Q", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<Q", fh.read(8))
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            payload = fh.read(4 * count)
            if len(payload) != 4 * count:
                raise ValueError(f"{path}: truncated payload for record {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return out
