"""Dense float64 tensors with a reverse-mode tape, ADAM, and a finite-difference harness.

Every primitive records a closure that maps the output gradient to one gradient
per input (``None`` for inputs that do not require gradients). ``backward``
walks the tape in reverse creation order so results are bit-deterministic.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64
_counter = itertools.count()
_debug = False


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Raise ``FloatingPointError`` as soon as a primitive produces NaN/Inf."""
    global _debug
    prev, _debug = _debug, enabled
    try:
        yield
    finally:
        _debug = prev


class KinkMonitor:
    """Smallest distance of any differentiated input to a non-smooth point.

    ``sides`` keeps, per non-smooth op call, which smooth piece each input fell
    on; two evaluations with equal ``sides`` lie on the same smooth branch.
    """

    def __init__(self):
        self.margin = np.inf
        self.sides: list[np.ndarray] = []

    def record(self, a: "Tensor", dist: np.ndarray, side: np.ndarray) -> None:
        self.sides.append(side.astype(np.int8))
        if a.requires_grad and dist.size:
            self.margin = min(self.margin, float(dist.min()))

    def record_choice(self, choice: np.ndarray) -> None:
        self.sides.append(np.asarray(choice).copy())

    def same_branch(self, other: "KinkMonitor") -> bool:
        return len(self.sides) == len(other.sides) and all(
            np.array_equal(a, b) for a, b in zip(self.sides, other.sides))


_kinks: KinkMonitor | None = None


@contextlib.contextmanager
def watch_kinks():
    """Track how close relu/leaky-relu/abs/clip inputs come to their kinks."""
    global _kinks
    prev, _kinks = _kinks, KinkMonitor()
    try:
        yield _kinks
    finally:
        _kinks = prev


def record_choice(choice: np.ndarray) -> None:
    """Let an active :func:`watch_kinks` see a discrete selection (e.g. mined indices)."""
    if _kinks is not None:
        _kinks.record_choice(choice)


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward_fn=None):
        arr = np.asarray(data, dtype=DTYPE)
        if _debug and not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values produced by {op}")
        self.data = arr
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward_fn
        self._id = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar; each maps onto a primitive below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, op=op, parents=tuple(parents) if req else (),
                  backward_fn=backward_fn if req else None)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), bw)


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, "scalar_mul", (a,), lambda g: (g * c,))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, "div", (a, b), bw)


def relu(a: Tensor) -> Tensor:
    if _kinks is not None:
        _kinks.record(a, np.abs(a.data), a.data > 0)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if _kinks is not None:
        _kinks.record(a, np.abs(a.data), a.data > 0)
    scale = np.where(a.data > 0, 1.0, slope)
    # subgradient at exactly 0 is 0 by convention
    gscale = np.where(a.data == 0, 0.0, scale)
    return _make(a.data * scale, "leaky_relu", (a,), lambda g: (g * gscale,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    if _kinks is not None:
        _kinks.record(a, np.abs(a.data), a.data > 0)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), "abs", (a,), lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    if _kinks is not None:
        _kinks.record(a, np.minimum(np.abs(a.data - lo), np.abs(a.data - hi)),
                      (a.data > hi).astype(np.int8) - (a.data < lo))
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), "clip", (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions / shape

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(out, "mean", (a,), bw)


def global_avg_pool(a: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C]."""
    b, c, h, w = a.shape
    out = a.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), a.shape).copy(),)

    return _make(out, "global_avg_pool", (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, "transpose", (a,), lambda g: (g.T,))


def index(a: Tensor, idx) -> Tensor:
    """Basic slicing or integer-array row gathering (repeated indices accumulate)."""
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, "slice", (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, eps)
    out = a.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norm,)

    return _make(out, "l2_normalize_rows", (a,), bw)


# ---------------------------------------------------------------- image primitives

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 convolution, zero padding 1, stride 1 or 2. x: [B,Cin,H,W], w: [Cout,Cin,3,3]."""
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    if w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ValueError(f"bad conv weight {w.shape} for input {x.shape}")
    bsz, cin, h, wd = x.shape
    cout = w.shape[0]
    ho, wo = -(-h // stride), -(-wd // stride)
    # channel-major layout keeps every matmul a single 2-D BLAS call
    xp = np.zeros((cin, bsz, h + 2, wd + 2))
    xp[:, :, 1:-1, 1:-1] = x.data.transpose(1, 0, 2, 3)
    cols = np.empty((cin, 3, 3, bsz, ho, wo))
    for ki in range(3):
        for kj in range(3):
            cols[:, ki, kj] = xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
    cols = cols.reshape(cin * 9, bsz * ho * wo)
    wmat = w.data.reshape(cout, cin * 9)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, bsz, ho, wo).transpose(1, 0, 2, 3))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(cin, 3, 3, bsz, ho, wo)
            gxp = np.zeros_like(xp)
            for ki in range(3):
                for kj in range(3):
                    gxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += gcols[:, ki, kj]
            gx = np.ascontiguousarray(gxp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3))
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return _make(out, "conv2d", parents, bw)


def upsample2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        b, c, h, w = x.shape
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, "upsample2x", (x,), bw)


# ---------------------------------------------------------------- composites

def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log-softmax with a constant max shift (shift does not change gradients)."""
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = logits - shift
    return z - log(sum(exp(z), axis=1, keepdims=True))


def atanh(a: Tensor, margin: float = 1e-3) -> Tensor:
    """Inverse tanh of ``a`` clipped to [-1+margin, 1-margin]."""
    c = clip(a, -1.0 + margin, 1.0 - margin)
    return (log(1.0 + c) - log(1.0 - c)) * 0.5


def softmax(logits: Tensor) -> Tensor:
    return exp(log_softmax(logits))


# ---------------------------------------------------------------- tape traversal

def _topo(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                stack.append((p, False))
    order.sort(key=lambda t: t._id)
    return order


def backward(root: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``root`` with respect to leaf tensors.

    With ``params`` given, returns exactly those tensors' gradients (zeros for
    parameters the root does not depend on); otherwise every reachable leaf
    that requires gradients.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if root.requires_grad:
        grads[root._id] = np.ones_like(root.data)
        for node in reversed(_topo(root)):
            g = grads.pop(node._id, None) if node._backward is not None else grads.get(node._id)
            if g is None:
                continue
            if node._backward is None:
                leaves[node._id] = node
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg
    if params is None:
        return {leaf: grads[i] for i, leaf in leaves.items()}
    return {p: grads.get(p._id, np.zeros_like(p.data)) for p in params}


def leaves_from(arrays: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()}


def grad_of(loss: Tensor, leaves: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Named gradients for a dict of leaf tensors."""
    g = backward(loss, leaves.values())
    return {k: g[t] for k, t in leaves.items()}


# ---------------------------------------------------------------- ADAM

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected ADAM update. Inputs are not mutated."""
    if set(params) != set(grads):
        raise ValueError("parameter and gradient names differ")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch for {k}: param {p.shape}, grad {g.shape}, state {m.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_p[k] = p - lr * mhat / (np.sqrt(vhat) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


# ---------------------------------------------------------------- verification

def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-6,
                      coords: Sequence[int] | None = None, order: int = 2) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``coords`` restricts the comparison to the given flat indices of ``x``.
    ``order=4`` uses the five-point stencil, whose O(h^4) truncation error allows
    larger steps and hence less roundoff.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("f is not finite at x")
    analytic = backward(out, [leaf])[leaf].reshape(-1)
    idx = range(x0.size) if coords is None else coords
    worst = 0.0
    flat = x0.reshape(-1)
    for i in idx:

        def diff(k: int) -> float:
            vals = []
            for s in (k, -k):
                xk = flat.copy()
                xk[i] += s * h
                vals.append(f(Tensor(xk.reshape(x0.shape))).item())
            if not np.all(np.isfinite(vals)):
                raise FloatingPointError(f"f is not finite around coordinate {i}")
            return vals[0] - vals[1]

        if order == 2:
            central = diff(1) / (2 * h)
        else:
            central = (8 * diff(1) - diff(2)) / (12 * h)
        a = analytic[i]
        err = np.abs(a - central) / max(1e-12, np.abs(a) + np.abs(central))
        worst = max(worst, float(err))
    return worst


def flatten_params(params: Mapping[str, np.ndarray]) -> tuple[np.ndarray, Callable]:
    """Pack a parameter dict into one vector; returns the vector and an unpacker to tensors."""
    keys = sorted(params)
    shapes = [params[k].shape for k in keys]
    sizes = [int(np.prod(s)) for s in shapes]
    vec = np.concatenate([params[k].reshape(-1) for k in keys]) if keys else np.zeros(0)

    def unpack(v: Tensor) -> dict[str, Tensor]:
        out, off = {}, 0
        for k, s, n in zip(keys, shapes, sizes):
            out[k] = reshape(v[off:off + n], s)
            off += n
        return out

    return vec, unpack
