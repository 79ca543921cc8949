"""Minimal reverse-mode differentiation engine over numpy arrays.

A ``Tape`` records array-valued primitives in construction order; since
nodes can only consume previously created nodes, the record is always
topologically sorted and ``backward`` is a single reverse sweep with a
fixed accumulation order, which makes gradients bit-reproducible.

The primitive set is exactly what the warping, objective, and network
modules need; there is no general tensor algebra here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self.nodes = []

    def var(self, value, name: str | None = None) -> "Var":
        """Create a differentiable leaf."""
        return Var(self, np.asarray(value, dtype=np.float64), (), (), leaf=True,
                   track=True, name=name)

    def const(self, value) -> "Var":
        """Create a node that never receives gradient."""
        return Var(self, np.asarray(value, dtype=np.float64), (), (), leaf=False,
                   track=False)

    def backward(self, output: "Var") -> None:
        """Accumulate adjoints of every tracked node below ``output``.

        Leaves the tape reusable: adjoints are reset at the start, values
        untouched.
        """
        if output.tape is not self:
            raise ValueError("output node does not belong to this tape")
        if output.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.value.shape}")
        for node in self.nodes:
            node.adjoint = None
        output.adjoint = np.ones_like(output.value)
        for node in reversed(self.nodes[: output.index + 1]):
            adj = node.adjoint
            if adj is None:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                if not parent.track:
                    continue
                contrib = vjp(adj)
                if parent.adjoint is None:
                    parent.adjoint = contrib
                else:
                    parent.adjoint = parent.adjoint + contrib

    def grad(self, leaf: "Var") -> np.ndarray:
        if leaf.adjoint is None:
            return np.zeros_like(leaf.value)
        return leaf.adjoint


class Var:
    """One node on a tape: a value plus the vjp closures of its inputs."""

    __slots__ = ("tape", "value", "parents", "vjps", "leaf", "track", "name",
                 "op", "index", "adjoint")

    # keep numpy from broadcasting Vars elementwise; binary ops must come
    # through the reflected operators below so they land on the tape
    __array_ufunc__ = None

    def __init__(self, tape, value, parents, vjps, leaf=False, track=None, name=None,
                 op=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.leaf = leaf
        self.track = any(p.track for p in parents) if track is None else track
        self.name = name
        self.op = op
        self.adjoint = None
        self.index = len(tape.nodes)
        for p in parents:
            if p.tape is not tape:
                raise ValueError("operands live on different tapes")
            if p.index >= self.index:
                raise ValueError("cycle detected: parent created after child")
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

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

    def __pow__(self, p):
        return powc(self, p)

    def __neg__(self):
        return neg(self)


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        return x
    return tape.const(x)


def _unbroadcast(adj: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint down to ``shape`` after numpy broadcasting."""
    if adj.shape == shape:
        return adj
    extra = adj.ndim - len(shape)
    if extra > 0:
        adj = adj.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (a, s) in enumerate(zip(adj.shape, shape)) if s == 1 and a != 1)
    if axes:
        adj = adj.sum(axis=axes, keepdims=True)
    return adj.reshape(shape)


def add(a, b) -> Var:
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    return Var(tape, a.value + b.value, (a, b),
               (lambda g: _unbroadcast(g, a.value.shape),
                lambda g: _unbroadcast(g, b.value.shape)))


def sub(a, b) -> Var:
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    return Var(tape, a.value - b.value, (a, b),
               (lambda g: _unbroadcast(g, a.value.shape),
                lambda g: _unbroadcast(-g, b.value.shape)))


def mul(a, b) -> Var:
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    return Var(tape, a.value * b.value, (a, b),
               (lambda g: _unbroadcast(g * b.value, a.value.shape),
                lambda g: _unbroadcast(g * a.value, b.value.shape)))


def div(a, b) -> Var:
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    return Var(tape, a.value / b.value, (a, b),
               (lambda g: _unbroadcast(g / b.value, a.value.shape),
                lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape)))


def neg(a: Var) -> Var:
    return Var(a.tape, -a.value, (a,), (lambda g: -g,))


def powc(a: Var, p: float) -> Var:
    """Elementwise power with a constant real exponent."""
    p = float(p)
    val = a.value ** p
    return Var(a.tape, val, (a,), (lambda g: g * p * a.value ** (p - 1.0),))


def exp(a: Var) -> Var:
    val = np.exp(a.value)
    return Var(a.tape, val, (a,), (lambda g: g * val,))


def sin(a: Var) -> Var:
    return Var(a.tape, np.sin(a.value), (a,), (lambda g: g * np.cos(a.value),))


def cos(a: Var) -> Var:
    return Var(a.tape, np.cos(a.value), (a,), (lambda g: -g * np.sin(a.value),))


def absolute(a: Var) -> Var:
    # left-branch subgradient at 0: slope -1
    s = np.where(a.value > 0.0, 1.0, -1.0)
    return Var(a.tape, np.abs(a.value), (a,), (lambda g: g * s,))


def maximum(a, b) -> Var:
    """Elementwise max; ties route the gradient to the left operand."""
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    take_a = a.value >= b.value
    return Var(tape, np.where(take_a, a.value, b.value), (a, b),
               (lambda g: _unbroadcast(g * take_a, a.value.shape),
                lambda g: _unbroadcast(g * ~take_a, b.value.shape)))


def minimum(a, b) -> Var:
    """Elementwise min; ties route the gradient to the left operand."""
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    take_a = a.value <= b.value
    return Var(tape, np.where(take_a, a.value, b.value), (a, b),
               (lambda g: _unbroadcast(g * take_a, a.value.shape),
                lambda g: _unbroadcast(g * ~take_a, b.value.shape)))


def relu(a: Var) -> Var:
    pos = a.value > 0.0
    return Var(a.tape, np.where(pos, a.value, 0.0), (a,), (lambda g: g * pos,), op="relu")


def sigmoid(a: Var) -> Var:
    s = 1.0 / (1.0 + np.exp(-a.value))
    return Var(a.tape, s, (a,), (lambda g: g * s * (1.0 - s),), op="sigmoid")


def sum_all(a: Var) -> Var:
    shape = a.value.shape
    return Var(a.tape, np.asarray(a.value.sum()), (a,),
               (lambda g: np.broadcast_to(g, shape).copy() if shape else np.asarray(g),))


def mean_all(a: Var) -> Var:
    n = a.value.size
    shape = a.value.shape
    return Var(a.tape, np.asarray(a.value.mean()), (a,),
               (lambda g: np.broadcast_to(g / n, shape).copy(),))


def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return Var(a.tape, a.value.reshape(shape), (a,), (lambda g: g.reshape(old),))


def gather(a: Var, flat_index: np.ndarray) -> Var:
    """out.flat[i] = a.flat[flat_index.flat[i]]; vjp is a scatter-add."""
    idx = np.ascontiguousarray(flat_index, dtype=np.intp)
    flat = idx.ravel()
    val = a.value.ravel()[flat].reshape(idx.shape)
    size = a.value.size
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(size)
        np.add.at(out, flat, g.ravel())
        return out.reshape(shape)

    return Var(a.tape, val, (a,), (vjp,))


def concat(parts, axis: int = -1) -> Var:
    tape = parts[0].tape
    parts = [_lift(tape, p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    val = np.concatenate([p.value for p in parts], axis=axis)

    def make_vjp(i):
        sl = [slice(None)] * val.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: np.ascontiguousarray(g[sl])

    return Var(tape, val, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def pad_zero(a: Var, pads) -> Var:
    """Zero-pad spatial dims of an (H, W, C) array; pads = ((t,b),(l,r))."""
    (t, b), (l, r) = pads
    val = np.pad(a.value, ((t, b), (l, r), (0, 0)))
    h, w = a.value.shape[:2]
    return Var(a.tape, val, (a,),
               (lambda g: np.ascontiguousarray(g[t:t + h, l:l + w]),))


_EDGE_PAD_INDEX_CACHE: dict = {}


def pad_edge(a: Var, pads) -> Var:
    """Edge-replicate spatial dims of an (H, W, C) array."""
    (t, b), (l, r) = pads
    key = (a.value.shape, t, b, l, r)
    idx = _EDGE_PAD_INDEX_CACHE.get(key)
    if idx is None:
        h, w, c = a.value.shape
        rows = np.clip(np.arange(-t, h + b), 0, h - 1)
        cols = np.clip(np.arange(-l, w + r), 0, w - 1)
        idx = ((rows[:, None] * w + cols[None, :])[:, :, None] * c
               + np.arange(c)[None, None, :])
        _EDGE_PAD_INDEX_CACHE[key] = idx
    return gather(a, idx)


_COL2IM_INDEX_CACHE: dict = {}


def _col2im_index(h, w, c, kh, kw, stride):
    key = (h, w, c, kh, kw, stride)
    idx = _COL2IM_INDEX_CACHE.get(key)
    if idx is None:
        ho = (h - kh) // stride + 1
        wo = (w - kw) // stride + 1
        iy = (np.arange(ho)[:, None] * stride + np.arange(kh)[None, :])
        ix = (np.arange(wo)[:, None] * stride + np.arange(kw)[None, :])
        # (ho, wo, kh, kw, c) flat indices into (h, w, c)
        idx = ((iy[:, None, :, None] * w + ix[None, :, None, :])[..., None] * c
               + np.arange(c))
        idx = np.ascontiguousarray(idx.reshape(ho * wo, kh * kw * c))
        _COL2IM_INDEX_CACHE[key] = idx
    return idx


def conv2d(x: Var, kernel: Var, stride: int = 1) -> Var:
    """Valid 2-D convolution of (H, W, Ci) with (kh, kw, Ci, Co)."""
    h, w, ci = x.value.shape
    kh, kw, kci, co = kernel.value.shape
    if kci != ci:
        raise ValueError(f"kernel expects {kci} input channels, image has {ci}")
    windows = sliding_window_view(x.value, (kh, kw), axis=(0, 1))[::stride, ::stride]
    ho, wo = windows.shape[:2]
    # (ho, wo, ci, kh, kw) -> (ho*wo, kh*kw*ci), matching kernel.reshape(-1, co)
    patches = np.ascontiguousarray(windows.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, kh * kw * ci)
    kmat = kernel.value.reshape(kh * kw * ci, co)
    val = (patches @ kmat).reshape(ho, wo, co)

    def vjp_x(g):
        rows = g.reshape(ho * wo, co) @ kmat.T
        idx = _col2im_index(h, w, ci, kh, kw, stride)
        out = np.zeros(h * w * ci)
        np.add.at(out, idx.ravel(), rows.ravel())
        return out.reshape(h, w, ci)

    def vjp_k(g):
        return (patches.T @ g.reshape(ho * wo, co)).reshape(kh, kw, ci, co)

    return Var(x.tape, val, (x, kernel), (vjp_x, vjp_k))


_STRIDE2_INDEX_CACHE: dict = {}


def _corner_index(shape, dy, dx):
    key = (shape, dy, dx)
    idx = _STRIDE2_INDEX_CACHE.get(key)
    if idx is None:
        h, w, c = shape
        rows = np.arange(dy, h, 2)
        cols = np.arange(dx, w, 2)
        idx = ((rows[:, None] * w + cols[None, :])[:, :, None] * c
               + np.arange(c)[None, None, :])
        _STRIDE2_INDEX_CACHE[key] = idx
    return idx


def avg_pool2(x: Var) -> Var:
    """2x2 mean pooling with edge replication on odd borders."""
    h, w, _ = x.value.shape
    if h % 2 or w % 2:
        x = pad_edge(x, ((0, h % 2), (0, w % 2)))
    shape = x.value.shape
    corners = [gather(x, _corner_index(shape, dy, dx))
               for dy in (0, 1) for dx in (0, 1)]
    return (corners[0] + corners[1] + corners[2] + corners[3]) * 0.25


_UPSAMPLE_INDEX_CACHE: dict = {}


def upsample2(x: Var) -> Var:
    """Nearest-neighbor 2x upsampling of an (H, W, C) array."""
    shape = x.value.shape
    idx = _UPSAMPLE_INDEX_CACHE.get(shape)
    if idx is None:
        h, w, c = shape
        rows = np.repeat(np.arange(h), 2)
        cols = np.repeat(np.arange(w), 2)
        idx = ((rows[:, None] * w + cols[None, :])[:, :, None] * c
               + np.arange(c)[None, None, :])
        _UPSAMPLE_INDEX_CACHE[shape] = idx
    return gather(x, idx)


def spatial_mean(x: Var) -> Var:
    """Mean over the two spatial dims: (H, W, C) -> (C,)."""
    h, w, c = x.value.shape
    n = h * w
    return Var(x.tape, x.value.mean(axis=(0, 1)), (x,),
               (lambda g: np.broadcast_to(g / n, (h, w, c)).copy(),))


def matvec(x: Var, weight: Var) -> Var:
    """(n,) @ (n, m) -> (m,)."""
    return Var(x.tape, x.value @ weight.value, (x, weight),
               (lambda g: weight.value @ g,
                lambda g: np.outer(x.value, g)))


@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients against central differences."""

    max_rel_error: float
    max_abs_error: float
    worst_coordinate: int
    passed: bool
    analytic: np.ndarray | None = None
    numeric: np.ndarray | None = None


def gradient_check(f, point: np.ndarray, step: float = 1e-5,
                   tol_rel: float = 1e-4, tol_abs: float = 1e-8,
                   rel_floor: float = 1e-7) -> GradCheckReport:
    """Check the tape gradient of ``f`` at ``point`` against central differences.

    ``f`` maps a 1-D leaf Var to a scalar Var; it is re-evaluated on fresh
    tapes for the analytic pass and for every +/- step probe.
    """
    point = np.asarray(point, dtype=np.float64)
    if step <= 0:
        raise ValueError("step must be positive")

    tape = Tape()
    x = tape.var(point.copy())
    y = f(x)
    tape.backward(y)
    analytic = tape.grad(x).copy()

    def value_at(p):
        t = Tape()
        return float(f(t.var(p)).value)

    numeric = np.zeros_like(point)
    for i in range(point.size):
        hi = point.copy()
        lo = point.copy()
        hi[i] += step
        lo[i] -= step
        numeric[i] = (value_at(hi) - value_at(lo)) / (2.0 * step)

    bad = ~(np.isfinite(analytic) & np.isfinite(numeric))
    if np.any(bad):
        worst = int(np.argmax(bad))
        return GradCheckReport(np.inf, np.inf, worst, False, analytic, numeric)

    abs_err = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), rel_floor)
    rel_err = abs_err / denom
    worst = int(np.argmax(rel_err)) if rel_err.size else 0
    max_rel = float(rel_err.max()) if rel_err.size else 0.0
    max_abs = float(abs_err.max()) if abs_err.size else 0.0
    passed = (max_rel < tol_rel) or (max_abs < tol_abs)
    return GradCheckReport(max_rel, max_abs, worst, passed, analytic, numeric)
