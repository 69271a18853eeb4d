"""Dense float64 tensors with a small reverse-mode tape, plus seeded RNG streams.

Every differentiable operation in the package is built from the primitives
in this module.  A :class:`Tensor` records its parents and a closure that
pushes the output cotangent back to them; :meth:`Tensor.backward` walks the
recorded graph once in reverse topological order.  Graphs are built per
training step and thrown away afterwards.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse


class NumericsError(ValueError):
    """Base error for invalid numerical operations."""


class ShapeError(NumericsError):
    pass


class DomainError(NumericsError):
    """Raised instead of silently producing a non-finite value."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64).copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior nodes do not keep their cotangent
                if node._parents:
                    node.grad = None if node is not self else node.grad

    # operator sugar; broadcasting is allowed internally
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
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _acc(t: Tensor, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _make(data, parents, backward):
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"non-finite result in {what}")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    _check_finite(out, "exp")

    def bw(g):
        _acc(a, g * out)

    return _make(out, (a,), bw)


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")

    def bw(g):
        _acc(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)

    def bw(g):
        if np.any(out == 0):
            raise DomainError("sqrt gradient at zero")
        _acc(a, g * 0.5 / out)

    return _make(out, (a,), bw)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        _acc(a, g * (1.0 - out * out))

    return _make(out, (a,), bw)


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0

    def bw(g):
        _acc(a, g * pos)

    return _make(np.where(pos, a.data, 0.0), (a,), bw)


def abs_(a):
    a = as_tensor(a)

    def bw(g):
        _acc(a, g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), bw)


def clip(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _acc(a, g * inside)

    return _make(np.minimum(np.maximum(a.data, lo), hi), (a,), bw)


def maximum(a, b):
    """Pointwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * pick_a, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * ~pick_a, b.shape))

    return _make(np.where(pick_a, a.data, b.data), (a, b), bw)


def xlogx(a):
    """x*log(x) with the 0*log(0) = 0 convention."""
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("xlogx of negative value")
    pos = a.data > 0
    safe = np.where(pos, a.data, 1.0)
    out = np.where(pos, a.data * np.log(safe), 0.0)

    def bw(g):
        _acc(a, g * np.where(pos, np.log(safe) + 1.0, 0.0))

    return _make(out, (a,), bw)


_UNARY = {"exp": exp, "log": log, "relu": relu, "abs": abs_}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "max": maximum}


def elementwise(op, a, b=None, lo=None, hi=None):
    """Strict pointwise dispatch: binary ops require identical shapes.

    ``op`` is one of add, sub, mul, div, max, exp, log, relu, abs, clip.
    """
    a = as_tensor(a)
    if op in _BINARY:
        if b is None:
            raise ShapeError(f"{op} needs two operands")
        b = as_tensor(b)
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
        return _BINARY[op](a, b)
    if b is not None:
        raise ShapeError(f"{op} is unary")
    if op == "clip":
        return clip(a, lo, hi)
    if op in _UNARY:
        return _UNARY[op](a)
    raise NumericsError(f"unknown elementwise op {op!r}")


# ----------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _expand(g, shape, axes):
    for ax in axes:
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        _acc(a, _expand(g, a.shape, axes))

    return _make(a.data.sum(axis=axes), (a,), bw)


def mean(a, axis=None):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if n == 0:
        raise ShapeError("mean over an empty axis")

    def bw(g):
        _acc(a, _expand(g, a.shape, axes) / n)

    return _make(a.data.mean(axis=axes), (a,), bw)


def amax(a, axis=None):
    """Max reduction; the gradient is split evenly among tied maxima."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.max(axis=axes)

    def bw(g):
        hit = a.data == _expand(out, a.shape, axes)
        cnt = hit.sum(axis=axes)
        _acc(a, hit * _expand(g / cnt, a.shape, axes))

    return _make(out, (a,), bw)


def l2norm(a, axis=None):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = np.sqrt((a.data * a.data).sum(axis=axes))

    def bw(g):
        o = _expand(out, a.shape, axes)
        safe = np.where(o > 0, o, 1.0)
        _acc(a, np.where(o > 0, a.data / safe, 0.0) * _expand(g, a.shape, axes))

    return _make(out, (a,), bw)


def linfnorm(a, axis=None):
    return amax(abs_(a), axis)


_REDUCE = {"sum": sum_, "mean": mean, "max": amax, "l2norm": l2norm, "linfnorm": linfnorm}


def reduce(op, a, axes=None):
    a = as_tensor(a)
    ax = _norm_axes(axes, a.ndim)
    if any(a.shape[i] == 0 for i in ax):
        raise ShapeError("empty reduction axis")
    if op not in _REDUCE:
        raise NumericsError(f"unknown reduction {op!r}")
    return _REDUCE[op](a, ax)


# -------------------------------------------------------------------- softmax

def softmax(a, axis=-1, mask=None):
    """Max-subtracted softmax; masked-out entries are exactly zero."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise NumericsError("softmax slice with every entry masked")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _acc(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), bw)


# ------------------------------------------------------------ shape and linalg

def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape

    def bw(g):
        _acc(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)

    def bw(g):
        _acc(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw)


def getitem(a, idx):
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _acc(a, full)

    return _make(a.data[idx], (a,), bw)


_SCATTER_CACHE: dict = {}


def _scatter_matrix(index, n):
    # cached per index array object; the owning caches keep those arrays alive
    key = (id(index), n)
    hit = _SCATTER_CACHE.get(key)
    if hit is not None and hit[0] is index:
        return hit[1]
    flat = index.ravel()
    m = sparse.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))), shape=(n, flat.size))
    if not index.flags.writeable:
        if len(_SCATTER_CACHE) > 256:
            _SCATTER_CACHE.clear()
        _SCATTER_CACHE[key] = (index, m)
    return m


def gather_rows(a, index):
    """``a[index]`` for a 2-D ``a`` and an integer array ``index`` of any shape."""
    a = as_tensor(a)
    index = np.asarray(index)
    n, c = a.shape

    def bw(g):
        _acc(a, _scatter_matrix(index, n) @ g.reshape(-1, c))

    return _make(a.data[index], (a,), bw)


def batched_dot(a, b):
    """out[p, q] = <a[p], b[p, q]> for a (P, C) and b (P, Q, C)."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _acc(a, (g[:, None, :] @ b.data)[:, 0, :])
        if b.requires_grad:
            _acc(b, g[:, :, None] * a.data[:, None, :])

    return _make((b.data @ a.data[:, :, None])[:, :, 0], (a, b), bw)


def batched_combine(w, v):
    """out[p] = sum_q w[p, q] v[p, q] for w (P, Q) and v (P, Q, C)."""
    w, v = as_tensor(w), as_tensor(v)

    def bw(g):
        if w.requires_grad:
            _acc(w, (v.data @ g[:, :, None])[:, :, 0])
        if v.requires_grad:
            _acc(v, w.data[:, :, None] * g[:, None, :])

    return _make((w.data[:, None, :] @ v.data)[:, 0, :], (w, v), bw)


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, cuts, axis=axis)):
            if t.requires_grad:
                _acc(t, piece)

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def einsum(spec, a, b):
    """Two-operand einsum; every input index must survive in the other operand or the output."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_s = spec.split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb + out_s), (sb, sa + out_s)):
        if not set(s) <= set(other):
            raise ShapeError(f"einsum {spec!r}: summed-only index not supported")

    def bw(g):
        if a.requires_grad:
            _acc(a, np.einsum(f"{out_s},{sb}->{sa}", g, b.data))
        if b.requires_grad:
            _acc(b, np.einsum(f"{out_s},{sa}->{sb}", g, a.data))

    return _make(np.einsum(spec, a.data, b.data), (a, b), bw)


def matmul(a, b):
    return einsum("ij,jk->ik", a, b)


def conv2d(x, w, bias=None):
    """Stride-1 'same' convolution with zero padding.

    ``x`` is (H, W, Cin), ``w`` is (k, k, Cin, Cout) with odd k.
    """
    x, w = as_tensor(x), as_tensor(w)
    H, W, cin = x.shape
    k = w.shape[0]
    if w.shape[2] != cin or w.shape[1] != k or k % 2 == 0:
        raise ShapeError(f"bad kernel {w.shape} for input {x.shape}")
    p = k // 2
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0)))
    # (H, W, Cin, k, k) -> (H*W, k*k*Cin) in (ki, kj, cin) order
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    cols = win.transpose(0, 1, 3, 4, 2).reshape(H * W, k * k * cin)
    wm = w.data.reshape(k * k * cin, -1)
    out = (cols @ wm).reshape(H, W, -1)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(H * W, -1)
        if w.requires_grad:
            _acc(w, (cols.T @ g2).reshape(w.shape))
        if bias is not None and bias.requires_grad:
            _acc(bias, g2.sum(axis=0))
        if x.requires_grad:
            gc = (g2 @ wm.T).reshape(H, W, k, k, cin)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[i:i + H, j:j + W] += gc[:, :, i, j]
            _acc(x, gxp[p:p + H, p:p + W])

    return _make(out, parents, bw)


# ------------------------------------------------------------------- indexing

def ravel_index(coords, shape):
    """Row-major flat index (last axis fastest)."""
    return int(np.ravel_multi_index(tuple(coords), tuple(shape)))


def unravel_index(index, shape):
    return tuple(int(i) for i in np.unravel_index(index, tuple(shape)))


# ------------------------------------------------------------------ resampling

def _axis_weights(n_in, n_out):
    # half-pixel centres, clamp at the edges
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = pos - i0
    return i0, i1, t


def bilinear_resize(f, out_h, out_w):
    """Bilinear resampling of an (H, W, C) array with half-pixel alignment."""
    f = np.asarray(f, dtype=np.float64)
    H, W = f.shape[:2]
    if (H, W) == (out_h, out_w):
        return f.copy()
    y0, y1, ty = _axis_weights(H, out_h)
    x0, x1, tx = _axis_weights(W, out_w)
    ty = ty[:, None, None]
    tx = tx[None, :, None]
    top = f[y0][:, x0] * (1 - tx) + f[y0][:, x1] * tx
    bot = f[y1][:, x0] * (1 - tx) + f[y1][:, x1] * tx
    return top * (1 - ty) + bot * ty


# ------------------------------------------------------------------------ RNG

@dataclass
class Rng:
    """Seeded, splittable random stream.

    Streams with equal (seed, stream) produce identical draws; distinct
    stream ids are independent children of the same seed.
    """

    seed: int
    stream: int = 0
    gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=(int(self.stream) & (2**64 - 1),))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def split(self, stream: int) -> "Rng":
        return Rng(self.seed, (self.stream * 1_000_003 + stream + 1) & (2**64 - 1))

    def normal(self, size=None, scale=1.0):
        return self.gen.normal(0.0, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def permutation(self, n):
        return self.gen.permutation(n)


# ----------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    errors: dict  # name -> max relative error
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0


def rel_error(a, n, floor=1e-6):
    a = np.asarray(a)
    n = np.asarray(n)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


def grad_check(f, params, rng=None, h=1e-5, tol=1e-4, max_entries=None, floor=1e-6):
    """Compare reverse-mode gradients against central differences.

    ``f`` maps the list of parameter tensors to a scalar Tensor, or to a dict
    of named scalar Tensors (one finite-difference sweep then serves every
    output).  With ``max_entries`` set, that many entries per parameter are
    sampled with ``rng``; otherwise every entry is perturbed.
    """
    params = [p if isinstance(p, Tensor) else Tensor(p) for p in params]
    for p in params:
        p.requires_grad = True

    single = not isinstance(f(params), dict)

    def outputs():
        out = f(params)
        return {"f": out} if single else out

    analytic = {}
    base = outputs()
    for name, val in base.items():
        if not np.isfinite(val.data).all():
            raise DomainError(f"non-finite loss {name!r} at probe point")
        for p in params:
            p.grad = None
        out = outputs()[name]
        out.backward()
        analytic[name] = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    errors = {}
    with no_grad():
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                if rng is None:
                    rng = Rng(0)
                idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
            numeric = {name: np.zeros(idx.size) for name in base}
            for j, k in enumerate(idx):
                orig = flat[k]
                flat[k] = orig + h
                fp = {n: float(v.data) for n, v in outputs().items()}
                flat[k] = orig - h
                fm = {n: float(v.data) for n, v in outputs().items()}
                flat[k] = orig
                for n in base:
                    numeric[n][j] = (fp[n] - fm[n]) / (2 * h)
            for n in base:
                a = analytic[n][pi].reshape(-1)[idx]
                errors[(n, pi)] = rel_error(a, numeric[n], floor)
    if single:
        errors = {pi: e for (_, pi), e in errors.items()}
    return GradCheckReport(errors, tol)
