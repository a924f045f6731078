"""Dense fp64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every operation eagerly computes its value and
remembers its parents, so a fresh graph is built for each training batch.
`backward` walks the graph once in reverse topological order and accumulates
gradients into every node it visits.

All payloads are float64 numpy arrays (scalars are 0-d arrays). Numpy does
the heavy lifting; this module owns the graph bookkeeping and the backward
rules.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for an op; message names both."""

    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class GraphError(RuntimeError):
    """Misuse of the computation graph (e.g. backward from a non-scalar)."""


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A value node in the computation graph.

    Leaves (`op == "leaf"`) carry data supplied by the caller; interior nodes
    record the producing op and its parents. `grad` is populated by
    `backward` and always matches the value's shape. `value` aliases the
    numpy payload.
    """

    __slots__ = ("data", "grad", "op", "parents", "_bwd")

    # defer mixed ndarray/Tensor arithmetic to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, op="leaf", parents=(), bwd=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self._bwd = bwd

    @property
    def value(self):
        return self.data

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # -- operator sugar ------------------------------------------------

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
        return mul(self, -1.0)

    def __pow__(self, p):
        return powi(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x):
    """Wrap `x` as a leaf tensor (constants, parameters, inputs alike)."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op, parents, value, bwd):
    return Tensor(value, op=op, parents=parents, bwd=bwd)


# -- arithmetic --------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return _node("add", (a, b), out,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    return _node("sub", (a, b), out,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return _node("mul", (a, b), out,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError("div", a.shape, b.shape) from None
    return _node("div", (a, b), out,
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def powi(a, p):
    """Elementwise power with a fixed (non-differentiated) exponent."""
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p
    return _node("pow", (a,), out, lambda g: (g * p * a.data ** (p - 1.0),))


def matmul(a, b):
    """Matrix product on the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node("matmul", (a, b), out, bwd)


# -- shape manipulation ------------------------------------------------


def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape
    out = a.data.reshape(shape)
    return _node("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node("transpose", (a,), a.data.transpose(axes),
                 lambda g: (g.transpose(inv),))


def getitem(a, key):
    a = as_tensor(a)
    out = a.data[key]

    def bwd(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, key, g)
        return (acc,)

    return _node("getitem", (a,), out, bwd)


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _node("concat", tuple(parts), out,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


# -- reductions --------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _node("sum", (a,), out, bwd)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


# -- elementwise transcendentals ---------------------------------------


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node("exp", (a,), out, lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _node("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def sin(a):
    a = as_tensor(a)
    return _node("sin", (a,), np.sin(a.data), lambda g: (g * np.cos(a.data),))


def cos(a):
    a = as_tensor(a)
    return _node("cos", (a,), np.cos(a.data), lambda g: (-g * np.sin(a.data),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _node("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def silu(a):
    """x * sigmoid(x); smooth, so finite-difference checks stay tight."""
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s
    return _node("silu", (a,), out, lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def wrap_angle(a):
    """Wrap to (-pi, pi]. Gradient is 1 a.e. (the wrap is a shift)."""
    a = as_tensor(a)
    out = np.pi - np.mod(np.pi - a.data, 2.0 * np.pi)
    return _node("wrap_angle", (a,), out, lambda g: (g,))


def layernorm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance (guarded by
    `eps`), then apply the learned scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * y).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gg = g * gain.data
        gx = (gg - gg.mean(axis=-1, keepdims=True)
              - y * (gg * y).mean(axis=-1, keepdims=True)) * inv
        return gx, ggain, gbias

    return _node("layernorm", (x, gain, bias), out, bwd)


def softmax(a, axis=-1):
    """Numerically stable softmax along `axis`; rows sum to 1."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node("softmax", (a,), out, bwd)


def conv1d(a, kernel, axis=-2):
    """Depthwise 1-D convolution along `axis` with symmetric edge padding.

    `a` has channels on the last axis and time on `axis`. `kernel` is
    (k,) shared across channels or (channels, k) per channel; k must be odd
    and no longer than the sequence. Convolution orientation matches
    np.convolve (kernel flipped), output length equals input length.
    """
    a = as_tensor(a)
    kernel = as_tensor(kernel)
    k = kernel.data.shape[-1]
    n = a.data.shape[axis]
    if k % 2 != 1:
        raise ShapeError("conv1d", a.shape, kernel.shape)
    if k > n:
        raise ShapeError("conv1d", a.shape, kernel.shape)
    if axis != -2 and axis != a.data.ndim - 2:
        raise ShapeError("conv1d", a.shape, kernel.shape)
    half = k // 2
    pad = [(0, 0)] * a.data.ndim
    pad[-2] = (half, half)
    padded = np.pad(a.data, pad, mode="symmetric")
    # windows[..., i, c, j] = padded[..., i + j, c]
    win = np.lib.stride_tricks.sliding_window_view(padded, k, axis=-2)
    flipped = kernel.data[..., ::-1]
    if kernel.data.ndim == 1:
        out = np.einsum("...icj,j->...ic", win, flipped)
    else:
        out = np.einsum("...icj,cj->...ic", win, flipped)

    def bwd(g):
        # grad wrt padded input: full correlation of g with kernel
        gp = np.zeros(padded.shape)
        if kernel.data.ndim == 1:
            for j in range(k):
                gp[..., j:j + n, :] += g * flipped[j]
        else:
            for j in range(k):
                gp[..., j:j + n, :] += g * flipped[:, j]
        # fold symmetric padding: padded[i] mirrors input rows
        ga = gp[..., half:half + n, :].copy()
        for j in range(half):
            ga[..., half - 1 - j, :] += gp[..., j, :]
            ga[..., n - 1 - j, :] += gp[..., half + n + j, :]
        c = a.data.shape[-1]
        win_flat = win.reshape(-1, c, k)
        g_flat = g.reshape(-1, c)
        if kernel.data.ndim == 1:
            gk = np.einsum("xcj,xc->j", win_flat, g_flat)[::-1].copy()
        else:
            gk = np.einsum("xcj,xc->cj", win_flat, g_flat)[:, ::-1].copy()
        return ga, gk

    return _node("conv1d", (a, kernel), out, bwd)


# -- graph execution ---------------------------------------------------


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def forward_eval(root):
    """Return the root's value. Values are computed eagerly as the graph is
    defined, so this is a cache read; it exists to make the evaluation point
    explicit at call sites."""
    return root.data


def backward(root):
    """Reverse-mode gradient accumulation from a scalar root.

    Sets `.grad` on every node reached (same shape as its value) and
    returns a dict mapping each leaf tensor to its gradient array.
    """
    if root.data.size != 1:
        raise GraphError(f"backward requires a scalar root, got shape {root.shape}")
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node.grad is None or node._bwd is None:
            continue
        for parent, g in zip(node.parents, node._bwd(node.grad)):
            g = np.asarray(g, dtype=np.float64).reshape(parent.data.shape)
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
    return {node: node.grad for node in order
            if node.op == "leaf" and node.grad is not None}


def grad_check(scalar_fn, point, h=1e-6):
    """Compare analytic gradients against central finite differences.

    `scalar_fn` maps a leaf Tensor to a scalar Tensor. Returns the max over
    coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    point = np.asarray(point, dtype=np.float64)
    leaf = Tensor(point)
    out = scalar_fn(leaf)
    if not np.isfinite(out.data).all():
        raise ValueError("grad_check: function returned non-finite value")
    backward(out)
    analytic = leaf.grad.ravel()

    flat = point.ravel()
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        hi = float(scalar_fn(Tensor(bumped.reshape(point.shape))).data)
        bumped[i] = flat[i] - h
        lo = float(scalar_fn(Tensor(bumped.reshape(point.shape))).data)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError("grad_check: function returned non-finite value")
        numeric = (hi - lo) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst


class Rng:
    """Seeded random stream: same seed + same call sequence = same bits.

    Wraps numpy's PCG64; `derive` produces an independent child stream from
    a string tag so per-trajectory work stays deterministic under
    parallel scheduling.
    """

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape=()):
        return self._gen.standard_normal(shape)

    def uniform(self, lo=0.0, hi=1.0, shape=()):
        return self._gen.uniform(lo, hi, shape)

    def integers(self, lo, hi, shape=()):
        return self._gen.integers(lo, hi, size=shape)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def shuffle(self, seq):
        self._gen.shuffle(seq)

    def derive(self, tag):
        mix = np.random.SeedSequence([self.seed, _tag_to_int(tag)])
        return Rng(mix.generate_state(1, dtype=np.uint64)[0])


def _tag_to_int(tag):
    if isinstance(tag, int):
        return tag & 0xFFFFFFFFFFFFFFFF
    acc = 1469598103934665603  # FNV-1a 64
    for byte in str(tag).encode("utf-8"):
        acc = ((acc ^ byte) * 1099511628211) & 0xFFFFFFFFFFFFFFFF
    return acc
