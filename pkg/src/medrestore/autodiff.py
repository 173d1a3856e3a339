"""Reverse-mode automatic differentiation over dense 4-D float tensors.

The op vocabulary is exactly what the encoder-decoder networks and their
multi-scale MSE losses need: strided convolution, per-channel batch norm,
leaky ReLU, sigmoid, 2x bilinear upsampling, area downsampling, channel
concatenation, and a handful of elementwise/reduction ops used to assemble
weighted loss sums.

Conventions:

* Every tensor is 4-D, laid out (batch=1, channels, height, width),
  row-major float32 by default.  Per-channel parameters (conv bias, norm
  gain/shift) are stored as (1, C, 1, 1) so broadcasting stays explicit.
* Graphs are built functionally: each op returns a fresh ``Tensor`` holding
  references to its parents and a closure computing the vector-Jacobian
  product.  ``Tensor.backward()`` on a scalar root walks the graph once in
  reverse topological order.
* Any op producing NaN/Inf raises :class:`NonFiniteError` immediately,
  naming the op.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf values."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values in output of op '{op}'")
        self.op = op


class Rng:
    """Deterministic random stream: identical seed, identical values.

    Thin wrapper over numpy's PCG64 generator; all draws go through this so
    every random quantity in a run is reproducible from its 64-bit seed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def uniform(self, shape, low=0.0, high=1.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def normal(self, shape, std=1.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * std).astype(dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)


class Tensor:
    """Dense 4-D array plus its place in the computation graph.

    ``op``/``parents``/``_vjp`` are set only on op outputs whose result
    requires grad; leaves (and constant subgraphs) keep empty parents, which
    is what lets backward stop there.  ``grad`` stays ``None`` until
    ``backward`` deposits into it; a leaf that was never reached has a zero
    gradient by convention.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_vjp", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ValueError(f"tensors are 4-D (batch, channels, height, width); got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"all extents must be >= 1; got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` of every requires-grad ancestor with d(self)/d(ancestor).

        The root must be scalar (a single element).  A second call on the
        same root is an error; rebuild the graph instead.
        """
        if self.data.size != 1:
            raise ValueError("backward requires a scalar root")
        if self._backward_ran:
            raise RuntimeError("backward already ran on this graph; rebuild the graph before calling again")
        self._backward_ran = True
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._vjp is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # Sugar for assembling weighted loss sums; everything maps onto the
    # named ops below.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering; detects (impossible-by-construction) cycles."""
    order: list[Tensor] = []
    visited = {id(root)}
    onstack = {id(root)}
    stack = [(root, iter(root.parents))]
    while stack:
        node, it = stack[-1]
        child = next(it, None)
        if child is None:
            stack.pop()
            onstack.discard(id(node))
            order.append(node)
        elif id(child) not in visited:
            visited.add(id(child))
            onstack.add(id(child))
            stack.append((child, iter(child.parents)))
        elif id(child) in onstack:
            raise RuntimeError("cycle detected in computation graph")
    return order


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.op = op
    out._backward_ran = False
    if out.requires_grad:
        out.parents = parents
        out._vjp = vjp
    else:
        out.parents = ()
        out._vjp = None
    return out


def count_ops(roots, op: str) -> int:
    """Number of distinct graph nodes with the given op name reachable from ``roots``."""
    if isinstance(roots, Tensor):
        roots = [roots]
    seen: set[int] = set()
    stack = list(roots)
    n = 0
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.op == op:
            n += 1
        stack.extend(t.parents)
    return n


# ---------------------------------------------------------------------------
# Convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """2-D convolution with zero 'same' padding.

    ``w`` has shape (out_ch, in_ch, kh, kw) with odd kh, kw; padding is
    (k-1)/2 per axis so stride 1 preserves HxW and stride 2 yields
    ceil(H/2) x ceil(W/2).  ``b`` is the (1, out_ch, 1, 1) bias.
    Implemented as im2col + GEMM; the backward input pass scatters the
    column gradient back with one vectorized add per kernel tap.
    """
    xd, wd, bd = x.data, w.data, b.data
    _, cin, h, wdt = xd.shape
    cout, cink, kh, kw = wd.shape
    if cink != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin} channels, kernel expects {cink}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    if bd.shape != (1, cout, 1, 1):
        raise ValueError(f"conv2d bias must have shape (1, {cout}, 1, 1), got {bd.shape}")

    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (wdt + 2 * pw - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(oh * ow, cin * kh * kw)
    wmat = wd.reshape(cout, cin * kh * kw)
    out = (cols @ wmat.T).T.reshape(1, cout, oh, ow) + bd
    xp_shape = xp.shape

    def vjp(g):
        g2 = g.reshape(cout, oh * ow).T
        dw = (g2.T @ cols).reshape(wd.shape) if w.requires_grad else None
        db = g.sum(axis=(0, 2, 3)).reshape(bd.shape) if b.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = g2 @ wmat
            dct = dcols.reshape(oh, ow, cin, kh, kw).transpose(2, 3, 4, 0, 1)
            dxp = np.zeros(xp_shape, dtype=g.dtype)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[0, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += dct[:, ki, kj]
            dx = dxp[:, :, ph:ph + h, pw:pw + wdt]
        return dx, dw, db

    return _make(out, "conv2d", (x, w, b), vjp)


# ---------------------------------------------------------------------------
# Normalization and activations


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over HxW (batch is always 1).

    Training-mode statistics only: each forward normalizes with the current
    mean/variance, no running averages.  Variance-0 channels normalize to 0
    through eps rather than erroring (blank/masked regions do occur).
    """
    if eps <= 0:
        raise ValueError(f"batch_norm eps must be > 0, got {eps}")
    xd = x.data
    _, c, h, wdt = xd.shape
    if gamma.data.shape != (1, c, 1, 1) or beta.data.shape != (1, c, 1, 1):
        raise ValueError(
            f"batch_norm gain/shift must have shape (1, {c}, 1, 1); "
            f"got {gamma.data.shape} and {beta.data.shape}"
        )
    mu = xd.mean(axis=(2, 3), keepdims=True)
    var = xd.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data
    n = h * wdt
    gd = gamma.data

    def vjp(g):
        dgamma = (g * xhat).sum(axis=(2, 3), keepdims=True) if gamma.requires_grad else None
        dbeta = g.sum(axis=(2, 3), keepdims=True) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            sg = g.sum(axis=(2, 3), keepdims=True)
            sgx = (g * xhat).sum(axis=(2, 3), keepdims=True)
            dx = gd * inv / n * (n * g - sg - xhat * sgx)
        return dx, dgamma, dbeta

    return _make(out, "batch_norm", (x, gamma, beta), vjp)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """max(x, slope*x); the subgradient at 0 is defined as slope."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    xd = x.data
    pos = xd > 0
    out = np.where(pos, xd, xd * np.asarray(slope, dtype=xd.dtype))

    def vjp(g):
        return (np.where(pos, g, g * np.asarray(slope, dtype=g.dtype)),)

    return _make(out, "leaky_relu", (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # Stable logistic: exp only ever sees non-positive arguments.
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, "sigmoid", (x,), vjp)


# ---------------------------------------------------------------------------
# Resampling


def bilinear_weight_matrix(n: int, factor: int, dtype=np.float64) -> np.ndarray:
    """(factor*n, n) interpolation matrix for 1-D bilinear upsampling.

    Sample grid follows the half-pixel (align-corners-false) convention:
    source coordinate of output i is (i + 0.5)/factor - 0.5, with edge
    clamping.  Applying it along H and then W realizes the 2-D operator.
    """
    m = np.zeros((factor * n, n), dtype=np.float64)
    for o in range(factor * n):
        s = (o + 0.5) / factor - 0.5
        i0 = math.floor(s)
        t = s - i0
        lo = min(max(i0, 0), n - 1)
        hi = min(max(i0 + 1, 0), n - 1)
        m[o, lo] += 1.0 - t
        m[o, hi] += t
    return m.astype(dtype)


_BILINEAR_CACHE: dict[tuple[int, str], np.ndarray] = {}


def _bilinear2(n: int, dtype) -> np.ndarray:
    key = (n, np.dtype(dtype).name)
    m = _BILINEAR_CACHE.get(key)
    if m is None:
        m = bilinear_weight_matrix(n, 2, dtype=dtype)
        _BILINEAR_CACHE[key] = m
    return m


def upsample_bilinear(x: Tensor) -> Tensor:
    """Double H and W by bilinear interpolation (half-pixel convention)."""
    xd = x.data
    _, _, h, w = xd.shape
    mh = _bilinear2(h, xd.dtype)
    mw = _bilinear2(w, xd.dtype)
    out = np.matmul(np.matmul(mh, xd), mw.T)

    def vjp(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return _make(out, "upsample_bilinear", (x,), vjp)


def downsample_area(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping factor x factor block averaging; gradient spreads uniformly."""
    if factor not in (2, 4):
        raise ValueError(f"downsample_area factor must be 2 or 4, got {factor}")
    xd = x.data
    _, c, h, w = xd.shape
    if h % factor or w % factor:
        raise ValueError(f"downsample_area: extents {h}x{w} not divisible by {factor}")
    oh, ow = h // factor, w // factor
    out = xd.reshape(1, c, oh, factor, ow, factor).mean(axis=(3, 5))
    inv = 1.0 / (factor * factor)

    def vjp(g):
        dx = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3) * np.asarray(inv, dtype=g.dtype)
        return (dx,)

    return _make(out, "downsample_area", (x,), vjp)


# ---------------------------------------------------------------------------
# Structure and reductions


def concat_channels(*xs: Tensor) -> Tensor:
    """Concatenate along the channel axis; gradient splits back exactly.

    A single argument is returned unchanged (concatenation with nothing),
    so callers can pass optional side inputs without special-casing.
    """
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    base = xs[0].data.shape
    for t in xs[1:]:
        s = t.data.shape
        if s[0] != base[0] or s[2:] != base[2:]:
            raise ValueError(f"concat_channels spatial mismatch: {base} vs {s}")
    out = np.concatenate([t.data for t in xs], axis=1)
    sizes = [t.data.shape[1] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            g[:, offsets[i]:offsets[i + 1]] if xs[i].requires_grad else None
            for i in range(len(xs))
        )

    return _make(out, "concat_channels", tuple(xs), vjp)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all elements; scalar output."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"mse shape mismatch: {a.data.shape} vs {b.data.shape}")
    d = a.data - b.data
    n = d.size
    out = np.asarray((d * d).mean(), dtype=a.data.dtype).reshape(1, 1, 1, 1)
    coeff = 2.0 / n

    def vjp(g):
        da = g * (coeff * d) if a.requires_grad else None
        db = g * (-coeff * d) if b.requires_grad else None
        return da, db

    return _make(out, "mse", (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def vjp(g):
        return g, g

    return _make(out, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data - b.data

    def vjp(g):
        return g, -g

    return _make(out, "sub", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        da = g * bd if a.requires_grad else None
        db = g * ad if b.requires_grad else None
        return da, db

    return _make(out, "mul", (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * np.asarray(c, dtype=x.data.dtype)

    def vjp(g):
        return (g * np.asarray(c, dtype=g.dtype),)

    return _make(out, "scale", (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype).reshape(1, 1, 1, 1)
    shape = x.data.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, "sum_all", (x,), vjp)
