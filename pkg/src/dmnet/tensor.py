"""Minimal dense-tensor engine: forward operators, reverse-mode autodiff,
multiply-accumulate instrumentation, and a finite-difference gradient checker.

Tensors hold row-major numpy arrays. Every operator optionally records a
backward closure (tape rebuilt per forward pass) and reports its MAC /
elementwise cost to the active FlopCounter.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Shape disagreement between operands."""


class ConfigError(ValueError):
    """Invalid operator configuration (stride/pad/axis)."""


FLOPS_PER_MAC = 2  # reporting convention: one MAC = 2 FLOPs


class FlopCounter:
    """Accumulates MAC and elementwise-op counts while enabled."""

    def __init__(self):
        self.macs = 0
        self.elementwise = 0
        self.enabled = False

    def reset(self):
        self.macs = 0
        self.elementwise = 0

    def add_macs(self, n):
        if self.enabled:
            self.macs += int(n)

    def add_elementwise(self, n):
        if self.enabled:
            self.elementwise += int(n)

    @property
    def flops(self):
        return FLOPS_PER_MAC * self.macs


counter = FlopCounter()

_grad_enabled = True


class no_grad:
    """Context manager suppressing tape construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bw")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._bw = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __neg__(self):
        return mul(self, _wrap(-1.0, self))


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.data.shape, float(x), dtype=like.data.dtype))


def _make(data, parents, bw):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bw = bw
    return out


def backward(root: Tensor):
    """Populate .grad on every requires_grad leaf reachable from a scalar root."""
    if root.data.size != 1:
        raise DimensionError(f"backward root must be scalar, got shape {root.data.shape}")
    if root._bw is None and not root.requires_grad:
        raise ConfigError("backward on a tensor with no recorded graph")
    # iterative topological order; each node visited exactly once
    topo, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._bw is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._bw(node.grad)):
            if not parent.requires_grad or g is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


# ---------------------------------------------------------------------------
# elementwise operators


def _binary(a, b, fn, bwfn):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
    counter.add_elementwise(a.data.size)
    return _make(fn(a.data, b.data), (a, b), bwfn(a, b))


def add(a, b):
    return _binary(a, b, np.add, lambda a, b: lambda g: (g, g))


def sub(a, b):
    return _binary(a, b, np.subtract, lambda a, b: lambda g: (g, -g))


def mul(a, b):
    return _binary(a, b, np.multiply,
                   lambda a, b: lambda g: (g * b.data, g * a.data))


def div(a, b):
    return _binary(a, b, np.divide,
                   lambda a, b: lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def sigmoid(x):
    counter.add_elementwise(x.data.size)
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _make(y, (x,), lambda g, y=y: (g * y * (1.0 - y),))


def tanh(x):
    counter.add_elementwise(x.data.size)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g, y=y: (g * (1.0 - y * y),))


def relu(x):
    counter.add_elementwise(x.data.size)
    y = np.maximum(x.data, 0.0)
    return _make(y, (x,), lambda g, m=(x.data > 0): (g * m,))


def exp(x):
    counter.add_elementwise(x.data.size)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g, y=y: (g * y,))


def log(x):
    counter.add_elementwise(x.data.size)
    return _make(np.log(x.data), (x,), lambda g, d=x.data: (g / d,))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "exp": exp, "log": log}
_BINARY = {"add": add, "mul": mul, "sub": sub, "div": div}


def elementwise(x, kind, y=None):
    """Dispatch an elementwise operator by name."""
    if kind in _UNARY:
        return _UNARY[kind](x)
    if kind in _BINARY:
        if y is None:
            raise ConfigError(f"elementwise '{kind}' needs two operands")
        return _BINARY[kind](x, y)
    raise ConfigError(f"unknown elementwise kind '{kind}'")


# ---------------------------------------------------------------------------
# shape / reduction operators


def reshape(x, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"cannot reshape {x.data.shape} to {shape}")
    return _make(x.data.reshape(shape), (x,),
                 lambda g, s=x.data.shape: (g.reshape(s),))


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,),
                 lambda g, inv=inv: (g.transpose(inv),))


def sum_(x, axes=None):
    if axes is None:
        counter.add_elementwise(x.data.size)
        return _make(np.array(x.data.sum()), (x,),
                     lambda g, s=x.data.shape: (np.broadcast_to(g, s).copy(),))
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    counter.add_elementwise(x.data.size)

    def bw(g, axes=axes, s=x.data.shape):
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, s).copy(),)

    return _make(x.data.sum(axis=axes), (x,), bw)


def mean(x, axes=None):
    n = x.data.size if axes is None else int(
        np.prod([x.data.shape[a] for a in ((axes,) if isinstance(axes, int) else axes)]))
    s = sum_(x, axes)
    return mul(s, Tensor(np.full(s.data.shape, 1.0 / n, dtype=s.data.dtype)))


def concat(parts, axis):
    parts = list(parts)
    if not parts:
        raise ConfigError("concat of zero tensors")
    nd = parts[0].data.ndim
    if not -nd <= axis < nd:
        raise ConfigError(f"invalid concat axis {axis} for {nd}-d tensors")
    axis = axis % nd
    ref = list(parts[0].data.shape)
    for p in parts[1:]:
        s = list(p.data.shape)
        if len(s) != nd or any(a != b for i, (a, b) in enumerate(zip(ref, s)) if i != axis):
            raise DimensionError(f"concat shape mismatch {tuple(ref)} vs {tuple(s)} on non-{axis} axes")
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g, splits=splits, axis=axis):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def softmax(x, axis):
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ConfigError(f"invalid softmax axis {axis} for {nd}-d tensor")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    counter.add_elementwise(3 * x.data.size)

    def bw(g, y=y, axis=axis):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), bw)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    m, k = a.data.shape
    n = b.data.shape[1]
    counter.add_macs(m * k * n)

    def bw(g, ad=a.data, bd=b.data):
        return (g @ bd.T, ad.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def upsample2x(x):
    """Nearest-neighbor x2 upsampling of a [C,H,W] map."""
    if x.data.ndim != 3:
        raise DimensionError(f"upsample2x expects [C,H,W], got {x.data.shape}")
    C, H, W = x.data.shape
    y = x.data.repeat(2, axis=1).repeat(2, axis=2)
    counter.add_elementwise(y.size)
    return _make(y, (x,),
                 lambda g, C=C, H=H, W=W: (g.reshape(C, H, 2, W, 2).sum(axis=(2, 4)),))


def avgpool2x2(x):
    """2x2 average pooling of a [C,H,W] map; H and W must be even."""
    if x.data.ndim != 3:
        raise DimensionError(f"avgpool2x2 expects [C,H,W], got {x.data.shape}")
    C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ConfigError(f"avgpool2x2 needs even spatial size, got {H}x{W}")
    y = x.data.reshape(C, H // 2, 2, W // 2, 2).mean(axis=(2, 4))
    counter.add_elementwise(x.data.size)
    return _make(y, (x,),
                 lambda g: (g.repeat(2, axis=1).repeat(2, axis=2) * 0.25,))


# ---------------------------------------------------------------------------
# convolutions


def _conv_geometry(H, W, kh, kw, stride, pad):
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"kernel sizes must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ConfigError(f"bad stride/pad ({stride},{pad})")
    ho, rh = divmod(H + 2 * pad - kh, stride)
    wo, rw = divmod(W + 2 * pad - kw, stride)
    if rh or rw or ho < 0 or wo < 0:
        raise ConfigError(
            f"non-integral output size for input {H}x{W}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}")
    return ho + 1, wo + 1


def conv2d(x, w, b, stride=1, pad=0):
    """Cross-correlation of [C_in,H,W] with [C_out,C_in,kh,kw] + per-channel bias."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 3-d input / 4-d weight, got {x.data.shape}, {w.data.shape}")
    Cin, H, W = x.data.shape
    Cout, Cin2, kh, kw = w.data.shape
    if Cin != Cin2:
        raise DimensionError(f"conv2d channel mismatch: input axis 0 = {Cin}, weight axis 1 = {Cin2}")
    if b.data.shape != (Cout,):
        raise DimensionError(f"conv2d bias shape {b.data.shape}, expected ({Cout},)")
    Ho, Wo = _conv_geometry(H, W, kh, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(Ho * Wo, Cin * kh * kw)
    wm = w.data.reshape(Cout, -1)
    out = (cols @ wm.T).T.reshape(Cout, Ho, Wo) + b.data[:, None, None]
    counter.add_macs(Ho * Wo * Cout * Cin * kh * kw)

    def bw(g):
        gm = g.reshape(Cout, -1)
        dw = (gm @ cols).reshape(w.data.shape)
        db = g.sum(axis=(1, 2))
        dcols = (gm.T @ wm).reshape(Ho, Wo, Cin, kh, kw).transpose(2, 0, 1, 3, 4)
        dxp = np.zeros((Cin, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, :, i, j]
        dx = dxp[:, pad:pad + H, pad:pad + W] if pad else dxp
        return (dx, dw, db)

    return _make(out, (x, w, b), bw)


def depthwise_conv2d(x, w, stride=1, pad=0):
    """One k x k filter per channel: [C,H,W] * [C,1,k,k] -> [C,H',W']."""
    Cin, H, W = x.data.shape
    C2, one, kh, kw = w.data.shape
    if C2 != Cin or one != 1:
        raise DimensionError(f"depthwise weight {w.data.shape} does not match input channels {Cin}")
    Ho, Wo = _conv_geometry(H, W, kh, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.einsum("chwij,cij->chw", win, w.data[:, 0], optimize=True)
    counter.add_macs(Ho * Wo * Cin * kh * kw)

    def bw(g):
        dw = np.einsum("chw,chwij->cij", g, win, optimize=True)[:, None]
        dxp = np.zeros((Cin, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    g * w.data[:, 0, i, j][:, None, None]
        dx = dxp[:, pad:pad + H, pad:pad + W] if pad else dxp
        return (dx, dw)

    return _make(out, (x, w), bw)


def depthwise_separable_conv(x, dw, pw, b, stride=1, pad=0):
    """Depthwise k x k stage followed by a pointwise 1x1 stage."""
    return conv2d(depthwise_conv2d(x, dw, stride, pad), pw, b, stride=1, pad=0)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f, x, eps=1e-5):
    """Max relative error between analytic grad of scalar f(x) and central differences.

    Perturbs every coordinate of x; relative error is |a-n| / max(1e-8, |a|+|n|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"eps {eps} outside [1e-7, 1e-3]")
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

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
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError(f"function non-finite at probe coordinate {i}")
            nflat[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
