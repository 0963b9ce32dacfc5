"""Minimal dense tensor with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array plus an optional gradient buffer. Every
differentiable operation records its parents and a backward closure, so a
fresh tape is built implicitly on each forward pass; ``backward()`` walks it
once in reverse topological order and accumulates gradients into the leaves.

Tensors are immutable after creation except for gradient accumulation. A
graph and its tensors belong to one thread for the duration of a
forward/backward pass; independent graphs may run on different threads.
"""

import threading

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor", "ShapeError", "NumericError", "no_grad", "grad_enabled",
    "set_default_dtype", "get_default_dtype",
    "add", "sub", "mul", "div", "neg", "square", "matmul",
    "reshape", "transpose", "concat", "index_select", "gather_grid",
    "tsum", "tmean", "texp", "tlog", "tsqrt",
    "relu", "leaky_relu", "tanh", "gelu",
    "softmax", "log_softmax", "l2_normalize_tokens",
    "conv2d", "instance_norm2d", "upsample_nearest2x",
]

_DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised when an operation encounters non-finite values."""


def set_default_dtype(dtype):
    """Set the precision used for tensors created from python data."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}, expected float32/float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


_state = threading.local()


def grad_enabled():
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager disabling graph recording (pure inference)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """Dense N-d array with an optional gradient slot.

    Attributes:
        data: row-major numpy array (float32 or float64).
        grad: numpy array of the same shape, populated by ``backward``.
        requires_grad: whether gradients should flow to this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

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

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def detach(self):
        """A view of this tensor that is cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every reachable tensor with requires_grad.

        The receiver must be scalar. Gradients accumulate additively, both
        across multiple uses of a tensor within one graph and across repeated
        ``backward`` calls.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar loss, got shape {self.data.shape}")
        order = _toposort(self)
        seed = np.ones_like(self.data)
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                # first contribution binds (possibly a view); later ones
                # add out-of-place, so bound buffers are never mutated
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _toposort(root):
    """Iterative post-order over the recorded graph (acyclic by construction)."""
    order = []
    seen = set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data, parents, backward_fn):
    """Wrap an op result, recording the tape edge when gradients are on."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------

def add(a, b):
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                          _unbroadcast(g, b.data.shape)))


def sub(a, b):
    data = a.data - b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                          _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    data = a.data * b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                          _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    data = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _make(data, (a, b), backward)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def matmul(a, b):
    """Matrix product with leading broadcast dims (operands must be >= 2-d)."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return _make(data, (a, b), backward)


# -- shape manipulation -------------------------------------------------------

def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.data.ndim))[::-1]
    axes = tuple(axes)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(data, tensors, backward)


def index_select(a, indices, axis=0):
    """Gather along ``axis`` with constant integer indices."""
    idx = np.asarray(indices)
    data = np.take(a.data, idx, axis=axis)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(data, (a,), backward)


def gather_grid(grid, rows, cols):
    """Select the intersection sub-grid ``grid[..., rows, cols, :]``.

    grid: Tensor[B, h, H, W, D]; rows, cols: int arrays [B, h, n].
    Returns Tensor[B, h, n, n, D]. Indices are constants for backward.
    """
    B, h, H, W, D = grid.data.shape
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    b_idx = np.arange(B)[:, None, None, None]
    h_idx = np.arange(h)[None, :, None, None]
    r_idx = rows[:, :, :, None]
    c_idx = cols[:, :, None, :]
    data = grid.data[b_idx, h_idx, r_idx, c_idx]

    def backward(g):
        out = np.zeros_like(grid.data)
        np.add.at(out, (b_idx, h_idx, r_idx, c_idx), g)
        return (out,)

    return _make(data, (grid,), backward)


# -- reductions ---------------------------------------------------------------

def _restore_axes(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 or g.shape != shape \
            else g
    if not keepdims:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        for a in sorted(a % len(shape) for a in ax):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    return _make(data, (a,), lambda g: (_restore_axes(g, shape, axis, keepdims),))


def tmean(a, axis=None, keepdims=False):
    data = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    count = a.data.size / max(data.size, 1)

    def backward(g):
        return (_restore_axes(g, shape, axis, keepdims) / count,)

    return _make(data, (a,), backward)


# -- elementwise functions ------------------------------------------------

def texp(a):
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def tlog(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tsqrt(a):
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * (0.5 / data),))


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=0.2):
    factor = np.where(a.data > 0, a.dtype.type(1), a.dtype.type(slope))
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def tanh(a):
    data = np.tanh(a.data)
    return _make(data, (a,), lambda g: (g * (1.0 - data * data),))


def gelu(a):
    """Gaussian error linear unit, exact erf form 0.5*x*(1 + erf(x/sqrt(2)))."""
    x = a.data
    phi = 0.5 * (1.0 + _erf(x * a.dtype.type(_INV_SQRT2)))
    data = x * phi

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * a.dtype.type(_INV_SQRT_2PI)
        return (g * (phi + x * pdf),)

    return _make(data, (a,), backward)


def softmax(a, axis=-1):
    """Stable softmax along ``axis`` (row max subtracted before exp)."""
    m = a.data.max(axis=axis, keepdims=True)
    if not np.isfinite(m).all():
        raise NumericError("softmax input contains NaN/Inf")
    e = np.exp(a.data - m)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (a,), backward)


def log_softmax(a, axis=-1):
    m = a.data.max(axis=axis, keepdims=True)
    if not np.isfinite(m).all():
        raise NumericError("log_softmax input contains NaN/Inf")
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _make(data, (a,), backward)


def l2_normalize_tokens(a, eps=1e-12, axis=-1):
    """Scale vectors along ``axis`` to unit Euclidean norm.

    Zero vectors map to (near-)zero vectors through the eps guard rather
    than raising.
    """
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    denom = norm + a.dtype.type(eps)
    data = x / denom

    def backward(g):
        xg = (x * g).sum(axis=axis, keepdims=True)
        # second term vanishes where x == 0, so the tiny guard is safe
        safe = np.maximum(norm, a.dtype.type(1e-30))
        return (g / denom - x * (xg / (safe * denom * denom)),)

    return _make(data, (a,), backward)


# -- structured ops -------------------------------------------------------

def _conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _patch_view(xp, kh, kw, stride, hout, wout):
    b, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (b, c, kh, kw, hout, wout),
        (s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False)


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """2-d cross-correlation over NCHW input.

    ``w`` has shape [out, in/groups, kh, kw]. groups == in == out gives
    depth-wise behaviour. Gradients flow to input, weight and bias.
    """
    B, Cin, H, W = x.data.shape
    Cout, Cg, kh, kw = w.data.shape
    if Cg * groups != Cin or Cout % groups:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.data.shape}, weight {w.data.shape}, "
            f"groups={groups}")
    hout = _conv_out_size(H, kh, stride, padding)
    wout = _conv_out_size(W, kw, stride, padding)
    if hout < 1 or wout < 1:
        raise ShapeError(
            f"conv2d output would be empty: input {x.data.shape}, kernel "
            f"({kh}x{kw}), stride {stride}, padding {padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data

    depthwise = groups == Cin == Cout
    if groups == 1 and stride == 1:
        # one GEMM per kernel tap on channels-last data: large contiguous
        # copies instead of the cache-hostile im2col gather
        xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
        m = B * hout * wout
        acc = np.zeros((m, Cout), dtype=x.dtype)
        for ki in range(kh):
            for kj in range(kw):
                tap = xt[:, ki:ki + hout, kj:kj + wout, :].reshape(m, Cin)
                acc += tap @ w.data[:, :, ki, kj].T
        out = acc.reshape(B, hout, wout, Cout).transpose(0, 3, 1, 2)
        mode = "taps"
    elif groups == 1:
        view = _patch_view(xp, kh, kw, stride, hout, wout)
        cols = view.transpose(0, 4, 5, 1, 2, 3).reshape(B * hout * wout, Cin * kh * kw)
        wmat = w.data.reshape(Cout, -1)
        out = (cols @ wmat.T).reshape(B, hout, wout, Cout).transpose(0, 3, 1, 2)
        mode = "im2col"
    elif depthwise:
        # direct shifted multiply-adds, fused per kernel tap
        out = np.zeros((B, Cout, hout, wout), dtype=x.dtype)
        scratch = np.empty_like(out)
        for ki in range(kh):
            for kj in range(kw):
                xs = xp[:, :, ki:ki + stride * hout:stride,
                        kj:kj + stride * wout:stride]
                np.multiply(xs, w.data[:, 0, ki, kj][None, :, None, None],
                            out=scratch)
                out += scratch
        mode = "depthwise"
    else:
        view = _patch_view(xp, kh, kw, stride, hout, wout)
        out = np.empty((B, Cout, hout, wout), dtype=x.dtype)
        og = Cout // groups
        for gi in range(groups):
            vg = view[:, gi * Cg:(gi + 1) * Cg]
            cg = vg.transpose(0, 4, 5, 1, 2, 3).reshape(B * hout * wout, Cg * kh * kw)
            wg = w.data[gi * og:(gi + 1) * og].reshape(og, -1)
            out[:, gi * og:(gi + 1) * og] = (
                cg @ wg.T).reshape(B, hout, wout, og).transpose(0, 3, 1, 2)
        mode = "grouped"
    if b is not None:
        out = out + b.data.reshape(1, Cout, 1, 1)

    def backward(g):
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        if mode == "taps":
            m = B * hout * wout
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(m, Cout)
            gw = np.empty_like(w.data)
            dxt = np.zeros_like(xt)
            for ki in range(kh):
                for kj in range(kw):
                    tap = xt[:, ki:ki + hout, kj:kj + wout, :].reshape(m, Cin)
                    gw[:, :, ki, kj] = g2.T @ tap
                    dxt[:, ki:ki + hout, kj:kj + wout, :] += \
                        (g2 @ w.data[:, :, ki, kj]).reshape(B, hout, wout, Cin)
            dxp = dxt.transpose(0, 3, 1, 2)
        else:
            dxp = np.zeros_like(xp)
            if mode == "im2col":
                g2 = g.transpose(0, 2, 3, 1).reshape(B * hout * wout, Cout)
                gw = (g2.T @ cols).reshape(w.data.shape)
                dcols = (g2 @ w.data.reshape(Cout, -1)) \
                    .reshape(B, hout, wout, Cin, kh, kw)
                for ki in range(kh):
                    for kj in range(kw):
                        dxp[:, :, ki:ki + stride * hout:stride,
                            kj:kj + stride * wout:stride] += \
                            dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            elif mode == "depthwise":
                gw = np.empty_like(w.data)
                scratch = np.empty_like(g)
                for ki in range(kh):
                    for kj in range(kw):
                        xs = xp[:, :, ki:ki + stride * hout:stride,
                                kj:kj + stride * wout:stride]
                        np.multiply(xs, g, out=scratch)
                        gw[:, 0, ki, kj] = scratch.sum(axis=(0, 2, 3))
                        np.multiply(g, w.data[:, 0, ki, kj][None, :, None, None],
                                    out=scratch)
                        dxp[:, :, ki:ki + stride * hout:stride,
                            kj:kj + stride * wout:stride] += scratch
            else:
                gw = np.empty_like(w.data)
                og = Cout // groups
                for gi in range(groups):
                    vg = view[:, gi * Cg:(gi + 1) * Cg]
                    gg = g[:, gi * og:(gi + 1) * og]
                    gw[gi * og:(gi + 1) * og] = np.einsum(
                        "bckluv,bduv->dckl", vg, gg, optimize=True)
                    dpart = np.einsum("bduv,dckl->bckluv", gg,
                                      w.data[gi * og:(gi + 1) * og], optimize=True)
                    for ki in range(kh):
                        for kj in range(kw):
                            dxp[:, gi * Cg:(gi + 1) * Cg,
                                ki:ki + stride * hout:stride,
                                kj:kj + stride * wout:stride] += dpart[:, :, ki, kj]
        if padding:
            gx = dxp[:, :, padding:padding + H, padding:padding + W]
        else:
            gx = dxp
        if b is not None:
            return gx, gw, gb
        return gx, gw

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, backward)


def instance_norm2d(x, gamma, beta, eps=1e-5):
    """Per-(sample, channel) normalization over H, W with affine transform.

    Uses population variance. gamma and beta are length-C vectors.
    """
    B, C, H, W = x.data.shape
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * inv_std
    gam = gamma.data.reshape(1, C, 1, 1)
    out = xhat * gam + beta.data.reshape(1, C, 1, 1)

    def backward(g):
        g_gamma = (g * xhat).sum(axis=(0, 2, 3))
        g_beta = g.sum(axis=(0, 2, 3))
        gx_hat = g * gam
        m1 = gx_hat.mean(axis=(2, 3), keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=(2, 3), keepdims=True)
        gx = inv_std * (gx_hat - m1 - xhat * m2)
        return gx, g_gamma, g_beta

    return _make(out, (x, gamma, beta), backward)


def upsample_nearest2x(x):
    """Replicate each pixel into a 2x2 block; backward sums each block."""
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    B, C, H, W = x.data.shape

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _make(data, (x,), backward)
