"""Dense float tensors with reverse-mode automatic differentiation.

The engine covers exactly what a small convolutional autoencoder and its
reconstruction losses need: strided convolution, batch normalization,
leaky ReLU, nearest-neighbour 2x upsampling, elementwise arithmetic,
reductions, plus a short tail of helpers (sigmoid, linear, reshape,
reflection padding) used by the decoder head, the classifier probe and
windowed SSIM statistics.

Conventions:
  * float32 by default; float64 exists for finite-difference validation.
  * Binary ops accept operands of identical shape, or a tensor paired
    with a python scalar / 0-d tensor. Anything else raises ShapeError.
  * ``backward`` accumulates into ``Tensor.grad`` with ``+=``; running it
    twice on the same graph doubles every gradient. Reset grads between
    optimizer steps.
  * ``reduce_max`` detaches its result: it is a constant extractor used
    for loss-map normalization, never a gradient route.
  * Forward results are deterministic for fixed inputs in
    single-threaded use; convolution chunking is size-derived, not
    timing-derived.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float32

# Largest im2col buffer (elements) conv2d will materialize at once; the
# batch axis is chunked to stay below it and patches are recomputed in
# the backward pass instead of being kept alive.
_COL_BUDGET = 1 << 25

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-dimensional float array, optionally part of a backward graph.

    ``data`` is the value, ``grad`` the accumulated adjoint (or None),
    and ``requires_grad`` marks tensors that should receive gradients.
    Non-leaf tensors additionally carry their producing operation as a
    backward closure over saved values.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_kind")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._kind = "leaf"

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(kind={self._kind}, shape={tuple(self.shape)}, dtype={self.data.dtype})"

    # operator sugar; scalars stay python numbers and never join the graph
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def _result(kind, parents, data, backward_fn):
    """Wrap an op result, recording the graph edge when grads are live."""
    out = Tensor(data)
    if _grad_enabled and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if isinstance(p, Tensor))
        out._backward = backward_fn
        out._kind = kind
    return out


def _as_scalar(x, dtype):
    """Collapse a python number / 0-d array to a dtype-matched scalar."""
    return np.asarray(x, dtype=dtype).reshape(())


def _check_pair(a, b, op):
    """Enforce the broadcast contract: equal shapes, or scalar-vs-tensor."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.data.dtype != b.data.dtype:
            raise ShapeError(f"{op}: mixed dtypes {a.data.dtype} vs {b.data.dtype}")
        if a.shape != b.shape and a.size != 1 and b.size != 1:
            raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def _reduce_to(grad, tensor):
    """Sum an adjoint down to a scalar operand's shape if needed."""
    if grad.shape != tensor.data.shape:
        return np.asarray(grad.sum(), dtype=grad.dtype).reshape(tensor.data.shape)
    return grad


# ---------------------------------------------------------------------------
# elementwise operations


def add(a, b):
    _check_pair(a, b, "add")
    if not isinstance(a, Tensor):
        a, b = b, a
    bv = b.data if isinstance(b, Tensor) else _as_scalar(b, a.data.dtype)
    out = a.data + bv

    def bwd(g):
        ga = _reduce_to(g, a)
        gb = _reduce_to(g, b) if isinstance(b, Tensor) else None
        return (ga, gb) if isinstance(b, Tensor) else (ga,)

    return _result("add", (a, b), out, bwd)


def sub(a, b):
    _check_pair(a, b, "sub")
    av = a.data if isinstance(a, Tensor) else _as_scalar(a, b.data.dtype)
    bv = b.data if isinstance(b, Tensor) else _as_scalar(b, a.data.dtype)
    out = av - bv
    parents = tuple(t for t in (a, b) if isinstance(t, Tensor))

    def bwd(g):
        grads = []
        if isinstance(a, Tensor):
            grads.append(_reduce_to(g, a))
        if isinstance(b, Tensor):
            grads.append(_reduce_to(-g, b))
        return tuple(grads)

    return _result("sub", parents, out, bwd)


def mul(a, b):
    _check_pair(a, b, "mul")
    if not isinstance(a, Tensor):
        a, b = b, a
    bv = b.data if isinstance(b, Tensor) else _as_scalar(b, a.data.dtype)
    out = a.data * bv

    def bwd(g):
        ga = _reduce_to(g * bv, a)
        if isinstance(b, Tensor):
            return (ga, _reduce_to(g * a.data, b))
        return (ga,)

    return _result("mul", (a, b), out, bwd)


def div(a, b):
    _check_pair(a, b, "div")
    av = a.data if isinstance(a, Tensor) else _as_scalar(a, b.data.dtype)
    bv = b.data if isinstance(b, Tensor) else _as_scalar(b, a.data.dtype)
    out = av / bv
    parents = tuple(t for t in (a, b) if isinstance(t, Tensor))

    def bwd(g):
        grads = []
        if isinstance(a, Tensor):
            grads.append(_reduce_to(g / bv, a))
        if isinstance(b, Tensor):
            grads.append(_reduce_to(-g * av / (bv * bv), b))
        return tuple(grads)

    return _result("div", parents, out, bwd)


def neg(x):
    def bwd(g):
        return (-g,)

    return _result("neg", (x,), -x.data, bwd)


def log(x):
    """Natural log; rejects any non-positive input up front."""
    lo = float(x.data.min()) if x.data.size else 1.0
    if lo <= 0.0:
        raise NumericError(f"log of non-positive value (minimum element {lo!r})")
    out = np.log(x.data)

    def bwd(g):
        return (g / x.data,)

    return _result("log", (x,), out, bwd)


def square(x):
    def bwd(g):
        return (g * (2.0 * x.data),)

    return _result("square", (x,), x.data * x.data, bwd)


def absval(x):
    sign = np.sign(x.data)  # 0 at 0: the chosen subgradient

    def bwd(g):
        return (g * sign,)

    return _result("abs", (x,), np.abs(x.data), bwd)


def scalar_mul(x, c):
    cv = _as_scalar(c, x.data.dtype)

    def bwd(g):
        return (g * cv,)

    return _result("scalar_mul", (x,), x.data * cv, bwd)


def clamp(x, lo, hi):
    """Clip to [lo, hi]; gradient passes on the closed interval."""
    out = np.clip(x.data, lo, hi)
    mask = ((x.data >= lo) & (x.data <= hi)).astype(x.data.dtype)

    def bwd(g):
        return (g * mask,)

    return _result("clamp", (x,), out, bwd)


def sigmoid(x):
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _result("sigmoid", (x,), out, bwd)


def leaky_relu(x, slope=0.2):
    """x for x >= 0 else slope * x; the derivative at 0 is defined as 1."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    mask = np.where(x.data >= 0, x.data.dtype.type(1.0), x.data.dtype.type(slope))
    out = x.data * mask

    def bwd(g):
        return (g * mask,)

    return _result("leaky_relu", (x,), out, bwd)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(x, axes):
    if axes is None:
        return tuple(range(x.data.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(a) % x.data.ndim for a in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate reduction axes {axes}")
    return axes


def _check_nonempty(x, axes, op):
    if x.data.size == 0 or any(x.data.shape[a] == 0 for a in axes):
        raise ShapeError(f"{op} over an empty extent, shape {tuple(x.shape)}")


def _broadcast_back(g, in_shape, axes):
    shape = list(in_shape)
    for a in axes:
        shape[a] = 1
    return np.broadcast_to(g.reshape(shape), in_shape)


def reduce_sum(x, axes=None):
    axes = _norm_axes(x, axes)
    _check_nonempty(x, axes, "sum")
    out = x.data.sum(axis=axes)

    def bwd(g):
        return (_broadcast_back(g, x.data.shape, axes),)

    return _result("sum", (x,), out, bwd)


def reduce_mean(x, axes=None):
    axes = _norm_axes(x, axes)
    _check_nonempty(x, axes, "mean")
    n = 1
    for a in axes:
        n *= x.data.shape[a]
    out = x.data.mean(axis=axes)

    def bwd(g):
        return (_broadcast_back(g / x.data.dtype.type(n), x.data.shape, axes),)

    return _result("mean", (x,), out, bwd)


def reduce_max(x, axes=None):
    """Max as a detached constant extractor (no gradient route)."""
    axes = _norm_axes(x, axes)
    _check_nonempty(x, axes, "max")
    return Tensor(x.data.max(axis=axes))


# ---------------------------------------------------------------------------
# structural ops


def reshape(x, shape):
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.data.shape),)

    return _result("reshape", (x,), out, bwd)


def pad_reflect2d(x, pad):
    """Reflect-pad the two trailing axes of an [N,C,H,W] tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"pad_reflect2d expects 4-d input, got {tuple(x.shape)}")
    n, c, h, w = x.data.shape
    if pad >= h or pad >= w:
        raise ShapeError(f"reflect pad {pad} too large for spatial dims ({h}, {w})")
    idx_h = np.concatenate([np.arange(pad, 0, -1), np.arange(h), np.arange(h - 2, h - 2 - pad, -1)])
    idx_w = np.concatenate([np.arange(pad, 0, -1), np.arange(w), np.arange(w - 2, w - 2 - pad, -1)])
    out = x.data[:, :, idx_h][:, :, :, idx_w]

    def bwd(g):
        acc = np.zeros((n, c, h, w + 2 * pad), dtype=g.dtype)
        np.add.at(acc.transpose(2, 0, 1, 3), idx_h, g.transpose(2, 0, 1, 3))
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(gx.transpose(3, 0, 1, 2), idx_w, acc.transpose(3, 0, 1, 2))
        return (gx,)

    return _result("pad_reflect2d", (x,), out, bwd)


def upsample_nearest2x(x):
    """Replicate each pixel into a 2x2 block; backward sums each block."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample expects 4-d input, got {tuple(x.shape)}")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        n, c, h2, w2 = g.shape
        return (g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return _result("upsample2x", (x,), out, bwd)


def linear(x, weight, bias):
    """Affine map: [N,F] @ [K,F]^T + [K]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("linear expects 2-d input and weight")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"linear feature dim mismatch: input has {x.data.shape[1]}, weight has {weight.data.shape[1]}"
        )
    out = x.data @ weight.data.T + bias.data

    def bwd(g):
        return (g @ weight.data, g.T @ x.data, g.sum(axis=0))

    return _result("linear", (x, weight, bias), out, bwd)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp, kh, kw, stride):
    """[b,C,Hp,Wp] -> patch matrix [b, C*kh*kw, Hout*Wout]."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(b, c * kh * kw, ho * wo)


def _col2im_add(gcols, gxp, kh, kw, stride, ho, wo):
    """Scatter-add [b, C*kh*kw, Hout*Wout] gradients into the padded input."""
    b, c = gxp.shape[0], gxp.shape[1]
    g6 = gcols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g6[:, :, i, j]


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-d cross-correlation over [N,Cin,H,W] with [Cout,Cin,kH,kW] filters.

    Output spatial size is floor((H + 2*padding - kH)/stride) + 1 (same
    for W). Differentiable w.r.t. input, weight and bias. The im2col
    patch matrix is kept for the backward pass when it fits the size
    budget and recomputed in batch chunks otherwise, so memory stays
    bounded for any batch size.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d [N,Cin,H,W], got {tuple(x.shape)}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-d [Cout,Cin,kH,kW], got {tuple(weight.shape)}")
    n, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin_w != cin:
        raise ShapeError(f"conv2d channel mismatch: input Cin={cin}, weight Cin={cin_w}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {tuple(bias.shape)}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel ({kh},{kw}) exceeds padded input ({hp},{wp})")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    wmat = weight.data.reshape(cout, cin * kh * kw)
    per_sample = ho * wo * cin * kh * kw
    chunk = max(1, _COL_BUDGET // max(1, per_sample))
    keep_cols = _grad_enabled and n * per_sample <= _COL_BUDGET

    saved_cols = None
    out = np.empty((n, cout, ho, wo), dtype=x.data.dtype)
    for s in range(0, n, chunk):
        cols = _im2col(xp[s : s + chunk], kh, kw, stride)
        if keep_cols:
            saved_cols = cols  # single chunk: it covers the whole batch
        out[s : s + chunk] = np.matmul(wmat, cols).reshape(-1, cout, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    need_x = x.requires_grad
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gw = np.zeros_like(wmat)
        gxp = np.zeros_like(xp) if need_x else None
        for s in range(0, n, chunk):
            cols = saved_cols if saved_cols is not None else _im2col(xp[s : s + chunk], kh, kw, stride)
            g3 = g[s : s + chunk].reshape(-1, cout, ho * wo)
            gw += np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
            if need_x:
                gcols = np.matmul(wmat.T, g3)
                _col2im_add(gcols, gxp[s : s + chunk], kh, kw, stride, ho, wo)
        gx = None
        if need_x:
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        gw = gw.reshape(weight.data.shape)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result("conv2d", parents, out, bwd)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Per-layer running statistics; uninitialized until a train step."""

    __slots__ = ("running_mean", "running_var", "num_batches")

    def __init__(self, running_mean=None, running_var=None, num_batches=0):
        self.running_mean = running_mean
        self.running_var = running_var
        self.num_batches = int(num_batches)

    @property
    def initialized(self):
        return self.num_batches > 0

    def copy(self):
        return BatchNormState(
            None if self.running_mean is None else self.running_mean.copy(),
            None if self.running_var is None else self.running_var.copy(),
            self.num_batches,
        )


def batchnorm2d(x, gamma, beta, state, mode="train", eps=1e-5, momentum=0.1):
    """Channelwise normalization of [N,C,H,W].

    Train mode normalizes with the batch statistics (biased variance)
    and folds them into the running estimates; eval mode uses the
    running estimates and fails if none exist yet.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4-d input, got {tuple(x.shape)}")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    if n * h * w < 1:
        raise ShapeError("batchnorm2d needs at least one value per channel")
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d mode must be train or eval, got {mode!r}")

    gsh = gamma.data.reshape(1, c, 1, 1)
    bsh = beta.data.reshape(1, c, 1, 1)

    if mode == "train":
        m = x.data.mean(axis=(0, 2, 3))
        v = x.data.var(axis=(0, 2, 3))
        if state.running_mean is None:
            state.running_mean = m.copy()
            state.running_var = v.copy()
        else:
            state.running_mean += momentum * (m - state.running_mean)
            state.running_var += momentum * (v - state.running_var)
        state.num_batches += 1

        inv = 1.0 / np.sqrt(v + x.data.dtype.type(eps))
        xhat = (x.data - m.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = gsh * xhat + bsh
        cnt = x.data.dtype.type(n * h * w)

        def bwd(g):
            dxh = g * gsh
            s1 = dxh.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxh * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv.reshape(1, c, 1, 1) / cnt) * (cnt * dxh - s1 - xhat * s2)
            return (gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return _result("batchnorm2d", (x, gamma, beta), out, bwd)

    if not state.initialized:
        raise ValueError("batchnorm2d eval mode requires initialized running statistics")
    inv = 1.0 / np.sqrt(state.running_var + x.data.dtype.type(eps))
    xhat = (x.data - state.running_mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gsh * xhat + bsh

    def bwd_eval(g):
        return (g * gsh * inv.reshape(1, c, 1, 1), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return _result("batchnorm2d", (x, gamma, beta), out, bwd_eval)


# ---------------------------------------------------------------------------
# backward


def backward(root):
    """Reverse-sweep the graph below ``root``, accumulating grads.

    ``root`` must hold exactly one element. Every reachable tensor with
    ``requires_grad`` receives (or accumulates onto) its ``grad``;
    everything else is left untouched.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {tuple(root.shape)}")

    order = []
    seen = {id(root)}
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        stack.append((t, True))
        for p in t._parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append((p, False))

    adjoints = {id(root): np.ones_like(root.data)}
    for t in reversed(order):
        g = adjoints.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            # leaf: deposit an owned copy so later graph reuse can't alias it
            if t.requires_grad:
                t.grad = np.array(g) if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            adjoints[k] = pg if k not in adjoints else adjoints[k] + pg
