"""Minimal reverse-mode autodiff over dense NCHW arrays.

Values live in numpy arrays (float32 by default; float64 is preserved when
given, which the finite-difference checks rely on). Every op records its
parents and a closure mapping the upstream gradient to parent gradients.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev, _state.enabled = grad_enabled(), False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_float(data):
    arr = np.asarray(data)
    if arr.dtype != np.float32 and arr.dtype != np.float64:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    def __init__(self, data, requires_grad=False, _parents=(), _op=""):
        self.data = _as_float(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = None
        self.op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def backward(self):
        backward(self)

    def __add__(self, other):
        return _binary(self, other, "add")

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, "sub")

    def __rsub__(self, other):
        return _binary(_lift(other, self), self, "sub")

    def __mul__(self, other):
        return _binary(self, other, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, "div")

    def __rtruediv__(self, other):
        return _binary(_lift(other, self), self, "div")

    def __neg__(self):
        return _binary(self, -1.0, "mul")


def _lift(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _make(data, parents, op, backward_fn):
    """Wrap an op result; attach the backward closure only when needed."""
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
    if needs:
        out._backward = backward_fn
    return out


def topo_order(root):
    """Iterative post-order DFS; parents precede children in the result."""
    order, seen = [], set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are
    scoped to a single pass.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = g.astype(node.dtype, copy=False)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a, b, kind):
    b = _lift(b, a)
    x, y = a.data, b.data
    if kind == "add":
        data = x + y
    elif kind == "sub":
        data = x - y
    elif kind == "mul":
        data = x * y
    else:
        data = x / y

    def bw(g):
        if kind == "add":
            ga, gb = g, g
        elif kind == "sub":
            ga, gb = g, -g
        elif kind == "mul":
            ga, gb = g * y, g * x
        else:
            ga, gb = g / y, -g * x / (y * y)
        return (_unbroadcast(ga, x.shape) if a.requires_grad else None,
                _unbroadcast(gb, y.shape) if b.requires_grad else None)

    return _make(data, (a, b), kind, bw)


def ewise(a, b, kind):
    """Strict same-shape add/mul."""
    if a.shape != b.shape:
        raise ValueError(f"ewise {kind}: shape mismatch {a.shape} vs {b.shape}")
    if kind not in ("add", "mul"):
        raise ValueError(f"unknown ewise kind {kind!r}")
    return _binary(a, b, kind)


def add(a, b):
    return ewise(a, b, "add")


def mul(a, b):
    return ewise(a, b, "mul")


def scale(x, lam):
    """Multiply channel i of an NCHW tensor by lam[i]."""
    if lam.shape != (x.shape[1],):
        raise ValueError(f"scale: lambda shape {lam.shape} does not match {x.shape[1]} channels")
    xd, ld = x.data, lam.data

    def bw(g):
        gx = g * ld[None, :, None, None] if x.requires_grad else None
        gl = np.einsum("nchw,nchw->c", g, xd) if lam.requires_grad else None
        return gx, gl

    return _make(xd * ld[None, :, None, None], (x, lam), "scale", bw)


def activation(x, kind):
    xd = x.data
    if kind == "sigmoid":
        s = expit(xd)
        data = s

        def deriv():
            return s * (1 - s)
    elif kind == "silu":
        s = expit(xd)
        data = xd * s

        def deriv():
            return s * (1 + xd * (1 - s))
    elif kind == "gelu":
        cdf = 0.5 * (1.0 + erf(xd / np.sqrt(2.0)))
        data = xd * cdf

        def deriv():
            return cdf + xd * np.exp(-0.5 * xd * xd) / np.sqrt(2 * np.pi)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    data = data.astype(xd.dtype, copy=False)
    return _make(data, (x,), kind, lambda g: ((g * deriv()).astype(xd.dtype, copy=False),))


def gelu(x):
    return activation(x, "gelu")


def silu(x):
    return activation(x, "silu")


def sigmoid(x):
    return activation(x, "sigmoid")


# ------------------------------------------------------------------ reductions


def reduce(x, kind="sum", axis=None):
    """Sum or mean, accumulated in float64 and cast back to the input dtype."""
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    xd = x.data
    axes = tuple(range(xd.ndim)) if axis is None else tuple(np.atleast_1d(axis))
    total = xd.astype(np.float64).sum(axis=axes)
    count = int(np.prod([xd.shape[a] for a in axes]))
    if kind == "mean":
        total = total / count
    data = total.astype(xd.dtype)

    def bw(g):
        g = np.expand_dims(g, axes)
        if kind == "mean":
            g = g / count
        return (np.broadcast_to(g, xd.shape).astype(xd.dtype),)

    return _make(data, (x,), kind, bw)


def reduce_sum(x, axis=None):
    return reduce(x, "sum", axis)


def reduce_mean(x, axis=None):
    return reduce(x, "mean", axis)


# ------------------------------------------------------------------- channels


def concat_channels(parts):
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    n, _, h, w = parts[0].shape
    for p in parts:
        if p.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ValueError(
                f"concat_channels: incompatible shapes {[q.shape for q in parts]}")
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] if p.requires_grad else None
                     for i, p in enumerate(parts))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), "concat", bw)


def split_channels(x, sizes):
    sizes = [int(s) for s in sizes]
    if sum(sizes) != x.shape[1] or any(s <= 0 for s in sizes):
        raise ValueError(f"split sizes {sizes} do not partition {x.shape[1]} channels")
    bounds = np.cumsum([0] + sizes)
    outs = []
    for i in range(len(sizes)):
        lo, hi = int(bounds[i]), int(bounds[i + 1])

        def bw(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            return (full,)

        outs.append(_make(x.data[:, lo:hi].copy(), (x,), "split", bw))
    return outs


def channel_pool(x, kind):
    """Reduce across channels to an (n, 1, h, w) map."""
    xd = x.data
    if kind == "mean":
        c = xd.shape[1]
        data = xd.astype(np.float64).mean(axis=1, keepdims=True).astype(xd.dtype)

        def bw(g):
            return (np.broadcast_to(g / c, xd.shape).astype(xd.dtype),)
    elif kind == "max":
        idx = xd.argmax(axis=1)[:, None]
        data = np.take_along_axis(xd, idx, axis=1)

        def bw(g):
            full = np.zeros_like(xd)
            np.put_along_axis(full, idx, g, axis=1)
            return (full,)
    else:
        raise ValueError(f"unknown channel pool {kind!r}")
    return _make(data, (x,), f"channel_{kind}", bw)


# -------------------------------------------------------------------- spatial


def maxpool2d(x, factor):
    n, c, h, w = x.shape
    f = int(factor)
    if f < 1 or h % f or w % f:
        raise ValueError(f"maxpool2d: {h}x{w} not divisible by factor {f}")
    if f == 1:
        return x
    blocks = x.data.reshape(n, c, h // f, f, w // f, f).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // f, w // f, f * f)
    idx = blocks.argmax(axis=-1)[..., None]
    data = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def bw(g):
        full = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        full = full.reshape(n, c, h // f, w // f, f, f).transpose(0, 1, 2, 4, 3, 5)
        return (full.reshape(n, c, h, w),)

    return _make(data, (x,), "maxpool", bw)


def upsample_nearest(x, factor):
    f = int(factor)
    if f < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if f == 1:
        return x
    n, c, h, w = x.shape
    data = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, f, w, f)).reshape(n, c, h * f, w * f)

    def bw(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _make(np.ascontiguousarray(data), (x,), "upsample", bw)


def group_norm(x, groups, gamma, beta, eps=1e-5):
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {groups} groups do not divide {c} channels")
    xg = x.data.reshape(n, groups, -1).astype(np.float64)
    m = xg.shape[-1]
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv
    xhat4 = xhat.reshape(n, c, h, w)
    gd, bd = gamma.data, beta.data
    data = (xhat4 * gd[None, :, None, None] + bd[None, :, None, None]).astype(x.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        gx = None
        if x.requires_grad:
            dxhat = (g64 * gd[None, :, None, None]).reshape(n, groups, m)
            gx = inv / m * (m * dxhat - dxhat.sum(-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(-1, keepdims=True))
            gx = gx.reshape(n, c, h, w).astype(x.dtype)
        ggamma = (g64 * xhat4).sum(axis=(0, 2, 3)).astype(gd.dtype) if gamma.requires_grad else None
        gbeta = g64.sum(axis=(0, 2, 3)).astype(bd.dtype) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(data, (x, gamma, beta), "group_norm", bw)


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x, w, b=None, stride=1, pad=0, dilation=1, groups=1):
    """2-D cross-correlation. ``w`` has shape (c_out, c_in/groups, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ValueError(f"conv2d: groups={groups} must divide c_in={cin} and c_out={cout}")
    if cpg * groups != cin:
        raise ValueError(
            f"conv2d: weight {w.shape} expects {cpg * groups} input channels, input {x.shape} has {cin}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({cout},)")
    s, d = int(stride), int(dilation)
    ph, pw = _pair(pad)
    ekh, ekw = d * (kh - 1) + 1, d * (kw - 1) + 1
    oh = (h + 2 * ph - ekh) // s + 1
    ow = (wd + 2 * pw - ekw) // s + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} (dilation {d}) does not fit padded input {x.shape}")

    xd, wdat = x.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd

    def tap(i, j):
        return (slice(None), slice(None),
                slice(i * d, i * d + s * (oh - 1) + 1, s),
                slice(j * d, j * d + s * (ow - 1) + 1, s))

    depthwise = groups == cin and cout == cin and cpg == 1
    if groups == 1:
        # columns laid out (n, cin*kh*kw, oh*ow) so both passes are batched matmuls
        pointwise = kh == kw == 1 and s == 1
        if pointwise:
            cols = xp.reshape(n, cin, oh * ow)
        else:
            cols = np.stack([xp[tap(i, j)] for i in range(kh) for j in range(kw)], axis=2)
            cols = cols.reshape(n, cin * kh * kw, oh * ow)
        wmat = wdat.reshape(cout, -1)
        out = (wmat @ cols).reshape(n, cout, oh, ow)
    elif depthwise:
        out = np.zeros((n, cin, oh, ow), dtype=np.result_type(xd, wdat))
        for i in range(kh):
            for j in range(kw):
                out += xp[tap(i, j)] * wdat[:, 0, i, j][None, :, None, None]
    else:
        cog = cout // groups
        win = sliding_window_view(xp, (ekh, ekw), axis=(2, 3))[:, :, ::s, ::s, ::d, ::d]
        win = win.reshape(n, groups, cpg, oh, ow, kh, kw)
        wg = wdat.reshape(groups, cog, cpg, kh, kw)
        out = np.einsum("ngchwij,gocij->ngohw", win, wg, optimize=True).reshape(n, cout, oh, ow)
    out = np.ascontiguousarray(out)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        need_x = x.requires_grad
        gxp = np.zeros_like(xp) if need_x else None
        if groups == 1:
            go = g.reshape(n, cout, oh * ow)
            if w.requires_grad:
                gw = (go @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            if need_x:
                gcols = (wmat.T @ go).reshape(n, cin, kh, kw, oh, ow)
                if pointwise:
                    gxp = gcols.reshape(xp.shape)
                else:
                    for i in range(kh):
                        for j in range(kw):
                            gxp[tap(i, j)] += gcols[:, :, i, j]
        elif depthwise:
            if w.requires_grad:
                gw = np.zeros_like(wdat)
                for i in range(kh):
                    for j in range(kw):
                        gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[tap(i, j)])
            if need_x:
                for i in range(kh):
                    for j in range(kw):
                        gxp[tap(i, j)] += g * wdat[:, 0, i, j][None, :, None, None]
        else:
            gg = g.reshape(n, groups, cout // groups, oh, ow)
            if w.requires_grad:
                gw = np.einsum("ngohw,ngchwij->gocij", gg, win, optimize=True).reshape(w.shape)
            if need_x:
                gwin = np.einsum("ngohw,gocij->ngchwij", gg, wg, optimize=True).reshape(n, cin, oh, ow, kh, kw)
                for i in range(kh):
                    for j in range(kw):
                        gxp[tap(i, j)] += gwin[..., i, j]
        if need_x:
            gx = gxp[:, :, ph:ph + h, pw:pw + wd] if (ph or pw) else gxp
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, "conv2d", bw)
