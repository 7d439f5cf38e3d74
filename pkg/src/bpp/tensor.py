"""Rank-4 tensors with a reverse-mode differentiation tape.

Every value is a dense (n, c, h, w) float array: images, feature maps,
conv weights as (c_out, c_in, k, k), per-channel vectors as (1, c, 1, 1).
Each op attaches a backward closure to its output; `backward` replays the
closures in reverse topological order and accumulates into `.grad`.
Float32 is the working precision; gradient tests build float64 graphs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "INSTANCE_NORM_EPS",
    "Tensor",
    "add",
    "add_scalar",
    "backward",
    "concat_channels",
    "conv2d",
    "div",
    "filter2d_valid",
    "finite_diff_grad",
    "instance_norm",
    "l1_loss",
    "mean_all",
    "mse_loss",
    "mul",
    "relu",
    "scale",
    "sub",
    "sum_all",
    "tensor",
    "zero_grads",
    "zero_insert_upsample2x",
    "zeros",
]

INSTANCE_NORM_EPS = 1e-5


class Tensor:
    """A rank-4 array plus its node in the differentiation graph.

    Leaves (inputs, parameters) have no parents.  `grad` persists across
    `backward` calls on leaves and accumulates; interior grads are scratch.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents",
                 "_backward", "mask", "in_mu", "in_var")

    def __init__(self, data, requires_grad=False, op="leaf", parents=()):
        data = np.asarray(data)
        if data.ndim != 4:
            raise ValueError(
                f"tensor must be rank-4 (n,c,h,w), got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(parents)
        self._backward = None
        self.mask = None     # set by relu
        self.in_mu = None    # set by instance_norm
        self.in_var = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self.op!r})"


def tensor(data, requires_grad=False, dtype=None):
    """Copy `data` into a new leaf tensor."""
    arr = np.array(data, copy=True)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _node(data, parents, op):
    rg = any(p.requires_grad for p in parents)
    # drop parent refs when nothing needs gradients, so inference graphs free up
    return Tensor(data, requires_grad=rg, op=op, parents=parents if rg else ())


def _accum(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _check_same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"{opname}: shapes must match, got {a.data.shape} vs {b.data.shape}")


def backward(root):
    """Accumulate d(root)/d(leaf) into `.grad` of every reachable leaf.

    Root must be scalar-valued.  Repeated calls keep accumulating; use
    `zero_grads` to reset between steps.
    """
    if root.data.size != 1:
        raise ValueError(
            f"backward root must be scalar-valued, got shape {root.data.shape}")
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    for node in topo:
        if node._parents:
            node.grad = None
    _accum(root, np.ones_like(root.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def conv2d(x, weight, bias=None, stride=1, pad=None, depthwise=False):
    """2-D convolution (cross-correlation) with zero padding.

    weight is (c_out, c_in, k, k); depthwise mode uses (c, 1, k, k) and maps
    each channel independently.  k must be 3 or 9 and pad (k-1)/2, so spatial
    dims are preserved at stride 1 and exactly halved at stride 2.
    """
    n, c_in, h, w = x.data.shape
    c_out, wc, kh, kw = weight.data.shape
    if kh != kw or kh not in (3, 9):
        raise ValueError(f"conv2d: kernel must be 3x3 or 9x9, got {kh}x{kw}")
    k = kh
    if pad is None:
        pad = (k - 1) // 2
    if pad != (k - 1) // 2:
        raise ValueError(f"conv2d: pad must be (k-1)/2 = {(k - 1) // 2}, got {pad}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if stride == 2 and (h % 2 or w % 2):
        raise ValueError(f"conv2d: stride 2 requires even spatial dims, got {h}x{w}")
    if depthwise:
        if wc != 1:
            raise ValueError(f"conv2d: depthwise weight must be (c,1,k,k), got c_in axis {wc}")
        if c_out != c_in:
            raise ValueError(f"conv2d: depthwise c_out {c_out} != input channels {c_in}")
    elif wc != c_in:
        raise ValueError(f"conv2d: weight c_in {wc} != input channels {c_in}")
    if bias is not None and bias.data.shape != (1, c_out, 1, 1):
        raise ValueError(f"conv2d: bias must be (1,{c_out},1,1), got {bias.data.shape}")
    if weight.data.dtype != x.data.dtype:
        raise ValueError(f"conv2d: dtype mismatch {x.data.dtype} vs {weight.data.dtype}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    if depthwise:
        wk = weight.data[:, 0]
        cols = None
        w2 = None
        out = np.einsum("nchwuv,cuv->nchw", win, wk, optimize=True)
    else:
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
        cols = cols.reshape(n, c_in * k * k, oh * ow)
        w2 = weight.data.reshape(c_out, c_in * k * k)
        out = np.matmul(w2, cols).reshape(n, c_out, oh, ow)
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) + ((bias,) if bias is not None else ())
    t = _node(out, parents, "conv2d")
    if t.requires_grad:
        def _bw():
            g = t.grad
            if bias is not None and bias.requires_grad:
                _accum(bias, g.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1))
            if depthwise:
                if weight.requires_grad:
                    gw = np.einsum("nchw,nchwuv->cuv", g, win, optimize=True)
                    _accum(weight, gw.reshape(c_out, 1, k, k))
                if x.requires_grad:
                    gxp = np.zeros_like(xp)
                    for u in range(k):
                        for v in range(k):
                            gxp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride] += \
                                g * wk[:, u, v].reshape(1, c_in, 1, 1)
                    _accum(x, gxp[:, :, pad:pad + h, pad:pad + w])
            else:
                gm = g.reshape(n, c_out, oh * ow)
                if weight.requires_grad:
                    gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
                    _accum(weight, gw.reshape(c_out, c_in, k, k))
                if x.requires_grad:
                    gcols = np.matmul(w2.T, gm).reshape(n, c_in, k, k, oh, ow)
                    gxp = np.zeros_like(xp)
                    for u in range(k):
                        for v in range(k):
                            gxp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride] += \
                                gcols[:, :, u, v]
                    _accum(x, gxp[:, :, pad:pad + h, pad:pad + w])
        t._backward = _bw
    return t


def zero_insert_upsample2x(x):
    """Insert zeros to double h and w: out[..., 2i, 2j] = x[..., i, j]."""
    n, c, h, w = x.data.shape
    out = np.zeros((n, c, 2 * h, 2 * w), dtype=x.data.dtype)
    out[:, :, ::2, ::2] = x.data
    t = _node(out, (x,), "zero_insert_upsample2x")
    if t.requires_grad:
        def _bw():
            _accum(x, t.grad[:, :, ::2, ::2])
        t._backward = _bw
    return t


def relu(x):
    """Elementwise max(0, x); subgradient at 0 is 0.

    The boolean activation mask is kept on the output's `.mask`.
    """
    m = x.data > 0
    t = _node(np.where(m, x.data, x.data.dtype.type(0)), (x,), "relu")
    t.mask = m
    if t.requires_grad:
        def _bw():
            _accum(x, t.grad * m)
        t._backward = _bw
    return t


def instance_norm(x, gamma, beta, eps=INSTANCE_NORM_EPS):
    """Normalize each (sample, channel) plane to zero mean / unit variance
    (population variance), then apply the per-channel affine.

    Plane statistics are kept on the output's `.in_mu` / `.in_var`.
    """
    n, c, h, w = x.data.shape
    if h * w < 2:
        raise ValueError(f"instance_norm: plane needs at least 2 pixels, got {h}x{w}")
    for name, v in (("gamma", gamma), ("beta", beta)):
        if v.data.shape != (1, c, 1, 1):
            raise ValueError(f"instance_norm: {name} must be (1,{c},1,1), got {v.data.shape}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = gamma.data * xhat + beta.data
    t = _node(out, (x, gamma, beta), "instance_norm")
    t.in_mu = mu
    t.in_var = var
    if t.requires_grad:
        def _bw():
            g = t.grad
            if beta.requires_grad:
                _accum(beta, g.sum(axis=(0, 2, 3), keepdims=True))
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=(0, 2, 3), keepdims=True))
            if x.requires_grad:
                gm = g.mean(axis=(2, 3), keepdims=True)
                gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
                _accum(x, gamma.data * inv * (g - gm - xhat * gxm))
        t._backward = _bw
    return t


def concat_channels(a, b):
    """Stack channels, a first."""
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ValueError(
            f"concat_channels: n/h/w must agree, got {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[1]
    t = _node(np.concatenate([a.data, b.data], axis=1), (a, b), "concat_channels")
    if t.requires_grad:
        def _bw():
            if a.requires_grad:
                _accum(a, t.grad[:, :ca])
            if b.requires_grad:
                _accum(b, t.grad[:, ca:])
        t._backward = _bw
    return t


def add(a, b):
    _check_same_shape(a, b, "add")
    t = _node(a.data + b.data, (a, b), "add")
    if t.requires_grad:
        def _bw():
            if a.requires_grad:
                _accum(a, t.grad)
            if b.requires_grad:
                _accum(b, t.grad)
        t._backward = _bw
    return t


def sub(a, b):
    _check_same_shape(a, b, "sub")
    t = _node(a.data - b.data, (a, b), "sub")
    if t.requires_grad:
        def _bw():
            if a.requires_grad:
                _accum(a, t.grad)
            if b.requires_grad:
                _accum(b, -t.grad)
        t._backward = _bw
    return t


def mul(a, b):
    _check_same_shape(a, b, "mul")
    t = _node(a.data * b.data, (a, b), "mul")
    if t.requires_grad:
        def _bw():
            if a.requires_grad:
                _accum(a, t.grad * b.data)
            if b.requires_grad:
                _accum(b, t.grad * a.data)
        t._backward = _bw
    return t


def div(a, b):
    _check_same_shape(a, b, "div")
    t = _node(a.data / b.data, (a, b), "div")
    if t.requires_grad:
        def _bw():
            if a.requires_grad:
                _accum(a, t.grad / b.data)
            if b.requires_grad:
                _accum(b, -t.grad * a.data / (b.data * b.data))
        t._backward = _bw
    return t


def scale(x, s):
    """Multiply by a python scalar."""
    s = x.data.dtype.type(s)
    t = _node(x.data * s, (x,), "scale")
    if t.requires_grad:
        def _bw():
            _accum(x, t.grad * s)
        t._backward = _bw
    return t


def add_scalar(x, c):
    """Add a python scalar elementwise."""
    c = x.data.dtype.type(c)
    t = _node(x.data + c, (x,), "add_scalar")
    if t.requires_grad:
        def _bw():
            _accum(x, t.grad)
        t._backward = _bw
    return t


def filter2d_valid(x, kernel):
    """Correlate each channel plane with a fixed 2-D kernel, valid extent only.

    The kernel is a plain array and is never differentiated through.
    """
    kern = np.asarray(kernel, dtype=x.data.dtype)
    if kern.ndim != 2:
        raise ValueError(f"filter2d_valid: kernel must be 2-D, got {kern.ndim}-D")
    kh, kw = kern.shape
    n, c, h, w = x.data.shape
    if h < kh or w < kw:
        raise ValueError(f"filter2d_valid: image {h}x{w} smaller than kernel {kh}x{kw}")
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwuv,uv->nchw", win, kern, optimize=True)
    t = _node(out, (x,), "filter2d_valid")
    if t.requires_grad:
        def _bw():
            # grad wrt input of a valid correlation is the full correlation
            # of the output grad with the flipped kernel
            gp = np.pad(t.grad, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
            _accum(x, np.einsum("nchwuv,uv->nchw", gwin, kern[::-1, ::-1], optimize=True))
        t._backward = _bw
    return t


def _scalar_node(value, parents, op, dtype):
    return _node(np.full((1, 1, 1, 1), value, dtype=dtype), parents, op)


def mean_all(x):
    t = _scalar_node(x.data.mean(), (x,), "mean_all", x.data.dtype)
    if t.requires_grad:
        def _bw():
            g = t.grad.reshape(()) / x.data.size
            _accum(x, np.full_like(x.data, g))
        t._backward = _bw
    return t


def sum_all(x):
    t = _scalar_node(x.data.sum(), (x,), "sum_all", x.data.dtype)
    if t.requires_grad:
        def _bw():
            _accum(x, np.full_like(x.data, t.grad.reshape(())))
        t._backward = _bw
    return t


def l1_loss(pred, target):
    """Mean absolute error over all elements."""
    _check_same_shape(pred, target, "l1_loss")
    d = pred.data - target.data
    t = _scalar_node(np.abs(d).mean(), (pred, target), "l1_loss", pred.data.dtype)
    if t.requires_grad:
        def _bw():
            g = np.sign(d) * (t.grad.reshape(()) / d.size)
            if pred.requires_grad:
                _accum(pred, g)
            if target.requires_grad:
                _accum(target, -g)
        t._backward = _bw
    return t


def mse_loss(pred, target):
    """Mean squared error over all elements."""
    _check_same_shape(pred, target, "mse_loss")
    d = pred.data - target.data
    t = _scalar_node(np.mean(d * d), (pred, target), "mse_loss", pred.data.dtype)
    if t.requires_grad:
        def _bw():
            g = d * (2.0 * t.grad.reshape(()) / d.size)
            if pred.requires_grad:
                _accum(pred, g)
            if target.requires_grad:
                _accum(target, -g)
        t._backward = _bw
    return t


def finite_diff_grad(f, param, h):
    """Central-difference gradient of the scalar function `f()` wrt `param`.

    Perturbs `param.data` in place one coordinate at a time and restores it.
    `f` may return a float or a scalar tensor.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_grad: h must be positive, got {h}")

    def _eval():
        v = f()
        return v.item() if isinstance(v, Tensor) else float(v)

    g = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _eval()
        flat[i] = orig - h
        fm = _eval()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
