"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced. Calling
``backward`` on a scalar loss walks the graph once in reverse topological
order and accumulates gradients into every tensor that requires them.

Convolutions are evaluated as one GEMM per kernel offset against strided
views of the padded input, so no full im2col buffer is ever materialized.
All image-like tensors use channels-last layout: (N, H, W, C) batched or
(H, W, C) unbatched.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ShapeError, ValidationError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = None
        self.parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        tag = self.name or self.op or "leaf"
        return f"Tensor({tag}, shape={self.data.shape}, dtype={self.data.dtype})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, backward):
    """Build an op result, recording the graph only when grads are on."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out._backward = backward
    return out


def backward(loss, params=None):
    """Run reverse-mode accumulation from a scalar loss.

    Returns a map from parameter name to gradient for every named leaf
    tensor reached by the sweep. Gradients also remain on the tensors.
    When ``params`` (a name-to-Tensor map) is given, parameters the
    sweep never reached get explicit zero gradients in the result.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValidationError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValidationError("loss does not require gradients; nothing to backpropagate")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss._accum(np.ones_like(loss.data))
    grads = {}
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
        if node.op is None and node.name is not None:
            grads[node.name] = node.grad
    if params is not None:
        for name, tensor in params.items():
            if name in grads:
                continue
            if id(tensor) in seen and tensor.grad is not None:
                grads[name] = tensor.grad
            else:
                zero = np.zeros_like(tensor.data)
                tensor.grad = zero
                grads[name] = zero
    return grads


# ---------------------------------------------------------------------------
# padding helpers


def _same_pad(size, window, stride):
    """Total padding so that output size is ceil(size / stride)."""
    out = -(-size // stride)
    return max((out - 1) * stride + window - size, 0), out


def _pad_hw(x, ph, pw, fill=0.0):
    """Pad the two spatial axes of an (N, H, W, C) array.

    The extra pixel of an odd total goes to the bottom/right edge.
    """
    if ph == 0 and pw == 0:
        return x
    top, left = ph // 2, pw // 2
    return np.pad(
        x,
        ((0, 0), (top, ph - top), (left, pw - left), (0, 0)),
        mode="constant",
        constant_values=fill,
    )


def _split_batch(xd, where):
    if xd.ndim == 4:
        return xd, False
    if xd.ndim == 3:
        return xd[None], True
    raise ShapeError(f"{where} expects a 3-D or 4-D input, got shape {xd.shape}")


def _offset_slice(arr, di, dj, stride, ho, wo):
    """Strided spatial view of a padded (N, H, W, C) array at one offset."""
    return arr[:, di : di + (ho - 1) * stride + 1 : stride, dj : dj + (wo - 1) * stride + 1 : stride, :]


# ---------------------------------------------------------------------------
# convolution family


def conv2d(x, kernel, bias=None, stride=1):
    """Full 2-D convolution with same zero padding.

    kernel has shape (kh, kw, c_in, c_out); bias, if given, (c_out,).
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if bias is not None:
        bias = _as_tensor(bias)
    xd, unbatched = _split_batch(x.data, "conv2d")
    kh, kw, cin, cout = kernel.data.shape
    if xd.shape[3] != cin:
        raise ShapeError(f"conv2d: input has {xd.shape[3]} channels, kernel expects {cin}")
    n, h, w, _ = xd.shape
    ph, ho = _same_pad(h, kh, stride)
    pw, wo = _same_pad(w, kw, stride)
    xp = _pad_hw(xd, ph, pw)
    k2 = kernel.data.reshape(kh * kw, cin, cout)

    out2 = np.zeros((n * ho * wo, cout), dtype=xd.dtype)
    for di in range(kh):
        for dj in range(kw):
            xs = np.ascontiguousarray(_offset_slice(xp, di, dj, stride, ho, wo))
            out2 += xs.reshape(-1, cin) @ k2[di * kw + dj]
    if bias is not None:
        out2 += bias.data
    out = out2.reshape(n, ho, wo, cout)
    if unbatched:
        out = out[0]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def _bw(g):
        g2 = g.reshape(-1, cout)
        gx = np.zeros_like(xp) if x.requires_grad else None
        gk = np.zeros_like(kernel.data) if kernel.requires_grad else None
        for di in range(kh):
            for dj in range(kw):
                if gk is not None:
                    xs = np.ascontiguousarray(_offset_slice(xp, di, dj, stride, ho, wo))
                    gk[di, dj] = xs.reshape(-1, cin).T @ g2
                if gx is not None:
                    patch = (g2 @ k2[di * kw + dj].T).reshape(n, ho, wo, cin)
                    _offset_slice(gx, di, dj, stride, ho, wo)[...] += patch
        if gx is not None:
            top, left = ph // 2, pw // 2
            gx = gx[:, top : top + h, left : left + w, :]
            x._accum(gx[0] if unbatched else gx)
        if gk is not None:
            kernel._accum(gk)
        if bias is not None and bias.requires_grad:
            bias._accum(g2.sum(axis=0))

    return _make(out, "conv2d", parents, _bw)


def depthwise_conv2d(x, kernel, stride=1):
    """Per-channel spatial convolution; kernel shape (kh, kw, c)."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    xd, unbatched = _split_batch(x.data, "depthwise_conv2d")
    kh, kw, c = kernel.data.shape
    if xd.shape[3] != c:
        raise ShapeError(f"depthwise_conv2d: input has {xd.shape[3]} channels, kernel expects {c}")
    n, h, w, _ = xd.shape
    ph, ho = _same_pad(h, kh, stride)
    pw, wo = _same_pad(w, kw, stride)
    xp = _pad_hw(xd, ph, pw)

    out = np.zeros((n, ho, wo, c), dtype=xd.dtype)
    for di in range(kh):
        for dj in range(kw):
            out += _offset_slice(xp, di, dj, stride, ho, wo) * kernel.data[di, dj]
    out_t = out[0] if unbatched else out

    def _bw(g):
        g4 = g[None] if unbatched else g
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for di in range(kh):
                for dj in range(kw):
                    xs = _offset_slice(xp, di, dj, stride, ho, wo)
                    gk[di, dj] = np.einsum("nhwc,nhwc->c", xs, g4)
            kernel._accum(gk)
        if x.requires_grad:
            gx = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    _offset_slice(gx, di, dj, stride, ho, wo)[...] += g4 * kernel.data[di, dj]
            top, left = ph // 2, pw // 2
            gx = gx[:, top : top + h, left : left + w, :]
            x._accum(gx[0] if unbatched else gx)

    return _make(out_t, "depthwise_conv2d", (x, kernel), _bw)


def pointwise_conv2d(x, kernel):
    """1x1 convolution mixing channels; kernel shape (c_in, c_out)."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    xd, unbatched = _split_batch(x.data, "pointwise_conv2d")
    cin, cout = kernel.data.shape
    if xd.shape[3] != cin:
        raise ShapeError(f"pointwise_conv2d: input has {xd.shape[3]} channels, kernel expects {cin}")
    x2 = np.ascontiguousarray(xd).reshape(-1, cin)
    out = (x2 @ kernel.data).reshape(xd.shape[:3] + (cout,))
    out_t = out[0] if unbatched else out

    def _bw(g):
        g2 = g.reshape(-1, cout)
        if kernel.requires_grad:
            kernel._accum(x2.T @ g2)
        if x.requires_grad:
            gx = (g2 @ kernel.data.T).reshape(xd.shape)
            x._accum(gx[0] if unbatched else gx)

    return _make(out_t, "pointwise_conv2d", (x, kernel), _bw)


# ---------------------------------------------------------------------------
# pooling


def maxpool2d(x, window=3, stride=2):
    """Max pooling with same padding; pad cells hold -inf and never win.

    Ties within a window resolve to the lowest flat offset, so the
    gradient routes to exactly one input cell per output cell.
    """
    x = _as_tensor(x)
    xd, unbatched = _split_batch(x.data, "maxpool2d")
    n, h, w, c = xd.shape
    ph, ho = _same_pad(h, window, stride)
    pw, wo = _same_pad(w, window, stride)
    xp = _pad_hw(xd, ph, pw, fill=-np.inf)

    best = np.full((n, ho, wo, c), -np.inf, dtype=xd.dtype)
    idx = np.zeros((n, ho, wo, c), dtype=np.int16)
    for di in range(window):
        for dj in range(window):
            xs = _offset_slice(xp, di, dj, stride, ho, wo)
            mask = xs > best
            np.copyto(best, xs, where=mask)
            np.copyto(idx, np.int16(di * window + dj), where=mask)
    out = best[0] if unbatched else best

    def _bw(g):
        if not x.requires_grad:
            return
        g4 = g[None] if unbatched else g
        gx = np.zeros_like(xp)
        for di in range(window):
            for dj in range(window):
                sel = idx == di * window + dj
                _offset_slice(gx, di, dj, stride, ho, wo)[...] += g4 * sel
        top, left = ph // 2, pw // 2
        gx = gx[:, top : top + h, left : left + w, :]
        x._accum(gx[0] if unbatched else gx)

    return _make(out, "maxpool2d", (x,), _bw)


def global_avg_pool(x):
    """Mean over the two spatial axes: (N, H, W, C) -> (N, C)."""
    x = _as_tensor(x)
    xd, unbatched = _split_batch(x.data, "global_avg_pool")
    n, h, w, c = xd.shape
    out = xd.mean(axis=(1, 2))
    out_t = out[0] if unbatched else out

    def _bw(g):
        if not x.requires_grad:
            return
        g4 = g[None] if unbatched else g
        gx = np.broadcast_to(g4[:, None, None, :] / (h * w), xd.shape)
        x._accum(gx[0] if unbatched else gx)

    return _make(out_t, "global_avg_pool", (x,), _bw)


# ---------------------------------------------------------------------------
# dense and normalization


def dense(x, weight, bias=None):
    """Affine map; x (N, D) or (D,), weight (D, M), bias (M,)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if bias is not None:
        bias = _as_tensor(bias)
    xd = x.data
    if xd.ndim not in (1, 2):
        raise ShapeError(f"dense expects a 1-D or 2-D input, got shape {xd.shape}")
    d, m = weight.data.shape
    if xd.shape[-1] != d:
        raise ShapeError(f"dense: input feature size {xd.shape[-1]} does not match weight rows {d}")
    unbatched = xd.ndim == 1
    x2 = xd[None] if unbatched else xd
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out_t = out[0] if unbatched else out

    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        g2 = g[None] if unbatched else g
        if weight.requires_grad:
            weight._accum(x2.T @ g2)
        if x.requires_grad:
            gx = g2 @ weight.data.T
            x._accum(gx[0] if unbatched else gx)
        if bias is not None and bias.requires_grad:
            bias._accum(g2.sum(axis=0))

    return _make(out_t, "dense", parents, _bw)


def batchnorm(
    x,
    gamma,
    beta,
    running_mean,
    running_var,
    train,
    momentum=0.99,
    eps=1e-3,
    update_stats=True,
):
    """Normalize over every axis except the trailing channel axis.

    In train mode the batch statistics are used and, unless
    ``update_stats`` is False, folded into the running buffers in place
    with ``running = momentum * running + (1 - momentum) * batch``.
    Variance is the biased estimate. Inference normalizes with the
    running buffers and accepts unbatched input; training does not.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    xd = x.data
    c = xd.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape ({c},)")
    axes = tuple(range(xd.ndim - 1))

    if train:
        if xd.ndim < 2:
            raise ShapeError("batchnorm train mode expects a batched input")
        if xd.ndim == 3:
            raise ValidationError("batchnorm train mode requires a batched (N, H, W, C) input")
        if xd.shape[0] < 2:
            raise ValidationError("batchnorm train mode needs batch size >= 2, variance is degenerate at 1")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if update_stats:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mean
            running_var *= momentum
            running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var

    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * ivar
    out = gamma.data * xhat + beta.data

    def _bw(g):
        if beta.requires_grad:
            beta._accum(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=axes))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data
        if train:
            m = xd.size // c
            gx = (ivar / m) * (
                m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
            )
        else:
            gx = dxhat * ivar
        x._accum(gx.astype(xd.dtype, copy=False))

    return _make(out.astype(xd.dtype, copy=False), "batchnorm", (x, gamma, beta), _bw)


# ---------------------------------------------------------------------------
# activations and glue


def _sigmoid(z):
    """Numerically stable logistic, exact in both tails."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activation(x, kind):
    """Elementwise nonlinearity; kind is 'relu' or 'sigmoid'."""
    x = _as_tensor(x)
    xd = x.data
    if kind == "relu":
        out = np.maximum(xd, 0)

        def _bw(g):
            if x.requires_grad:
                x._accum(g * (xd > 0))

    elif kind == "sigmoid":
        out = _sigmoid(xd)

        def _bw(g):
            if x.requires_grad:
                x._accum(g * out * (1.0 - out))

    else:
        raise ValidationError(f"unknown activation kind: {kind!r}")
    return _make(out, kind, (x,), _bw)


def add(a, b):
    """Elementwise sum of two equal-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def _bw(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return _make(out, "add", (a, b), _bw)


def flatten(x):
    """Collapse everything after the batch axis; unbatched input goes 1-D."""
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim == 4:
        out = xd.reshape(xd.shape[0], -1)
    else:
        out = xd.reshape(-1)

    def _bw(g):
        if x.requires_grad:
            x._accum(g.reshape(xd.shape))

    return _make(out, "flatten", (x,), _bw)


def concat(tensors, axis=-1):
    """Join tensors along one axis; all other dims must agree."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValidationError("concat needs at least one tensor")
    datas = [t.data for t in tensors]
    ref = list(datas[0].shape)
    ax = axis % datas[0].ndim
    for d in datas[1:]:
        other = list(d.shape)
        if len(other) != len(ref) or any(
            i != ax and other[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeError(f"concat: incompatible shapes {datas[0].shape} vs {d.shape}")
    out = np.concatenate(datas, axis=ax)
    sizes = [d.shape[ax] for d in datas]

    def _bw(g):
        start = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(start, start + size)
                t._accum(g[tuple(sl)])
            start += size

    return _make(out, "concat", tuple(tensors), _bw)


def tensor_sum(x):
    """Sum all elements to a scalar tensor."""
    x = _as_tensor(x)
    out = x.data.sum()

    def _bw(g):
        if x.requires_grad:
            x._accum(np.broadcast_to(g, x.data.shape))

    return _make(out, "sum", (x,), _bw)
