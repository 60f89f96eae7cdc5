"""Finite-difference verification of every backward rule.

Each registered check builds a small problem in the requested dtype and
a re-runnable scalar loss; central differences at sampled coordinates
are compared against the analytic gradients. Two precision tiers are
supported: float64 (eps 1e-5, tolerance 1e-6) and float32 (eps 1e-3,
tolerance 1e-3). Inputs around nonsmooth points (relu kinks, pooling
ties) are evenly spaced shuffled grids whose gaps exceed the
finite-difference reach, and the numeric denominator uses the realized
(post-rounding) parameter step so storage rounding cancels out.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .layers import BatchNorm, walk
from .model import assemble_fabricnet, init_params
from .training import bce_loss

TIERS = {
    "64": {"dtype": np.float64, "eps": 1e-5, "tol": 1e-6, "model_eps": 1e-6},
    "32": {"dtype": np.float32, "eps": 1e-3, "tol": 1e-3, "model_eps": 1e-3},
}


def tier(dtype):
    """Normalize a dtype spec ("64", 64, np.float32, ...) to a tier dict."""
    try:
        key = np.dtype(dtype).name
    except TypeError:
        key = str(dtype)
    if key in ("float64", "<f8", "64"):
        key = "64"
    elif key in ("float32", "<f4", "32"):
        key = "32"
    if key not in TIERS:
        raise ValidationError(f"dtype must be 32 or 64, got {dtype!r}")
    return dict(TIERS[key], name=key)


def spread_values(rng, shape, lo=-1.0, hi=1.0):
    """Shuffled evenly spaced values: all distinct, none at the midpoint.

    An even count over a symmetric range keeps every value at least
    half a grid step away from zero.
    """
    n = int(np.prod(shape))
    vals = np.linspace(lo, hi, n, dtype=np.float64)
    return rng.permutation(vals).reshape(shape)


def _param(rng, shape, dtype, scale=0.5):
    return T.Tensor(rng.normal(0.0, scale, size=shape).astype(dtype), requires_grad=True)


def _spread(rng, shape, dtype):
    return T.Tensor(spread_values(rng, shape).astype(dtype), requires_grad=True)


def _project(out, dtype):
    """Reduce any tensor to a scalar through fixed dense weights scaled
    to keep the loss O(1), so every output element influences the loss
    with a distinct sign and float32 sums stay accurate."""
    flat = T.flatten(out)
    d = flat.data.shape[-1]
    w = np.random.default_rng(99).normal(0.0, 1.0, size=(d, 1)) / np.sqrt(d)
    return T.tensor_sum(T.dense(flat, T.Tensor(w.astype(dtype))))


def fd_check(factory, dtype="64", seed=0, eps=None, tol=None, max_coords=24):
    """Compare analytic and numeric gradients for one registered problem.

    ``factory(rng, dtype)`` returns (fn, tensors): a nullary loss
    builder and the tensors whose gradients it should verify. Central
    differences divide by the realized step read back from storage.
    Returns a report dict with the worst relative error.
    """
    cfg = tier(dtype)
    eps = cfg["eps"] if eps is None else eps
    tol = cfg["tol"] if tol is None else tol
    rng = np.random.default_rng(seed)
    fn, wrt = factory(rng, cfg["dtype"])
    for t in wrt:
        t.grad = None
    T.backward(fn())
    coord_rng = np.random.default_rng(seed + 1)
    worst = 0.0
    checked = 0
    for t in wrt:
        if t.grad is None:
            worst = np.inf
            continue
        size = t.data.size
        if size <= max_coords:
            flat_coords = np.arange(size)
        else:
            flat_coords = coord_rng.choice(size, size=max_coords, replace=False)
        for flat in flat_coords:
            idx = np.unravel_index(flat, t.data.shape)
            orig = t.data[idx]
            with T.no_grad():
                t.data[idx] = orig + eps
                hi = float(t.data[idx])
                lp = float(fn().data)
                t.data[idx] = orig - eps
                lo = float(t.data[idx])
                lm = float(fn().data)
            t.data[idx] = orig
            numeric = (lp - lm) / (hi - lo)
            analytic = float(t.grad[idx])
            rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, rel)
            checked += 1
    return {
        "max_rel_err": float(worst),
        "eps": eps,
        "tol": tol,
        "dtype": cfg["name"],
        "checked": checked,
        "ok": worst <= tol,
    }


# ---------------------------------------------------------------------------
# registered problems


def _check_conv2d(rng, dtype):
    x = _param(rng, (2, 6, 7, 3), dtype)
    k = _param(rng, (3, 3, 3, 4), dtype)
    b = _param(rng, (4,), dtype)
    return lambda: _project(T.conv2d(x, k, b, stride=1), dtype), [x, k, b]


def _check_conv2d_strided(rng, dtype):
    x = _param(rng, (2, 7, 6, 3), dtype)
    k = _param(rng, (3, 3, 3, 2), dtype)
    return lambda: _project(T.conv2d(x, k, stride=2), dtype), [x, k]


def _check_conv2d_pointproj(rng, dtype):
    x = _param(rng, (2, 6, 6, 3), dtype)
    k = _param(rng, (1, 1, 3, 5), dtype)
    return lambda: _project(T.conv2d(x, k, stride=2), dtype), [x, k]


def _check_depthwise(rng, dtype):
    x = _param(rng, (2, 5, 6, 4), dtype)
    k = _param(rng, (3, 3, 4), dtype)
    return lambda: _project(T.depthwise_conv2d(x, k, stride=1), dtype), [x, k]


def _check_depthwise_strided(rng, dtype):
    x = _param(rng, (2, 6, 5, 3), dtype)
    k = _param(rng, (3, 3, 3), dtype)
    return lambda: _project(T.depthwise_conv2d(x, k, stride=2), dtype), [x, k]


def _check_pointwise(rng, dtype):
    x = _param(rng, (2, 4, 5, 6), dtype)
    k = _param(rng, (6, 3), dtype)
    return lambda: _project(T.pointwise_conv2d(x, k), dtype), [x, k]


def _check_maxpool(rng, dtype):
    x = _spread(rng, (2, 7, 6, 3), dtype)
    return lambda: _project(T.maxpool2d(x, window=3, stride=2), dtype), [x]


def _check_maxpool_stride1(rng, dtype):
    x = _spread(rng, (2, 5, 5, 2), dtype)
    return lambda: _project(T.maxpool2d(x, window=3, stride=1), dtype), [x]


def _check_global_avg_pool(rng, dtype):
    x = _param(rng, (2, 5, 4, 3), dtype)
    return lambda: _project(T.global_avg_pool(x), dtype), [x]


def _check_dense(rng, dtype):
    x = _param(rng, (3, 7), dtype)
    w = _param(rng, (7, 4), dtype)
    b = _param(rng, (4,), dtype)
    return lambda: _project(T.dense(x, w, b), dtype), [x, w, b]


def _check_batchnorm_train(rng, dtype):
    x = _param(rng, (4, 3, 3, 5), dtype, scale=1.5)
    gamma = T.Tensor(rng.normal(1.0, 0.2, size=5).astype(dtype), requires_grad=True)
    beta = _param(rng, (5,), dtype)
    rm = np.zeros(5, dtype)
    rv = np.ones(5, dtype)

    def fn():
        out = T.batchnorm(x, gamma, beta, rm, rv, train=True, update_stats=False)
        return _project(out, dtype)

    return fn, [x, gamma, beta]


def _check_batchnorm_infer(rng, dtype):
    x = _param(rng, (3, 4, 4, 3), dtype, scale=1.5)
    gamma = T.Tensor(rng.normal(1.0, 0.2, size=3).astype(dtype), requires_grad=True)
    beta = _param(rng, (3,), dtype)
    rm = rng.normal(0.0, 0.3, size=3).astype(dtype)
    rv = rng.uniform(0.5, 1.5, size=3).astype(dtype)

    def fn():
        out = T.batchnorm(x, gamma, beta, rm, rv, train=False)
        return _project(out, dtype)

    return fn, [x, gamma, beta]


def _check_relu(rng, dtype):
    x = _spread(rng, (2, 6, 6, 3), dtype)
    return lambda: _project(T.activation(x, "relu"), dtype), [x]


def _check_sigmoid(rng, dtype):
    x = _param(rng, (3, 4), dtype, scale=2.0)
    return lambda: _project(T.activation(x, "sigmoid"), dtype), [x]


def _check_add(rng, dtype):
    a = _param(rng, (2, 5, 5, 3), dtype)
    b = _param(rng, (2, 5, 5, 3), dtype)
    return lambda: _project(T.add(a, b), dtype), [a, b]


def _check_concat(rng, dtype):
    parts = [_param(rng, (2, 3, 3, c), dtype) for c in (2, 1, 3)]
    return lambda: _project(T.concat(parts, axis=-1), dtype), parts


def _check_flatten(rng, dtype):
    x = _param(rng, (2, 3, 4, 2), dtype)
    return lambda: _project(T.flatten(x), dtype), [x]


def _check_sum(rng, dtype):
    x = _param(rng, (3, 3), dtype)
    return lambda: T.tensor_sum(x), [x]


def _check_bce(rng, dtype):
    scores = T.Tensor(rng.uniform(0.05, 0.95, size=(4, 5)).astype(dtype), requires_grad=True)
    targets = (rng.random((4, 5)) < 0.5).astype(np.uint8)
    return lambda: bce_loss(scores, targets), [scores]


def _check_unbatched_conv(rng, dtype):
    x = _param(rng, (6, 6, 3), dtype)
    k = _param(rng, (3, 3, 3, 2), dtype)
    return lambda: _project(T.conv2d(x, k, stride=2), dtype), [x, k]


def _check_residual_block(rng, dtype):
    x = _param(rng, (3, 6, 6, 2), dtype)
    k_body = _param(rng, (3, 3, 2, 4), dtype)
    k_proj = _param(rng, (1, 1, 2, 4), dtype)
    gamma = T.Tensor(rng.normal(1.0, 0.2, size=4).astype(dtype), requires_grad=True)
    beta = _param(rng, (4,), dtype)
    rm = np.zeros(4, dtype)
    rv = np.ones(4, dtype)

    def fn():
        body = T.conv2d(x, k_body, stride=2)
        body = T.batchnorm(body, gamma, beta, rm, rv, train=True, update_stats=False)
        body = T.activation(body, "relu")
        skip = T.conv2d(x, k_proj, stride=2)
        return _project(T.add(body, skip), dtype)

    return fn, [x, k_body, k_proj, gamma, beta]


OP_CHECKS = {
    "conv2d": _check_conv2d,
    "conv2d_strided": _check_conv2d_strided,
    "conv2d_projection": _check_conv2d_pointproj,
    "depthwise_conv2d": _check_depthwise,
    "depthwise_conv2d_strided": _check_depthwise_strided,
    "pointwise_conv2d": _check_pointwise,
    "maxpool2d": _check_maxpool,
    "maxpool2d_stride1": _check_maxpool_stride1,
    "global_avg_pool": _check_global_avg_pool,
    "dense": _check_dense,
    "batchnorm_train": _check_batchnorm_train,
    "batchnorm_infer": _check_batchnorm_infer,
    "relu": _check_relu,
    "sigmoid": _check_sigmoid,
    "add": _check_add,
    "concat": _check_concat,
    "flatten": _check_flatten,
    "sum": _check_sum,
    "bce_loss": _check_bce,
    "unbatched_conv2d": _check_unbatched_conv,
    "residual_block": _check_residual_block,
}


def check_op(name, dtype="64", seed=0, eps=None, tol=None, max_coords=24):
    if name not in OP_CHECKS:
        known = ", ".join(sorted(OP_CHECKS))
        raise ValidationError(f"no gradient check registered for {name!r}; known: {known}")
    report = fd_check(OP_CHECKS[name], dtype=dtype, seed=seed, eps=eps, tol=tol, max_coords=max_coords)
    report["name"] = name
    return report


def check_model(dtype="64", seed=0, eps=None, tol=None, coords_per_tensor=3):
    """End-to-end check: loss gradients of a tiny two-class network.

    Every parameter tensor is probed at a few sampled coordinates.
    Running statistics are frozen so repeated forwards are pure. The
    step is tighter than for single ops because the composed chain has
    larger higher-order terms.
    """
    cfg = tier(dtype)
    eps = cfg["model_eps"] if eps is None else eps
    tol = cfg["tol"] if tol is None else tol
    rng = np.random.default_rng(seed)
    net = assemble_fabricnet(2, middle_count=0, input_shape=(32, 32, 3), dtype=cfg["dtype"])
    init_params(net, seed)
    for layer in walk(net.nodes):
        if isinstance(layer, BatchNorm):
            layer.update_stats = False
    x = (0.5 + 0.5 * spread_values(rng, (2, 32, 32, 3))).astype(cfg["dtype"])
    y = np.array([[1, 0], [0, 1]], dtype=np.uint8)

    def fn():
        return bce_loss(net.forward(x, train=True), y)

    net.zero_grad()
    T.backward(fn())
    coord_rng = np.random.default_rng(seed + 1)
    worst = 0.0
    checked = 0
    for name, t in net.params.items():
        size = t.data.size
        k = min(coords_per_tensor, size)
        flats = coord_rng.choice(size, size=k, replace=False)
        for flat in flats:
            idx = np.unravel_index(flat, t.data.shape)
            orig = t.data[idx]
            with T.no_grad():
                t.data[idx] = orig + eps
                hi = float(t.data[idx])
                lp = float(fn().data)
                t.data[idx] = orig - eps
                lo = float(t.data[idx])
                lm = float(fn().data)
            t.data[idx] = orig
            numeric = (lp - lm) / (hi - lo)
            analytic = float(t.grad[idx])
            rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, rel)
            checked += 1
    return {
        "name": "model_end_to_end",
        "max_rel_err": float(worst),
        "eps": eps,
        "tol": tol,
        "dtype": cfg["name"],
        "checked": checked,
        "ok": worst <= tol,
    }


def run_all(dtype="64", seed=0):
    """Run every registered op check plus the end-to-end model check."""
    reports = [check_op(name, dtype=dtype, seed=seed) for name in OP_CHECKS]
    reports.append(check_model(dtype=dtype, seed=seed))
    return reports
