"""Finite-difference verification harness: tiers, ops, detectability."""

import numpy as np
import pytest

from fabricnet import gradcheck as G
from fabricnet import tensor as T
from fabricnet.errors import ValidationError


def test_tier_normalizes_aliases():
    for alias in ("64", 64, "float64", np.float64):
        assert G.tier(alias)["dtype"] == np.float64
    for alias in ("32", 32, "float32", np.float32):
        assert G.tier(alias)["dtype"] == np.float32
    assert G.tier("64")["tol"] == 1e-6
    assert G.tier("32")["tol"] == 1e-3


def test_tier_rejects_unknown():
    with pytest.raises(ValidationError):
        G.tier("16")


@pytest.mark.parametrize("name", ["conv2d_strided", "batchnorm_train", "maxpool2d", "bce_loss"])
@pytest.mark.parametrize("dtype", ["64", "32"])
def test_selected_ops_pass_each_tier(name, dtype):
    report = G.check_op(name, dtype=dtype)
    assert report["ok"], report
    assert report["max_rel_err"] <= report["tol"]


def test_check_op_unknown_name():
    with pytest.raises(ValidationError):
        G.check_op("not_an_op")


def test_spread_values_avoid_kinks():
    vals = G.spread_values(np.random.default_rng(0), 64)
    gaps = np.diff(np.sort(vals.ravel()))
    assert gaps.min() > 2 * 1e-5  # larger than twice the 64-bit step


def test_fd_check_catches_broken_backward():
    def broken_factory(rng, dtype):
        x = T.Tensor(G.spread_values(rng, 8).astype(dtype), requires_grad=True)

        def fn():
            out = T.activation(x, "sigmoid")
            # sabotage: scale the analytic gradient flowing into x
            loss = T.tensor_sum(out)
            real = loss._backward

            def lying(upstream):
                real(upstream * 3.0)

            loss._backward = lying
            return loss

        return fn, [x]

    report = G.fd_check(broken_factory, dtype="64")
    assert not report["ok"]
    assert report["max_rel_err"] > report["tol"]


def test_fd_check_reports_missing_gradient():
    def unreached_factory(rng, dtype):
        x = T.Tensor(G.spread_values(rng, 4).astype(dtype), requires_grad=True)
        y = T.Tensor(G.spread_values(rng, 4).astype(dtype), requires_grad=True)
        return (lambda: T.tensor_sum(T.activation(x, "relu"))), [x, y]

    report = G.fd_check(unreached_factory, dtype="64")
    assert not report["ok"]


def test_model_check_passes_float64():
    report = G.check_model(dtype="64")
    assert report["ok"], report


def test_run_all_covers_registered_ops():
    reports = G.run_all(dtype="64")
    names = {r["name"] for r in reports}
    assert "model_end_to_end" in names
    assert len(reports) >= 20
    assert all(r["ok"] for r in reports), [r for r in reports if not r["ok"]]
