"""Dense layers, loss, parameter store and the SGD update."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accordion.errors import ConfigError, DimensionError, InputError
from accordion.nncore import (
    ParamSet,
    dense_backward,
    dense_forward,
    grad_check,
    make_rng,
    relative_error,
    relu,
    relu_backward,
    sgd_step,
    softmax_xent,
)


def loop_matmul(w, b, x):
    """Triple loop, float64 accumulation."""
    out = np.zeros((x.shape[0], w.shape[0]))
    for i in range(x.shape[0]):
        for j in range(w.shape[0]):
            acc = float(b[j])
            for k in range(w.shape[1]):
                acc += float(w[j, k]) * float(x[i, k])
            out[i, j] = acc
    return out


class TestDense:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((5, 7))
        b = rng.standard_normal(5)
        x = rng.standard_normal((4, 7))
        np.testing.assert_allclose(dense_forward(w, b, x), loop_matmul(w, b, x), rtol=1e-12)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(5, 7\)"):
            dense_forward(np.zeros((5, 7)), np.zeros(5), np.zeros((2, 6)))

    def test_backward_by_finite_differences(self):
        rng = np.random.default_rng(2)
        w = rng.standard_normal((3, 4))
        b = rng.standard_normal(3)
        x = rng.standard_normal((5, 4))
        c = rng.standard_normal((5, 3))  # loss = sum(c * y)
        gw, gb, gx = dense_backward(w, x, c)
        eps = 1e-6

        def loss(w_, b_, x_):
            return float(np.sum(c * dense_forward(w_, b_, x_)))

        for arr, grad in ((w, gw), (b, gb), (x, gx)):
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                up = loss(w, b, x)
                arr[idx] = old - eps
                down = loss(w, b, x)
                arr[idx] = old
                assert (up - down) / (2 * eps) == pytest.approx(grad[idx], rel=1e-6, abs=1e-8)

    def test_relu_backward_masks(self):
        x = np.array([[-1.0, 0.0, 2.0]])
        assert relu(x).tolist() == [[0.0, 0.0, 2.0]]
        assert relu_backward(x, np.ones_like(x)).tolist() == [[0.0, 0.0, 1.0]]


class TestSoftmaxXent:
    def test_uniform_logits(self):
        loss, grad = softmax_xent(np.zeros((2, 4)), np.array([0, 3]))
        assert loss == pytest.approx(np.log(4))
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)

    def test_gradient_by_finite_differences(self):
        rng = np.random.default_rng(3)
        z = rng.standard_normal((6, 5))
        y = rng.integers(0, 5, 6)
        _, g = softmax_xent(z, y)
        eps = 1e-6
        for idx in np.ndindex(z.shape):
            zp, zm = z.copy(), z.copy()
            zp[idx] += eps
            zm[idx] -= eps
            num = (softmax_xent(zp, y)[0] - softmax_xent(zm, y)[0]) / (2 * eps)
            assert num == pytest.approx(g[idx], abs=1e-7)

    def test_large_logits_stay_finite(self):
        loss, grad = softmax_xent(np.array([[1e4, -1e4, 0.0]]), np.array([1]))
        assert np.isfinite(loss) and np.all(np.isfinite(grad))

    def test_label_out_of_range(self):
        with pytest.raises(InputError):
            softmax_xent(np.zeros((1, 3)), np.array([3]))


def single(value, grad):
    ps = ParamSet()
    p = ps.add("w", np.array(value, dtype=np.float64))
    p.grad[...] = grad
    return ps


class TestSgd:
    def test_plain_step(self):
        ps = single([1.0, 2.0], [0.5, -1.0])
        sgd_step(ps, 0.1)
        np.testing.assert_allclose(ps.value("w"), [0.95, 2.1])

    def test_momentum_unrolled(self):
        # constant gradient g: steps are g, (1+m)g, (1+m+m^2)g
        m, lr, g = 0.9, 0.1, 1.0
        ps = single([0.0], [g])
        for _ in range(3):
            sgd_step(ps, lr, momentum=m)
        expected = -lr * g * (1 + (1 + m) + (1 + m + m * m))
        assert ps.value("w")[0] == pytest.approx(expected)

    def test_weight_decay_adds_l2_term(self):
        ps = single([2.0], [0.0])
        sgd_step(ps, 0.5, weight_decay=0.1)
        assert ps.value("w")[0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)

    def test_zero_lr_is_a_noop(self):
        ps = single([1.5], [3.0])
        sgd_step(ps, 0.0, momentum=0.9)
        assert ps.value("w")[0] == 1.5

    def test_negative_lr_rejected(self):
        with pytest.raises(ConfigError):
            sgd_step(single([1.0], [1.0]), -0.1)

    def test_frozen_and_unlisted_entries_untouched(self):
        ps = ParamSet()
        ps.add("a", np.ones(2)).grad[...] = 1.0
        ps.add("b", np.ones(2), trainable=False).grad[...] = 1.0
        ps.add("c", np.ones(2)).grad[...] = 1.0
        sgd_step(ps, 1.0, keys=["a", "b"])
        assert ps.value("a").tolist() == [0.0, 0.0]
        assert ps.value("b").tolist() == [1.0, 1.0]
        assert ps.value("c").tolist() == [1.0, 1.0]
        assert ps["c"].velocity is None

    @given(st.floats(0, 1), st.floats(0, 0.1), st.integers(1, 6))
    @settings(max_examples=40, deadline=None)
    def test_matches_reference_recurrence(self, m, wd, steps):
        rng = np.random.default_rng(steps)
        grads = rng.standard_normal((steps, 3))
        ps = single(np.ones(3), 0.0)
        w, v = np.ones(3), None
        for g in grads:
            ps["w"].grad[...] = g
            sgd_step(ps, 0.05, momentum=m, weight_decay=wd)
            d = g + wd * w
            v = d.copy() if v is None or m == 0 else m * v + d
            w = w - 0.05 * (v if m else d)
        np.testing.assert_allclose(ps.value("w"), w, rtol=1e-12, atol=1e-12)


class TestParamSet:
    def test_duplicate_rejected(self):
        ps = ParamSet()
        ps.add("x", np.zeros(1))
        with pytest.raises(ConfigError):
            ps.add("x", np.zeros(1))

    def test_copy_is_deep_and_digest_tracks_values(self):
        ps = single([1.0, 2.0], 0.0)
        cp = ps.copy()
        assert cp.digest() == ps.digest()
        cp.value("w")[0] = 5.0
        assert ps.value("w")[0] == 1.0
        assert cp.digest() != ps.digest()


class TestRng:
    def test_streams_independent_and_reproducible(self):
        a = make_rng(0, "shuffle", 1).random(4)
        assert np.array_equal(a, make_rng(0, "shuffle", 1).random(4))
        assert not np.array_equal(a, make_rng(0, "shuffle", 2).random(4))
        assert not np.array_equal(a, make_rng(1, "shuffle", 1).random(4))


class TestGradCheck:
    def test_quadratic_is_exact(self):
        ps = single([1.0, -2.0, 3.0], 0.0)

        def loss_fn(params, probe):
            w = params.value("w")
            params["w"].grad[...] = 2 * w * probe
            return float(np.sum(probe * w * w))

        assert grad_check(loss_fn, ps, np.array([1.0, 2.0, 0.5])) < 1e-8

    def test_detects_wrong_gradient(self):
        ps = single([1.0, -2.0], 0.0)

        def loss_fn(params, probe):
            w = params.value("w")
            params["w"].grad[...] = w  # should be 2w
            return float(np.sum(w * w))

        assert grad_check(loss_fn, ps, None) > 0.3

    def test_relative_error_floor(self):
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)
