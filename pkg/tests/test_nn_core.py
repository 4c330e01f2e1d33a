import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funnet.errors import DimensionError
from funnet.nn import functional as F
from funnet.nn.module import BatchNorm2d, Conv2d
from funnet.nn.optim import Optimizer, OptimizerState, lr_schedule, step_schedule
from funnet.nn.tensor import Parameter, Tensor, no_grad

from oracles import direct_conv2d, gradcheck

GRAD_TOL = 1e-5


def rng(seed=0):
    return np.random.default_rng(seed)


class TestConv2d:
    def test_box_sum(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = F.conv2d(x, w, padding=1).data[0, 0]
        assert out[1, 1] == 9
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4

    def test_pointwise_identity(self):
        x = rng().normal(size=(2, 1, 5, 5))
        out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data
        np.testing.assert_array_equal(out, x)

    @pytest.mark.parametrize(
        "cin,cout,k,s,p,groups",
        [(3, 4, 3, 1, 1, 1), (3, 4, 3, 2, 1, 1), (4, 4, 3, 2, 1, 4), (4, 4, 5, 1, 2, 4),
         (4, 6, 1, 1, 0, 1), (4, 6, 1, 2, 0, 1), (4, 6, 3, 1, 0, 2), (1, 5, 8, 8, 0, 1)],
    )
    def test_matches_loop_oracle(self, cin, cout, k, s, p, groups):
        r = rng(1)
        size = 16 if k == 8 else 7
        x = r.normal(size=(2, cin, size, size))
        w = r.normal(size=(cout, cin // groups, k, k))
        got = F.conv2d(Tensor(x), Tensor(w), stride=s, padding=p, groups=groups).data
        np.testing.assert_allclose(got, direct_conv2d(x, w, s, p, groups), rtol=1e-10, atol=1e-10)

    def test_depthwise_equals_independent_channels(self):
        r = rng(2)
        x = r.normal(size=(2, 5, 6, 6))
        w = r.normal(size=(5, 1, 3, 3))
        dw = F.conv2d(Tensor(x), Tensor(w), stride=2, padding=1, groups=5).data
        for c in range(5):
            single = F.conv2d(Tensor(x[:, c : c + 1]), Tensor(w[c : c + 1]), stride=2, padding=1).data
            np.testing.assert_allclose(dw[:, c : c + 1], single, rtol=1e-12, atol=1e-12)

    def test_output_size_law(self):
        x = Tensor(np.zeros((1, 2, 28, 28)))
        for k, s, p in [(3, 1, 1), (3, 2, 1), (5, 2, 2), (1, 2, 0)]:
            out = F.conv2d(x, Tensor(np.zeros((2, 2, k, k))), stride=s, padding=p)
            assert out.shape[2] == (28 + 2 * p - k) // s + 1

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            F.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 1, 1))))
        with pytest.raises(DimensionError):
            F.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((3, 1, 3, 3))), groups=2)

    @pytest.mark.parametrize(
        "cin,cout,k,s,p,groups",
        [(3, 4, 3, 1, 1, 1), (3, 4, 3, 2, 1, 1), (4, 4, 3, 2, 1, 4), (4, 4, 5, 1, 2, 4),
         (4, 6, 1, 1, 0, 1), (4, 6, 1, 2, 0, 1), (4, 6, 3, 1, 1, 2)],
    )
    def test_gradcheck(self, cin, cout, k, s, p, groups):
        r = rng(3)
        x = r.normal(size=(2, cin, 6, 6))
        w = r.normal(size=(cout, cin // groups, k, k))
        b = r.normal(size=cout)
        err = gradcheck(
            lambda x, w, b: F.conv2d(x, w, b, stride=s, padding=p, groups=groups), [x, w, b]
        )
        assert err < GRAD_TOL


class TestBatchNorm:
    def test_eval_identity(self):
        x = rng().normal(size=(2, 3, 4, 4))
        out = F.batchnorm2d(
            Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3),
            training=False, eps=1e-3,
        ).data
        np.testing.assert_allclose(out, x / math.sqrt(1 + 1e-3), rtol=1e-12)

    def test_train_standardizes(self):
        x = rng(1).normal(3.0, 5.0, size=(4, 3, 5, 5))
        out = F.batchnorm2d(
            Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3),
            training=True, eps=0.0,
        ).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-4)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)

    def test_running_stats_update(self):
        bn = BatchNorm2d(2, momentum=0.5).astype(np.float64)
        x = rng(2).normal(2.0, 1.0, size=(3, 2, 4, 4))
        bn(Tensor(x))
        expect = 0.5 * x.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(bn._buffers["running_mean"], expect)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            F.batchnorm2d(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                          np.zeros(2), np.ones(2), training=True)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradcheck(self, training):
        r = rng(4)
        x = r.normal(size=(3, 4, 5, 5))
        gamma, beta = r.normal(size=4), r.normal(size=4)
        rm, rv = r.normal(size=4), r.uniform(0.5, 2.0, size=4)
        err = gradcheck(
            lambda x, g, b: F.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training), [x, gamma, beta]
        )
        assert err < GRAD_TOL


class TestActivations:
    def test_values(self):
        assert F.swish(Tensor(np.array([0.0]))).data[0] == 0.0
        np.testing.assert_array_equal(F.relu(Tensor(np.array([-1.0, 2.0]))).data, [0.0, 2.0])
        np.testing.assert_allclose(F.sigmoid(Tensor(np.array([0.0]))).data, [0.5])

    def test_sigmoid_no_overflow(self):
        out = F.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    @pytest.mark.parametrize("op", [F.swish, F.sigmoid, F.relu])
    def test_gradcheck(self, op):
        x = rng(5).normal(size=(2, 3, 4, 4))
        x[np.abs(x) < 0.05] = 0.3  # keep away from the relu kink
        assert gradcheck(op, [x]) < GRAD_TOL


class TestSqueezeExcite:
    def _weights(self, c=6, r=2, bias=0.0):
        g = rng(6)
        return (g.normal(size=(r, c, 1, 1)), g.normal(size=r), np.zeros((c, r, 1, 1)),
                np.full(c, bias))

    def test_gate_open(self):
        x = rng(7).normal(size=(2, 6, 3, 3))
        wr, br, we, be = self._weights(bias=60.0)
        out = F.squeeze_excite(*(Tensor(a) for a in (x, wr, br, we, be))).data
        np.testing.assert_allclose(out, x, rtol=1e-12)

    def test_gate_closed(self):
        x = rng(7).normal(size=(2, 6, 3, 3))
        wr, br, we, be = self._weights(bias=-60.0)
        out = F.squeeze_excite(*(Tensor(a) for a in (x, wr, br, we, be))).data
        assert np.abs(out).max() < 1e-20

    def test_width_mismatch(self):
        wr, br, we, be = self._weights()
        with pytest.raises(DimensionError):
            F.squeeze_excite(Tensor(np.zeros((1, 5, 2, 2))), *(Tensor(a) for a in (wr, br, we, be)))

    def test_gradcheck(self):
        g = rng(8)
        arrays = [g.normal(size=(2, 6, 3, 3)), g.normal(size=(2, 6, 1, 1)), g.normal(size=2),
                  g.normal(size=(6, 2, 1, 1)), g.normal(size=6)]
        assert gradcheck(F.squeeze_excite, arrays) < GRAD_TOL


class TestStochasticDepth:
    def test_survive_one(self):
        x, r = rng().normal(size=(4, 2, 2, 2)), rng(1).normal(size=(4, 2, 2, 2))
        out = F.stochastic_depth(Tensor(x), Tensor(r), 1.0, training=True, rng=rng(3)).data
        np.testing.assert_array_equal(out, x + r)

    def test_eval_independent_of_rng(self):
        x, r = rng().normal(size=(4, 2, 2, 2)), rng(1).normal(size=(4, 2, 2, 2))
        a = F.stochastic_depth(Tensor(x), Tensor(r), 0.8, training=False, rng=rng(1)).data
        b = F.stochastic_depth(Tensor(x), Tensor(r), 0.8, training=False, rng=rng(2)).data
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, x + r)

    def test_monte_carlo_keep_rate(self):
        n = 10_000
        x = np.zeros((n, 1, 1, 1))
        out = F.stochastic_depth(Tensor(x), Tensor(np.ones((n, 1, 1, 1))), 0.8, True, rng(9)).data
        kept = out.reshape(-1) != 0
        assert abs(kept.mean() - 0.8) <= 0.02
        np.testing.assert_allclose(out.reshape(-1)[kept], 1 / 0.8)

    def test_gradcheck_fixed_mask(self):
        g = rng(10)
        x, r = g.normal(size=(6, 2, 3, 3)), g.normal(size=(6, 2, 3, 3))
        err = gradcheck(lambda a, b: F.stochastic_depth(a, b, 0.5, True, np.random.default_rng(4)), [x, r])
        assert err < GRAD_TOL

    def test_dims_mismatch(self):
        with pytest.raises(DimensionError):
            F.stochastic_depth(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 3))), 0.8, False)


class TestHead:
    def test_pool_constant(self):
        x = np.full((2, 3, 4, 4), 2.5)
        np.testing.assert_array_equal(F.global_avg_pool(Tensor(x)).data, np.full((2, 3), 2.5))

    @pytest.mark.parametrize("k", [2, 4, 10, 1000])
    def test_uniform_logits_loss(self, k):
        loss = F.softmax_cross_entropy(Tensor(np.zeros((3, k))), [0, 1, k - 1]).item()
        assert loss == pytest.approx(math.log(k), rel=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_loss_nonnegative(self, seed):
        g = np.random.default_rng(seed)
        logits = g.normal(0, 30, size=(4, 5))
        assert F.softmax_cross_entropy(Tensor(logits), g.integers(0, 5, size=4)).item() >= 0

    def test_large_logits_stable(self):
        loss = F.softmax_cross_entropy(Tensor(np.array([[1e4, 0.0]])), [1]).item()
        assert loss == pytest.approx(1e4)

    def test_gradchecks(self):
        g = rng(11)
        assert gradcheck(F.global_avg_pool, [g.normal(size=(2, 3, 4, 4))]) < GRAD_TOL
        assert gradcheck(F.linear, [g.normal(size=(3, 5)), g.normal(size=(4, 5)), g.normal(size=4)]) < GRAD_TOL
        labels = np.array([0, 3, 2])
        assert gradcheck(lambda z: F.softmax_cross_entropy(z, labels), [g.normal(size=(3, 4))]) < GRAD_TOL

    def test_dimension_errors(self):
        with pytest.raises(DimensionError):
            F.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        with pytest.raises(DimensionError):
            F.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


class TestEngine:
    def test_no_grad_skips_graph(self):
        w = Parameter(np.ones((2, 2)))
        with no_grad():
            out = F.linear(Tensor(np.ones((1, 2))), w)
        assert out._backward is None and not out.requires_grad

    def test_shared_input_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        from funnet.nn.tensor import mul, total

        total(mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, [4.0])

    def test_forward_determinism(self):
        r = rng(12)
        conv = Conv2d(4, 8, 3, np.random.default_rng(0))
        x = r.normal(size=(2, 4, 6, 6)).astype(np.float32)
        a = conv(Tensor(x)).data
        b = Conv2d(4, 8, 3, np.random.default_rng(0))(Tensor(x)).data
        np.testing.assert_array_equal(a, b)


class TestOptimizer:
    def _param(self, value, grad):
        p = Parameter(np.array([value], dtype=np.float64))
        p.grad = None if grad is None else np.array([grad], dtype=np.float64)
        return p

    @pytest.mark.parametrize("kind", ["sgd", "rmsprop"])
    def test_zero_gradient_no_change(self, kind):
        p = self._param(1.5, 0.0)
        Optimizer([p], OptimizerState(kind, lr=0.1)).step()
        assert p.data[0] == 1.5

    def test_sgd_step(self):
        p = self._param(1.0, 1.0)
        Optimizer([p], OptimizerState("sgd", lr=0.1, momentum=0.0)).step()
        assert p.data[0] == pytest.approx(0.9)

    def test_rmsprop_single_step(self):
        p = self._param(0.0, 2.0)
        state = OptimizerState("rmsprop", lr=0.048, momentum=0.0, decay=0.9, eps=1e-8)
        Optimizer([p], state).step()
        assert state.buffers[0]["square_avg"][0] == pytest.approx(0.4)
        assert p.data[0] == pytest.approx(-0.048 * 2 / math.sqrt(0.4 + 1e-8), rel=1e-12)

    def test_weight_decay_added_to_gradient(self):
        p = self._param(2.0, 0.0)
        Optimizer([p], OptimizerState("sgd", lr=0.5, momentum=0.0, weight_decay=0.1)).step()
        assert p.data[0] == pytest.approx(2.0 - 0.5 * 0.2)

    def test_frozen_parameter_untouched(self):
        p = self._param(1.0, 1.0)
        p.set_trainable(False)
        Optimizer([p], OptimizerState("sgd", lr=0.1)).step()
        assert p.data[0] == 1.0

    def test_one_accumulator_set_per_parameter(self):
        ps = [Parameter(np.ones((2, 3))), Parameter(np.ones(4))]
        for q in ps:
            q.grad = np.ones_like(q.data)
        opt = Optimizer(ps, OptimizerState("rmsprop", lr=0.01))
        opt.step()
        for q, buf in zip(ps, opt.state.buffers):
            assert buf["square_avg"].shape == q.shape == buf["momentum"].shape


class TestSchedule:
    def test_epoch_zero(self):
        assert lr_schedule(0) == 0.048

    def test_first_boundary(self):
        assert lr_schedule(2.4) == pytest.approx(0.04656)
        assert lr_schedule(Fraction(239, 100)) == 0.048

    def test_epoch_24(self):
        assert lr_schedule(24) == 0.048 * 0.97**10

    @pytest.mark.parametrize("e", range(0, 60))
    def test_integer_epochs_exact(self, e):
        assert lr_schedule(e) == 0.048 * 0.97 ** math.floor(Fraction(e) / Fraction(12, 5))

    def test_resfun_steps(self):
        assert [step_schedule(e) for e in (0, 89, 90, 109, 110, 129)] == [0.1, 0.1, 0.01, 0.01, 0.001, 0.001]
