from __future__ import annotations

import numpy as np
import pytest

import tensor_core as tc
from errors import NonFiniteGradientError, NonScalarLossError, ShapeError, UnknownPrimitiveError
from gradcheck import run_grad_checks, summarize


class TestRecording:
    def test_square_gradient(self):
        x = tc.parameter(np.array(3.0))
        with tc.Tape():
            y = x * x
            grads = tc.backward(y)
        assert grads.of(x) == pytest.approx(6.0)

    def test_disconnected_leaf_gets_zero(self):
        a = tc.parameter(np.ones((2, 2)))
        b = tc.parameter(np.ones((2, 2)))
        with tc.Tape():
            _ = b * 2.0
            loss = tc.mean(a * a)
            grads = tc.backward(loss)
        np.testing.assert_allclose(grads.of(b), np.zeros((2, 2)))
        np.testing.assert_allclose(grads.of(a), np.full((2, 2), 0.5))

    def test_backward_clears_tape(self):
        x = tc.parameter(np.ones(3))
        with tc.Tape() as tape:
            loss = tc.mean(x * x)
            assert len(tape) > 0
            tc.backward(loss)
            assert len(tape) == 0

    def test_no_grad_records_nothing(self):
        x = tc.parameter(np.ones(3))
        with tc.Tape() as tape, tc.no_grad():
            y = x * x
        assert len(tape) == 0
        assert not y.requires_grad

    def test_broadcast_add_sums_back(self):
        a = tc.parameter(np.zeros((4, 3)))
        b = tc.parameter(np.zeros(3))
        with tc.Tape():
            grads = tc.backward(tc.mean(a + b))
        np.testing.assert_allclose(grads.of(b), np.full(3, 4 / 12))

    def test_precision_switches_dtype(self):
        with tc.precision(np.float64):
            assert tc.parameter(np.ones(2)).dtype == np.float64
        assert tc.parameter(np.ones(2)).dtype == np.float32


class TestErrors:
    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tc.matmul(tc.constant(np.ones((2, 3))), tc.constant(np.ones((2, 3))))

    def test_unknown_primitive(self):
        with pytest.raises(UnknownPrimitiveError, match="frobnicate"):
            tc.apply_primitive("frobnicate", [tc.constant(np.ones(2))])

    def test_non_scalar_loss(self):
        x = tc.parameter(np.ones(3))
        with tc.Tape():
            with pytest.raises(NonScalarLossError):
                tc.backward(x * x)

    def test_empty_slice(self):
        with pytest.raises(ShapeError):
            tc.slice_(tc.constant(np.ones((2, 3))), 2, 2, axis=1)

    def test_even_conv_kernel(self):
        with pytest.raises(ShapeError):
            tc.conv1d(tc.constant(np.ones((5, 2))), tc.constant(np.ones((2, 2, 3))))


class TestAdam:
    def test_frozen_names_untouched(self):
        w = tc.parameter(np.ones(3))
        v = tc.parameter(np.ones(3))
        params = {"w": w, "v": v}
        with tc.Tape():
            grads = tc.backward(tc.mean(w * w) + tc.mean(v * v))
        state = tc.AdamState(lr=0.1)
        tc.adam_step(params, grads, state, frozen={"v"})
        assert np.all(w.values < 1.0)
        np.testing.assert_array_equal(v.values, np.ones(3))
        assert "v" not in state.m

    def test_first_step_moves_by_lr(self):
        w = tc.parameter(np.array([2.0, -2.0]))
        with tc.Tape():
            grads = tc.backward(tc.mean(w * w))
        tc.adam_step({"w": w}, grads, tc.AdamState(lr=0.01))
        np.testing.assert_allclose(w.values, [1.99, -1.99], atol=1e-6)

    def test_non_finite_gradient_rejects_step(self):
        w = tc.parameter(np.ones(2))
        grads = tc.GradientMap({w.node_id: np.array([np.nan, 1.0])})
        state = tc.AdamState()
        with pytest.raises(NonFiniteGradientError) as exc:
            tc.adam_step({"w": w}, grads, state)
        assert exc.value.param_name == "w"
        assert state.step == 0
        np.testing.assert_array_equal(w.values, np.ones(2))


class TestGradCheck:
    def test_every_primitive_matches_finite_differences(self):
        results = run_grad_checks(seeds=(0, 1), shapes_per_seed=3, include_models=False)
        worst = summarize(results)
        assert set(worst) == set(tc.primitive_kinds())
        bad = {k: v for k, v in worst.items() if v >= 1e-5}
        assert not bad

    def test_model_losses_match_finite_differences(self):
        results = run_grad_checks(seeds=(0,), shapes_per_seed=0, include_models=True, model_tolerance=1e-3)
        assert len(results) == 5
        assert all(r.passed for r in results), [(r.name, r.max_rel_error) for r in results if not r.passed]

    def test_two_layer_gelu_net_at_32_bit(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            x, w1, w2 = (tc.parameter(rng.normal(size=(4, 4))) for _ in range(3))
            assert x.dtype == np.float32

            def net(a, b, c):
                return tc.mean(tc.gelu(tc.matmul(tc.gelu(tc.matmul(a, b)), c)))

            assert tc.grad_check(net, [x, w1, w2], eps=1e-3) < 1e-3
            assert x.dtype == np.float32

    def test_every_primitive_at_32_bit(self):
        results = run_grad_checks(seeds=range(5), shapes_per_seed=2, tolerance=1e-3, include_models=False,
                                  dtype=np.float32)
        assert all(r.passed for r in results), [(r.name, r.max_rel_error) for r in results if not r.passed]


class TestPrimitiveValues:
    def test_softmax_of_zeros_is_uniform(self):
        np.testing.assert_allclose(tc.softmax(tc.constant(np.zeros((1, 3)))).values, np.full((1, 3), 1 / 3), rtol=1e-6)

    def test_matmul_identity(self):
        a = np.arange(12.0).reshape(3, 4)
        np.testing.assert_allclose(tc.matmul(tc.constant(a), tc.constant(np.eye(4))).values, a)

    def test_l1_distance_to_self_is_zero(self):
        x = tc.constant(np.random.default_rng(0).normal(size=(5, 2)))
        assert tc.l1_distance(x, x).item() == 0.0

    def test_instance_norm_channel_statistics(self):
        rng = np.random.default_rng(1)
        x = rng.normal(loc=[3.0, -2.0, 0.5], scale=[3.0, 0.5, 2.0], size=(64, 3))
        with tc.precision(np.float64):
            y = tc.instance_norm(tc.constant(x)).values
        np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(y.std(axis=0), 1.0, atol=1e-4)

    def test_repeated_backward_is_bit_identical(self):
        rng = np.random.default_rng(2)
        x_vals, w_vals = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

        def run():
            x, w = tc.parameter(x_vals), tc.parameter(w_vals)
            with tc.Tape():
                grads = tc.backward(tc.mean(tc.gelu(tc.matmul(x, w))))
            return grads.of(x), grads.of(w)

        first, second = run(), run()
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)


class TestAdamRecurrence:
    def test_unit_gradient_moves_by_lr_each_step(self):
        w = tc.parameter(np.array([1.0]))
        state = tc.AdamState(lr=0.01)
        for expected in (0.99, 0.98):
            tc.adam_step({"w": w}, tc.GradientMap({w.node_id: np.ones(1)}), state)
            np.testing.assert_allclose(w.values, [expected], atol=1e-6)
        assert state.step == 2

    def test_zero_gradient_leaves_parameter(self):
        w = tc.parameter(np.array([0.5, -0.5]))
        state = tc.AdamState(lr=0.1)
        tc.adam_step({"w": w}, tc.GradientMap({w.node_id: np.zeros(2)}), state)
        np.testing.assert_array_equal(w.values, np.array([0.5, -0.5], dtype=np.float32))
        np.testing.assert_array_equal(state.m["w"], np.zeros(2))
        assert state.step == 1
