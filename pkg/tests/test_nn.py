"""Engine tests: parameter layout, forward/backward exactness, SGD, segments."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defkt.errors import ConfigurationError, NumericalError
from defkt.nn import (
    Batch,
    ConvLayer,
    DenseLayer,
    ModelSpec,
    MomentumState,
    backward,
    forward,
    init_params,
    join_segments,
    param_count,
    sgd_step,
    split_segments,
)

from oracles import central_difference, mlp_forward_by_hand, relative_error


class TestParamCount:
    def test_reference_mlp_is_199210(self):
        assert param_count(ModelSpec.mlp(784, (200, 200), 10)) == 199_210

    def test_single_dense_layer_with_bias(self):
        assert DenseLayer(1, 1).param_count == 2

    def test_count_matches_initialized_vector_length(self):
        spec = ModelSpec.mlp(784, (200, 200), 10)
        assert init_params(spec, 0).shape == (param_count(spec),)

    def test_conv_layer_count(self):
        # out_ch * in_ch * k * k weights plus out_ch biases
        assert ConvLayer(3, 8, 5).param_count == 8 * 3 * 25 + 8

    def test_cnn_small_count_matches_vector(self):
        spec = ModelSpec.cnn_small((1, 28, 28), 10)
        assert init_params(spec, 1).shape == (param_count(spec),)


class TestModelSpec:
    def test_rejects_single_class(self):
        with pytest.raises(ConfigurationError):
            ModelSpec(input_shape=(4,), layers=(DenseLayer(4, 1),), num_classes=1)

    def test_rejects_inconsistent_dims(self):
        with pytest.raises(ConfigurationError):
            ModelSpec(input_shape=(4,), layers=(DenseLayer(5, 3),), num_classes=3)

    def test_rejects_activated_output_layer(self):
        with pytest.raises(ConfigurationError):
            ModelSpec(input_shape=(4,), layers=(DenseLayer(4, 3, relu=True),), num_classes=3)


class TestInitParams:
    def test_deterministic(self):
        spec = ModelSpec.mlp(8, (5,), 3)
        np.testing.assert_array_equal(init_params(spec, 123), init_params(spec, 123))

    def test_seeds_differ(self):
        spec = ModelSpec.mlp(8, (5,), 3)
        assert np.any(init_params(spec, 1) != init_params(spec, 2))

    def test_biases_start_at_zero(self):
        spec = ModelSpec.mlp(2, (3,), 2)
        params = init_params(spec, 7)
        np.testing.assert_array_equal(params[6:9], 0.0)  # first layer bias slice
        np.testing.assert_array_equal(params[15:17], 0.0)

    def test_weights_within_uniform_limit(self):
        spec = ModelSpec.mlp(8, (5,), 3)
        params = init_params(spec, 3)
        limit = np.sqrt(6.0 / (8 + 5))
        assert np.all(np.abs(params[: 8 * 5]) <= limit)


class TestForward:
    def test_zero_params_give_zero_logits(self):
        spec = ModelSpec.mlp(6, (4,), 3)
        batch = Batch(np.random.default_rng(0).random((5, 6)), np.ones(5, dtype=int))
        np.testing.assert_array_equal(forward(spec, np.zeros(param_count(spec)), batch), 0.0)

    def test_per_sample_independence(self):
        spec = ModelSpec.mlp(6, (4,), 3)
        params = init_params(spec, 5)
        rng = np.random.default_rng(1)
        inputs = rng.random((8, 6))
        full = forward(spec, params, Batch(inputs, np.ones(8, dtype=int)))
        single = forward(spec, params, Batch(inputs[3:4], np.ones(1, dtype=int)))
        np.testing.assert_allclose(full[3], single[0], rtol=0, atol=1e-12)

    def test_matches_hand_rolled_dense_oracle(self):
        spec = ModelSpec.mlp(2, (3,), 2)
        params = init_params(spec, 11)
        rng = np.random.default_rng(2)
        batch = Batch(rng.standard_normal((6, 2)), np.ones(6, dtype=int))
        expected = mlp_forward_by_hand(batch.inputs, params, [2, 3, 2])
        np.testing.assert_allclose(forward(spec, params, batch), expected, atol=1e-10)

    def test_dimension_mismatch_raises(self):
        spec = ModelSpec.mlp(6, (4,), 3)
        batch = Batch(np.zeros((2, 5)), np.ones(2, dtype=int))
        with pytest.raises(ConfigurationError):
            forward(spec, init_params(spec, 0), batch)

    def test_wrong_param_length_raises(self):
        spec = ModelSpec.mlp(6, (4,), 3)
        batch = Batch(np.zeros((2, 6)), np.ones(2, dtype=int))
        with pytest.raises(ConfigurationError):
            forward(spec, np.zeros(3), batch)

    def test_pure(self):
        spec = ModelSpec.cnn_small((1, 10, 10), 4, channels=(2, 3))
        params = init_params(spec, 9)
        batch = Batch(np.random.default_rng(3).random((2, 100)), np.array([1, 2]))
        np.testing.assert_array_equal(forward(spec, params, batch), forward(spec, params, batch))


class TestBackward:
    def test_zero_grad_logits_give_zero_gradient(self):
        spec = ModelSpec.mlp(6, (4,), 3)
        params = init_params(spec, 5)
        batch = Batch(np.random.default_rng(0).random((4, 6)), np.ones(4, dtype=int))
        np.testing.assert_array_equal(backward(spec, params, batch, np.zeros((4, 3))), 0.0)

    def test_linear_in_grad_logits(self):
        spec = ModelSpec.mlp(6, (4,), 3)
        params = init_params(spec, 5)
        rng = np.random.default_rng(4)
        batch = Batch(rng.random((4, 6)), np.ones(4, dtype=int))
        g = rng.standard_normal((4, 3))
        np.testing.assert_allclose(
            backward(spec, params, batch, 3.0 * g),
            3.0 * backward(spec, params, batch, g),
            rtol=1e-12,
        )

    def test_shape_mismatch_raises(self):
        spec = ModelSpec.mlp(6, (4,), 3)
        batch = Batch(np.zeros((4, 6)), np.ones(4, dtype=int))
        with pytest.raises(ConfigurationError):
            backward(spec, init_params(spec, 0), batch, np.zeros((4, 5)))

    @pytest.mark.parametrize(
        "spec",
        [
            ModelSpec.mlp(7, (9,), 5),
            ModelSpec.mlp(5, (8, 6), 4),
            ModelSpec.cnn_small((1, 10, 10), 4, channels=(2, 3)),
        ],
        ids=["mlp-1-hidden", "mlp-2-hidden", "cnn"],
    )
    def test_matches_finite_differences(self, spec):
        rng = np.random.default_rng(42)
        params = init_params(spec, 6)
        assert param_count(spec) <= 1000
        batch = Batch(rng.random((3, spec.input_dim)), rng.integers(1, spec.num_classes + 1, 3))
        g_logits = rng.standard_normal((3, spec.num_classes))

        def loss(p):
            return float((forward(spec, p, batch) * g_logits).sum())

        grad = backward(spec, params, batch, g_logits)
        coords = rng.choice(params.size, size=50, replace=False)
        fd = central_difference(loss, params, coords, h=1e-5)
        for c, v in fd.items():
            assert relative_error(grad[c], v) < 1e-4

    def test_pure(self):
        spec = ModelSpec.mlp(6, (4,), 3)
        params = init_params(spec, 5)
        batch = Batch(np.random.default_rng(1).random((4, 6)), np.ones(4, dtype=int))
        g = np.random.default_rng(2).standard_normal((4, 3))
        np.testing.assert_array_equal(
            backward(spec, params, batch, g), backward(spec, params, batch, g)
        )


class TestSgdStep:
    def test_no_momentum_is_plain_sgd(self):
        params = np.array([1.0, 2.0, 3.0])
        grad = np.array([0.5, -1.0, 2.0])
        state = MomentumState.zeros(3, momentum=0.0)
        new, _ = sgd_step(params, grad, state, lr=1.0)
        np.testing.assert_array_equal(new, params - grad)

    def test_zero_grad_zero_velocity_is_fixed_point(self):
        params = np.array([1.0, -2.0])
        state = MomentumState.zeros(2, momentum=0.5)
        new, new_state = sgd_step(params, np.zeros(2), state, lr=0.1)
        np.testing.assert_array_equal(new, params)
        np.testing.assert_array_equal(new_state.velocity, 0.0)

    def test_two_steps_with_constant_gradient(self):
        # v1 = g, v2 = 0.5 g + g = 1.5 g, total displacement -lr * 2.5 g = -0.25 g
        g = np.array([2.0, -4.0])
        params = np.zeros(2)
        state = MomentumState.zeros(2, momentum=0.5)
        params, state = sgd_step(params, g, state, lr=0.1)
        params, state = sgd_step(params, g, state, lr=0.1)
        np.testing.assert_allclose(params, -0.25 * g, rtol=1e-15)

    def test_non_finite_gradient_aborts(self):
        state = MomentumState.zeros(2, momentum=0.0)
        with pytest.raises(NumericalError):
            sgd_step(np.zeros(2), np.array([1.0, np.nan]), state, lr=0.1)

    def test_length_mismatch_raises(self):
        state = MomentumState.zeros(2, momentum=0.0)
        with pytest.raises(ConfigurationError):
            sgd_step(np.zeros(3), np.zeros(2), state, lr=0.1)


class TestSegments:
    def test_even_split(self):
        lead, trail = split_segments(np.array([1.0, 2.0, 3.0, 4.0]))
        np.testing.assert_array_equal(lead, [1.0, 2.0])
        np.testing.assert_array_equal(trail, [3.0, 4.0])

    def test_odd_split_takes_ceil(self):
        lead, trail = split_segments(np.array([1.0, 2.0, 3.0, 4.0, 5.0]))
        np.testing.assert_array_equal(lead, [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(trail, [4.0, 5.0])

    def test_too_short_raises(self):
        with pytest.raises(ConfigurationError):
            split_segments(np.array([1.0]))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(min_value=2, max_value=400), st.integers(min_value=0, max_value=2**32 - 1))
    def test_split_join_round_trip(self, size, seed):
        vec = np.random.default_rng(seed).standard_normal(size)
        np.testing.assert_array_equal(join_segments(*split_segments(vec)), vec)
