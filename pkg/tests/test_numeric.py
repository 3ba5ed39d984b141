import math

import numpy as np
import pytest

from resale_pricing.numeric import (
    AdamState,
    DenseLayer,
    activation_forward,
    adam_step,
    dense_backward,
    dense_forward,
    gradient_check,
    init_dense,
    relu,
    sigmoid,
    softmax,
)


class TestDenseLayer:
    def test_validates_shapes(self):
        with pytest.raises(ValueError):
            DenseLayer(np.zeros((2, 3)), np.zeros(3))
        with pytest.raises(ValueError):
            DenseLayer(np.zeros(3), np.zeros(3))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            DenseLayer(np.array([[np.inf]]), np.zeros(1))

    def test_init_dense_bounds_and_determinism(self):
        layer1 = init_dense(10, 4, np.random.default_rng(0))
        layer2 = init_dense(10, 4, np.random.default_rng(0))
        limit = math.sqrt(6.0 / 14.0)
        assert np.all(np.abs(layer1.weights) <= limit)
        assert np.array_equal(layer1.weights, layer2.weights)
        assert np.all(layer1.bias == 0.0)


class TestDenseForward:
    def test_identity(self):
        layer = DenseLayer(np.eye(2), np.zeros(2))
        np.testing.assert_allclose(dense_forward(np.array([2.0, 3.0]), layer), [2.0, 3.0])

    def test_hand_arithmetic(self):
        layer = DenseLayer(np.array([[1.0, 2.0]]), np.array([1.0]))
        np.testing.assert_allclose(dense_forward(np.array([1.0, 1.0]), layer), [4.0])

    def test_zero_input_returns_bias(self):
        layer = DenseLayer(np.random.default_rng(1).normal(size=(2, 2)), np.array([5.0, -1.0]))
        np.testing.assert_allclose(dense_forward(np.zeros(2), layer), [5.0, -1.0])

    def test_dimension_mismatch(self):
        layer = DenseLayer(np.eye(2), np.zeros(2))
        with pytest.raises(ValueError):
            dense_forward(np.zeros(3), layer)
        with pytest.raises(ValueError):
            dense_forward(np.zeros((4, 3)), layer)

    def test_batch_matches_per_row(self):
        rng = np.random.default_rng(2)
        layer = init_dense(5, 3, rng)
        batch = rng.normal(size=(7, 5))
        out = dense_forward(batch, layer)
        for i in range(7):
            np.testing.assert_allclose(out[i], dense_forward(batch[i], layer), rtol=1e-12)


class TestDenseBackward:
    def test_forced_by_chain_rule(self):
        layer = DenseLayer(np.array([[3.0, 4.0]]), np.array([1.0]))
        grad_w, grad_b, grad_x = dense_backward(
            np.array([1.0, 0.0]), layer, np.array([1.0])
        )
        np.testing.assert_allclose(grad_w, [[1.0, 0.0]])
        np.testing.assert_allclose(grad_b, [1.0])
        np.testing.assert_allclose(grad_x, [3.0, 4.0])

    def test_zero_upstream(self):
        rng = np.random.default_rng(3)
        layer = init_dense(4, 2, rng)
        grad_w, grad_b, grad_x = dense_backward(rng.normal(size=4), layer, np.zeros(2))
        assert not grad_w.any() and not grad_b.any() and not grad_x.any()

    def test_matches_finite_differences(self):
        # Independent oracle: perturb each parameter and the input directly.
        rng = np.random.default_rng(4)
        layer = init_dense(3, 2, rng)
        x = rng.normal(size=3)
        upstream = rng.normal(size=2)
        step = 1e-5

        def value(weights, bias, xv):
            return float(upstream @ (weights @ xv + bias))

        grad_w, grad_b, grad_x = dense_backward(x, layer, upstream)
        for idx in np.ndindex(layer.weights.shape):
            w_plus = layer.weights.copy()
            w_minus = layer.weights.copy()
            w_plus[idx] += step
            w_minus[idx] -= step
            numeric = (value(w_plus, layer.bias, x) - value(w_minus, layer.bias, x)) / (2 * step)
            assert abs(grad_w[idx] - numeric) / max(abs(numeric), 1e-8) < 1e-4
        for i in range(3):
            x_plus, x_minus = x.copy(), x.copy()
            x_plus[i] += step
            x_minus[i] -= step
            numeric = (value(layer.weights, layer.bias, x_plus) - value(layer.weights, layer.bias, x_minus)) / (2 * step)
            assert abs(grad_x[i] - numeric) / max(abs(numeric), 1e-8) < 1e-4

    def test_batch_sums_parameter_gradients(self):
        rng = np.random.default_rng(5)
        layer = init_dense(4, 3, rng)
        batch = rng.normal(size=(6, 4))
        upstream = rng.normal(size=(6, 3))
        grad_w, grad_b, grad_x = dense_backward(batch, layer, upstream)
        w_sum = np.zeros_like(layer.weights)
        b_sum = np.zeros_like(layer.bias)
        for i in range(6):
            gw, gb, gx = dense_backward(batch[i], layer, upstream[i])
            w_sum += gw
            b_sum += gb
            np.testing.assert_allclose(grad_x[i], gx, rtol=1e-12)
        np.testing.assert_allclose(grad_w, w_sum, rtol=1e-12)
        np.testing.assert_allclose(grad_b, b_sum, rtol=1e-12)


class TestActivations:
    def test_softmax_symmetry(self):
        np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_sigmoid_at_zero(self):
        assert sigmoid(0.0) == 0.5

    def test_softmax_analytic(self):
        np.testing.assert_allclose(
            softmax(np.array([math.log(2.0), 0.0])), [2.0 / 3.0, 1.0 / 3.0], rtol=1e-12
        )

    def test_softmax_is_probability_vector(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            out = softmax(rng.uniform(-50, 50, size=rng.integers(2, 8)))
            assert np.all(out >= 0)
            assert abs(out.sum() - 1.0) < 1e-12

    def test_softmax_survives_large_inputs(self):
        out = softmax(np.array([1000.0, 999.0, -1000.0]))
        assert np.all(np.isfinite(out))
        assert abs(out.sum() - 1.0) < 1e-12

    def test_sigmoid_stable_and_bounded(self):
        values = sigmoid(np.array([-750.0, -30.0, 0.0, 30.0, 750.0]))
        assert np.all(np.isfinite(values))
        assert values[0] >= 0.0 and values[-1] <= 1.0
        assert np.all(np.diff(values) >= 0)

    def test_relu(self):
        np.testing.assert_allclose(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_dispatch(self):
        x = np.array([0.3, -0.7])
        np.testing.assert_allclose(activation_forward(x, "relu"), relu(x))
        np.testing.assert_allclose(activation_forward(x, "sigmoid"), sigmoid(x))
        np.testing.assert_allclose(activation_forward(x, "softmax"), softmax(x))
        with pytest.raises(ValueError):
            activation_forward(x, "tanh")


def _quadratic(params):
    theta = params["theta"]
    return float(theta @ theta), {"theta": 2.0 * theta}


class TestAdam:
    def test_zero_gradient_is_identity(self):
        rng = np.random.default_rng(7)
        params = {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=2)}
        before = {k: v.copy() for k, v in params.items()}
        state = AdamState.for_params(params)
        for _ in range(5):
            adam_step(params, {k: np.zeros_like(v) for k, v in params.items()}, state, 0.01)
        assert state.timestep == 5
        for key in params:
            assert np.array_equal(params[key], before[key])

    def test_first_step_is_signed_learning_rate(self):
        rng = np.random.default_rng(8)
        params = {"w": rng.normal(size=10)}
        grads = {"w": rng.normal(size=10) * 100.0}
        before = params["w"].copy()
        state = AdamState.for_params(params)
        adam_step(params, grads, state, 0.05)
        np.testing.assert_allclose(params["w"] - before, -0.05 * np.sign(grads["w"]), atol=1e-8)

    def test_two_steps_on_quadratic(self):
        # Oracle: scalar hand simulation of the Adam recurrence on f(t) = t^2.
        theta, m, v = 1.0, 0.0, 0.0
        expected = []
        for t in (1, 2):
            g = 2.0 * theta
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            m_hat = m / (1.0 - 0.9**t)
            v_hat = v / (1.0 - 0.999**t)
            theta -= 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
            expected.append(theta)
        params = {"theta": np.array([1.0])}
        state = AdamState.for_params(params)
        seen = []
        for _ in range(2):
            adam_step(params, {"theta": 2.0 * params["theta"]}, state, 0.1)
            seen.append(float(params["theta"][0]))
        np.testing.assert_allclose(seen, expected, rtol=1e-12)
        assert seen[0] < 1.0 and seen[1] < seen[0]

    def test_non_finite_gradient_names_block(self):
        params = {"good": np.zeros(2), "fusion.weights": np.zeros(2)}
        grads = {"good": np.zeros(2), "fusion.weights": np.array([1.0, np.nan])}
        state = AdamState.for_params(params)
        with pytest.raises(ValueError, match="fusion.weights"):
            adam_step(params, grads, state, 0.01)

    def test_block_mismatch_and_bad_lr(self):
        params = {"w": np.zeros(2)}
        state = AdamState.for_params(params)
        with pytest.raises(ValueError):
            adam_step(params, {"other": np.zeros(2)}, state, 0.01)
        with pytest.raises(ValueError):
            adam_step(params, {"w": np.zeros(2)}, state, 0.0)
        with pytest.raises(ValueError):
            adam_step(params, {"w": np.zeros(3)}, state, 0.01)

    def test_deterministic(self):
        def run():
            params = {"w": np.full(4, 2.0)}
            state = AdamState.for_params(params)
            for _ in range(20):
                adam_step(params, {"w": params["w"] ** 2}, state, 0.01)
            return params["w"]

        assert np.array_equal(run(), run())


class TestGradientCheck:
    def test_exact_quadratic(self):
        rng = np.random.default_rng(9)
        params = {"theta": rng.normal(size=6)}
        report = gradient_check(_quadratic, params, tolerance=1e-6)
        assert report.passed
        assert report.max_rel_error < 1e-6
        assert report.n_coordinates == 6

    def test_reports_worst_coordinate(self):
        def broken(params):
            theta = params["theta"]
            grads = 2.0 * theta
            grads = grads.copy()
            grads[2] += 1.0  # deliberate error in one coordinate
            return float(theta @ theta), {"theta": grads}

        params = {"theta": np.arange(1.0, 6.0)}
        report = gradient_check(broken, params, tolerance=1e-4)
        assert not report.passed
        assert report.worst_param == "theta"
        assert report.worst_index == (2,)

    def test_failure_is_report_not_error(self):
        def wrong(params):
            return float(params["x"].sum()), {"x": np.zeros_like(params["x"])}

        report = gradient_check(wrong, {"x": np.ones(3)}, tolerance=1e-4)
        assert report.passed is False

    def test_restores_parameters(self):
        params = {"theta": np.array([1.0, -2.0, 3.0])}
        original = params["theta"].copy()
        gradient_check(_quadratic, params)
        assert np.array_equal(params["theta"], original)

    def test_kink_proximity_flag(self):
        def absolute(params):
            return float(np.abs(params["x"]).sum()), {"x": np.sign(params["x"])}

        params = {"x": np.array([1e-7])}
        report = gradient_check(
            absolute, params, kink_distance=lambda p: float(np.min(np.abs(p["x"])))
        )
        assert report.near_kink

    def test_far_from_kink_not_flagged(self):
        params = {"theta": np.array([2.0])}
        report = gradient_check(
            _quadratic, params, kink_distance=lambda p: float(np.min(np.abs(p["theta"])))
        )
        assert not report.near_kink
