import numpy as np
import pytest

from conftest import fd_gradient, naive_mlp_forward, rel_err
from fishergen.autodiff import (AdamState, MlpSpec, ParamStore, adam_step,
                                forward, jvp, replay, vjp)
from fishergen.errors import NonFiniteError
from fishergen.rng import make_rng


def identity_relu_spec():
    return MlpSpec((2, 2), ("relu",))


class TestForward:
    def test_identity_weights_relu_clamps(self):
        spec = identity_relu_spec()
        params = ParamStore([(np.eye(2), np.zeros(2))])
        y, _ = forward(spec, params, np.array([1.0, -2.0]))
        assert np.array_equal(y, [1.0, 0.0])

    def test_affine_scalar(self):
        spec = MlpSpec((1, 1), ("identity",))
        params = ParamStore([(np.array([[2.0]]), np.array([1.0]))])
        y, _ = forward(spec, params, np.array([3.0]))
        assert np.array_equal(y, [7.0])

    def test_matches_independent_evaluator(self, rng):
        spec = MlpSpec((4, 7, 5, 3), ("relu", "relu", "identity"))
        params = ParamStore.glorot(spec, rng)
        for (_, b) in params.layers:
            b[...] = rng.standard_normal(b.size) * 0.1
        x = rng.standard_normal(4)
        y, _ = forward(spec, params, x)
        expected = naive_mlp_forward(spec, params, x)
        np.testing.assert_allclose(y, expected, rtol=1e-13, atol=1e-14)

    def test_deterministic_and_batched(self, rng):
        spec = MlpSpec((3, 6, 2), ("relu", "identity"))
        params = ParamStore.glorot(spec, rng)
        X = rng.standard_normal((5, 3))
        y1, _ = forward(spec, params, X)
        y2, _ = forward(spec, params, X)
        assert np.array_equal(y1, y2)
        row, _ = forward(spec, params, X[2])
        np.testing.assert_allclose(row, y1[2], rtol=0, atol=0)

    def test_shape_mismatch_raises(self, rng):
        spec = MlpSpec((3, 2), ("identity",))
        params = ParamStore.glorot(spec, rng)
        with pytest.raises(ValueError):
            forward(spec, params, np.zeros(4))

    def test_nonfinite_output_raises(self):
        spec = MlpSpec((1, 1), ("identity",))
        params = ParamStore([(np.array([[np.inf]]), np.zeros(1))])
        with pytest.raises(NonFiniteError):
            forward(spec, params, np.array([1.0]))

    def test_tape_replay_bit_exact(self, rng):
        spec = MlpSpec((4, 8, 4), ("relu", "identity"))
        params = ParamStore.glorot(spec, rng)
        x = rng.standard_normal((6, 4))
        y, tape = forward(spec, params, x)
        assert np.array_equal(replay(spec, params, tape), y)


class TestVjp:
    def test_linear_transpose(self):
        spec = MlpSpec((1, 1), ("identity",))
        params = ParamStore([(np.array([[2.0]]), np.zeros(1))])
        _, tape = forward(spec, params, np.array([5.0]))
        gx, _ = vjp(spec, params, tape, np.array([3.0]))
        assert np.array_equal(gx, [6.0])

    def test_relu_blocks_dead_unit(self):
        spec = identity_relu_spec()
        params = ParamStore([(np.eye(2), np.zeros(2))])
        # pre-activations (1, -1): the second unit is dead
        _, tape = forward(spec, params, np.array([1.0, -1.0]))
        gx, _ = vjp(spec, params, tape, np.array([1.0, 1.0]))
        assert np.array_equal(gx, [1.0, 0.0])

    def test_param_grads_match_finite_differences(self, rng):
        spec = MlpSpec((3, 5, 2), ("relu", "identity"))
        params = ParamStore.glorot(spec, rng)
        x = rng.standard_normal(3) + 0.3
        ct = rng.standard_normal(2)
        _, tape = forward(spec, params, x)
        _, grads = vjp(spec, params, tape, ct)

        def loss(flat):
            p = ParamStore.from_flat(spec, flat)
            y, _ = forward(spec, p, x)
            return float(ct @ y)

        fd = fd_gradient(loss, params.flatten())
        got = grads.flatten()
        assert got.shape == fd.shape
        for a, b in zip(got, fd):
            assert rel_err(a, b) <= 1e-4

    def test_input_grad_matches_finite_differences(self, rng):
        spec = MlpSpec((4, 6, 3), ("relu", "identity"))
        params = ParamStore.glorot(spec, rng)
        x = rng.standard_normal(4)
        ct = rng.standard_normal(3)
        _, tape = forward(spec, params, x)
        gx, _ = vjp(spec, params, tape, ct)

        def loss(xv):
            y, _ = forward(spec, params, xv)
            return float(ct @ y)

        fd = fd_gradient(loss, x)
        for a, b in zip(gx, fd):
            assert rel_err(a, b) <= 1e-4


class TestJvp:
    def test_diagonal_linear_map(self):
        spec = MlpSpec((2, 2), ("identity",))
        params = ParamStore([(np.array([[1.0, 0.0], [0.0, 2.0]]),
                              np.zeros(2))])
        out = jvp(spec, params, np.zeros(2), np.array([1.0, 1.0]))
        assert np.array_equal(out, [1.0, 2.0])

    def test_columns_match_fd_jacobian(self, rng):
        spec = MlpSpec((3, 6, 4), ("relu", "identity"))
        params = ParamStore.glorot(spec, rng)
        x = rng.standard_normal(3)
        h = 1e-5
        for j in range(3):
            e = np.zeros(3)
            e[j] = 1.0
            col = jvp(spec, params, x, e)
            up, _ = forward(spec, params, x + h * e)
            down, _ = forward(spec, params, x - h * e)
            fd = (up - down) / (2 * h)
            for a, b in zip(col, fd):
                assert rel_err(a, b) <= 1e-4

    def test_adjoint_identity(self, rng):
        spec = MlpSpec((4, 9, 5), ("relu", "identity"))
        for _ in range(25):
            params = ParamStore.glorot(spec, rng)
            x = rng.standard_normal(4)
            u = rng.standard_normal(5)
            v = rng.standard_normal(4)
            _, tape = forward(spec, params, x)
            lhs = float(u @ jvp(spec, params, x, v))
            gx, _ = vjp(spec, params, tape, u)
            rhs = float(gx @ v)
            assert abs(lhs - rhs) <= 1e-10


class TestAdam:
    def test_first_step_bias_corrected(self):
        params = np.array([0.0])
        state = AdamState.zeros(1)
        adam_step(params, np.array([1.0]), state, lr=0.1, eps=1e-8)
        assert abs(params[0] - (-0.1 / (1.0 + 1e-8))) < 1e-15
        assert state.step == 1

    def test_zero_gradient_keeps_params(self):
        params = np.array([1.5, -2.0])
        state = AdamState.zeros(2)
        adam_step(params, np.zeros(2), state, lr=0.1)
        assert np.array_equal(params, [1.5, -2.0])

    def test_three_steps_match_hand_unrolled_recurrence(self):
        # minimize f(w) = w^2, so g = 2w; unroll the recurrence with plain
        # python floats as the oracle
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        w_ref, m, v = 0.7, 0.0, 0.0
        trajectory = []
        for t in range(1, 4):
            g = 2.0 * w_ref
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            w_ref -= lr * mhat / (vhat ** 0.5 + eps)
            trajectory.append(w_ref)

        params = np.array([0.7])
        state = AdamState.zeros(1)
        for t in range(3):
            adam_step(params, 2.0 * params, state, lr, b1, b2, eps)
            assert abs(params[0] - trajectory[t]) < 1e-14


class TestParamStore:
    def test_flatten_order_and_round_trip(self):
        spec = MlpSpec((2, 3, 1), ("relu", "identity"))
        params = ParamStore.zeros(spec, xi_n=0.25)
        params.layers[0][0][...] = np.arange(6).reshape(2, 3)
        params.layers[0][1][...] = [10, 11, 12]
        params.layers[1][0][...] = [[20], [21], [22]]
        params.layers[1][1][...] = [30]
        flat = params.flatten()
        expected = [0, 1, 2, 3, 4, 5, 10, 11, 12, 20, 21, 22, 30, 0.25]
        assert np.array_equal(flat, expected)
        back = ParamStore.from_flat(spec, flat, has_xi=True)
        assert back.xi_n == 0.25
        for (W, b), (W2, b2) in zip(params.layers, back.layers):
            assert np.array_equal(W, W2)
            assert np.array_equal(b, b2)

    def test_glorot_bounds(self, rng):
        spec = MlpSpec((10, 20), ("identity",))
        params = ParamStore.glorot(spec, rng)
        limit = np.sqrt(6.0 / 30.0)
        W = params.layers[0][0]
        assert np.all(np.abs(W) <= limit)
        assert np.array_equal(params.layers[0][1], np.zeros(20))


def test_forward_same_seed_bit_identical():
    outs = []
    for _ in range(2):
        rng = make_rng(77)
        spec = MlpSpec((6, 12, 3), ("relu", "identity"))
        params = ParamStore.glorot(spec, rng)
        y, _ = forward(spec, params, rng.standard_normal((4, 6)))
        outs.append(y)
    assert np.array_equal(outs[0], outs[1])
