import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from phasemem import layers as L
from phasemem import tensor as T
from phasemem.errors import ConfigError, DimensionError, InputError, NumericError, UsageError
from phasemem.optim import AdamState, adam_step


def _f64(rng, *shape):
    return rng.normal(size=shape)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(np.eye(2), [[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_projector(self):
        out = T.matmul([[1.0, 0.0], [0.0, 0.0]], [[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(T.matmul(a, b).data, expected, rtol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax_rows([[0.0, 0.0]]).data, [[0.5, 0.5]])

    def test_no_overflow(self):
        np.testing.assert_allclose(T.softmax_rows([[1000.0, 1000.0]]).data, [[0.5, 0.5]])

    def test_closed_form(self):
        out = T.softmax_rows(np.array([[0.0, math.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], rtol=1e-12)

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            T.softmax_rows([[np.nan, 0.0]])

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                      elements=st.floats(-50, 50)))
    def test_rows_stochastic_64(self, x):
        p = T.softmax_rows(x).data
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                      elements=st.floats(-50, 50, width=32)))
    def test_rows_stochastic_32(self, x):
        np.testing.assert_allclose(T.softmax_rows(x).data.sum(axis=1), 1.0, atol=1e-5)


class TestLayerNorm:
    ones, zeros = T.Tensor(np.ones(2)), T.Tensor(np.zeros(2))

    def test_constant_vector(self):
        g, b = T.Tensor(np.ones(4)), T.Tensor(np.zeros(4))
        np.testing.assert_array_equal(T.layer_norm(np.full(4, 3.0), g, b).data, np.zeros(4))

    def test_already_normalised(self):
        out = T.layer_norm(np.array([-1.0, 1.0]), self.ones, self.zeros, eps=0.0)
        np.testing.assert_allclose(out.data, [-1.0, 1.0])

    def test_random_mean_zero(self):
        x = np.random.default_rng(0).normal(3.0, 2.0, size=16)
        out = T.layer_norm(x, T.Tensor(np.ones(16)), T.Tensor(np.zeros(16))).data
        assert abs(out.mean()) < 1e-6
        # direct recomputation
        ref = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
        np.testing.assert_allclose(out, ref, rtol=1e-12)

    def test_zero_dim(self):
        with pytest.raises(DimensionError):
            T.layer_norm(np.zeros((3, 0)), T.Tensor(np.zeros(0)), T.Tensor(np.zeros(0)))


def _block_params(rng, d, heads, dtype=np.float64, zero_proj=False):
    p = {}
    L.init_block(p, "b", rng, d, heads, dtype=dtype)
    if zero_proj:
        p["b.attn.proj.w"].data[:] = 0
        p["b.mlp.fc2.w"].data[:] = 0
    return p


class TestMhsaBlock:
    def test_single_token_shape(self):
        p = _block_params(np.random.default_rng(0), 8, 2)
        assert L.mhsa_block(np.ones((1, 8)), p, "b", 2).shape == (1, 8)

    def test_zero_output_projection_is_identity(self):
        p = _block_params(np.random.default_rng(0), 8, 2, zero_proj=True)
        x = np.random.default_rng(1).normal(size=(5, 8))
        np.testing.assert_array_equal(L.mhsa_block(x, p, "b", 2).data, x)

    def test_attention_rows_stochastic(self):
        p = _block_params(np.random.default_rng(7), 4, 2, dtype=np.float32)
        x = np.random.default_rng(8).normal(size=(3, 4)).astype(np.float32)
        seen = []
        L.mhsa_block(x, p, "b", 2, attn_out=seen)
        (weights,) = seen
        assert weights.shape == (1, 2, 3, 3)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-5)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            _block_params(np.random.default_rng(0), 30, 4)
        p = _block_params(np.random.default_rng(0), 8, 2)
        with pytest.raises(ConfigError):
            L.mhsa_block(np.ones((2, 8)), p, "b", 3)


class TestSinusoidal:
    def test_position_zero(self):
        np.testing.assert_array_equal(L.sinusoidal_encoding(0, 6), [0, 1, 0, 1, 0, 1])

    def test_range(self):
        enc = L.sinusoidal_encoding(np.arange(500), 16)
        assert enc.min() >= -1 and enc.max() <= 1

    def test_first_pair_difference(self):
        diff = L.sinusoidal_encoding(1, 8)[:2] - L.sinusoidal_encoding(0, 8)[:2]
        np.testing.assert_allclose(diff, [math.sin(1.0), math.cos(1.0) - 1.0])

    def test_odd_dim(self):
        with pytest.raises(ConfigError):
            L.sinusoidal_encoding(3, 5)


class TestCrossEntropy:
    def test_uniform(self):
        loss = T.cross_entropy(np.zeros((3, 5)), [0, 2, 4])
        assert loss.item() == pytest.approx(math.log(5))

    def test_confident_limit(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 1e4
        assert T.cross_entropy(logits, [2]).item() < 1e-3

    def test_random_matches_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 3))
        labels = [2, 0]
        logp = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
        expected = -np.mean([logp[0, 2], logp[1, 0]])
        assert T.cross_entropy(x, labels).item() == pytest.approx(expected, rel=1e-12)

    def test_label_range(self):
        with pytest.raises(InputError):
            T.cross_entropy(np.zeros((1, 3)), [3])


class TestBackward:
    def test_sum_of_squares(self):
        x = T.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        T.tensor_sum(T.mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])

    def test_unused_parameter(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        p = T.Tensor(np.ones(3), requires_grad=True)
        T.tensor_sum(T.add(x, T.Tensor(np.ones(3)))).backward()
        assert p.grad is None or not p.grad.any()

    def test_accumulates(self):
        x = T.Tensor(np.array([2.0]), requires_grad=True)
        loss = T.tensor_sum(T.mul(x, x))
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(x.grad, [8.0])

    def test_non_scalar(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            T.mul(x, 2.0).backward()

    def test_composed_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x, w1, b1, w2 = _f64(rng, 4, 3), _f64(rng, 3, 5), _f64(rng, 5), _f64(rng, 5, 2)

        def f(x, w1, b1, w2):
            h = T.gelu(T.linear(x, w1, b1))
            return T.cross_entropy(T.matmul(h, w2), [0, 1, 1, 0])

        assert T.grad_check(f, [x, w1, b1, w2]) < 1e-6


class TestAdam:
    def _param(self, value):
        p = T.Tensor(np.array([value], dtype=np.float64), requires_grad=True)
        return {"p": p}

    def test_zero_grad_no_move(self):
        params = self._param(1.5)
        params["p"].grad = np.zeros(1)
        adam_step(params, AdamState(learning_rate=0.1))
        assert params["p"].data[0] == 1.5

    def test_direction(self):
        params = self._param(0.0)
        state = AdamState(learning_rate=0.01)
        for _ in range(50):
            params["p"].grad = np.array([-3.0])
            adam_step(params, state)
        assert params["p"].data[0] > 0
        assert state.step_count == 50

    def test_single_step_hand_value(self):
        # m = 0.1, v = 0.001; bias-corrected m_hat = v_hat = 1 -> step = -lr / (1 + eps)
        params = self._param(0.0)
        params["p"].grad = np.array([1.0])
        adam_step(params, AdamState(learning_rate=0.1))
        assert params["p"].data[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)

    def test_missing_grad(self):
        with pytest.raises(UsageError):
            adam_step(self._param(0.0), AdamState())


class TestGradCheck:
    def test_quadratic_form(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 4))
        a = a + a.T
        x = rng.normal(size=(1, 4))
        err = T.grad_check(lambda x: T.tensor_sum(T.mul(T.matmul(x, T.Tensor(a)), x)), [x])
        assert err < 1e-8

    def test_requires_float64(self):
        with pytest.raises(UsageError):
            T.grad_check(lambda x: T.tensor_sum(x), [np.ones(2, dtype=np.float32)])

    def test_cross_entropy(self):
        x = np.random.default_rng(2).normal(size=(3, 4))
        assert T.grad_check(lambda x: T.cross_entropy(x, [0, 3, 1]), [x]) < 1e-6

    def test_mhsa_block(self):
        rng = np.random.default_rng(4)
        p = _block_params(rng, 8, 2)
        for v in p.values():
            v.data = v.data + rng.normal(0, 0.3, v.shape)
        names = list(p)
        x = rng.normal(size=(3, 8))
        target = rng.normal(size=(3, 8))

        def f(x, *ws):
            out = L.mhsa_block(x, dict(zip(names, ws)), "b", 2)
            diff = T.sub(out, T.Tensor(target))
            return T.tensor_sum(T.mul(diff, diff))

        assert T.grad_check(f, [x] + [p[n].data for n in names]) < 1e-4


# every differentiable op on small random shapes
OP_CASES = {
    "add": (lambda a, b: T.add(a, b), [(2, 3), (2, 3)]),
    "sub": (lambda a, b: T.sub(a, b), [(2, 3), (2, 3)]),
    "mul": (lambda a, b: T.mul(a, b), [(2, 3), (2, 3)]),
    "scale": (lambda a: T.mul(a, -1.7), [(3,)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(2, 3), (3, 4)]),
    "batched_matmul": (lambda a, b: T.matmul(a, b), [(2, 2, 3), (2, 3, 2)]),
    "linear": (lambda x, w, b: T.linear(x, w, b), [(2, 3, 4), (4, 5), (5,)]),
    "reshape": (lambda a: T.reshape(a, (3, 2)), [(2, 3)]),
    "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "expand": (lambda a: T.expand(a, (2, 3, 4)), [(3, 1)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 1, 3), (2, 2, 3)]),
    "take": (lambda a: T.take(a, 1, axis=1), [(2, 3, 2)]),
    "gelu": (lambda a: T.gelu(a), [(4, 3)]),
    "softmax": (lambda a: T.softmax(a), [(3, 4)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b), [(3, 5), (5,), (5,)]),
    "mean": (lambda a: T.mean(a), [(3, 2)]),
    "sum": (lambda a: T.tensor_sum(a), [(3, 2)]),
    "softmax_rows": (lambda a: T.softmax_rows(a), [(3, 4)]),
    "cross_entropy": (lambda a: T.cross_entropy(a, [0, 3, 1]), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_grad_check_every_op(name):
    fn, shapes = OP_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    inputs = [rng.normal(size=s) for s in shapes]
    out_shape = fn(*[T.Tensor(x) for x in inputs]).shape
    weights = rng.normal(size=out_shape)
    err = T.grad_check(lambda *xs: T.tensor_sum(T.mul(fn(*xs), T.Tensor(weights))), inputs)
    assert err < 1e-4


def test_key_mask_zeroes_attention():
    rng = np.random.default_rng(7)
    p = _block_params(rng, 8, 2)
    x = rng.normal(size=(2, 5, 8))
    mask = np.array([[1, 0, 1, 1, 0], [1, 1, 1, 1, 1]])
    weights = []
    out = L.mhsa_block(x, p, "b", 2, attn_out=weights, key_mask=mask).data
    assert (weights[0][0, :, :, [1, 4]] == 0).all()
    np.testing.assert_allclose(weights[0].sum(axis=-1), 1.0)
    # hidden keys can change freely without touching the visible tokens
    y = x.copy()
    y[0, [1, 4]] = rng.normal(size=(2, 8))
    out2 = L.mhsa_block(y, p, "b", 2, key_mask=mask).data
    np.testing.assert_array_equal(out2[0, [0, 2, 3]], out[0, [0, 2, 3]])


def test_determinism():
    rng = np.random.default_rng(0)
    p = _block_params(rng, 8, 2, dtype=np.float32)
    x = np.random.default_rng(1).normal(size=(4, 8)).astype(np.float32)
    a = L.mhsa_block(x, p, "b", 2).data
    b = L.mhsa_block(x, p, "b", 2).data
    np.testing.assert_array_equal(a, b)
