"""Autodiff engine tests.

The independent oracles here are deliberately dumb: straight-line numpy
re-evaluation for forward values, and central finite differences for
gradients. Neither touches the differentiation machinery it checks.
"""
import math

import numpy as np
import pytest

from tartan.autodiff import (
    NonFiniteError,
    ParamSet,
    RecordConsumedError,
    Tensor,
    backward,
    cross_entropy,
    forward_mlp,
    grad_check,
    loss,
    masked_mse,
    mse,
)
from tartan.prng import substream


def make_mlp_params(layer_spec, seed):
    """Uniform(+-1/sqrt(fan_in)) parameters, same recipe as the model module."""
    rng = substream(seed, "init", "test-mlp")
    params = ParamSet()
    for k, (din, dout, _act) in enumerate(layer_spec):
        bound = 1.0 / math.sqrt(din)
        params.add(f"layer{k}.weight", Tensor(rng.uniform(-bound, bound, (din, dout))))
        params.add(f"layer{k}.bias", Tensor(rng.uniform(-bound, bound, (dout,))))
    return params


def numpy_mlp_eval(params, layer_spec, x):
    """Straight-line forward pass with no differentiation machinery."""
    h = np.asarray(x, dtype=np.float64)
    for k, (_din, _dout, act) in enumerate(layer_spec):
        h = h @ params[f"layer{k}.weight"].data + params[f"layer{k}.bias"].data
        if act == "relu":
            h = np.maximum(h, 0.0)
        elif act == "tanh":
            h = np.tanh(h)
    return h


class TestForwardMLP:
    def test_identity_layer(self):
        params = ParamSet()
        params.add("layer0.weight", Tensor(np.eye(2)))
        params.add("layer0.bias", Tensor(np.zeros(2)))
        out = forward_mlp(params, [(2, 2, "linear")], np.array([[1.0, 2.0]]))
        assert np.array_equal(out.data, np.array([[1.0, 2.0]]))

    def test_constant_map(self):
        params = ParamSet()
        params.add("layer0.weight", Tensor(np.zeros((1, 1))))
        params.add("layer0.bias", Tensor(np.array([3.0])))
        out = forward_mlp(params, [(1, 1, "linear")], np.array([[5.0], [-2.0], [0.0]]))
        assert np.array_equal(out.data, np.full((3, 1), 3.0))

    def test_two_layer_matches_straight_line_oracle(self):
        layer_spec = [(2, 2, "tanh"), (2, 1, "linear")]
        params = make_mlp_params(layer_spec, seed=7)
        x = np.array([[1.0, 0.0]])
        out = forward_mlp(params, layer_spec, x)
        expected = numpy_mlp_eval(params, layer_spec, x)
        assert np.allclose(out.data, expected, rtol=0, atol=1e-15)

    def test_shape_mismatch(self):
        params = make_mlp_params([(2, 3, "relu")], seed=0)
        with pytest.raises(ValueError):
            forward_mlp(params, [(2, 3, "relu")], np.zeros((4, 5)))

    def test_unknown_activation(self):
        params = make_mlp_params([(2, 2, "tanh")], seed=0)
        with pytest.raises(ValueError, match="activation"):
            forward_mlp(params, [(2, 2, "sigmoid")], np.zeros((1, 2)))

    def test_non_finite_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([[1.0, np.nan]]))


class TestLosses:
    def test_cross_entropy_uniform_logits(self):
        out = loss(Tensor(np.zeros((4, 4))), [0, 1, 2, 3], "cross_entropy")
        assert out.item() == math.log(4.0)

    def test_mse_identity(self):
        t = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert loss(Tensor(t), t, "mse").item() == 0.0

    def test_masked_mse_single_entry(self):
        out = loss(Tensor(np.array([[1.0, 2.0]])), np.array([[0.0, 0.0]]),
                   "masked_mse", mask=np.array([[1.0, 0.0]]))
        assert out.item() == 1.0

    def test_masked_mse_all_zero_mask(self):
        with pytest.raises(ValueError, match="all-zero mask"):
            masked_mse(Tensor(np.ones((2, 2))), np.zeros((2, 2)), np.zeros((2, 2)))

    def test_empty_batch(self):
        with pytest.raises(ValueError, match="empty batch"):
            cross_entropy(Tensor(np.zeros((0, 3))), [])

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="class range"):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_cross_entropy_nonnegative_and_lnk_at_uniform(self):
        for seed in range(10):
            rng = substream(seed, "init", "ce-prop")
            k = int(rng.integers(2, 8))
            logits = rng.standard_normal((6, k))
            labels = rng.integers(0, k, size=6)
            value = cross_entropy(Tensor(logits), labels).item()
            assert value >= 0.0
            uniform = cross_entropy(Tensor(np.full((4, k), rng.uniform(-3, 3))), [0] * 4)
            assert uniform.item() == pytest.approx(math.log(k), abs=1e-12)


class TestBackward:
    def test_quadratic(self):
        params = ParamSet()
        x = params.add("x", Tensor(np.array([1.0, 2.0])))
        # f = x'x realized as 2 * mean(x^2); gradient is 2x
        grads = backward(mse(x, np.zeros(2)) * 2.0, params)
        assert np.allclose(grads["x"], np.array([2.0, 4.0]), atol=1e-15)

    def test_linear(self):
        # f(x) = a'x as a (1 x 1) affine output; gradient is a, independent of x.
        a = np.array([[3.0], [-1.0]])
        weights = ParamSet({"layer0.weight": Tensor(a), "layer0.bias": Tensor(np.zeros(1))})
        for x_value in ([[5.0, 7.0]], [[-1.0, 0.25]]):
            params = ParamSet()
            params.add("x", Tensor(np.array(x_value)))
            out = forward_mlp(weights, [(2, 1, "linear")], params["x"] * 1.0)
            grads = backward(out, params)
            assert np.array_equal(grads["x"], a.T)

    def test_uninfluential_params_get_zeros(self):
        params = ParamSet()
        x = params.add("x", Tensor(np.array([2.0])))
        params.add("unused", Tensor(np.ones((3, 3))))
        node = mse(x * 1.0, np.zeros(1))
        grads = backward(node, params)
        assert np.array_equal(grads["unused"], np.zeros((3, 3)))
        assert np.allclose(grads["x"], np.array([4.0]))

    def test_record_consumed(self):
        params = ParamSet()
        x = params.add("x", Tensor(np.array([1.0])))
        node = mse(x * 1.0, np.zeros(1))
        backward(node, params)
        with pytest.raises(RecordConsumedError):
            backward(node, params)

    def test_non_scalar_loss_rejected(self):
        params = ParamSet()
        x = params.add("x", Tensor(np.ones((2, 2))))
        with pytest.raises(ValueError, match="scalar"):
            backward(x * 2.0, params)

    def test_mlp_cross_entropy_vs_finite_differences(self):
        layer_spec = [(3, 8, "tanh"), (8, 4, "linear")]
        params = make_mlp_params(layer_spec, seed=11)
        rng = substream(11, "data", "fd-batch")
        x = rng.standard_normal((4, 3))
        y = rng.integers(0, 4, size=4)

        def eval_fn(p):
            return cross_entropy(forward_mlp(p, layer_spec, x), y)

        assert grad_check(eval_fn, params, step=1e-5) <= 1e-4

    def test_backward_linearity(self):
        layer_spec = [(2, 4, "tanh"), (4, 2, "linear")]
        params = make_mlp_params(layer_spec, seed=3)
        rng = substream(3, "data", "linearity")
        x = rng.standard_normal((5, 2))
        y = rng.integers(0, 2, size=5)
        t = rng.standard_normal((5, 2))

        def f(p):
            return cross_entropy(forward_mlp(p, layer_spec, x), y)

        def g(p):
            return mse(forward_mlp(p, layer_spec, x), t)

        a, b = 2.5, -0.75
        combined = backward(f(params) * a + g(params) * b, params)
        gf = backward(f(params), params)
        gg = backward(g(params), params)
        for name in params:
            expected = a * gf[name] + b * gg[name]
            assert np.max(np.abs(combined[name] - expected)) <= 1e-10

    def test_determinism_bit_identical(self):
        layer_spec = [(4, 6, "relu"), (6, 3, "linear")]
        params = make_mlp_params(layer_spec, seed=5)
        x = substream(5, "data", "det").standard_normal((4, 4))
        y = [0, 1, 2, 0]

        def run():
            node = cross_entropy(forward_mlp(params, layer_spec, x), y)
            value = node.item()
            grads = backward(node, params)
            return value, {n: g.copy() for n, g in grads.items()}

        v1, g1 = run()
        v2, g2 = run()
        assert v1 == v2
        for name in g1:
            assert np.array_equal(g1[name], g2[name])


class TestGradCheck:
    def test_quadratic_exact(self):
        params = ParamSet()
        params.add("x", Tensor(np.array([3.0])))

        def f(p):
            return mse(p["x"] * 1.0, np.zeros(1))

        # f = x^2 with analytic gradient 6 at x = 3; central differences are
        # exact on quadratics up to roundoff.
        assert grad_check(f, params, step=1e-5) <= 1e-9

    def test_linear_exact(self):
        params = ParamSet()
        params.add("x", Tensor(np.array([[1.0, -2.0, 0.5]])))
        a = np.array([[2.0], [1.0], [-3.0]])
        weights = ParamSet({"layer0.weight": Tensor(a), "layer0.bias": Tensor(np.zeros(1))})

        def f(p):
            return forward_mlp(weights, [(3, 1, "linear")], p["x"] * 1.0)

        # Central differences are exact on linear functions.
        assert grad_check(f, params, step=1e-5) <= 1e-10

    def test_three_layer_tanh(self):
        layer_spec = [(5, 5, "tanh"), (5, 3, "tanh"), (3, 2, "linear")]
        params = make_mlp_params(layer_spec, seed=9)
        assert params.total_scalars() >= 50
        x = substream(9, "data", "gc").standard_normal((3, 5))
        y = [0, 1, 1]

        def f(p):
            return cross_entropy(forward_mlp(p, layer_spec, x), y)

        assert grad_check(f, params, step=1e-5) <= 1e-4

    def test_invalid_step(self):
        params = ParamSet()
        params.add("x", Tensor(np.array([1.0])))
        with pytest.raises(ValueError):
            grad_check(lambda p: mse(p["x"] * 1.0, np.zeros(1)), params, step=0.0)


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences_property(seed):
    """Randomized architectures and losses against the FD oracle."""
    rng = substream(seed, "init", "prop-arch")
    depth = int(rng.integers(1, 4))
    dims = [int(rng.integers(2, 7))]
    for _ in range(depth):
        dims.append(int(rng.integers(2, 7)))
    acts = ["relu", "tanh", "linear"]
    layer_spec = [(dims[k], dims[k + 1], acts[int(rng.integers(0, 3))]) for k in range(depth)]
    params = make_mlp_params(layer_spec, seed=seed + 100)
    x = substream(seed, "data", "prop-x").standard_normal((3, dims[0]))
    kind = ["cross_entropy", "mse", "masked_mse"][int(rng.integers(0, 3))]
    out_dim = dims[-1]

    if kind == "cross_entropy":
        y = substream(seed, "data", "prop-y").integers(0, out_dim, size=3)

        def eval_fn(p):
            return cross_entropy(forward_mlp(p, layer_spec, x), y)
    elif kind == "mse":
        t = substream(seed, "data", "prop-t").standard_normal((3, out_dim))

        def eval_fn(p):
            return mse(forward_mlp(p, layer_spec, x), t)
    else:
        t = substream(seed, "data", "prop-t").standard_normal((3, out_dim))
        mask = np.zeros((3, out_dim))
        mask[0, 0] = 1.0
        mask[-1, -1] = 1.0

        def eval_fn(p):
            return masked_mse(forward_mlp(p, layer_spec, x), t, mask)

    # relu kinks can sit near sampled points; tolerance still holds at 1e-4
    assert grad_check(eval_fn, params, step=1e-5) <= 1e-4
