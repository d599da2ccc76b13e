import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sqlgen import diffengine as F
from sqlgen.gradcheck import gradcheck_all, random_problem


def test_square_example():
    loss, g = F.backward(lambda p: F.square(p["t"]).__getitem__(()), {"t": np.array(3.0)})
    assert loss == 9.0 and g["t"] == 6.0


def test_logsumexp_grad_is_softmax():
    loss, g = F.backward(lambda p: F.logsumexp(p["t"]), {"t": np.zeros(2)})
    assert loss == pytest.approx(np.log(2))
    np.testing.assert_allclose(g["t"], [0.5, 0.5], atol=1e-15)


def test_fd_check_quadratic_and_constant():
    fn = lambda p: F.sum_(F.square(p["t"]))
    assert F.finite_diff_check(fn, {"t": np.array([3.0])}, n_probes=1, step=1e-3) <= 1e-8
    loss, g = F.backward(lambda p: 4.0, {"t": np.ones(3)})
    assert loss == 4.0 and not g["t"].any()
    assert F.finite_diff_check(lambda p: 4.0, {"t": np.ones(3)}) == 0.0


def _mlp_loss(x, y):
    def fn(p):
        h = F.tanh(F.add(F.matmul(x, p["w1"]), p["b1"]))
        out = F.matmul(h, p["w2"])
        return F.sum_(F.mul(F.log_softmax(out), -y)) * (1.0 / len(x))
    return fn


def test_two_layer_model_matches_fd():
    rng = np.random.default_rng(3)
    params = {"w1": rng.normal(size=(4, 5)), "b1": rng.normal(size=5), "w2": rng.normal(size=(5, 3))}
    x = rng.normal(size=(6, 4))
    y = np.eye(3)[rng.integers(0, 3, size=6)]
    assert F.finite_diff_check(_mlp_loss(x, y), params, n_probes=50) <= 1e-4


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    params = {"w": rng.normal(size=(3, 4))}
    f = lambda p: F.sum_(F.tanh(p["w"]))
    g = lambda p: F.logsumexp(F.reshape(p["w"], (12,)))
    _, gf = F.backward(f, params)
    _, gg = F.backward(g, params)
    _, gc = F.backward(lambda p: F.add(F.mul(f(p), a), F.mul(g(p), b)), params)
    np.testing.assert_allclose(gc["w"], a * gf["w"] + b * gg["w"], rtol=0, atol=1e-10)


def test_primitives_on_plain_arrays_return_arrays():
    out = F.log_softmax(np.array([[1.0, 2.0]]))
    assert isinstance(out, np.ndarray)
    np.testing.assert_allclose(np.exp(out).sum(), 1.0)


def test_logsumexp_stable_for_large_inputs():
    assert F.logsumexp(np.array([1000.0, 1000.0])) == pytest.approx(1000 + np.log(2))


def test_non_finite_is_reported():
    with pytest.raises(F.NonFiniteError, match="log"):
        F.backward(lambda p: F.sum_(F.log(p["t"])), {"t": np.array([0.0, 1.0])})


def test_masked_sum_ignores_appended_zero_columns_bitwise():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 5))
    mask = np.ones((3, 5))
    mask[1, 3:] = 0
    wide_x = np.concatenate([x, rng.normal(size=(3, 4))], axis=1)
    wide_mask = np.concatenate([mask, np.zeros((3, 4))], axis=1)
    assert F.masked_mean(x, mask) == F.masked_mean(wide_x, wide_mask)


@pytest.mark.parametrize("arch", ["recurrent_cell", "fixed_window_mlp"])
def test_random_problem_builds(arch):
    model, params, target, batch, gamma = random_problem(np.random.default_rng(1), arch)
    assert model.config.arch == arch and 0.5 <= gamma <= 1.0


def test_gradcheck_all_losses_one_seed():
    errs = gradcheck_all(11)
    assert len(errs) == 12
    assert max(errs.values()) <= 1e-4
