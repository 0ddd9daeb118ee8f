import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advdmd.netcore import (
    NetSpec,
    OptState,
    ParamSet,
    backward,
    finite_difference_grads,
    forward,
    global_norm,
    grad_check,
    init_params,
    max_relative_error,
    optimizer_step,
    scaled_sum,
)


def _net(dims=(3, 5, 4, 2), act="tanh", seed=0):
    spec = NetSpec(dims, act)
    return spec, init_params(spec, np.random.default_rng(seed))


@pytest.mark.parametrize("act", ["tanh", "silu", "identity"])
def test_grad_check_all_activations(act):
    spec, params = _net(act=act)
    x = np.random.default_rng(1).standard_normal((6, 3))
    assert grad_check(spec, params, x, h=1e-4) < 1e-6


def test_grad_check_rejects_bad_step():
    spec, params = _net()
    with pytest.raises(ValueError):
        grad_check(spec, params, np.zeros((2, 3)), h=0.0)
    with pytest.raises(ValueError):
        grad_check(spec, params, np.zeros((2, 3)), h=0.1)


def test_two_layer_linear_chain_matches_hand_derivation():
    # out = (x W0 + b0) W1 + b1; d<g, out>/dW1 = h^T g, d/dW0 = x^T (g W1^T)
    spec = NetSpec((2, 3, 2), "identity")
    rng = np.random.default_rng(4)
    params = init_params(spec, rng)
    x = rng.standard_normal((5, 2))
    g = rng.standard_normal((5, 2))
    out, trace = forward(spec, params, x)
    h = x @ params["W0"] + params["b0"]
    np.testing.assert_allclose(out, h @ params["W1"] + params["b1"], rtol=1e-12)
    g_in, grads = backward(spec, params, trace, g)
    gh = g @ params["W1"].T
    np.testing.assert_allclose(grads["W1"], h.T @ g, rtol=1e-12)
    np.testing.assert_allclose(grads["b1"], g.sum(0), rtol=1e-12)
    np.testing.assert_allclose(grads["W0"], x.T @ gh, rtol=1e-12)
    np.testing.assert_allclose(grads["b0"], gh.sum(0), rtol=1e-12)
    np.testing.assert_allclose(g_in, gh @ params["W0"].T, rtol=1e-12)


def test_hidden_cotangents_match_finite_differences():
    spec, params = _net(dims=(3, 6, 6, 2), act="silu", seed=2)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 3))
    hc = {0: rng.standard_normal((4, 6)), 1: rng.standard_normal((4, 6))}

    def f():
        _, tr = forward(spec, params, x)
        return float(np.sum(hc[0] * tr.hidden(0)) + np.sum(hc[1] * tr.hidden(1)))

    _, trace = forward(spec, params, x)
    _, analytic = backward(spec, params, trace, None, hc)
    numeric = finite_difference_grads(f, params, 1e-5)
    assert max_relative_error(analytic, numeric) < 1e-7


def test_input_cotangent_matches_finite_differences():
    spec, params = _net(act="silu", seed=7)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((3, 3))
    g = rng.standard_normal((3, 2))
    _, trace = forward(spec, params, x)
    g_in, _ = backward(spec, params, trace, g)
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += 1e-6
        xm[idx] -= 1e-6
        num[idx] = (np.sum(g * forward(spec, params, xp)[0]) - np.sum(g * forward(spec, params, xm)[0])) / 2e-6
    np.testing.assert_allclose(g_in, num, rtol=1e-6, atol=1e-9)


def test_stale_trace_is_rejected():
    spec, params = _net()
    x = np.ones((2, 3))
    _, trace = forward(spec, params, x)
    _, grads = backward(spec, params, trace, np.ones((2, 2)))
    optimizer_step(params, grads, OptState.for_params(params), 1e-3)
    with pytest.raises(ValueError, match="stale"):
        backward(spec, params, trace, np.ones((2, 2)))
    other = params.copy()
    with pytest.raises(ValueError):
        backward(spec, other, trace, np.ones((2, 2)))


def test_forward_rejects_wrong_width():
    spec, params = _net()
    with pytest.raises(ValueError):
        forward(spec, params, np.ones((2, 4)))


def test_netspec_validation_and_roundtrip():
    with pytest.raises(ValueError):
        NetSpec((2, 2), "tanh")
    with pytest.raises(ValueError):
        NetSpec((2, 3, 2), "relu")
    spec = NetSpec((4, 8, 8, 1), "tanh")
    assert spec.n_hidden == 2 and spec.in_dim == 4 and spec.out_dim == 1
    assert NetSpec.from_dict(spec.to_dict()) == spec


def test_zero_last_layer_outputs_zero():
    spec = NetSpec((3, 4, 1), "tanh")
    params = init_params(spec, np.random.default_rng(0), zero_last=True)
    out, _ = forward(spec, params, np.random.default_rng(1).standard_normal((5, 3)))
    assert np.all(out == 0.0)


def test_first_adam_step_moves_by_lr_times_sign():
    # bias-corrected m / sqrt(v) equals g / |g| on the first step
    spec, params = _net()
    before = params.copy()
    grads = params.zeros_like()
    rng = np.random.default_rng(0)
    for k in grads:
        grads[k][...] = rng.standard_normal(grads[k].shape)
    optimizer_step(params, grads, OptState.for_params(params), 0.01)
    for k in params:
        expected = before[k] - 0.01 * grads[k] / (np.abs(grads[k]) + 1e-8)
        np.testing.assert_allclose(params[k], expected, rtol=1e-12, atol=1e-15)


def test_adam_rejects_non_finite_gradient_and_leaves_params():
    spec, params = _net()
    before = params.copy()
    grads = params.zeros_like()
    grads["W1"][0, 0] = np.nan
    state = OptState.for_params(params)
    with pytest.raises(FloatingPointError, match="W1"):
        optimizer_step(params, grads, state, 0.1)
    assert params.equal(before) and state.step == 0


def test_paramset_copy_is_independent():
    _, params = _net()
    cp = params.copy()
    cp["W0"][0, 0] += 1.0
    assert not params.equal(cp)
    with pytest.raises(KeyError):
        params.add("W0", np.zeros(1))


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_scaled_sum_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    p = ParamSet({"u": rng.standard_normal(3), "w": rng.standard_normal((2, 2))})
    q = ParamSet({"u": rng.standard_normal(3), "w": rng.standard_normal((2, 2))})
    s = scaled_sum([(a, p), (b, q)])
    for k in p:
        np.testing.assert_allclose(s[k], a * p[k] + b * q[k], rtol=1e-12, atol=1e-12)


def test_global_norm():
    p = ParamSet({"a": np.array([3.0]), "b": np.array([[4.0]])})
    assert global_norm(p) == 5.0
