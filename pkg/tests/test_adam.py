import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dynmf.adam import AdamState, adam_step


def test_first_step_is_alpha():
    state = AdamState(1)
    _, theta = adam_step(state, np.zeros(1), np.ones(1))
    assert abs(theta[0] + 0.001) < 1e-8
    assert abs(abs(theta[0]) - state.alpha) < 1e-6


def test_inputs_untouched_by_default():
    state, params, grad = AdamState(2), np.array([1.0, 2.0]), np.array([0.5, -0.5])
    new_state, new_params = adam_step(state, params, grad)
    assert state.step_count == 0 and new_state.step_count == 1
    assert params.tolist() == [1.0, 2.0]
    assert new_params is not params


def test_inplace_updates():
    state, params = AdamState(2), np.zeros(2)
    out_state, out_params = adam_step(state, params, np.ones(2), inplace=True)
    assert out_state is state and out_params is params
    assert state.step_count == 1 and params[0] < 0


def test_zero_gradient_no_move():
    _, theta = adam_step(AdamState(3), np.array([1.0, -2.0, 3.0]), np.zeros(3))
    assert theta.tolist() == [1.0, -2.0, 3.0]


def test_quadratic_converges():
    state, theta = AdamState(1), np.zeros(1)
    for _ in range(10_000):
        adam_step(state, theta, 2 * (theta - 3.0), inplace=True)
    assert abs(theta[0] - 3.0) < 0.01


def test_errors():
    with pytest.raises(ValueError, match="length"):
        adam_step(AdamState(2), np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError, match="non-finite"):
        adam_step(AdamState(2), np.zeros(2), np.array([0.0, np.nan]))
    with pytest.raises(ValueError):
        AdamState(1, alpha=0.0)
    with pytest.raises(ValueError):
        AdamState(1, beta1=1.0)
    with pytest.raises(ValueError):
        AdamState(1, eps=0.0)


grads = arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6, allow_nan=False))


@settings(max_examples=100, deadline=None)
@given(grads)
def test_first_step_sign_and_bound(g):
    state = AdamState(g.size)
    _, theta = adam_step(state, np.zeros(g.size), g)
    nz = g != 0
    assert np.all(np.sign(theta[nz]) == -np.sign(g[nz]))
    assert np.all(np.abs(theta) <= state.alpha * (1 + 1e-6))
    assert np.all(theta[~nz] == 0)


@settings(max_examples=50, deadline=None)
@given(grads, st.integers(0, 2**32 - 1))
def test_deterministic(g, seed):
    rng = np.random.default_rng(seed)
    state = AdamState(g.size, step_count=3, m=rng.normal(size=g.size), v=rng.random(g.size))
    params = rng.normal(size=g.size)
    s1, p1 = adam_step(state, params, g)
    s2, p2 = adam_step(state, params, g)
    assert p1.tobytes() == p2.tobytes()
    assert s1.m.tobytes() == s2.m.tobytes() and s1.v.tobytes() == s2.v.tobytes()
    assert np.all(s1.v >= 0)
