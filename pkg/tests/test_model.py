import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynmf.cube import UsageCube
from dynmf.model import (
    DimensionError,
    LatentModel,
    gradients,
    load_model,
    objective,
    reconstruct_cell,
    reconstruct_slice,
    save_model,
)

from conftest import random_cube, random_model


def brute_objective(model, cube, l2=0.0):
    total = 0.0
    for t in range(cube.T):
        for n in range(cube.N):
            for m in range(cube.M):
                if cube.observed[t, n, m]:
                    pred = sum(model.U_bar[n, k] * model.U_hat[t, n, k] * model.V[m, k] for k in range(model.K))
                    total += (cube.values[t, n, m] - pred) ** 2
    if l2:
        total += l2 * (np.sum(model.U_bar**2) + np.sum(model.V**2) + np.sum(model.U_hat**2))
    return total


def finite_difference(model, cube, h=1e-5, l2=0.0):
    grads = []
    for name in ("U_bar", "V", "U_hat"):
        base = getattr(model, name)
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            def f(delta):
                arrs = {k: getattr(model, k).copy() for k in ("U_bar", "V", "U_hat")}
                arrs[name][idx] += delta
                return objective(LatentModel(**arrs), cube, l2=l2)
            g[idx] = (f(h) - f(-h)) / (2 * h)
        grads.append(g)
    return grads


def test_cell_scalar():
    model = LatentModel([[2.0]], [[4.0]], [[[3.0]]])
    assert reconstruct_cell(model, 0, 0, 0) == 24.0
    np.testing.assert_array_equal(reconstruct_slice(model, 0), [[24.0]])


def test_cell_zero_dynamic_factor(rng):
    model = random_model(rng, 3, 2, 2, 4)
    model.U_hat[1, 2] = 0.0
    assert all(reconstruct_cell(model, 2, m, 1) == 0.0 for m in range(2))


def test_cell_identity_node_factors():
    model = LatentModel([[1.0, 1.0]], [[0.5, -0.25]], [[[1.0, 1.0]]])
    assert reconstruct_cell(model, 0, 0, 0) == 0.25


def test_cell_index_errors(rng):
    model = random_model(rng, 2, 2, 2, 1)
    with pytest.raises(IndexError):
        reconstruct_cell(model, 2, 0, 0)
    with pytest.raises(IndexError):
        reconstruct_slice(model, -1)


def test_slice_matches_cell_loop(rng):
    model = random_model(rng, 3, 4, 2, 2)
    for t in range(2):
        expected = [[reconstruct_cell(model, n, m, t) for m in range(4)] for n in range(3)]
        np.testing.assert_allclose(reconstruct_slice(model, t), expected, rtol=1e-14, atol=1e-14)


def test_slice_with_unit_dynamic_factors(rng):
    model = random_model(rng, 3, 4, 2, 3)
    model.U_hat[:] = 1.0
    np.testing.assert_allclose(reconstruct_slice(model, 1), model.U_bar @ model.V.T)


def test_objective_zero_on_generated_cube(rng):
    model = random_model(rng, 3, 4, 5, 2)
    cube = UsageCube(range(3), range(4), range(5), model.reconstruct())
    assert objective(model, cube) == pytest.approx(0.0, abs=1e-20)


def test_objective_of_zero_model(rng):
    cube = random_cube(rng, 3, 4, 2, mask_fraction=0.3)
    zero = LatentModel(np.zeros((3, 2)), np.zeros((4, 2)), np.zeros((2, 3, 2)))
    assert objective(zero, cube) == pytest.approx(np.sum(cube.values[cube.observed] ** 2), rel=1e-14)


@pytest.mark.parametrize("mask_fraction", [0.0, 0.3])
def test_objective_matches_cell_loop(rng, mask_fraction):
    model = random_model(rng, 3, 4, 2, 2)
    cube = random_cube(rng, 3, 4, 2, mask_fraction)
    assert abs(objective(model, cube) - brute_objective(model, cube)) < 1e-10


def test_objective_l2_penalty(rng):
    model = random_model(rng, 3, 4, 2, 2)
    cube = random_cube(rng, 3, 4, 2)
    assert objective(model, cube, l2=0.3) == pytest.approx(brute_objective(model, cube, l2=0.3), rel=1e-12)


def test_dimension_mismatch(rng):
    model = random_model(rng, 3, 4, 2, 2)
    with pytest.raises(DimensionError):
        objective(model, random_cube(rng, 3, 4, 3))
    with pytest.raises(DimensionError):
        gradients(model, random_cube(rng, 2, 4, 2))


def test_model_validates_shapes():
    with pytest.raises(DimensionError):
        LatentModel(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros((1, 2, 3)))
    with pytest.raises(DimensionError):
        LatentModel(np.zeros((2, 0)), np.zeros((4, 0)), np.zeros((1, 2, 0)))
    with pytest.raises(ValueError, match="non-finite"):
        LatentModel(np.full((1, 1), np.nan), np.zeros((1, 1)), np.zeros((1, 1, 1)))


def test_gradients_zero_at_exact_fit(rng):
    model = random_model(rng, 3, 4, 5, 2)
    cube = UsageCube(range(3), range(4), range(5), model.reconstruct())
    for g in gradients(model, cube):
        np.testing.assert_allclose(g, 0.0, atol=1e-12)


@pytest.mark.parametrize("mask_fraction, l2", [(0.0, 0.0), (0.25, 0.0), (0.0, 0.1)])
def test_gradients_match_finite_differences(rng, mask_fraction, l2):
    model = random_model(rng, 2, 3, 2, 2)
    cube = random_cube(rng, 2, 3, 2, mask_fraction)
    analytic = gradients(model, cube, l2=l2)
    numeric = finite_difference(model, cube, l2=l2)
    for a, n in zip(analytic, numeric):
        rel = np.abs(a - n) / np.maximum(np.abs(n), 1e-6)
        assert rel.max() < 1e-4


def test_gradient_layout(rng):
    model = random_model(rng, 2, 3, 4, 2)
    g_bar, g_V, g_hat = gradients(model, random_cube(rng, 2, 3, 4))
    assert g_bar.shape == (2, 2) and g_V.shape == (3, 2) and g_hat.shape == (4, 2, 2)


def test_duplicated_timesteps_double_static_gradients(rng):
    model = random_model(rng, 3, 4, 2, 2)
    cube = random_cube(rng, 3, 4, 2)
    doubled_model = LatentModel(model.U_bar, model.V, np.concatenate([model.U_hat, model.U_hat]))
    doubled_cube = UsageCube(range(3), range(4), range(4), np.concatenate([cube.values, cube.values]))
    g_bar, g_V, _ = gradients(model, cube)
    d_bar, d_V, _ = gradients(doubled_model, doubled_cube)
    np.testing.assert_allclose(d_bar, 2 * g_bar, rtol=1e-12)
    np.testing.assert_allclose(d_V, 2 * g_V, rtol=1e-12)


def test_masked_values_do_not_matter(rng):
    model = random_model(rng, 3, 4, 2, 2)
    cube = random_cube(rng, 3, 4, 2, mask_fraction=0.4)
    tampered = UsageCube(cube.node_ids, cube.metric_ids, cube.timestamps,
                         np.where(cube.mask, cube.values, 1e3), cube.mask)
    assert objective(model, tampered) == objective(model, cube)
    for a, b in zip(gradients(model, tampered), gradients(model, cube)):
        np.testing.assert_array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3),
    st.floats(0.1, 10.0) | st.floats(-10.0, -0.1), st.integers(0, 2**32 - 1),
)
def test_objective_properties(N, M, T, K, c, seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, N, M, T, K)
    cube = random_cube(rng, N, M, T)
    value = objective(model, cube)
    assert value >= 0
    rescaled = LatentModel(c * model.U_bar, model.V / c, model.U_hat)
    assert objective(rescaled, cube) == pytest.approx(value, rel=1e-9, abs=1e-12)


def test_save_load_model(tmp_path, rng):
    model = random_model(rng, 3, 4, 5, 2)
    model.node_ids = ("a", "b", "c")
    save_model(model, tmp_path / "m")
    assert (tmp_path / "m" / "U_hat" / "t4.csv").exists()
    assert load_model(tmp_path / "m").equals(model)
