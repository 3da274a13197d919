import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgcp.cp_model import (
    DegenerateIterateError,
    FactorSet,
    evaluate,
    gamma,
    grad_norm,
    gradient,
    gram_matrices,
    normalize_and_sort,
    objective,
    random_factors,
    reconstruct,
)
from mgcp.tensor_core import DenseTensor, SparseTensor

from support import fd_gradient, reconstruct_oracle


def random_instance(rng, shape, rank):
    return DenseTensor(rng.standard_normal(shape)), FactorSet(
        [rng.standard_normal((s, rank)) for s in shape])


# -- reconstruct ---------------------------------------------------------------


def test_reconstruct_basis_vectors():
    e1 = np.array([[1.0], [0.0], [0.0]])
    t = reconstruct(FactorSet([e1, e1, e1]))
    expected = np.zeros((3, 3, 3))
    expected[0, 0, 0] = 1.0
    np.testing.assert_array_equal(t.data, expected)


def test_reconstruct_matches_scalar_loop(rng):
    f = FactorSet([rng.standard_normal((s, 2)) for s in (3, 4, 2)])
    np.testing.assert_allclose(reconstruct(f).data, reconstruct_oracle(f.factors),
                               rtol=1e-13, atol=1e-14)


def test_exact_representation_has_zero_objective(rng):
    f = FactorSet([rng.standard_normal((s, 2)) for s in (3, 4, 5)])
    z = reconstruct(f)
    assert objective(z, f) <= 1e-20 * np.sum(z.data ** 2)


# -- objective -----------------------------------------------------------------


def test_zero_factors_give_half_norm_squared(rng):
    z = DenseTensor(rng.standard_normal((3, 4, 2)))
    f = FactorSet([np.zeros((s, 2)) for s in z.shape])
    assert objective(z, f) == pytest.approx(0.5 * np.sum(z.data ** 2), rel=1e-14)


def test_objective_matches_densified_direct(rng):
    z, f = random_instance(rng, (4, 3, 5), 3)
    direct = 0.5 * np.sum((z.data - reconstruct_oracle(f.factors)) ** 2)
    assert objective(z, f) == pytest.approx(direct, rel=1e-12)


@given(st.lists(st.integers(1, 5), min_size=2, max_size=4).map(tuple),
       st.integers(1, 3), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_sparse_objective_equals_dense(shape, rank, seed):
    rng = np.random.default_rng(seed)
    arr = rng.standard_normal(shape) * (rng.random(shape) < 0.3)
    f = FactorSet([rng.standard_normal((s, rank)) for s in shape])
    d = objective(DenseTensor(arr), f)
    s = objective(SparseTensor.from_dense(arr), f)
    assert s == pytest.approx(d, rel=1e-12, abs=1e-12)


def test_objective_shape_mismatch(rng):
    z = DenseTensor(rng.standard_normal((3, 4)))
    with pytest.raises(ValueError):
        objective(z, FactorSet([np.ones((3, 1)), np.ones((5, 1))]))


# -- gradient ------------------------------------------------------------------


def test_gradient_vanishes_at_exact_decomposition(rng):
    f = FactorSet([rng.standard_normal((s, 2)) for s in (3, 4, 5)])
    z = reconstruct(f)
    znorm = np.linalg.norm(z.data)
    for g in gradient(z, f).grads:
        assert np.abs(g).max() <= 1e-10 * znorm


def test_gradient_matches_finite_differences_4x3x5(rng):
    z, f = random_instance(rng, (4, 3, 5), 2)
    fd = fd_gradient(lambda fs: objective(z, fs), f.factors)
    for g, d in zip(gradient(z, f).grads, fd):
        np.testing.assert_allclose(g, d, rtol=1e-5, atol=1e-7)


def test_scaling_indeterminacy(rng):
    z, f = random_instance(rng, (3, 4, 2), 2)
    g = f.copy()
    g.factors[0][:, 1] *= 3.0
    g.factors[1][:, 1] /= 3.0
    np.testing.assert_allclose(reconstruct(g).data, reconstruct(f).data, rtol=1e-13, atol=1e-14)
    assert objective(z, g) == pytest.approx(objective(z, f), rel=1e-13)


@given(st.lists(st.integers(1, 6), min_size=3, max_size=4).map(tuple),
       st.integers(1, 3), st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_gamma_is_symmetric_psd(shape, rank, seed):
    rng = np.random.default_rng(seed)
    grams = gram_matrices([rng.standard_normal((s, rank)) for s in shape])
    for n in range(len(shape)):
        gam = gamma(grams, n)
        np.testing.assert_allclose(gam, gam.T, atol=1e-13 * max(1.0, np.abs(gam).max()))
        assert np.linalg.eigvalsh(gam).min() >= -1e-10 * max(1.0, np.abs(gam).max())


# -- grad_norm -----------------------------------------------------------------


def test_grad_norm_exact_solution(rng):
    f = FactorSet([rng.standard_normal((s, 2)) for s in (3, 4, 5)])
    z = reconstruct(f)
    assert grad_norm(z, f) <= 1e-12
    # doubling Z: the implied solution doubles one factor; g stays ~0
    f2 = f.copy()
    f2.factors[0] *= 2.0
    z2 = DenseTensor(2.0 * z.data)
    assert grad_norm(z2, f2) <= 1e-12


def test_grad_norm_matches_hand_assembly(rng):
    z, f = random_instance(rng, (3, 4, 2), 2)
    grads = gradient(z, f).grads
    expected = np.sqrt(sum(np.sum(g ** 2) for g in grads)) / np.linalg.norm(z.data)
    assert grad_norm(z, f) == pytest.approx(expected, rel=1e-14)


def test_grad_norm_zero_tensor():
    with pytest.raises(ValueError):
        grad_norm(DenseTensor.zeros((2, 2)), FactorSet([np.ones((2, 1))] * 2))


def test_evaluate_agrees_with_separate_calls(rng):
    z, f = random_instance(rng, (3, 4, 2), 2)
    for t in (z, SparseTensor.from_dense(z)):
        g, fval = evaluate(t, f)
        assert g == pytest.approx(grad_norm(t, f), rel=1e-13)
        assert fval == pytest.approx(objective(t, f), rel=1e-12)


# -- normalization ---------------------------------------------------------------


def test_normalize_hand_example():
    f = FactorSet([np.array([[2.0], [0.0]]), np.array([[0.0], [0.5]])])
    out = normalize_and_sort(f)
    np.testing.assert_allclose(out.lambdas, [1.0], rtol=1e-15)
    np.testing.assert_allclose(out.factors[0], [[1.0], [0.0]], rtol=1e-15)
    np.testing.assert_allclose(out.factors[1], [[0.0], [1.0]], rtol=1e-15)


def test_normalize_invariants(rng):
    f = random_factors((3, 5, 4, 2), 3, rng)
    out = normalize_and_sort(f)
    np.testing.assert_allclose(reconstruct(out).data, reconstruct(f).data, rtol=1e-13, atol=1e-15)
    norms = np.array([np.linalg.norm(a, axis=0) for a in out.factors])
    np.testing.assert_allclose(norms, np.broadcast_to(out.lambdas, norms.shape), rtol=1e-12)
    assert np.all(np.diff(out.lambdas) <= 0.0)
    assert np.all(out.lambdas >= 0.0)


def test_normalize_fixed_point_up_to_order(rng):
    out = normalize_and_sort(random_factors((3, 4, 5), 3, rng))
    again = normalize_and_sort(out)
    for a, b in zip(out.factors, again.factors):
        np.testing.assert_allclose(a, b, rtol=1e-14)


def test_normalize_ties_keep_component_order():
    a = np.array([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0]])
    b = np.array([[1.0, 2.0, 1.0], [1.0, 0.0, 3.0]])
    out = normalize_and_sort(FactorSet([a, b]))
    # weights: sqrt(1*sqrt2), 2, sqrt(1*sqrt10); order 1, 2, 0
    np.testing.assert_allclose(out.lambdas, [2.0, 10 ** 0.25, 2 ** 0.25])
    tie = FactorSet([np.eye(2), np.eye(2)])
    out = normalize_and_sort(tie)
    np.testing.assert_array_equal(out.factors[0], np.eye(2))


def test_normalize_zero_column_raises():
    f = FactorSet([np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]])])
    with pytest.raises(DegenerateIterateError):
        normalize_and_sort(f)


def test_factor_set_validation():
    with pytest.raises(ValueError):
        FactorSet([np.ones((2, 2)), np.ones((2, 3))])
    with pytest.raises(ValueError):
        FactorSet([])
    f = FactorSet([np.ones((2, 2)), np.ones((3, 2))])
    assert f.rank == 2 and f.ndim == 2 and f.shape == (2, 3)
