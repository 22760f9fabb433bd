import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmoco.matrix import MatrixError
from xmoco.pseudolabel import (
    RelaxationWarning,
    one_hot_labels,
    oracle_labels,
    oracle_solution,
    sinkhorn_labels,
    sinkhorn_sweeps,
    transport_objective,
)

from reference import grid_oracle_2x2, random_feasible_plan


def random_p(rng, k, n, conc=1.0):
    return rng.dirichlet(np.full(k + 1, conc), size=n).T


def test_k1_polytope_is_a_point():
    rng = np.random.default_rng(0)
    for n in (1, 3, 8):
        p = random_p(rng, 1, n)
        out = sinkhorn_labels(p, xi=0.7, lam=2.0, iters=3)
        np.testing.assert_allclose(out.body, np.full((1, n), 1.0 / n), atol=1e-15)
        np.testing.assert_allclose(out.y, np.vstack([np.full(n, 0.7), np.full(n, 0.3)]), atol=1e-15)


@pytest.mark.parametrize("lam", [0.5, 2.0, 4.0])
def test_uniform_negatives_are_a_fixed_point(lam):
    k, n, xi = 4, 3, 0.8
    p = np.vstack([np.full((1, n), 0.6), np.full((k, n), 0.1)])
    out = sinkhorn_labels(p, xi, lam, 3)
    np.testing.assert_allclose(out.body, 1.0 / (n * k), atol=1e-15)
    np.testing.assert_allclose(out.y[1:], (1 - xi) / k, atol=1e-15)


def test_two_by_two_example_against_grid_oracle():
    p = np.array([[0.5, 0.5], [0.4, 0.1], [0.1, 0.4]])
    cost = -np.log(p[1:] / 2)
    grid = grid_oracle_2x2(cost, 2.0)
    # P_hat ** 2 is proportional to [[16, 1], [1, 16]], already balanced.
    frozen = np.array([[8 / 17, 1 / 34], [1 / 34, 8 / 17]])
    np.testing.assert_allclose(grid, frozen, atol=1e-9)
    out = sinkhorn_labels(p, xi=0.9, lam=2.0, iters=200)
    np.testing.assert_allclose(out.body, frozen, atol=1e-6)
    np.testing.assert_allclose(out.y[1:], 0.2 * frozen, atol=1e-12)
    np.testing.assert_array_equal(out.y[0], [0.9, 0.9])


def test_oracle_uniform_and_k1():
    p = np.vstack([np.full((1, 3), 0.4), np.full((3, 3), 0.2)])
    np.testing.assert_allclose(oracle_solution(p, 2.0), 1 / 9, atol=1e-12)
    np.testing.assert_allclose(oracle_labels(p, 0.9).y, sinkhorn_labels(p, 0.9).y, atol=1e-12)
    p1 = random_p(np.random.default_rng(0), 1, 4)
    np.testing.assert_allclose(oracle_solution(p1, 2.0), 0.25)


def test_oracle_k2_n3_matches_sinkhorn():
    rng = np.random.default_rng(4)
    for _ in range(10):
        p = random_p(rng, 2, 3)
        fast = sinkhorn_labels(p, 0.9, 2.0, iters=500)
        slow = oracle_labels(p, 0.9, 2.0)
        np.testing.assert_allclose(fast.y, slow.y, atol=1e-6)


def test_oracle_log_domain_path_satisfies_marginals():
    rng = np.random.default_rng(8)
    p = random_p(rng, 4, 4)
    y = oracle_solution(p, 2.0)
    np.testing.assert_allclose(y.sum(axis=1), 0.25, atol=1e-12)
    np.testing.assert_allclose(y.sum(axis=0), 0.25, atol=1e-12)
    np.testing.assert_allclose(sinkhorn_labels(p, 0.9, 2.0, 2000).body, y, atol=1e-9)


def test_oracle_scale_guard():
    with pytest.raises(MatrixError, match="oracle scale exceeded"):
        oracle_solution(random_p(np.random.default_rng(0), 5, 5), 2.0)


def test_one_hot_labels():
    np.testing.assert_array_equal(one_hot_labels(3, 2).y, [[1, 1], [0, 0], [0, 0]])
    np.testing.assert_array_equal(one_hot_labels(5, 4).y.sum(axis=0), 1.0)


def test_xi_one_reduces_to_one_hot():
    rng = np.random.default_rng(1)
    for k, n in [(1, 1), (3, 5), (8, 8)]:
        p = random_p(rng, k, n)
        np.testing.assert_array_equal(sinkhorn_labels(p, 1.0, 2.0, 3).y, one_hot_labels(k + 1, n).y)


def test_input_validation():
    p = random_p(np.random.default_rng(0), 3, 2)
    with pytest.raises(MatrixError):
        sinkhorn_labels(p, xi=0.2, lam=2.0)  # below 1/(K+1)
    with pytest.raises(MatrixError):
        sinkhorn_labels(p, xi=1.1, lam=2.0)
    bad = p.copy()
    bad[1, 0] = 0.0
    with pytest.raises(MatrixError, match="log-domain violation"):
        sinkhorn_labels(bad, xi=0.9)
    with pytest.raises(MatrixError):
        sinkhorn_labels(p, 0.9, lam=0.0)
    with pytest.raises(MatrixError):
        sinkhorn_labels(p, 0.9, iters=0)


def test_underflow_floor_keeps_rows_alive():
    p = np.array([[1 - 2e-200, 0.5], [1e-200, 0.25], [1e-200, 0.25]])
    out = sinkhorn_labels(p, 0.9, lam=4.0, iters=50)
    assert np.all(np.isfinite(out.y))
    np.testing.assert_allclose(out.y.sum(axis=0), 1.0, atol=1e-12)


def test_relaxation_diagnostic_without_clamping():
    # xi at its lower bound: one column concentrates the negative mass.
    p = np.array([[0.2, 0.2], [0.79, 0.01], [0.01, 0.79]])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = sinkhorn_labels(p, xi=1 / 3, lam=4.0, iters=100)
    assert any(issubclass(w.category, RelaxationWarning) for w in caught)
    assert out.y[1:].max() > 1 / 3
    np.testing.assert_allclose(out.y.sum(axis=0), 1.0, atol=1e-12)


def test_marginals_random_square():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = random_p(rng, 8, 8)
        out = sinkhorn_labels(p, 0.9, 2.0, 50)
        body = out.body
        assert np.max(np.abs(body.sum(axis=1) - 1 / 8)) < 1e-6
        np.testing.assert_allclose(body.sum(axis=0), 1 / 8, atol=1e-15)
        np.testing.assert_allclose(out.y.sum(axis=0), 1.0, atol=1e-15)
        assert np.all(out.y >= 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_permutation_equivariance(k, n, seed):
    rng = np.random.default_rng(seed)
    p = random_p(rng, k, n)
    base = sinkhorn_labels(p, 0.9, 2.0, 5).y
    cperm = rng.permutation(n)
    np.testing.assert_allclose(sinkhorn_labels(p[:, cperm], 0.9, 2.0, 5).y, base[:, cperm], atol=1e-14)
    rperm = rng.permutation(k)
    p_rows = np.vstack([p[:1], p[1:][rperm]])
    got = sinkhorn_labels(p_rows, 0.9, 2.0, 5).y
    np.testing.assert_allclose(got[1:], base[1:][rperm], atol=1e-14)


def test_sweeps_approach_the_optimum_monotonically():
    # Bregman projections: KL(Y* || Y_t) never increases across half-steps.
    rng = np.random.default_rng(9)
    for _ in range(20):
        p = random_p(rng, 6, 5)
        star = sinkhorn_labels(p, 0.9, 2.0, 5000).body
        kls = [float(np.sum(star * np.log(star / y))) for y in sinkhorn_sweeps(p, 2.0, 40)]
        assert np.all(np.diff(kls) <= 1e-12)
        assert kls[-1] < 1e-8


def test_converged_plan_beats_random_feasible_points():
    rng = np.random.default_rng(12)
    for _ in range(5):
        k, n = 3, 4
        p = random_p(rng, k, n)
        best = transport_objective(sinkhorn_labels(p, 0.9, 2.0, 3000).body, p, 2.0)
        for _ in range(100):
            other = random_feasible_plan(rng, k, n)
            assert best <= transport_objective(other, p, 2.0) + 1e-12
