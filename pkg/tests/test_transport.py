import itertools

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from protoreg.autodiff import DTensor, ShapeError, grad_check
from protoreg.transport import (OTConfig, emd, exact_emd_oracle, oracle_check,
                                pairwise_cost, sinkhorn_log)

CONVERGED = OTConfig(eps=0.1, max_iters=100000, marginal_tol=1e-7, accelerate=True)


# ---------------------------------------------------------------------------
# pairwise cost


def test_cost_diagonal_zero_for_identical_grids():
    rng = np.random.default_rng(0)
    z = rng.uniform(size=(2, 2, 3))
    C = pairwise_cost(DTensor(z), DTensor(z)).data
    np.testing.assert_array_equal(np.diag(C), np.zeros(4))
    assert np.all(C >= 0.0)


def test_cost_three_four_five():
    z = np.array([[[0.0, 0.0]]])
    p = np.array([[[3.0, 4.0]]])
    C = pairwise_cost(DTensor(z), DTensor(p)).data
    np.testing.assert_array_equal(C, [[5.0]])


def test_cost_matches_double_loop_oracle():
    rng = np.random.default_rng(1)
    z = rng.uniform(size=(2, 2, 3))
    p = rng.uniform(size=(2, 2, 3))
    C = pairwise_cost(DTensor(z), DTensor(p)).data
    zf, pf = z.reshape(4, 3), p.reshape(4, 3)
    expected = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            expected[i, j] = np.sqrt(((zf[i] - pf[j]) ** 2).sum())
    np.testing.assert_allclose(C, expected, rtol=0, atol=1e-15)


def test_cost_transpose_symmetry():
    rng = np.random.default_rng(2)
    z = rng.uniform(size=(2, 2, 3))
    p = rng.uniform(size=(2, 2, 3))
    a = pairwise_cost(DTensor(z), DTensor(p)).data
    b = pairwise_cost(DTensor(p), DTensor(z)).data
    np.testing.assert_array_equal(a, b.T)


def test_cost_shape_mismatch():
    with pytest.raises(ShapeError):
        pairwise_cost(DTensor(np.ones((2, 2, 3))), DTensor(np.ones((2, 2, 4))))


# ---------------------------------------------------------------------------
# sinkhorn


def test_single_cell_plan_is_all_mass():
    plan = sinkhorn_log(DTensor([[5.0]]), CONVERGED)
    np.testing.assert_allclose(plan.Q.data, [[1.0]], rtol=0, atol=1e-12)
    assert np.isclose(emd(DTensor([[5.0]]), plan).item(), 5.0, atol=1e-12)


def test_zero_cost_uniform_plan():
    plan = sinkhorn_log(DTensor(np.zeros((2, 2))), CONVERGED)
    np.testing.assert_allclose(plan.Q.data, np.full((2, 2), 0.25), rtol=0, atol=1e-12)
    assert emd(DTensor(np.zeros((2, 2))), plan).item() == 0.0


def test_symmetric_two_by_two_fixed_point():
    # C = [[0,1],[1,0]], eps=0.1: Q = [[a,b],[b,a]] with
    # a = 0.5/(1+e^-10), b = 0.5 e^-10/(1+e^-10), solved by hand from the
    # symmetric fixed point of the rescaling updates.
    C = np.array([[0.0, 1.0], [1.0, 0.0]])
    plan = sinkhorn_log(DTensor(C), CONVERGED)
    e10 = np.exp(-10.0)
    a = 0.5 / (1.0 + e10)
    b = 0.5 * e10 / (1.0 + e10)
    np.testing.assert_allclose(plan.Q.data, [[a, b], [b, a]], rtol=1e-12)
    cost = emd(DTensor(C), plan).item()
    np.testing.assert_allclose(cost, e10 / (1.0 + e10), rtol=1e-12)
    assert abs(cost - 4.54e-5) < 1e-7


def test_marginal_feasibility_16x16():
    rng = np.random.default_rng(3)
    for _ in range(5):
        C = rng.uniform(0.0, 2.0, size=(16, 16))
        plan = sinkhorn_log(DTensor(C), CONVERGED)
        q = plan.Q.data
        assert np.max(np.abs(q.sum(axis=1) - plan.w1)) <= 1e-6
        assert np.max(np.abs(q.sum(axis=0) - plan.w2)) <= 1e-6
        assert np.all(q >= 0.0)


def test_batched_solve_matches_single():
    rng = np.random.default_rng(4)
    Cs = rng.uniform(0.0, 2.0, size=(3, 4, 4))
    plan = sinkhorn_log(DTensor(Cs), OTConfig(eps=0.1, max_iters=300, marginal_tol=0.0))
    for i in range(3):
        solo = sinkhorn_log(DTensor(Cs[i]), OTConfig(eps=0.1, max_iters=300, marginal_tol=0.0))
        np.testing.assert_allclose(plan.Q.data[i], solo.Q.data, rtol=0, atol=1e-14)


def test_input_validation():
    with pytest.raises(ValueError):
        sinkhorn_log(DTensor([[np.nan, 0.0], [0.0, 0.0]]), CONVERGED)
    with pytest.raises(ValueError):
        sinkhorn_log(DTensor(np.zeros((2, 2))), CONVERGED, w1=np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        sinkhorn_log(DTensor(np.zeros((2, 2))), CONVERGED, w1=np.array([0.7, 0.7]))


def test_early_stop_records_iterations():
    plan = sinkhorn_log(DTensor(np.zeros((3, 3))), OTConfig(eps=0.1, max_iters=25))
    assert plan.iters_run == 1  # zero cost converges immediately
    plan_full = sinkhorn_log(DTensor(np.zeros((3, 3))),
                             OTConfig(eps=0.1, max_iters=7, marginal_tol=0.0))
    assert plan_full.iters_run == 7


# ---------------------------------------------------------------------------
# exact oracle


def test_oracle_identity_permutation():
    assert exact_emd_oracle(np.array([[0.0, 1.0], [1.0, 0.0]])) == 0.0


def test_oracle_all_ones():
    for m in (2, 3, 5):
        assert exact_emd_oracle(np.ones((m, m))) == 1.0


def test_oracle_matches_assignment_solver():
    rng = np.random.default_rng(5)
    for _ in range(20):
        C = rng.uniform(0.0, 3.0, size=(4, 4))
        rows, cols = linear_sum_assignment(C)
        np.testing.assert_allclose(exact_emd_oracle(C), C[rows, cols].sum() / 4.0,
                                   rtol=0, atol=1e-12)


def test_oracle_guard():
    with pytest.raises(ValueError):
        exact_emd_oracle(np.ones((7, 7)))


# ---------------------------------------------------------------------------
# solver properties


def test_sandwich_bound_small_matrices():
    res = oracle_check(m=4, trials=20, eps_values=(0.01, 0.1), seed=6)
    assert res.passed, res.violations[:3]
    assert res.max_residual <= 1e-6


def test_monotone_sharpening_in_eps():
    rng = np.random.default_rng(7)
    for _ in range(3):
        C = DTensor(rng.uniform(0.0, 2.0, size=(5, 5)))
        costs = []
        for eps in (1.0, 0.3, 0.1, 0.03, 0.01):
            plan = sinkhorn_log(C, OTConfig(eps=eps, max_iters=300000, marginal_tol=1e-8,
                                            accelerate=True))
            costs.append(emd(C, plan).item())
        # decreasing eps never increases the transport cost
        for lo, hi in zip(costs[1:], costs[:-1]):
            assert lo <= hi + 1e-12


def test_unrolled_and_plain_paths_bitwise_equal():
    rng = np.random.default_rng(11)
    Cdat = rng.uniform(0.0, 2.0, size=(2, 4, 4))
    cfg = OTConfig(eps=0.1, max_iters=50, marginal_tol=1e-6)
    plain = sinkhorn_log(DTensor(Cdat), cfg)
    taped = sinkhorn_log(DTensor(Cdat, requires_grad=True), cfg)
    assert plain.iters_run == taped.iters_run
    np.testing.assert_array_equal(plain.Q.data, taped.Q.data)


def test_permutation_equivariance():
    rng = np.random.default_rng(8)
    C = rng.uniform(0.0, 2.0, size=(5, 5))
    sigma = rng.permutation(5)
    tau = rng.permutation(5)
    base = sinkhorn_log(DTensor(C), CONVERGED).Q.data
    permuted = sinkhorn_log(DTensor(C[np.ix_(sigma, tau)]), CONVERGED).Q.data
    np.testing.assert_allclose(permuted, base[np.ix_(sigma, tau)], rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# gradients


def test_emd_gradient_unrolled_matches_finite_differences():
    rng = np.random.default_rng(9)
    C = DTensor(rng.uniform(0.5, 2.0, size=(4, 4)), requires_grad=True)
    cfg = OTConfig(eps=0.1, max_iters=25, marginal_tol=0.0)  # fixed 25 iterations

    def build(C):
        return emd(C, sinkhorn_log(C, cfg))

    report = grad_check(build, [C], h=1e-5, tol=1e-3)
    assert report.passed, repr(report)


def test_detached_plan_mode_gradient_only_through_cost():
    rng = np.random.default_rng(10)
    Cdat = rng.uniform(0.5, 2.0, size=(3, 3))
    cfg = OTConfig(eps=0.1, max_iters=200, marginal_tol=0.0, grad_mode="detached-plan")
    C = DTensor(Cdat, requires_grad=True)
    plan = sinkhorn_log(C, cfg)
    assert not plan.Q.requires_grad
    emd(C, plan).backward()
    # with Q frozen, d(emd)/dC is exactly Q
    np.testing.assert_array_equal(C.grad, plan.Q.data)


def test_emd_shape_check():
    plan = sinkhorn_log(DTensor(np.zeros((2, 2))), CONVERGED)
    with pytest.raises(ShapeError):
        emd(DTensor(np.zeros((3, 3))), plan)
