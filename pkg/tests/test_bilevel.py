"""Quadratic bilevel oracle tests.

The 1-D closed form is the hand-derived anchor: with end loss (theta - a)^2,
auxiliary loss (theta - c)^2 and validation loss (theta - v)^2, the inner
optimum is theta* = (w* a + w1 c) / (w* + w1), its weight sensitivity is
d theta* / d w1 = w* (c - a) / (w* + w1)^2, and the chain rule gives the
hypergradient 2 (theta* - v) * d theta* / d w1. For a=0, c=1, v=1 and both
weights 0.5 that is 2 * (0.5 - 1) * 0.5 = -0.5.
"""
import numpy as np
import pytest

from tartan.bilevel import (
    QuadraticTaskSet,
    exact_hypergradient,
    finite_difference_hypergradient,
    identity_hessian_approx,
    neumann_inverse,
    one_dim_instance,
    one_step_approx,
    random_instance,
    solve_inner,
)


class TestSolveInner:
    def test_identity_system(self):
        q = QuadraticTaskSet(a_mats=(np.eye(2),), b_vecs=(np.array([1.0, 2.0]),),
                             a_val=np.eye(2), b_val=np.zeros(2), weights=(1.0,))
        assert np.allclose(solve_inner(q), np.array([1.0, 2.0]), atol=1e-14)

    def test_one_dim_closed_form(self):
        q = one_dim_instance(a=0.0, c=1.0, v=1.0, w_end=0.5, w_aux=0.5)
        assert solve_inner(q)[0] == pytest.approx(0.5, abs=1e-14)
        q2 = one_dim_instance(a=-1.0, c=3.0, v=0.0, w_end=0.25, w_aux=0.75)
        expected = (0.25 * -1.0 + 0.75 * 3.0) / (0.25 + 0.75)
        assert solve_inner(q2)[0] == pytest.approx(expected, abs=1e-14)

    def test_weight_scaling_invariance(self):
        q = random_instance(seed=1, dim=4, n_aux=2)
        theta = solve_inner(q, q.weights)
        scaled = [3.7 * w for w in q.weights]
        assert np.allclose(solve_inner(q, scaled), theta, atol=1e-12)

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError, match="positive definite"):
            QuadraticTaskSet(a_mats=(np.diag([1.0, -1.0]),), b_vecs=(np.zeros(2),),
                             a_val=np.eye(2), b_val=np.zeros(2), weights=(1.0,))

    def test_rejects_asymmetric(self):
        a = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(ValueError, match="symmetric"):
            QuadraticTaskSet(a_mats=(a,), b_vecs=(np.zeros(2),),
                             a_val=np.eye(2), b_val=np.zeros(2), weights=(1.0,))


class TestExactHypergradient:
    def test_one_dim_closed_form_value(self):
        q = one_dim_instance(a=0.0, c=1.0, v=1.0, w_end=0.5, w_aux=0.5)
        assert exact_hypergradient(q, q.weights, 1) == pytest.approx(-0.5, abs=1e-8)

    def test_zero_at_single_task_optimum(self):
        # Validation loss equal to the sole task's loss: gradient of L_val at
        # theta* vanishes, so the hypergradient is 0.
        a = np.diag([2.0, 3.0])
        b = np.array([1.0, -1.0])
        q = QuadraticTaskSet(a_mats=(a,), b_vecs=(b,), a_val=a, b_val=b, weights=(1.0,))
        assert exact_hypergradient(q, q.weights, 0) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(25))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        dim = int(rng.integers(1, 11))
        n_aux = int(rng.integers(0, 4))
        q = random_instance(seed=seed, dim=dim, n_aux=n_aux)
        for i in range(q.num_tasks):
            exact = exact_hypergradient(q, q.weights, i)
            fd = finite_difference_hypergradient(q, q.weights, i, h=1e-5)
            rel = abs(exact - fd) / max(1.0, abs(exact), abs(fd))
            assert rel <= 1e-6


class TestFiniteDifference:
    def test_one_dim_anchor(self):
        q = one_dim_instance(a=0.0, c=1.0, v=1.0, w_end=0.5, w_aux=0.5)
        fd = finite_difference_hypergradient(q, q.weights, 1, h=1e-5)
        assert fd == pytest.approx(-0.5, abs=1e-8)

    def test_h_sweep_v_curve(self):
        q = random_instance(seed=12, dim=6, n_aux=2)
        errors = {}
        for h in (1e-3, 1e-5, 1e-7):
            fd = finite_difference_hypergradient(q, q.weights, 1, h=h)
            exact = exact_hypergradient(q, q.weights, 1)
            errors[h] = abs(fd - exact)
        # Truncation dominates at 1e-3, roundoff at 1e-7; the middle wins.
        assert errors[1e-5] <= errors[1e-3]
        assert errors[1e-5] <= errors[1e-7]

    def test_pd_violation_at_perturbed_weights(self):
        q = QuadraticTaskSet(a_mats=(np.eye(1), -0.5 * np.eye(1) + np.eye(1)),
                             b_vecs=(np.zeros(1), np.zeros(1)),
                             a_val=np.eye(1), b_val=np.ones(1),
                             weights=(1e-9 + 1e-8, 1e-12))
        with pytest.raises(ValueError, match="positive-definite"):
            finite_difference_hypergradient(q, q.weights, 0, h=1e-5)


class TestIdentityHessianApprox:
    def test_exact_when_total_hessian_is_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            b0, b1 = rng.standard_normal(3), rng.standard_normal(3)
            a_val = np.diag(rng.uniform(0.5, 2.0, 3))
            q = QuadraticTaskSet(a_mats=(np.eye(3), np.eye(3)), b_vecs=(b0, b1),
                                 a_val=a_val, b_val=rng.standard_normal(3),
                                 weights=(0.5, 0.5))
            for i in range(2):
                exact = exact_hypergradient(q, q.weights, i)
                approx = identity_hessian_approx(q, q.weights, i)
                assert abs(exact - approx) <= 1e-12

    def test_sign_agreement_on_well_conditioned_family(self):
        agree = considered = 0
        for seed in range(1000):
            q = random_instance(seed=20_000 + seed, dim=5, n_aux=2)
            exact = exact_hypergradient(q, q.weights, 1)
            approx = identity_hessian_approx(q, q.weights, 1)
            if abs(exact) > 1e-3 and abs(approx) > 1e-3:
                considered += 1
                agree += (exact > 0) == (approx > 0)
        assert considered > 500
        assert agree / considered >= 0.9

    def test_degrades_when_ill_conditioned(self):
        # One eigenvalue at 100 makes the identity a poor stand-in for H^{-1}.
        q = QuadraticTaskSet(
            a_mats=(np.diag([100.0, 1.0]), np.diag([1.0, 1.0])),
            b_vecs=(np.array([1.0, 0.0]), np.array([0.0, 1.0])),
            a_val=np.diag([1.0, 1.0]), b_val=np.array([2.0, 2.0]),
            weights=(1.0, 1.0),
        )
        exact = exact_hypergradient(q, q.weights, 1)
        approx = identity_hessian_approx(q, q.weights, 1)
        assert abs(approx - exact) / abs(exact) > 0.5

    def test_meta_head_proxy_mode_runs_and_converges_with_steps(self):
        q = random_instance(seed=5, dim=4, n_aux=1)
        exact_point = identity_hessian_approx(q, q.weights, 1, proxy_mode="exact")
        coarse = identity_hessian_approx(q, q.weights, 1, proxy_mode="meta_head", inner_steps=2)
        fine = identity_hessian_approx(q, q.weights, 1, proxy_mode="meta_head", inner_steps=500)
        assert abs(fine - exact_point) < abs(coarse - exact_point) + 1e-12

    def test_unknown_proxy_mode(self):
        q = random_instance(seed=5, dim=2, n_aux=1)
        with pytest.raises(ValueError, match="proxy"):
            identity_hessian_approx(q, q.weights, 0, proxy_mode="bogus")


class TestOneStepApprox:
    def test_equals_identity_approx_at_optimum(self):
        q = random_instance(seed=2, dim=5, n_aux=2)
        theta = solve_inner(q, q.weights)
        for i in range(q.num_tasks):
            one = one_step_approx(q, q.weights, theta, i, beta=1.0)
            ident = identity_hessian_approx(q, q.weights, i)
            assert one == pytest.approx(ident, abs=1e-12)

    def test_orthogonal_gradients_give_zero(self):
        q = QuadraticTaskSet(a_mats=(np.eye(2), np.eye(2)),
                             b_vecs=(np.zeros(2), np.array([0.0, 1.0])),
                             a_val=np.eye(2), b_val=np.array([1.0, 0.0]),
                             weights=(0.5, 0.5))
        point = np.array([1.0, 1.0])
        g_task = q.a_mats[1] @ point - q.b_vecs[1]   # (1, 0)
        g_val = q.a_val @ point - q.b_val            # (0, 1)
        assert g_task @ g_val == 0.0
        assert one_step_approx(q, q.weights, point, 1, beta=2.0) == 0.0

    def test_linearity_in_beta(self):
        q = random_instance(seed=3, dim=3, n_aux=1)
        theta = np.array([0.3, -0.2, 1.1])
        v1 = one_step_approx(q, q.weights, theta, 1, beta=0.5)
        v2 = one_step_approx(q, q.weights, theta, 1, beta=1.0)
        assert v2 == pytest.approx(2.0 * v1, rel=1e-14)


class TestNeumannInverse:
    def test_identity_truncates(self):
        for k in (0, 1, 5, 20):
            assert np.array_equal(neumann_inverse(np.eye(3), k), np.eye(3))

    def test_monotone_error_decay_inside_region(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            qmat, _ = np.linalg.qr(rng.standard_normal((4, 4)))
            eigs = rng.uniform(0.05, 1.95, size=4)
            h = (qmat * eigs) @ qmat.T
            h = (h + h.T) / 2.0
            inv = np.linalg.inv(h)
            errors = [np.linalg.norm(neumann_inverse(h, k) - inv) for k in (0, 1, 5, 20)]
            assert all(b < a for a, b in zip(errors, errors[1:]))

    def test_divergence_outside_region(self):
        # Companion eigenvalues sit at 1 (zero series error) so the divergent
        # 2.5 mode drives the norm monotonically upward.
        h = np.diag([2.5, 1.0, 1.0])
        inv = np.linalg.inv(h)
        errors = [np.linalg.norm(neumann_inverse(h, k) - inv) for k in (0, 1, 5, 20)]
        assert all(b > a for a, b in zip(errors, errors[1:]))

    def test_k_zero_is_identity_approximation(self):
        h = np.diag([0.5, 1.5])
        assert np.array_equal(neumann_inverse(h, 0), np.eye(2))

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError, match="symmetric"):
            neumann_inverse(np.array([[1.0, 0.2], [0.0, 1.0]]), 3)


def test_all_approximations_coincide_on_identity_at_optimum():
    rng = np.random.default_rng(42)
    b0, b1 = rng.standard_normal(4), rng.standard_normal(4)
    q = QuadraticTaskSet(a_mats=(np.eye(4), np.eye(4)), b_vecs=(b0, b1),
                         a_val=np.eye(4), b_val=rng.standard_normal(4),
                         weights=(0.5, 0.5))
    theta = solve_inner(q, q.weights)
    for i in range(2):
        exact = exact_hypergradient(q, q.weights, i)
        ident = identity_hessian_approx(q, q.weights, i)
        one = one_step_approx(q, q.weights, theta, i, beta=1.0)
        assert abs(exact - ident) <= 1e-12
        assert abs(exact - one) <= 1e-12
