import mpmath
import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings
from hypothesis import strategies as st

from settransport import kernels, numerics
from settransport import sinkhorn as sk

TIGHT = sk.SinkhornSettings(eps=1.0, tol=1e-12, max_iter=5000)


def mp_sinkhorn_plan(cost, g, h, eps, iters=500):
    """Naive matrix-scaling oracle at 60 significant digits.

    Column update first, then rows, matching the solver's sweep order so
    intermediate (unconverged) states are comparable too.
    """
    n, m = cost.shape
    with mpmath.workdps(60):
        e = mpmath.mpf(eps)
        kmat = [[mpmath.e ** (-mpmath.mpf(float(cost[i, j])) / e)
                 for j in range(m)] for i in range(n)]
        u = [mpmath.mpf(1)] * n
        v = [mpmath.mpf(1)] * m
        for _ in range(iters):
            v = [mpmath.mpf(float(h[j]))
                 / mpmath.fsum(kmat[i][j] * u[i] for i in range(n))
                 for j in range(m)]
            u = [mpmath.mpf(float(g[i]))
                 / mpmath.fsum(kmat[i][j] * v[j] for j in range(m))
                 for i in range(n)]
        return np.array([[float(u[i] * kmat[i][j] * v[j]) for j in range(m)]
                         for i in range(n)])


def brute_force_uniform(cost):
    import itertools

    n = cost.shape[0]
    best = np.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, sum(cost[i, p] for i, p in enumerate(perm)) / n)
    return best


class TestFrozenInstance:
    """2x2 swap cost at eps=1: the plan has the closed form
    exp(-C/eps) row-normalized after symmetric scaling."""

    cost = np.array([[0.0, 1.0], [1.0, 0.0]])

    def test_plan_entries(self):
        plan = sk.sinkhorn(self.cost, settings=TIGHT)
        assert plan.matrix[0, 0] == pytest.approx(0.36552928931500245, abs=1e-15)
        assert plan.matrix[0, 1] == pytest.approx(0.13447071068499755, abs=1e-15)
        # symmetric instance: plan is bisymmetric
        assert plan.matrix[0, 0] == pytest.approx(plan.matrix[1, 1], abs=1e-12)

    def test_cost_value(self):
        plan = sk.sinkhorn(self.cost, settings=TIGHT)
        assert sk.ot_cost(plan, self.cost) == pytest.approx(
            0.2689414213699951, abs=1e-15)

    def test_closed_form_from_sigmoid(self):
        # off-diagonal mass = 0.5 * sigmoid(-1/eps), derivable by hand
        plan = sk.sinkhorn(self.cost, settings=TIGHT)
        want = 0.5 / (1.0 + np.exp(1.0))
        assert plan.matrix[0, 1] == pytest.approx(want, abs=1e-15)


class TestAgainstExtendedPrecision:
    def test_random_rectangular_instance(self):
        rng = numerics.rng_from_seed(0)
        cost = rng.random((3, 4))
        g = np.full(3, 1 / 3)
        h = rng.random(4) + 0.2
        h /= h.sum()
        oracle = mp_sinkhorn_plan(cost, g, h, eps=0.3)
        plan = sk.sinkhorn(cost, sk.Measure(g), sk.Measure(h),
                           sk.SinkhornSettings(eps=0.3, tol=1e-14,
                                               max_iter=20000))
        assert np.allclose(plan.matrix, oracle, atol=1e-12)

    def test_small_eps_instance(self):
        rng = numerics.rng_from_seed(1)
        cost = rng.random((4, 4))
        g = np.full(4, 0.25)
        oracle = mp_sinkhorn_plan(cost, g, g, eps=0.05, iters=3000)
        plan = sk.sinkhorn(cost, settings=sk.SinkhornSettings(
            eps=0.05, tol=1e-14, max_iter=50000))
        assert np.allclose(plan.matrix, oracle, atol=1e-11)


class TestExactOracle:
    def test_zero_diagonal_prefers_identity(self):
        cost = 1.0 - np.eye(3)
        value, perm = sk.exact_ot_uniform(cost)
        assert value == pytest.approx(0.0, abs=0)
        assert np.array_equal(perm, np.arange(3))

    def test_matches_independent_enumeration(self):
        rng = numerics.rng_from_seed(2)
        for n in (2, 3, 4, 5):
            cost = rng.random((n, n))
            value, perm = sk.exact_ot_uniform(cost)
            assert value == pytest.approx(brute_force_uniform(cost), abs=1e-15)
            # returned permutation achieves the value
            assert sum(cost[i, p] for i, p in enumerate(perm)) / n == \
                pytest.approx(value, abs=1e-15)

    def test_size_guard(self):
        with pytest.raises(ValueError, match="too-large-for-oracle"):
            sk.exact_ot_uniform(np.zeros((8, 8)))
        with pytest.raises(ValueError, match="shape"):
            sk.exact_ot_uniform(np.zeros((2, 3)))

    def test_entropic_limit_approaches_exact(self):
        rng = numerics.rng_from_seed(3)
        cost = rng.random((4, 4))
        exact, _ = sk.exact_ot_uniform(cost)
        plan = sk.sinkhorn(cost, settings=sk.SinkhornSettings(
            eps=1e-3, tol=1e-10, max_iter=200000, check_every=50))
        assert sk.ot_cost(plan, cost) == pytest.approx(
            exact, abs=5e-3 * np.log(16))


class TestFeasibility:
    @given(st.integers(0, 2**32 - 1))
    @hyp_settings(max_examples=25, deadline=None)
    def test_random_instances_converge(self, seed):
        rng = numerics.rng_from_seed(seed)
        n = int(rng.integers(2, 20))
        m = int(rng.integers(2, 20))
        cost = rng.random((n, m))
        g = rng.random(n) + 0.1
        g /= g.sum()
        h = rng.random(m) + 0.1
        h /= h.sum()
        plan = sk.sinkhorn(cost, sk.Measure(g), sk.Measure(h),
                           sk.SinkhornSettings(eps=0.2, tol=1e-8,
                                               max_iter=5000))
        assert plan.converged
        assert plan.marginal_violation <= 1e-8
        assert plan.matrix.min() >= 0.0
        assert np.allclose(plan.matrix.sum(axis=1), g, atol=1e-8)
        assert np.allclose(plan.matrix.sum(axis=0), h, atol=1e-8)

    def test_row_marginals_exact_after_final_row_update(self):
        # sweep ends on the row update, so row sums match g to round-off
        # even when the column side has not converged yet
        rng = numerics.rng_from_seed(4)
        cost = rng.random((6, 5))
        plan = sk.sinkhorn(cost, settings=sk.SinkhornSettings(
            eps=0.1, tol=1e-9, max_iter=3, fixed_iterations=True))
        assert not plan.converged
        assert np.allclose(plan.matrix.sum(axis=1), 1 / 6, atol=1e-14)
        assert plan.marginal_violation > 1e-9


class TestEquivariance:
    def test_row_permutation(self):
        rng = numerics.rng_from_seed(5)
        cost = rng.random((5, 7))
        perm = rng.permutation(5)
        a = sk.sinkhorn(cost, settings=TIGHT).matrix
        b = sk.sinkhorn(cost[perm], settings=TIGHT).matrix
        assert np.allclose(a[perm], b, atol=1e-12)

    def test_transpose_swaps_marginals(self):
        rng = numerics.rng_from_seed(6)
        cost = rng.random((4, 6))
        a = sk.sinkhorn(cost, settings=TIGHT).matrix
        b = sk.sinkhorn(cost.T, settings=TIGHT).matrix
        assert np.allclose(a, b.T, atol=1e-12)


class TestObjective:
    def test_plan_beats_independent_coupling(self):
        rng = numerics.rng_from_seed(7)
        cost = rng.random((5, 5))
        plan = sk.sinkhorn(cost, settings=sk.SinkhornSettings(
            eps=0.5, tol=1e-12, max_iter=10000))
        solved = sk.entropic_objective(plan, cost)
        independent = sk.TransportPlan(
            matrix=np.full((5, 5), 1 / 25),
            row_mass=np.full(5, 0.2), col_mass=np.full(5, 0.2),
            eps=0.5, iterations=0, converged=True,
            marginal_violation=0.0,
            log_potentials=(np.zeros(5), np.zeros(5)))
        assert solved < sk.entropic_objective(independent, cost) + 1e-12

    def test_objective_formula(self):
        plan = sk.sinkhorn(np.array([[0.0, 1.0], [1.0, 0.0]]), settings=TIGHT)
        t = plan.matrix
        cost = np.array([[0.0, 1.0], [1.0, 0.0]])
        by_hand = float(np.sum(t * cost) + 1.0 * np.sum(t * (np.log(t) - 1.0)))
        assert sk.entropic_objective(plan, cost) == pytest.approx(
            by_hand, rel=1e-12)


class TestWarmStart:
    def test_same_fixed_point_fewer_iterations(self):
        rng = numerics.rng_from_seed(8)
        cost = rng.random((12, 9))
        settings = sk.SinkhornSettings(eps=0.05, tol=1e-10, max_iter=50000)
        cold = sk.sinkhorn(cost, settings=settings)
        warm = sk.sinkhorn(cost, settings=settings,
                           warm_start=cold.log_potentials)
        assert warm.iterations < cold.iterations
        assert np.allclose(warm.matrix, cold.matrix, atol=1e-9)

    def test_warm_start_on_perturbed_cost(self):
        rng = numerics.rng_from_seed(9)
        cost = rng.random((10, 10))
        settings = sk.SinkhornSettings(eps=0.05, tol=1e-10, max_iter=50000)
        base = sk.sinkhorn(cost, settings=settings)
        shifted = cost + 0.01 * rng.random((10, 10))
        warm = sk.sinkhorn(shifted, settings=settings,
                           warm_start=base.log_potentials)
        cold = sk.sinkhorn(shifted, settings=settings)
        assert warm.converged
        assert warm.iterations <= cold.iterations
        assert np.allclose(warm.matrix, cold.matrix, atol=1e-8)


class TestValidation:
    def test_measure_checks(self):
        with pytest.raises(ValueError, match="sum to 1"):
            sk.Measure(np.array([0.5, 0.6]))
        with pytest.raises(ValueError, match="positive"):
            sk.Measure(np.array([1.5, -0.5]))
        with pytest.raises(ValueError, match="shape"):
            sk.Measure(np.zeros((2, 2)))
        assert sk.Measure.uniform(4).size == 4

    def test_cost_validation(self):
        with pytest.raises(ValueError, match="non-negative"):
            sk.sinkhorn(np.array([[-0.5, 1.0], [1.0, 0.0]]), settings=TIGHT)
        with pytest.raises(ValueError, match="settings"):
            sk.sinkhorn(np.zeros((2, 2)))
        with pytest.raises(ValueError, match="shape"):
            sk.sinkhorn(np.zeros((2, 2, 2)), settings=TIGHT)

    def test_settings_validation(self):
        with pytest.raises(ValueError):
            sk.SinkhornSettings(eps=0.0)
        with pytest.raises(ValueError):
            sk.SinkhornSettings(eps=0.1, tol=0.0)
        with pytest.raises(ValueError):
            sk.SinkhornSettings(eps=0.1, max_iter=0)

    def test_mass_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            sk.sinkhorn(np.zeros((2, 3)), sk.Measure.uniform(3),
                        sk.Measure.uniform(3), TIGHT)


class TestFixedIterations:
    def test_runs_exactly_max_iter(self):
        rng = numerics.rng_from_seed(10)
        cost = rng.random((6, 6))
        plan = sk.sinkhorn(cost, settings=sk.SinkhornSettings(
            eps=1.0, tol=1e-6, max_iter=7, fixed_iterations=True))
        assert plan.iterations == 7

    def test_converged_flag_still_honest(self):
        cost = np.zeros((3, 3))  # uniform plan is optimal immediately
        plan = sk.sinkhorn(cost, settings=sk.SinkhornSettings(
            eps=1.0, tol=1e-6, max_iter=4, fixed_iterations=True))
        assert plan.iterations == 4
        assert plan.converged
        assert np.allclose(plan.matrix, 1 / 9, atol=1e-215)


class TestFactored:
    def test_marginals_inherited(self):
        rng = numerics.rng_from_seed(11)
        spec = kernels.KernelSpec(1.0)
        refs = rng.standard_normal((4, 3))
        cx = np.asarray(kernels.induced_sq_distance(
            rng.standard_normal((6, 3)), refs, spec))
        cxp = np.asarray(kernels.induced_sq_distance(
            rng.standard_normal((9, 3)), refs, spec))
        settings = sk.SinkhornSettings(eps=0.1, tol=1e-10, max_iter=20000)
        coupled = sk.transport_factored(sk.sinkhorn(cx, settings=settings),
                                        sk.sinkhorn(cxp, settings=settings))
        assert coupled.shape == (6, 9)
        assert coupled.min() >= 0.0
        assert np.allclose(coupled.sum(axis=1), 1 / 6, atol=1e-9)
        assert np.allclose(coupled.sum(axis=0), 1 / 9, atol=1e-9)

    def test_requires_shared_reference_size(self):
        rng = numerics.rng_from_seed(12)
        settings = sk.SinkhornSettings(eps=0.5, tol=1e-8, max_iter=2000)
        a = sk.sinkhorn(rng.random((3, 4)), settings=settings)
        b = sk.sinkhorn(rng.random((3, 5)), settings=settings)
        with pytest.raises(ValueError):
            sk.transport_factored(a, b)


class TestWasserstein:
    settings = sk.SinkhornSettings(eps=0.05, tol=1e-9, max_iter=20000)
    spec = kernels.KernelSpec(1.0)

    def test_symmetry_and_nonnegativity(self):
        rng = numerics.rng_from_seed(13)
        x = rng.standard_normal((5, 3))
        y = rng.standard_normal((7, 3))
        wxy = sk.wasserstein(x, y, self.spec, self.settings)
        wyx = sk.wasserstein(y, x, self.spec, self.settings)
        assert wxy >= 0.0
        assert wxy == pytest.approx(wyx, rel=1e-9)

    def test_identical_clouds_near_zero(self):
        # entropic blur leaves ~exp(-gap/eps) mass off-diagonal, so the
        # root-cost is small but not zero
        rng = numerics.rng_from_seed(14)
        x = rng.standard_normal((6, 3))
        assert sk.wasserstein(x, x.copy(), self.spec, self.settings) <= 1e-4

    def test_reference_bound_holds(self):
        rng = numerics.rng_from_seed(15)
        x = rng.standard_normal((6, 3))
        xp = rng.standard_normal((5, 3))
        y = rng.standard_normal((4, 3))
        w = sk.wasserstein(x, xp, self.spec, self.settings)
        w_y = sk.wasserstein_y(x, xp, y, self.spec, self.settings)
        slack = 2.0 * min(sk.wasserstein(x, y, self.spec, self.settings),
                          sk.wasserstein(xp, y, self.spec, self.settings))
        assert abs(w - w_y) <= slack + 1e-6
