import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from settransport import numerics


def mp_logsumexp(row):
    """Extended-precision reference, 50 significant digits."""
    with mpmath.workdps(50):
        total = mpmath.fsum(mpmath.e**mpmath.mpf(float(v)) for v in row)
        return float(mpmath.log(total))


def test_rng_reproducible():
    a = numerics.rng_from_seed(123).standard_normal(5)
    b = numerics.rng_from_seed(123).standard_normal(5)
    assert np.array_equal(a, b)
    c = numerics.rng_from_seed(124).standard_normal(5)
    assert not np.array_equal(a, c)


def test_spawn_seeds_distinct_and_stable():
    seeds = numerics.spawn_seeds(7, 6)
    assert len(seeds) == 6
    assert len(set(seeds)) == 6
    assert seeds == numerics.spawn_seeds(7, 6)
    assert all(isinstance(s, int) for s in seeds)


def test_as_matrix_errors():
    with pytest.raises(ValueError, match="shape"):
        numerics.as_matrix(np.zeros(3))
    with pytest.raises(FloatingPointError, match="numerical"):
        numerics.as_matrix(np.array([[np.nan, 0.0]]))


class TestLogsumexp:
    def test_against_mpmath(self):
        rng = numerics.rng_from_seed(0)
        x = rng.standard_normal((6, 9)) * 3.0
        got = numerics.logsumexp(x, axis=1)
        want = np.array([mp_logsumexp(row) for row in x])
        assert np.allclose(got, want, rtol=1e-14, atol=0)

    def test_extreme_values_do_not_overflow(self):
        x = np.array([[1000.0, 999.0, -1000.0], [-1200.0, -1201.0, -1199.0]])
        got = numerics.logsumexp(x, axis=1)
        want = np.array([mp_logsumexp(row) for row in x])
        assert np.all(np.isfinite(got))
        assert np.allclose(got, want, rtol=1e-14, atol=1e-13)

    def test_keepdims_and_axis(self):
        rng = numerics.rng_from_seed(1)
        x = rng.standard_normal((4, 5, 3))
        kept = numerics.logsumexp(x, axis=1, keepdims=True)
        assert kept.shape == (4, 1, 3)
        flat = numerics.logsumexp(x, axis=1)
        assert flat.shape == (4, 3)
        assert np.array_equal(np.squeeze(kept, axis=1), flat)

    def test_single_element_is_identity(self):
        x = np.array([[3.25]])
        assert numerics.logsumexp(x, axis=1) == pytest.approx(3.25, abs=0)

    def test_empty_axis_rejected(self):
        with pytest.raises(ValueError, match="empty-reduction"):
            numerics.logsumexp(np.zeros((3, 0)), axis=1)
        with pytest.raises(ValueError, match="empty-reduction"):
            numerics.logsumexp_rows(np.zeros((3, 0)))

    @given(st.lists(st.floats(-300, 300), min_size=1, max_size=8))
    @settings(max_examples=60, deadline=None)
    def test_bounds_property(self, values):
        # max <= logsumexp <= max + log(n), always
        x = np.array([values])
        out = float(numerics.logsumexp(x, axis=1)[0])
        top = max(values)
        assert top <= out <= top + np.log(len(values)) + 1e-12


class TestSymEig:
    def test_matches_lapack_oracle(self):
        rng = numerics.rng_from_seed(2)
        for n in (1, 2, 5, 12):
            a = rng.standard_normal((n, n))
            a = 0.5 * (a + a.T)
            w, v = numerics.sym_eig(a)
            w_ref = np.linalg.eigvalsh(a)
            assert np.allclose(w, w_ref, atol=1e-10)
            # ascending order, orthonormal vectors, exact reconstruction
            assert np.all(np.diff(w) >= -1e-12)
            assert np.allclose(v.T @ v, np.eye(n), atol=1e-10)
            assert np.allclose((v * w) @ v.T, a, atol=1e-10)

    def test_rejects_nonsymmetric(self):
        with pytest.raises(ValueError, match="not-symmetric"):
            numerics.sym_eig(np.array([[0.0, 1.0], [0.0, 0.0]]))
        with pytest.raises(ValueError, match="shape"):
            numerics.sym_eig(np.zeros((2, 3)))


class TestInvSqrt:
    def test_spd_roundtrip(self):
        rng = numerics.rng_from_seed(3)
        b = rng.standard_normal((6, 6))
        spd = b @ b.T + 0.5 * np.eye(6)
        r = numerics.inv_sqrt_sym(spd)
        assert np.allclose(r @ spd @ r, np.eye(6), atol=1e-9)
        assert np.allclose(r, r.T, atol=0)

    def test_ridge_on_zero_matrix(self):
        r = numerics.inv_sqrt_sym(np.zeros((3, 3)), delta=4.0)
        assert np.allclose(r, 0.5 * np.eye(3), atol=1e-12)

    def test_rejects_negative_definite(self):
        with pytest.raises(ValueError, match="not-psd"):
            numerics.inv_sqrt_sym(-np.eye(2))
        with pytest.raises(ValueError, match="not-psd"):
            numerics.inv_sqrt_sym(np.zeros((2, 2)), delta=0.0)

    def test_rejects_negative_ridge(self):
        with pytest.raises(ValueError, match="delta"):
            numerics.inv_sqrt_sym(np.eye(2), delta=-1.0)


class TestPairwise:
    def test_against_loop(self):
        rng = numerics.rng_from_seed(4)
        x = rng.standard_normal((7, 3))
        y = rng.standard_normal((5, 3))
        got = numerics.pairwise_sq_dists(x, y)
        want = np.array([[np.sum((a - b) ** 2) for b in y] for a in x])
        assert np.allclose(got, want, atol=1e-12)
        assert got.min() >= 0.0

    def test_self_distance_diagonal_exactly_zero(self):
        rng = numerics.rng_from_seed(5)
        x = 1e-4 * rng.standard_normal((40, 8)) + 100.0  # cancellation-prone
        d = numerics.pairwise_sq_dists(x, x)
        assert np.array_equal(np.diag(d), np.zeros(40))
        assert d.min() >= 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            numerics.pairwise_sq_dists(np.zeros((2, 3)), np.zeros((2, 4)))
