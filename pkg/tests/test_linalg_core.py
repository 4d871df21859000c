import numpy as np
import pytest

from errors import InsufficientSamplesError, InvalidInputError, NumericalFailureError, SingularMatrixError
from linalg_core import (
    cholesky_logdet,
    covariance,
    cross_covariance,
    median_pairwise_sqdist,
    pairwise_sqdist,
    power_iteration_max_eig,
    sym_eig,
)


class TestSymEig:
    def test_diagonal_sorted_descending(self):
        values, vectors = sym_eig(np.diag([1.0, 3.0, 2.0]))
        np.testing.assert_allclose(values, [3.0, 2.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(np.abs(vectors[:, 0]), [0.0, 1.0, 0.0], atol=1e-12)

    def test_residual_and_orthonormality(self, rng, random_spd):
        a = random_spd(rng, 7, jitter=0.0)
        a = a - 3.0 * np.eye(7)  # indefinite
        values, vectors = sym_eig(a)
        assert np.all(np.diff(values) <= 0)
        np.testing.assert_allclose(a @ vectors, vectors * values, atol=1e-9)
        np.testing.assert_allclose(vectors.T @ vectors, np.eye(7), atol=1e-10)

    def test_matches_numpy(self, rng, random_spd):
        a = random_spd(rng, 10)
        np.testing.assert_allclose(sym_eig(a).eigenvalues, np.linalg.eigvalsh(a)[::-1], rtol=1e-10)

    def test_rejects_asymmetric(self):
        with pytest.raises(InvalidInputError, match="not symmetric"):
            sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            sym_eig(np.array([[1.0, np.nan], [np.nan, 1.0]]))

    def test_rejects_non_square(self):
        with pytest.raises(InvalidInputError):
            sym_eig(np.ones((2, 3)))


class TestCholeskyLogdet:
    def test_identity(self):
        assert cholesky_logdet(np.eye(5)) == pytest.approx(0.0, abs=1e-14)

    def test_diagonal(self):
        assert cholesky_logdet(np.diag([2.0, 3.0])) == pytest.approx(np.log(6.0), rel=1e-14)

    def test_matches_slogdet(self, rng, random_spd):
        a = random_spd(rng, 8)
        sign, expected = np.linalg.slogdet(a)
        assert sign == 1
        assert cholesky_logdet(a, ridge=0.0) == pytest.approx(expected, rel=1e-12)

    def test_ridge_shifts_diagonal(self):
        assert cholesky_logdet(np.eye(3), ridge=1.0) == pytest.approx(3 * np.log(2.0))

    def test_singular_reports_pivot(self):
        with pytest.raises(SingularMatrixError) as info:
            cholesky_logdet(np.array([[1.0, 1.0], [1.0, 1.0]]), ridge=0.0)
        assert info.value.pivot == 1

    def test_automatic_ridge_rescues_psd_matrix(self):
        s = np.array([[1.0, 1.0], [1.0, 1.0]])
        ridge = 1e-9 * 2.0 / 2
        expected = np.log((1 + ridge) ** 2 - 1.0)
        assert cholesky_logdet(s) == pytest.approx(expected, rel=1e-6)

    def test_negative_definite_still_fails(self):
        with pytest.raises(SingularMatrixError):
            cholesky_logdet(-np.eye(2))

    def test_negative_ridge_rejected(self):
        with pytest.raises(InvalidInputError):
            cholesky_logdet(np.eye(2), ridge=-1.0)


class TestCovariance:
    def test_matches_numpy(self, rng):
        x = rng.standard_normal((50, 3))
        y = rng.standard_normal((50, 2))
        joint = np.cov(np.hstack([x, y]).T)
        np.testing.assert_allclose(cross_covariance(x, y), joint[:3, 3:], atol=1e-12)
        np.testing.assert_allclose(covariance(x), joint[:3, :3], atol=1e-12)

    def test_exactly_symmetric(self, rng):
        c = covariance(rng.standard_normal((40, 6)))
        assert np.array_equal(c, c.T)

    def test_row_mismatch(self, rng):
        with pytest.raises(InvalidInputError):
            cross_covariance(rng.standard_normal((5, 2)), rng.standard_normal((6, 2)))

    def test_single_sample(self):
        with pytest.raises(InsufficientSamplesError):
            covariance(np.ones((1, 3)))


class TestPowerIteration:
    def test_dominant_eigenvalue(self):
        d = np.diag([1.0, 5.0, 2.0])
        assert power_iteration_max_eig(lambda v: d @ v, 3, 200, seed=0) == pytest.approx(5.0, rel=1e-10)

    def test_indefinite_returns_magnitude(self):
        d = np.diag([1.0, -7.0])
        assert power_iteration_max_eig(lambda v: d @ v, 2, 200, seed=1) == pytest.approx(7.0, rel=1e-10)

    def test_zero_operator_gives_up(self):
        with pytest.raises(NumericalFailureError, match="restarts"):
            power_iteration_max_eig(lambda v: np.zeros_like(v), 4, 5, seed=0)

    def test_nan_operator(self):
        with pytest.raises(NumericalFailureError):
            power_iteration_max_eig(lambda v: np.full_like(v, np.nan), 4, 5, seed=0)

    def test_bad_iters(self):
        with pytest.raises(InvalidInputError):
            power_iteration_max_eig(lambda v: v, 2, 0, seed=0)


def test_pairwise_sqdist_symmetric_zero_diagonal(rng):
    d = pairwise_sqdist(rng.standard_normal((9, 4)))
    assert np.array_equal(d, d.T)
    assert np.all(np.diag(d) == 0)


def test_median_pairwise_sqdist_hand_example():
    assert median_pairwise_sqdist(np.array([0.0, 1.0, 3.0])) == pytest.approx(4.0)


@pytest.mark.slow
def test_random_symmetric_and_covariance_instances():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        d = int(rng.integers(1, 9))
        a = rng.standard_normal((d, d))
        a = a + a.T
        values, vectors = sym_eig(a)
        scale = max(1.0, np.abs(values).max())
        assert np.all(np.diff(values) <= 0)
        np.testing.assert_allclose(a @ vectors, vectors * values, atol=1e-8 * scale)
        np.testing.assert_allclose(vectors.T @ vectors, np.eye(d), atol=1e-10)
        samples = rng.standard_normal((int(rng.integers(2, 30)), d))
        cov = covariance(samples)
        assert np.array_equal(cov, cov.T)
        assert sym_eig(cov).eigenvalues[-1] >= -1e-10 * max(1.0, np.trace(cov))
