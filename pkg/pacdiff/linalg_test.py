import math

from absl.testing import absltest
from absl.testing import parameterized
import numpy as np

from pacdiff import linalg
from pacdiff.rng import Rng


class EmpiricalMomentsTest(parameterized.TestCase):

    def test_two_points(self):
        mu, cov = linalg.empirical_moments([[0.0, 0.0], [2.0, 0.0]])
        np.testing.assert_array_equal(mu, [1.0, 0.0])
        np.testing.assert_array_equal(cov, [[1.0, 0.0], [0.0, 0.0]])

    def test_identical_samples_have_zero_covariance(self):
        _, cov = linalg.empirical_moments(np.tile([1.5, -2.0, 3.0], (7, 1)))
        np.testing.assert_array_equal(cov, np.zeros((3, 3)))

    def test_monte_carlo_covariance(self):
        z = Rng(1).gaussian([10000, 2]) * np.array([2.0, 1.0])
        _, cov = linalg.empirical_moments(z)
        np.testing.assert_allclose(cov, np.diag([4.0, 1.0]), atol=0.15)

    def test_rejects_single_sample(self):
        with self.assertRaises(ValueError):
            linalg.empirical_moments([[1.0, 2.0]])

    def test_rejects_ragged_samples(self):
        with self.assertRaises(ValueError):
            linalg.empirical_moments([np.zeros(2), np.zeros(3)])


class EighTest(parameterized.TestCase):

    def test_identity(self):
        system = linalg.eigh(np.eye(3))
        np.testing.assert_allclose(system.values, [1.0, 1.0, 1.0])

    def test_two_by_two(self):
        system = linalg.eigh(np.array([[2.0, 1.0], [1.0, 2.0]]))
        np.testing.assert_allclose(system.values, [3.0, 1.0], atol=1e-14)
        inv = 1.0 / math.sqrt(2.0)
        self.assertAlmostEqual(abs(float(system.vectors[:, 0] @ [inv, inv])), 1.0, places=12)
        self.assertAlmostEqual(abs(float(system.vectors[:, 1] @ [inv, -inv])), 1.0, places=12)

    def test_zero_and_scalar_matrices(self):
        np.testing.assert_array_equal(linalg.eigh(np.zeros((3, 3))).values, np.zeros(3))
        np.testing.assert_array_equal(linalg.eigh(np.array([[-2.5]])).values, [-2.5])

    def test_rejects_asymmetric(self):
        with self.assertRaises(linalg.AsymmetricMatrixError):
            linalg.eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_rejects_non_square(self):
        with self.assertRaises(linalg.AsymmetricMatrixError):
            linalg.eigh(np.zeros((2, 3)))

    def test_random_symmetric_matrices(self):
        rng = Rng(2025)
        for trial in range(1000):
            d = 1 + trial % 16
            g = rng.gaussian([d, d])
            a = 0.5 * (g + g.T)
            system = linalg.eigh(a)
            norm = np.linalg.norm(a)
            self.assertLessEqual(np.linalg.norm(system.reconstruct() - a), 1e-9 * norm)
            self.assertLessEqual(
                abs(system.values.sum() - np.trace(a)), 1e-10 * max(1.0, norm)
            )
            np.testing.assert_allclose(system.vectors.T @ system.vectors, np.eye(d), atol=1e-10)
            self.assertTrue(np.all(np.diff(system.values) <= 0.0))

    def test_off_diagonal_mass_next_to_large_diagonal(self):
        a = np.array([[1e8, 1e-9], [1e-9, 1.0]])
        self.assertAlmostEqual(linalg._off_diagonal_norm(a) / (math.sqrt(2.0) * 1e-9), 1.0, places=12)

    def test_wide_dynamic_range(self):
        q, _ = np.linalg.qr(Rng(5).gaussian([6, 6]))
        a = (q * np.array([1e6, 1e3, 1.0, 1e-3, 1e-6, 0.0])) @ q.T
        a = 0.5 * (a + a.T)
        system = linalg.eigh(a)
        self.assertLessEqual(np.linalg.norm(system.reconstruct() - a), 1e-9 * np.linalg.norm(a))
        self.assertAlmostEqual(system.values[0], 1e6, delta=1e-4)

    def test_degenerate_spectrum(self):
        q, _ = np.linalg.qr(Rng(3).gaussian([4, 4]))
        a = (q * np.array([2.0, 2.0, 1.0, 1.0])) @ q.T
        system = linalg.eigh(0.5 * (a + a.T))
        np.testing.assert_allclose(system.values, [2.0, 2.0, 1.0, 1.0], atol=1e-12)


class ClampAndSqrtTest(parameterized.TestCase):

    def test_clamp_small(self):
        out = linalg.clamp_small(np.array([1.0, 1e-13, -1e-14, 0.5]))
        np.testing.assert_array_equal(out, [1.0, 0.0, 0.0, 0.5])

    def test_sqrt_of_diagonal(self):
        np.testing.assert_allclose(linalg.sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))

    def test_sqrt_of_zero(self):
        np.testing.assert_array_equal(linalg.sqrt_psd(np.zeros((2, 2))), np.zeros((2, 2)))

    def test_sqrt_squares_back(self):
        g = Rng(8).gaussian([5, 5])
        a = g @ g.T
        root = linalg.sqrt_psd(a)
        np.testing.assert_allclose(root @ root, a, atol=1e-9 * np.linalg.norm(a))

    def test_sqrt_rejects_negative_eigenvalue(self):
        with self.assertRaises(linalg.NotPsdError):
            linalg.sqrt_psd(np.diag([1.0, -0.5]))


class FrechetDistanceTest(parameterized.TestCase):

    def test_identical_gaussians(self):
        sigma = np.array([[2.0, 0.3], [0.3, 1.0]])
        self.assertAlmostEqual(
            linalg.frechet_distance(np.ones(2), sigma, np.ones(2), sigma), 0.0, delta=1e-8
        )

    def test_mean_shift(self):
        self.assertAlmostEqual(
            linalg.frechet_distance(np.zeros(2), np.eye(2), np.array([3.0, 4.0]), np.eye(2)),
            25.0,
            delta=1e-8,
        )

    def test_commuting_diagonal_covariances(self):
        self.assertAlmostEqual(
            linalg.frechet_distance(np.zeros(2), np.eye(2), np.zeros(2), 4.0 * np.eye(2)),
            2.0,
            delta=1e-8,
        )

    def test_symmetric_in_arguments(self):
        rng = Rng(12)
        g1, g2 = rng.gaussian([3, 3]), rng.gaussian([3, 3])
        s1, s2 = g1 @ g1.T, g2 @ g2.T
        m1, m2 = rng.gaussian([3]), rng.gaussian([3])
        self.assertAlmostEqual(
            linalg.frechet_distance(m1, s1, m2, s2),
            linalg.frechet_distance(m2, s2, m1, s1),
            delta=1e-8,
        )

    def test_dimension_mismatch(self):
        with self.assertRaises(ValueError):
            linalg.frechet_distance(np.zeros(2), np.eye(2), np.zeros(3), np.eye(3))


if __name__ == "__main__":
    absltest.main()
