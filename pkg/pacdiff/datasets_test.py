import math
from pathlib import Path

from absl.testing import absltest
from absl.testing import parameterized
import numpy as np

from pacdiff import datasets
from pacdiff import tensor_io
from pacdiff.rng import Rng


class Gmm2dTest(parameterized.TestCase):

    def test_degenerate_centers(self):
        data = datasets.make_gmm2d(seed=0, n=2000, components=2, radius=0.0, sigma_c=1.0)
        self.assertEqual(data.samples.shape, (2000, 2))
        self.assertTrue(data.is_balanced())
        self.assertAlmostEqual(float(data.samples.mean()), 0.0, delta=0.1)
        self.assertAlmostEqual(float(data.samples.var()), 1.0, delta=0.1)

    def test_component_counts(self):
        params = datasets.GmmParams.on_circle(8, 4.0, 0.3)
        data = datasets.make_gmm2d(seed=5, n=4000, components=8, radius=4.0, sigma_c=0.3)
        counts = np.bincount(datasets.component_of(data.samples, params), minlength=8)
        bound = 3.0 * math.sqrt(4000 / 8)
        self.assertTrue(np.all(np.abs(counts - 500) <= bound), counts)

    def test_labels_follow_component_parity(self):
        params = datasets.GmmParams.on_circle(4, 5.0, 0.1)
        data = datasets.make_gmm2d(seed=2, n=400, components=4, radius=5.0, sigma_c=0.1)
        np.testing.assert_array_equal(data.labels, datasets.component_of(data.samples, params) % 2)

    def test_same_seed_same_data(self):
        a = datasets.make_gmm2d(seed=9, n=100, components=2, radius=2.0, sigma_c=0.5)
        b = datasets.make_gmm2d(seed=9, n=100, components=2, radius=2.0, sigma_c=0.5)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.labels, b.labels)

    @parameterized.parameters(20, 21, 101, 400)
    def test_balanced_for_any_size(self, n):
        data = datasets.make_gmm2d(seed=1, n=n, components=2, radius=2.0, sigma_c=0.5)
        self.assertTrue(data.is_balanced())

    @parameterized.parameters(1, 3, 7)
    def test_odd_components_rejected(self, components):
        with self.assertRaises(datasets.DatasetError):
            datasets.make_gmm2d(seed=0, n=100, components=components, radius=1.0, sigma_c=0.5)


class GlyphTest(parameterized.TestCase):

    def test_two_glyphs(self):
        data = datasets.make_glyphs(seed=0, n=2)
        self.assertEqual(sorted(data.labels.tolist()), [0, 1])
        self.assertEqual(data.samples.shape, (2, 8, 8))

    def test_pixels_in_unit_range(self):
        data = datasets.make_glyphs(seed=3, n=200, side=12)
        self.assertGreaterEqual(data.samples.min(), 0.0)
        self.assertLessEqual(data.samples.max(), 1.0)

    def test_exact_half_split(self):
        data = datasets.make_glyphs(seed=4, n=100)
        self.assertEqual(int(data.labels.sum()), 50)

    def test_smile_class_is_brighter(self):
        data = datasets.make_glyphs(seed=0, n=1000)
        smile = data.samples[data.labels == 1].mean()
        flat = data.samples[data.labels == 0].mean()
        self.assertGreaterEqual(smile - flat, 0.005)

    def test_smile_adds_two_corner_pixels(self):
        flat = datasets.render_glyph(side=8, smile=False, shift=(0, 0), intensity=1.0)
        smile = datasets.render_glyph(side=8, smile=True, shift=(0, 0), intensity=1.0)
        self.assertEqual(int(np.sum(smile != flat)), 2)

    @parameterized.parameters(1, 3, 0)
    def test_bad_sizes_rejected(self, n):
        with self.assertRaises(datasets.DatasetError):
            datasets.make_glyphs(seed=0, n=n)


class AnalyticScoreTest(parameterized.TestCase):

    def test_standard_normal(self):
        params = datasets.GmmParams(centers=np.zeros((1, 2)), sigma_c=1.0)
        np.testing.assert_allclose(
            datasets.analytic_score_gmm(np.array([2.0, 0.0]), params), [-2.0, 0.0]
        )

    def test_midpoint_of_symmetric_mixture(self):
        params = datasets.GmmParams.on_circle(2, 3.0, 0.5)
        np.testing.assert_allclose(
            datasets.analytic_score_gmm(np.zeros((1, 2)), params, 0.2), [[0.0, 0.0]], atol=1e-15
        )

    @parameterized.parameters(0.0, 0.1, 1.0)
    def test_matches_finite_differences(self, perturb):
        params = datasets.GmmParams.on_circle(4, 2.0, 0.5)
        x = Rng(7).gaussian([50, 2]) * 2.0
        score = datasets.analytic_score_gmm(x, params, perturb)
        h = 1e-6
        for axis in range(2):
            step = np.zeros(2)
            step[axis] = h
            fd = (
                datasets.gmm_log_density(x + step, params, perturb)
                - datasets.gmm_log_density(x - step, params, perturb)
            ) / (2 * h)
            np.testing.assert_allclose(score[:, axis], fd, rtol=1e-6, atol=1e-6)

    def test_log_density_at_single_center(self):
        params = datasets.GmmParams(centers=np.zeros((1, 2)), sigma_c=1.0)
        self.assertAlmostEqual(
            float(datasets.gmm_log_density(np.zeros(2), params)[0]), -math.log(2.0 * math.pi)
        )


class DatasetIoTest(parameterized.TestCase):

    def setUp(self):
        super().setUp()
        self.dir = Path(self.create_tempdir().full_path)

    def test_points_round_trip(self):
        data = datasets.make_gmm2d(seed=1, n=50, components=2, radius=2.0, sigma_c=0.5)
        path = self.dir / "points.csv"
        datasets.save_dataset(data, path)
        loaded = datasets.load_dataset(path)
        np.testing.assert_array_equal(loaded.samples, data.samples)
        np.testing.assert_array_equal(loaded.labels, data.labels)

    def test_glyphs_round_trip(self):
        data = datasets.make_glyphs(seed=2, n=10)
        path = self.dir / "glyphs"
        datasets.save_dataset(data, path)
        loaded = datasets.load_dataset(path)
        np.testing.assert_array_equal(loaded.samples, data.samples)
        np.testing.assert_array_equal(loaded.labels, data.labels)

    def test_empty_manifest(self):
        path = self.dir / "empty"
        path.mkdir()
        tensor_io.write_rows_csv(path / datasets.MANIFEST_NAME, ("filename", "label"), [])
        with self.assertRaises(datasets.DatasetError):
            datasets.load_dataset(path)

    def test_label_outside_range(self):
        path = self.dir / "bad.csv"
        path.write_text("x,y,label\n0.0,1.0,2\n", encoding="utf-8")
        with self.assertRaisesRegex(datasets.DatasetError, ":2:"):
            datasets.load_dataset(path)

    def test_bad_number_names_line(self):
        path = self.dir / "bad.csv"
        path.write_text("x,y,label\n0.0,1.0,0\nfoo,1.0,1\n", encoding="utf-8")
        with self.assertRaisesRegex(datasets.DatasetError, ":3:"):
            datasets.load_dataset(path)


if __name__ == "__main__":
    absltest.main()
