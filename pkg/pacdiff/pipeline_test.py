from pathlib import Path

from absl.testing import absltest
from absl.testing import parameterized
import numpy as np

from pacdiff import config
from pacdiff import pac_noise
from pacdiff import pipeline
from pacdiff import sampler
from pacdiff import tensor_io
from pacdiff.datasets import LabeledDataset
from pacdiff.rng import Rng


TINY = """\
dataset.kind = gmm2d
dataset.seed = 0
dataset.n = 40
schedule.L = 3
schedule.delta_min = 0.1
rr.epsilon = 2
rr.k = 3
score.layers = 8
score.steps = 30
score.batch = 16
classifier.guide.layers = 8
classifier.guide.steps = 30
classifier.guide.batch = 16
classifier.metric.layers = 4
classifier.metric.steps = 30
classifier.metric.batch = 16
sampler.T = 5
sampler.n_samples = 20
sampler.gradient_scale = 1
pac.m = 2
pac.n_gen = 5
pac.n_mc = 100
"""


def tiny_config(out_dir, overrides=()):
    raw = config.apply_overrides(config.parse_text(TINY), [f"out.dir={out_dir}", *overrides])
    return config.resolve(raw)


def _manifest(directory):
    return dict(r for _, r in tensor_io.read_rows_csv(directory / "manifest.csv", ("key", "value")))


class StageTest(parameterized.TestCase):

    def setUp(self):
        super().setUp()
        self.root = Path(self.create_tempdir().full_path)

    def test_gen_data_manifest(self):
        cfg = tiny_config(self.root / "run")
        dataset = pipeline.gen_data(cfg)
        self.assertLen(dataset, 40)
        self.assertTrue((cfg.out_dir / "data" / "dataset.csv").exists())
        manifest = _manifest(cfg.out_dir / "data")
        self.assertEqual(manifest["stage"], "gen-data")
        self.assertEqual(manifest["config_hash"], cfg.config_hash())
        self.assertEqual(manifest["recovery_sign"], "score")
        self.assertEqual(manifest["sigma_form"], "alpha_i*I")
        self.assertEqual(manifest["branch_condition"], "consecutive_gap")
        self.assertEqual(manifest["config.rr.epsilon"], "2.0")
        self.assertEqual(manifest["config.dataset.n"], "40")

    def test_missing_artifacts_name_the_stage(self):
        cfg = tiny_config(self.root / "empty")
        with self.assertRaises(pipeline.StageError) as ctx:
            pipeline.sample_stage(cfg)
        self.assertEqual(ctx.exception.stage, "sample")
        self.assertIsInstance(ctx.exception.__cause__, FileNotFoundError)
        self.assertIn("train-score", str(ctx.exception))

    def test_train_score_needs_data(self):
        with self.assertRaises(pipeline.StageError) as ctx:
            pipeline.train_score_stage(tiny_config(self.root / "empty"))
        self.assertEqual(ctx.exception.stage, "train-score")

    def test_unguided_sampling_skips_guide(self):
        cfg = tiny_config(self.root / "unguided", ["sampler.gradient_scale=0"])
        pipeline.gen_data(cfg)
        pipeline.train_score_stage(cfg)
        result = pipeline.sample_stage(cfg)
        self.assertEqual(result.samples.shape, (20, 2))
        self.assertFalse((cfg.out_dir / "guide").exists())
        self.assertEqual(_manifest(cfg.out_dir / "samples")["gradient_scale"], "0.0")
        loaded = sampler.load_samples(cfg.out_dir / "samples", (2,))
        np.testing.assert_array_equal(loaded.samples, result.samples)

    def test_guided_sampling_needs_guide(self):
        cfg = tiny_config(self.root / "guided")
        pipeline.gen_data(cfg)
        pipeline.train_score_stage(cfg)
        with self.assertRaises(pipeline.StageError) as ctx:
            pipeline.sample_stage(cfg)
        self.assertIn("train-classifier", str(ctx.exception))

    def test_explicit_schedule(self):
        cfg = tiny_config(self.root / "sched", ["schedule.delta_max=2.0"])
        schedule = pipeline.make_schedule(cfg, pipeline.make_dataset(cfg.dataset))
        self.assertEqual(schedule.levels[0], 2.0)
        self.assertLen(schedule, 3)

    def test_glyph_dataset_is_written_as_images(self):
        cfg = tiny_config(self.root / "glyphs", ["dataset.kind=glyphs", "dataset.n=6", "dataset.side=9"])
        pipeline.gen_data(cfg)
        self.assertTrue((cfg.out_dir / "data" / "images").is_dir())
        self.assertEqual(pipeline.load_ground_truth(cfg).sample_shape, (9, 9))

    def test_pac_noise_with_mechanism_double(self):
        cfg = tiny_config(self.root / "pac", ["pac.m=50"])

        def mean_double(c):
            def source(seed):
                samples = Rng(seed).gaussian([20, 2])
                return LabeledDataset(samples=samples, labels=np.zeros(20, dtype=np.int64), name="double")

            return pac_noise.MechanismSpec(
                mechanism=lambda ds: ds.samples.mean(axis=0),
                source=source,
                m=c.pac.params.m,
                resampling_seed=c.pac.seed,
                description="mean double",
            )

        result = pipeline.pac_noise_stage(cfg, mechanism=mean_double)
        self.assertLessEqual(result.e_norm_mc, result.e_norm_bound + 3.0 * result.e_norm_se)
        directory = cfg.out_dir / "pac"
        for name in ("pac_result.csv", "sigma_b.csv", "outputs.csv", "manifest.csv"):
            self.assertTrue((directory / name).exists(), name)
        self.assertEqual(_manifest(directory)["mechanism"], "mean double")
        self.assertEqual(tensor_io.read_matrix_csv(directory / "outputs.csv").shape, (50, 2))

    def test_mechanism_failure_is_a_stage_error(self):
        cfg = tiny_config(self.root / "pac")

        def broken(c):
            return pac_noise.MechanismSpec(
                mechanism=lambda ds: 1 / 0,
                source=lambda seed: pipeline.make_dataset(c.dataset, seed=seed),
                m=c.pac.params.m,
            )

        with self.assertRaises(pipeline.StageError) as ctx:
            pipeline.pac_noise_stage(cfg, mechanism=broken)
        self.assertEqual(ctx.exception.stage, "pac-noise")
        self.assertIsInstance(ctx.exception.__cause__, pac_noise.MechanismRunError)

    @parameterized.parameters("mean", "first")
    def test_pipeline_mechanism_is_deterministic(self, reduction):
        cfg = tiny_config(self.root / "mech", [f"pac.reduction={reduction}"])
        spec = pipeline.pipeline_mechanism(cfg)
        a = pac_noise.run_mechanism(spec, 0)
        b = pac_noise.run_mechanism(spec, 0)
        self.assertEqual(a.shape, (2,))
        np.testing.assert_array_equal(a, b)


class PipelineTest(parameterized.TestCase):

    def test_full_run_is_reproducible(self):
        root = Path(self.create_tempdir().full_path)
        first = pipeline.run_pipeline(tiny_config(root / "a"))
        second = pipeline.run_pipeline(tiny_config(root / "b"))
        self.assertEqual(first.privacy.score, second.privacy.score)
        self.assertEqual(first.ffd, second.ffd)
        self.assertBetween(first.privacy.score, 0.0, 1.0)
        self.assertIsNotNone(first.pac)
        for relative in ("privacy/report.csv", "privacy/summary.csv", "ffd/ffd.csv", "pac/pac_result.csv"):
            self.assertEqual(
                (root / "a" / relative).read_bytes(), (root / "b" / relative).read_bytes(), relative
            )
        for stage_dir in ("data", "score", "guide", "metric", "samples", "privacy", "ffd", "pac"):
            self.assertTrue((root / "a" / stage_dir / "manifest.csv").exists(), stage_dir)

    def test_without_pac(self):
        root = Path(self.create_tempdir().full_path)
        summary = pipeline.run_pipeline(tiny_config(root / "run"), with_pac=False)
        self.assertIsNone(summary.pac)
        self.assertFalse((root / "run" / "pac").exists())


if __name__ == "__main__":
    absltest.main()
