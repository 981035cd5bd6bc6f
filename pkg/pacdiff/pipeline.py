"""Pipeline stages over a resolved `ExperimentConfig`.

Every stage reads its inputs from the run directory, writes its artifacts to
its own subdirectory, and records a `manifest.csv` there. Stage failures are
re-raised as `StageError` naming the stage.

Run directory layout:

    data/       dataset.csv (2-D points) or images/ (PGM glyphs)
    score/      score network parameters, train_log.csv
    guide/      noise-conditioned classifier
    metric/     clean classifier (feature map for the metrics)
    samples/    generated samples
    privacy/    report.csv, summary.csv, audits/
    ffd/        ffd.csv
    pac/        pac_result.csv, sigma_b.csv, outputs.csv
"""

from __future__ import annotations

import contextlib
import dataclasses
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from absl import logging

import pacdiff
from pacdiff import datasets
from pacdiff import pac_noise
from pacdiff import privacy_metrics
from pacdiff import sampler
from pacdiff import score_model
from pacdiff import tensor_io
from pacdiff.classifier import ClassifierNet, train_classifier
from pacdiff.config import DatasetSettings, ExperimentConfig
from pacdiff.datasets import LabeledDataset
from pacdiff.rng import Rng
from pacdiff.score_model import NoiseSchedule, ScoreNet


STAGES = (
    "gen-data",
    "train-score",
    "train-classifier",
    "sample",
    "privacy-score",
    "ffd",
    "pac-noise",
)


class StageError(RuntimeError):
    """Raised when a pipeline stage fails; carries the stage name."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


@contextlib.contextmanager
def _stage(name: str, directory: Path) -> Iterator[None]:
    logging.info("stage %s: start (%s)", name, directory)
    try:
        yield
    except StageError:
        raise
    except Exception as e:  # pylint: disable=broad-except
        raise StageError(name, e) from e
    logging.info("stage %s: done", name)


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} is missing; run `{producer}` first")
    return path


def _dataset_path(cfg: ExperimentConfig) -> Path:
    data_dir = cfg.out_dir / "data"
    return data_dir / ("dataset.csv" if cfg.dataset.kind == "gmm2d" else "images")


def write_manifest(
    cfg: ExperimentConfig, directory: Path, stage: str, extra: dict[str, object] | None = None
) -> None:
    """Config hash, design flags and every resolved config key."""
    rows: list[tuple[str, object]] = [
        ("stage", stage),
        ("version", pacdiff.__version__),
        ("config_hash", cfg.config_hash()),
        ("recovery_sign", "paper" if cfg.rr.paper_sign else "score"),
        ("sigma_form", sampler.SIGMA_FORM),
        ("branch_condition", pac_noise.BRANCH_CONDITION_FORM),
        ("allocation", cfg.pac.allocation),
    ]
    rows.extend((extra or {}).items())
    for line in cfg.canonical().splitlines():
        key, value = line.split("=", 1)
        rows.append((f"config.{key}", value))
    tensor_io.write_rows_csv(directory / "manifest.csv", ("key", "value"), rows)


def make_dataset(settings: DatasetSettings, seed: int | None = None) -> LabeledDataset:
    seed = settings.seed if seed is None else seed
    if settings.kind == "gmm2d":
        return datasets.make_gmm2d(
            seed=seed,
            n=settings.n,
            components=settings.components,
            radius=settings.radius,
            sigma_c=settings.sigma_c,
        )
    return datasets.make_glyphs(seed=seed, n=settings.n, side=settings.side)


def make_schedule(cfg: ExperimentConfig, dataset: LabeledDataset) -> NoiseSchedule:
    s = cfg.schedule
    if s.delta_max is None:
        return NoiseSchedule.default_for(dataset.samples, count=s.count, delta_min=s.delta_min)
    return NoiseSchedule.geometric(s.delta_max, s.delta_min, s.count)


def sampler_config(cfg: ExperimentConfig, schedule: NoiseSchedule) -> sampler.SamplerConfig:
    mode = cfg.sampler.label_mode
    return sampler.SamplerConfig(
        schedule=schedule,
        steps_per_level=cfg.sampler.steps_per_level,
        base_step=cfg.sampler.base_step,
        gradient_scale=cfg.sampler.gradient_scale,
        label_mode=mode if mode == "resample" else int(mode),
        seed=cfg.sampler.seed,
    )


def load_ground_truth(cfg: ExperimentConfig) -> LabeledDataset:
    return datasets.load_dataset(_require(_dataset_path(cfg), "gen-data"), name="ground_truth")


def gen_data(cfg: ExperimentConfig) -> LabeledDataset:
    directory = cfg.out_dir / "data"
    with _stage("gen-data", directory):
        dataset = make_dataset(cfg.dataset)
        directory.mkdir(parents=True, exist_ok=True)
        datasets.save_dataset(dataset, _dataset_path(cfg))
        write_manifest(cfg, directory, "gen-data", {"dataset.name": dataset.name})
    return dataset


def train_score_stage(cfg: ExperimentConfig) -> ScoreNet:
    directory = cfg.out_dir / "score"
    with _stage("train-score", directory):
        dataset = load_ground_truth(cfg)
        schedule = make_schedule(cfg, dataset)
        directory.mkdir(parents=True, exist_ok=True)
        net = score_model.train_score(
            dataset, schedule, cfg.rr, cfg.score, log_path=directory / "train_log.csv"
        )
        net.save(directory)
        write_manifest(
            cfg,
            directory,
            "train-score",
            {"seed": cfg.score.seed, "levels": ",".join(repr(v) for v in schedule.levels)},
        )
    return net


def train_classifiers_stage(cfg: ExperimentConfig) -> tuple[ClassifierNet, ClassifierNet]:
    """Noise-conditioned guide and clean metric classifier, on distinct seeds."""
    with _stage("train-classifier", cfg.out_dir):
        dataset = load_ground_truth(cfg)
        schedule = make_schedule(cfg, dataset)
        trained = []
        for name, settings, levels in (
            ("guide", cfg.guide, schedule),
            ("metric", cfg.metric, None),
        ):
            directory = cfg.out_dir / name
            directory.mkdir(parents=True, exist_ok=True)
            net = train_classifier(
                dataset, levels, settings, name=name, log_path=directory / "train_log.csv"
            )
            net.save(directory)
            write_manifest(
                cfg,
                directory,
                "train-classifier",
                {
                    "seed": settings.seed,
                    "train_accuracy": net.accuracy(dataset, len(levels) - 1 if levels is not None else None),
                },
            )
            trained.append(net)
    return trained[0], trained[1]


def sample_stage(cfg: ExperimentConfig) -> sampler.SampleResult:
    directory = cfg.out_dir / "samples"
    with _stage("sample", directory):
        score = ScoreNet.load(_require(cfg.out_dir / "score", "train-score"))
        guide = None
        if cfg.sampler.gradient_scale != 0.0:
            guide = ClassifierNet.load(_require(cfg.out_dir / "guide", "train-classifier"))
        result = sampler.langevin_sample(
            score, guide, sampler_config(cfg, score.schedule), cfg.sampler.n_samples
        )
        sampler.save_samples(result, directory)
        write_manifest(
            cfg,
            directory,
            "sample",
            {"seed": cfg.sampler.seed, "gradient_scale": cfg.sampler.gradient_scale},
        )
    return result


def _load_generated(cfg: ExperimentConfig, shape: tuple[int, ...]) -> np.ndarray:
    return sampler.load_samples(_require(cfg.out_dir / "samples", "sample"), shape).samples


def privacy_score_stage(cfg: ExperimentConfig) -> privacy_metrics.PrivacyReport:
    directory = cfg.out_dir / "privacy"
    with _stage("privacy-score", directory):
        truth = load_ground_truth(cfg)
        metric = ClassifierNet.load(_require(cfg.out_dir / "metric", "train-classifier"))
        generated = _load_generated(cfg, truth.sample_shape)
        report = privacy_metrics.privacy_score(
            generated, truth.samples, privacy_metrics.classifier_embedder(metric), metric
        )
        directory.mkdir(parents=True, exist_ok=True)
        privacy_metrics.write_report(
            report, directory, generated=generated, ground_truth=truth.samples
        )
        write_manifest(
            cfg,
            directory,
            "privacy-score",
            {"embedder": report.embedder, "gradient_scale": cfg.sampler.gradient_scale},
        )
        logging.info("privacy score %.4f over %d samples", report.score, report.n)
    return report


def ffd_stage(cfg: ExperimentConfig) -> float:
    directory = cfg.out_dir / "ffd"
    with _stage("ffd", directory):
        truth = load_ground_truth(cfg)
        metric = ClassifierNet.load(_require(cfg.out_dir / "metric", "train-classifier"))
        generated = _load_generated(cfg, truth.sample_shape)
        embed = privacy_metrics.classifier_embedder(metric)
        value = privacy_metrics.ffd(generated, truth.samples, embed)
        directory.mkdir(parents=True, exist_ok=True)
        tensor_io.write_rows_csv(
            directory / "ffd.csv",
            ("key", "value"),
            [("ffd", value), ("n_generated", generated.shape[0]), ("n_reference", len(truth))],
        )
        write_manifest(cfg, directory, "ffd", {"embedder": privacy_metrics.embedder_name(embed)})
        logging.info("feature Frechet distance %.6g", value)
    return value


def _reduce(samples: np.ndarray, reduction: str) -> np.ndarray:
    flat = samples.reshape(samples.shape[0], -1)
    if reduction == "mean":
        return flat.mean(axis=0)
    return flat[0].copy()


def pipeline_mechanism(cfg: ExperimentConfig) -> pac_noise.MechanismSpec:
    """Dataset -> trained score (+ guide) -> pac.n_gen samples -> reduction."""

    def source(seed: int) -> LabeledDataset:
        return make_dataset(cfg.dataset, seed=seed)

    def mechanism(dataset: LabeledDataset) -> np.ndarray:
        schedule = make_schedule(cfg, dataset)
        score = score_model.train_score(dataset, schedule, cfg.rr, cfg.score)
        guide = None
        if cfg.sampler.gradient_scale != 0.0:
            guide = train_classifier(dataset, schedule, cfg.guide, name="guide")
        result = sampler.langevin_sample(score, guide, sampler_config(cfg, schedule), cfg.pac.n_gen)
        return _reduce(result.samples, cfg.pac.reduction)

    return pac_noise.MechanismSpec(
        mechanism=mechanism,
        source=source,
        m=cfg.pac.params.m,
        resampling_seed=cfg.pac.seed,
        description=(
            f"{cfg.dataset.kind} n={cfg.dataset.n}, rr.epsilon={cfg.rr.epsilon:g}, "
            f"rr.k={cfg.rr.k_neighbors}, reduction={cfg.pac.reduction}"
        ),
    )


def pac_noise_stage(
    cfg: ExperimentConfig,
    mechanism: Callable[[ExperimentConfig], pac_noise.MechanismSpec] = pipeline_mechanism,
) -> pac_noise.PacNoiseResult:
    directory = cfg.out_dir / "pac"
    with _stage("pac-noise", directory):
        spec = mechanism(cfg)
        outputs = pac_noise.collect_outputs(spec)
        result = pac_noise.determine_noise(
            outputs, cfg.pac.params, branch=cfg.pac.branch, allocation=cfg.pac.allocation
        )
        result = pac_noise.with_expected_norm(result, cfg.pac.n_mc, Rng(cfg.pac.seed).split(spec.m))
        directory.mkdir(parents=True, exist_ok=True)
        pac_noise.write_result(result, outputs, directory)
        write_manifest(
            cfg,
            directory,
            "pac-noise",
            {"mechanism": spec.description, "resampling_seed": spec.resampling_seed},
        )
        logging.info(
            "Sigma_B trace %.6g, E||B|| %.6g +- %.2g (bound %.6g)",
            result.trace,
            result.e_norm_mc,
            result.e_norm_se,
            result.e_norm_bound,
        )
    return result


@dataclasses.dataclass(frozen=True)
class PipelineSummary:
    privacy: privacy_metrics.PrivacyReport
    ffd: float
    pac: pac_noise.PacNoiseResult | None


def run_pipeline(cfg: ExperimentConfig, *, with_pac: bool = True) -> PipelineSummary:
    """Chains every stage in order."""
    gen_data(cfg)
    train_score_stage(cfg)
    train_classifiers_stage(cfg)
    sample_stage(cfg)
    report = privacy_score_stage(cfg)
    value = ffd_stage(cfg)
    pac = pac_noise_stage(cfg) if with_pac else None
    return PipelineSummary(privacy=report, ffd=value, pac=pac)


RUNNERS: dict[str, Callable[[ExperimentConfig], object]] = {
    "gen-data": gen_data,
    "train-score": train_score_stage,
    "train-classifier": train_classifiers_stage,
    "sample": sample_stage,
    "privacy-score": privacy_score_stage,
    "ffd": ffd_stage,
    "pac-noise": pac_noise_stage,
    "pipeline": run_pipeline,
}
