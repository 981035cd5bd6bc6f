"""Annealed Langevin sampling with private classifier guidance.

Per level i (delta_1 first) and inner step t:

    x <- x + (alpha_i / 2) s(x, delta_i) + sqrt(alpha_i) z
           + k * Sigma(x) * grad_x log c(y_n | x)

with alpha_i = base_step * delta_i^2 / delta_L^2 and Sigma(x) := alpha_i * I,
the covariance of the injected noise. The chain carries over between levels.

Every chain owns a child stream of the master seed (by chain index) and draws
its label, its start point and its noise from it, so results do not depend on
how many chains run together.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Callable, Literal, Protocol, Sequence

import numpy as np
from absl import logging

from pacdiff import classifier
from pacdiff import tensor_io
from pacdiff.classifier import ClassifierNet
from pacdiff.rng import Rng, RngBank
from pacdiff.score_model import NoiseSchedule


SIGMA_FORM = "alpha_i*I"


class SamplerDivergedError(RuntimeError):
    """Raised when a chain state becomes non-finite."""


class ScoreModel(Protocol):
    schedule: NoiseSchedule
    sample_shape: tuple[int, ...]

    def score(self, x: np.ndarray, level: int) -> np.ndarray: ...


class Guide(Protocol):
    def grad_log_prob(self, x: np.ndarray, level: int, labels: np.ndarray) -> np.ndarray: ...


@dataclasses.dataclass(frozen=True)
class AnalyticScore:
    """Closed-form score `fn(x, delta)` evaluated at the schedule's levels."""

    fn: Callable[[np.ndarray, float], np.ndarray]
    schedule: NoiseSchedule
    sample_shape: tuple[int, ...]

    def score(self, x: np.ndarray, level: int) -> np.ndarray:
        return self.fn(x, self.schedule.levels[level])


@dataclasses.dataclass(frozen=True)
class ClassifierGuide:
    """Guidance from a noise-conditioned classifier."""

    net: ClassifierNet

    def grad_log_prob(self, x: np.ndarray, level: int, labels: np.ndarray) -> np.ndarray:
        return classifier.grad_log_prob_input(self.net, x, level, labels)


LabelMode = Literal["resample", 0, 1]


@dataclasses.dataclass(frozen=True)
class SamplerConfig:
    schedule: NoiseSchedule
    steps_per_level: int = 100
    base_step: float = 0.05
    gradient_scale: float = 0.0
    label_mode: LabelMode = "resample"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps_per_level < 1:
            raise ValueError(f"steps_per_level must be >= 1, got {self.steps_per_level}")
        if not self.base_step > 0.0:
            raise ValueError(f"base_step must be > 0, got {self.base_step}")
        if not math.isfinite(self.gradient_scale):
            raise ValueError(f"gradient_scale must be finite, got {self.gradient_scale}")
        if self.label_mode not in ("resample", 0, 1):
            raise ValueError(f"label_mode must be 'resample', 0 or 1, got {self.label_mode!r}")


@dataclasses.dataclass(frozen=True)
class SampleResult:
    samples: np.ndarray
    labels: np.ndarray
    chain_seeds: tuple[int, ...]


def _as_guide(guide: ClassifierNet | Guide | None) -> Guide | None:
    if isinstance(guide, ClassifierNet):
        return ClassifierGuide(guide)
    return guide


def step(
    x: np.ndarray,
    level: int,
    *,
    score: ScoreModel,
    guide: ClassifierNet | Guide | None,
    labels: np.ndarray,
    cfg: SamplerConfig,
    rng: Rng | RngBank | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """One guided Langevin update of a batch `x` at level index `level`.

    `noise` overrides the draw from `rng`.
    """
    alpha = cfg.schedule.step_size(level, cfg.base_step)
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise is required")
        noise = rng.gaussian(x.shape[1:]) if isinstance(rng, RngBank) else rng.gaussian(x.shape)
    out = x + 0.5 * alpha * score.score(x, level) + math.sqrt(alpha) * noise
    guide = _as_guide(guide)
    if guide is not None and cfg.gradient_scale != 0.0:
        out = out + cfg.gradient_scale * alpha * guide.grad_log_prob(x, level, labels)
    return out


def _check_compatible(score: ScoreModel, guide: ClassifierNet | Guide | None, cfg: SamplerConfig) -> None:
    if len(score.schedule) != len(cfg.schedule) or not np.allclose(
        score.schedule.array, cfg.schedule.array, rtol=1e-12, atol=0.0
    ):
        raise ValueError("sampler schedule does not match the score model's schedule")
    if isinstance(guide, ClassifierNet):
        if guide.schedule is None:
            raise ValueError(f"guide {guide.name} is not noise-conditioned")
        if len(guide.schedule) != len(cfg.schedule) or not np.allclose(
            guide.schedule.array, cfg.schedule.array, rtol=1e-12, atol=0.0
        ):
            raise ValueError(f"guide {guide.name} was trained on different noise levels")


def langevin_sample(
    score: ScoreModel,
    guide: ClassifierNet | Guide | None,
    cfg: SamplerConfig,
    n_samples: int,
) -> SampleResult:
    """Runs `n_samples` independent chains through all levels."""
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    _check_compatible(score, guide, cfg)
    master = Rng(cfg.seed)
    bank = RngBank(master, n_samples)
    seeds = tuple(int(s) for s in bank.states)

    if cfg.label_mode == "resample":
        labels = bank.integers(2)
    else:
        labels = np.full(n_samples, int(cfg.label_mode), dtype=np.int64)
    x = bank.gaussian(score.sample_shape)

    for level, delta in enumerate(cfg.schedule.levels):
        alpha = cfg.schedule.step_size(level, cfg.base_step)
        for t in range(cfg.steps_per_level):
            x = step(x, level, score=score, guide=guide, labels=labels, cfg=cfg, rng=bank)
            if not np.isfinite(x).all():
                raise SamplerDivergedError(
                    f"non-finite state at level {level} (delta={delta:.4g}, "
                    f"alpha={alpha:.4g}), step {t}"
                )
        logging.info(
            "level %d delta %.4g alpha %.4g mean|x| %.4f",
            level,
            delta,
            alpha,
            float(np.linalg.norm(x.reshape(n_samples, -1), axis=1).mean()),
        )
    return SampleResult(samples=x, labels=labels, chain_seeds=seeds)


_MANIFEST_HEADER = ("sample_id", "y_n", "seed")
MANIFEST_NAME = "samples_manifest.csv"
POINTS_NAME = "samples.csv"


def save_samples(result: SampleResult, directory: Path) -> None:
    """2-D samples go to samples.csv, images to PGM files; plus samples_manifest.csv."""
    directory.mkdir(parents=True, exist_ok=True)
    samples = result.samples
    if samples.ndim == 2:
        tensor_io.write_matrix_csv(directory / POINTS_NAME, samples)
    else:
        for i, image in enumerate(samples.reshape((samples.shape[0],) + samples.shape[-2:])):
            tensor_io.write_pgm(directory / f"sample_{i:05d}.pgm", image)
    tensor_io.write_rows_csv(
        directory / MANIFEST_NAME,
        _MANIFEST_HEADER,
        ((i, int(y), seed) for i, (y, seed) in enumerate(zip(result.labels, result.chain_seeds))),
    )


def load_samples(directory: Path, sample_shape: Sequence[int]) -> SampleResult:
    rows = tensor_io.read_rows_csv(directory / MANIFEST_NAME, _MANIFEST_HEADER)
    if not rows:
        raise tensor_io.FormatError(f"{directory / MANIFEST_NAME}: empty manifest")
    labels = np.array([int(r[1]) for _, r in rows], dtype=np.int64)
    seeds = tuple(int(r[2]) for _, r in rows)
    if len(sample_shape) == 1:
        samples = tensor_io.read_matrix_csv(directory / POINTS_NAME)
    else:
        samples = np.stack(
            [tensor_io.read_pgm(directory / f"sample_{int(r[0]):05d}.pgm") for _, r in rows]
        )
    return SampleResult(
        samples=samples.reshape((len(rows),) + tuple(sample_shape)),
        labels=labels,
        chain_seeds=seeds,
    )
