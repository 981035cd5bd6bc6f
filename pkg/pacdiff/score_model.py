"""Noise-conditioned score network trained by denoising score matching.

Regression targets are recovery directions built from a randomized-response
choice among the nearest dataset neighbours of each perturbed sample, so the
network never regresses onto the exact source with certainty unless
epsilon is infinite.

Sign convention: by default d = (x_r - x_tilde) / delta^2, the true score of
N(x_r, delta^2) at x_tilde. `RrConfig.paper_sign` flips it.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import distance

from pacdiff import mlp
from pacdiff import tensor as T
from pacdiff.datasets import LabeledDataset
from pacdiff.rng import Rng


DEFAULT_LEVELS = 10
DEFAULT_DELTA_MIN = 0.01


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    """Geometric noise levels delta_1 > ... > delta_L > 0."""

    levels: tuple[float, ...]

    def __post_init__(self) -> None:
        levels = tuple(float(v) for v in self.levels)
        if not levels or any(not (v > 0.0) or not math.isfinite(v) for v in levels):
            raise ValueError(f"noise levels must be positive and finite, got {levels}")
        if any(b >= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"noise levels must be strictly decreasing, got {levels}")
        object.__setattr__(self, "levels", levels)

    @classmethod
    def geometric(cls, delta_max: float, delta_min: float, count: int) -> NoiseSchedule:
        if count < 1:
            raise ValueError(f"need at least one level, got {count}")
        if count == 1:
            return cls((float(delta_max),))
        if not delta_max > delta_min > 0.0:
            raise ValueError(f"need delta_max > delta_min > 0, got {delta_max}, {delta_min}")
        ratio = (delta_min / delta_max) ** (1.0 / (count - 1))
        return cls(tuple(delta_max * ratio**i for i in range(count)))

    @classmethod
    def default_for(
        cls,
        samples: np.ndarray,
        *,
        count: int = DEFAULT_LEVELS,
        delta_min: float = DEFAULT_DELTA_MIN,
    ) -> NoiseSchedule:
        """delta_1 = half the largest pairwise distance of the data."""
        flat = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
        delta_max = 0.5 * float(distance.pdist(flat).max())
        return cls.geometric(delta_max, delta_min, count)

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.levels)

    @property
    def smallest(self) -> float:
        return self.levels[-1]

    def step_size(self, level: int, base_step: float) -> float:
        """alpha_i = base_step * delta_i^2 / delta_L^2."""
        return base_step * (self.levels[level] / self.levels[-1]) ** 2


@dataclasses.dataclass(frozen=True)
class RrConfig:
    """Randomized response over the k nearest neighbours of a perturbed sample."""

    epsilon: float
    k_neighbors: int = 1
    paper_sign: bool = False

    def __post_init__(self) -> None:
        if math.isnan(self.epsilon) or self.epsilon < 0.0:
            raise ValueError(f"epsilon must be >= 0 or inf, got {self.epsilon}")
        if self.k_neighbors < 1:
            raise ValueError(f"k_neighbors must be >= 1, got {self.k_neighbors}")

    @property
    def true_source_probability(self) -> float:
        """e^eps / (e^eps + k - 1), written to stay finite at eps = inf."""
        return 1.0 / (1.0 + (self.k_neighbors - 1) * math.exp(-self.epsilon))

    @property
    def decoy_probability(self) -> float:
        """1 / (e^eps + k - 1), the probability of each specific decoy."""
        if self.k_neighbors == 1:
            return 0.0
        return (1.0 - self.true_source_probability) / (self.k_neighbors - 1)


def _one_hot(levels: np.ndarray, count: int) -> np.ndarray:
    out = np.zeros((levels.shape[0], count))
    out[np.arange(levels.shape[0]), levels] = 1.0
    return out


@dataclasses.dataclass(frozen=True)
class ScoreNet:
    """s(x, i) = f([x, onehot(i)]) / delta_i."""

    net: mlp.Mlp
    schedule: NoiseSchedule
    sample_shape: tuple[int, ...]

    @classmethod
    def init(
        cls,
        rng: Rng,
        schedule: NoiseSchedule,
        sample_shape: Sequence[int],
        hidden: Sequence[int],
        activation: str = "tanh",
    ) -> ScoreNet:
        dim = math.prod(sample_shape)
        sizes = [dim + len(schedule), *hidden, dim]
        return cls(mlp.Mlp.init(rng, sizes, activation), schedule, tuple(sample_shape))

    @property
    def dim(self) -> int:
        return math.prod(self.sample_shape)

    def forward(
        self, x: T.Tensor, levels: np.ndarray, params: Sequence[T.Tensor] | None = None
    ) -> T.Tensor:
        """Scores for a flattened batch `x` of shape (n, dim)."""
        levels = np.asarray(levels, dtype=np.int64)
        inputs = T.concat(x, T.Tensor(_one_hot(levels, len(self.schedule))))
        out, _ = self.net.forward(inputs, params)
        inv = 1.0 / self.schedule.array[levels]
        return T.mul(out, T.Tensor(np.repeat(inv[:, None], self.dim, axis=1)))

    def score(self, x: np.ndarray, level: int | np.ndarray) -> np.ndarray:
        """Score at noise level index `level` for samples of any leading batch shape."""
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        levels = np.broadcast_to(np.asarray(level, dtype=np.int64), (n,))
        out = self.forward(T.Tensor(x.reshape(n, -1)), levels)
        return out.data.reshape(x.shape)

    def save(self, directory: Path) -> None:
        mlp.save_params(
            self.net,
            directory,
            {
                "kind": "score",
                "levels": ",".join(repr(v) for v in self.schedule.levels),
                "sample_shape": ",".join(str(s) for s in self.sample_shape),
            },
        )

    @classmethod
    def load(cls, directory: Path) -> ScoreNet:
        net, meta = mlp.load_params(directory)
        if meta.get("kind") != "score":
            raise ValueError(f"{directory} does not hold a score network")
        levels = tuple(float(v) for v in meta["levels"].split(","))
        shape = tuple(int(v) for v in meta["sample_shape"].split(","))
        return cls(net, NoiseSchedule(levels), shape)


def perturb(x: np.ndarray, delta: float | np.ndarray, rng: Rng) -> np.ndarray:
    """x + delta * z with z standard normal; `delta` may be one value per row."""
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if (delta <= 0.0).any():
        raise ValueError("delta must be positive")
    z = rng.gaussian(x.shape)
    if delta.ndim == 1:
        delta = delta.reshape((-1,) + (1,) * (x.ndim - 1))
    return x + delta * z


def rr_select(
    x_tilde: np.ndarray,
    data: np.ndarray,
    sources: np.ndarray,
    cfg: RrConfig,
    rng: Rng,
) -> np.ndarray:
    """Randomized-response neighbour choice for each row of `x_tilde`.

    Candidates are the source plus the k - 1 dataset elements nearest to
    x_tilde other than the source (Euclidean, ties to the lowest index); when
    the source is among the k nearest neighbours this is exactly that set.
    Returns dataset indices.
    """
    x_tilde = np.atleast_2d(np.asarray(x_tilde, dtype=np.float64))
    data = np.asarray(data, dtype=np.float64).reshape(len(data), -1)
    sources = np.asarray(sources, dtype=np.int64).reshape(-1)
    b = x_tilde.shape[0]
    k = cfg.k_neighbors
    if k > data.shape[0]:
        raise ValueError(f"k_neighbors={k} exceeds dataset size {data.shape[0]}")
    if sources.shape != (b,):
        raise ValueError(f"need one source per row, got {sources.shape} for {b} rows")

    keep = rng.uniform([b]) < cfg.true_source_probability
    if k == 1:
        return sources.copy()
    pick = rng.integers(k - 1, [b])

    d2 = distance.cdist(x_tilde.reshape(b, -1), data, "sqeuclidean")
    d2[np.arange(b), sources] = np.inf
    decoys = np.argsort(d2, axis=1, kind="stable")[:, : k - 1]
    return np.where(keep, sources, decoys[np.arange(b), pick])


def recovery_direction(
    x_tilde: np.ndarray, x_r: np.ndarray, delta: float | np.ndarray, *, paper_sign: bool = False
) -> np.ndarray:
    """(x_r - x_tilde) / delta^2, or its negation with `paper_sign`."""
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    x_r = np.asarray(x_r, dtype=np.float64)
    if x_tilde.shape != x_r.shape:
        raise ValueError(f"shape mismatch: {x_tilde.shape} vs {x_r.shape}")
    delta = np.asarray(delta, dtype=np.float64)
    if (delta <= 0.0).any():
        raise ValueError("delta must be positive")
    if delta.ndim == 1:
        delta = delta.reshape((-1,) + (1,) * (x_tilde.ndim - 1))
    d = (x_r - x_tilde) / delta**2
    return -d if paper_sign else d


@dataclasses.dataclass(frozen=True)
class DsmBatch:
    """One mini-batch of perturbed inputs and their privatized targets."""

    x_tilde: np.ndarray
    targets: np.ndarray
    levels: np.ndarray
    chosen: np.ndarray

    def permuted(self, order: np.ndarray) -> DsmBatch:
        return DsmBatch(
            self.x_tilde[order], self.targets[order], self.levels[order], self.chosen[order]
        )


def draw_dsm_batch(
    data: np.ndarray,
    batch_idx: np.ndarray,
    schedule: NoiseSchedule,
    cfg: RrConfig,
    rng: Rng,
) -> DsmBatch:
    """Samples levels, perturbs, runs randomized response, builds targets.

    Draw order: levels, perturbation noise, RR draws.
    """
    flat = np.asarray(data, dtype=np.float64).reshape(len(data), -1)
    batch_idx = np.asarray(batch_idx, dtype=np.int64)
    if batch_idx.size == 0:
        raise ValueError("empty batch")
    levels = rng.integers(len(schedule), [batch_idx.size])
    deltas = schedule.array[levels]
    x_tilde = perturb(flat[batch_idx], deltas, rng)
    chosen = rr_select(x_tilde, flat, batch_idx, cfg, rng)
    targets = recovery_direction(x_tilde, flat[chosen], deltas, paper_sign=cfg.paper_sign)
    return DsmBatch(x_tilde=x_tilde, targets=targets, levels=levels, chosen=chosen)


def dsm_value(scores: np.ndarray, batch: DsmBatch, schedule: NoiseSchedule) -> float:
    """Mean over the batch of 0.5 * delta_i^2 * ||d - s||^2 for given score values."""
    weights = schedule.array[batch.levels] ** 2
    residual = np.asarray(batch.targets) - np.asarray(scores).reshape(batch.targets.shape)
    return float(np.mean(0.5 * weights * (residual**2).sum(axis=1)))


def dsm_objective(net: ScoreNet, batch: DsmBatch) -> tuple[float, list[np.ndarray]]:
    """Loss and parameter gradients (ordered as `net.net.params()`)."""
    b = batch.x_tilde.shape[0]
    with T.Tape() as tape:
        params = net.net.watch(tape)
        scores = net.forward(T.Tensor(batch.x_tilde), batch.levels, params)
        residual = T.sub(scores, T.Tensor(batch.targets))
        deltas = net.schedule.array[batch.levels]
        weighted = T.mul(residual, T.Tensor(np.repeat(deltas[:, None], net.dim, axis=1)))
        loss = T.scale(T.sum(T.mul(weighted, weighted)), 0.5 / b)
    grads = T.backward(tape, loss)
    return loss.item(), [grads[p] for p in params]


def dsm_loss(
    net: ScoreNet,
    data: np.ndarray,
    batch_idx: np.ndarray,
    cfg: RrConfig,
    rng: Rng,
) -> tuple[float, list[np.ndarray]]:
    """Draws a privatized batch and evaluates the weighted DSM objective."""
    return dsm_objective(net, draw_dsm_batch(data, batch_idx, net.schedule, cfg, rng))


def train_score(
    dataset: LabeledDataset,
    schedule: NoiseSchedule,
    cfg: RrConfig,
    settings: mlp.TrainSettings,
    *,
    log_path: Path | None = None,
) -> ScoreNet:
    """Plain SGD on the privatized DSM objective."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    master = Rng(settings.seed)
    net = ScoreNet.init(
        master.split(0), schedule, dataset.sample_shape, settings.layers, settings.activation
    )
    stream = master.split(1)
    data = dataset.flat

    def step_fn(params: mlp.Mlp, step: int) -> tuple[float, list[np.ndarray]]:
        del step
        batch_idx = stream.integers(len(dataset), [settings.batch])
        current = dataclasses.replace(net, net=params)
        return dsm_loss(current, data, batch_idx, cfg, stream)

    trained = mlp.fit(
        net.net,
        step_fn,
        steps=settings.steps,
        lr=settings.lr,
        name="score",
        log_path=log_path,
    )
    return dataclasses.replace(net, net=trained)
