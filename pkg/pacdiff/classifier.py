"""Binary attribute classifiers.

The noisy variant sees inputs perturbed at a schedule level (one-hot level
index appended, as in the score network) and supplies the guidance gradient
during sampling. The clean variant is trained on unperturbed data; its last
hidden layer is the feature map used by the privacy metrics.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from pacdiff import mlp
from pacdiff import tensor as T
from pacdiff.datasets import LabeledDataset
from pacdiff.rng import Rng
from pacdiff.score_model import NoiseSchedule


N_CLASSES = 2


@dataclasses.dataclass(frozen=True)
class ClassifierNet:
    """MLP mapping a flattened sample (plus one-hot level if noisy) to 2 logits."""

    net: mlp.Mlp
    sample_shape: tuple[int, ...]
    schedule: NoiseSchedule | None = None
    name: str = "classifier"

    @property
    def noisy(self) -> bool:
        return self.schedule is not None

    @property
    def dim(self) -> int:
        return math.prod(self.sample_shape)

    @property
    def feature_dim(self) -> int:
        return self.net.sizes[-2]

    @classmethod
    def init(
        cls,
        rng: Rng,
        sample_shape: Sequence[int],
        hidden: Sequence[int],
        *,
        schedule: NoiseSchedule | None = None,
        activation: str = "tanh",
        name: str = "classifier",
    ) -> ClassifierNet:
        if not hidden:
            raise ValueError("a classifier needs at least one hidden layer")
        dim = math.prod(sample_shape)
        extra = len(schedule) if schedule is not None else 0
        sizes = [dim + extra, *hidden, N_CLASSES]
        return cls(mlp.Mlp.init(rng, sizes, activation), tuple(sample_shape), schedule, name)

    def _inputs(self, x: T.Tensor, level: int | np.ndarray | None) -> T.Tensor:
        if self.schedule is None:
            if level is not None:
                raise ValueError(f"{self.name} is a clean classifier; level must be None")
            return x
        if level is None:
            raise ValueError(f"{self.name} is noise-conditioned; a level is required")
        n = x.shape[0]
        levels = np.broadcast_to(np.asarray(level, dtype=np.int64), (n,))
        one_hot = np.zeros((n, len(self.schedule)))
        one_hot[np.arange(n), levels] = 1.0
        return T.concat(x, T.Tensor(one_hot))

    def _flat(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x.reshape(x.shape[0], -1)

    def forward(
        self,
        x: T.Tensor,
        level: int | np.ndarray | None = None,
        params: Sequence[T.Tensor] | None = None,
    ) -> tuple[T.Tensor, T.Tensor]:
        """(log-probabilities, last hidden activation) for a flat batch."""
        logits, hidden = self.net.forward(self._inputs(x, level), params)
        return T.log_softmax(logits), hidden

    def log_probs(self, x: np.ndarray, level: int | np.ndarray | None = None) -> np.ndarray:
        """log c(y | x) for both classes, shape (n, 2)."""
        out, _ = self.forward(T.Tensor(self._flat(x)), level)
        return out.data

    def probs(self, x: np.ndarray, level: int | np.ndarray | None = None) -> np.ndarray:
        return np.exp(self.log_probs(x, level))

    def predict(self, x: np.ndarray, level: int | np.ndarray | None = None) -> np.ndarray:
        """Argmax label; ties go to 0."""
        return np.argmax(self.log_probs(x, level), axis=1).astype(np.int64)

    def accuracy(self, dataset: LabeledDataset, level: int | None = None) -> float:
        return float(np.mean(self.predict(dataset.samples, level) == dataset.labels))

    def save(self, directory: Path) -> None:
        meta = {
            "kind": "classifier",
            "name": self.name,
            "sample_shape": ",".join(str(s) for s in self.sample_shape),
            "levels": ",".join(repr(v) for v in self.schedule.levels) if self.schedule else "",
        }
        mlp.save_params(self.net, directory, meta)

    @classmethod
    def load(cls, directory: Path) -> ClassifierNet:
        net, meta = mlp.load_params(directory)
        if meta.get("kind") != "classifier":
            raise ValueError(f"{directory} does not hold a classifier")
        shape = tuple(int(v) for v in meta["sample_shape"].split(","))
        levels = meta.get("levels", "")
        schedule = NoiseSchedule(tuple(float(v) for v in levels.split(","))) if levels else None
        return cls(net, shape, schedule, meta.get("name", directory.name))


def log_prob(
    net: ClassifierNet, x: np.ndarray, level: int | None, y: int | np.ndarray
) -> np.ndarray:
    """log c(y | x) per row."""
    labels = np.broadcast_to(np.asarray(y, dtype=np.int64), (np.asarray(x).shape[0],))
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return net.log_probs(x, level)[np.arange(labels.size), labels]


def grad_log_prob_input(
    net: ClassifierNet, x: np.ndarray, level: int | np.ndarray | None, y: int | np.ndarray
) -> np.ndarray:
    """Reverse-mode gradient of log c(y | x) with respect to x, row by row.

    Rows are independent, so the gradient of the batch sum is the batch of
    per-row gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    labels = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    with T.Tape() as tape:
        inputs = tape.watch(x.reshape(n, -1))
        log_p, _ = net.forward(inputs, level)
        total = T.sum(T.gather_log_prob(log_p, labels))
    grads = T.backward(tape, total)
    return grads[inputs].reshape(x.shape)


def features(net: ClassifierNet, x: np.ndarray) -> np.ndarray:
    """Last hidden activations of a clean classifier, shape (n, feature_dim)."""
    if net.noisy:
        raise ValueError(f"{net.name} is noise-conditioned; features need a clean classifier")
    x = np.asarray(x, dtype=np.float64)
    _, hidden = net.forward(T.Tensor(x.reshape(x.shape[0], -1)))
    return hidden.data


def classification_objective(
    net: ClassifierNet, x: np.ndarray, labels: np.ndarray, levels: np.ndarray | None
) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy and parameter gradients."""
    n = x.shape[0]
    with T.Tape() as tape:
        params = net.net.watch(tape)
        log_p, _ = net.forward(T.Tensor(x.reshape(n, -1)), levels, params)
        loss = T.scale(T.mean(T.gather_log_prob(log_p, labels)), -1.0)
    grads = T.backward(tape, loss)
    return loss.item(), [grads[p] for p in params]


def train_classifier(
    dataset: LabeledDataset,
    schedule: NoiseSchedule | None,
    settings: mlp.TrainSettings,
    *,
    name: str = "classifier",
    log_path: Path | None = None,
) -> ClassifierNet:
    """Cross-entropy SGD; with a schedule every example is perturbed at a random level."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if not dataset.is_balanced():
        raise ValueError(f"{dataset.name}: labels are not balanced within 5%")
    master = Rng(settings.seed)
    net = ClassifierNet.init(
        master.split(0),
        dataset.sample_shape,
        settings.layers,
        schedule=schedule,
        activation=settings.activation,
        name=name,
    )
    stream = master.split(1)
    data = dataset.flat

    def step_fn(params: mlp.Mlp, step: int) -> tuple[float, list[np.ndarray]]:
        del step
        idx = stream.integers(len(dataset), [settings.batch])
        x = data[idx]
        levels = None
        if schedule is not None:
            levels = stream.integers(len(schedule), [idx.size])
            x = x + schedule.array[levels][:, None] * stream.gaussian(x.shape)
        current = dataclasses.replace(net, net=params)
        return classification_objective(current, x, dataset.labels[idx], levels)

    trained = mlp.fit(
        net.net, step_fn, steps=settings.steps, lr=settings.lr, name=name, log_path=log_path
    )
    return dataclasses.replace(net, net=trained)
