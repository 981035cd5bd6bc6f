"""Fully connected network parameters, tape forward pass and plain SGD.

Shared by the score network and both classifiers. Parameters are immutable;
an SGD step returns a new `Mlp`.

On-disk layout (one directory per network):
  meta.csv               key,value rows (sizes, activation, owner metadata)
  layer_<i>_weight.csv   fan_in rows x fan_out columns
  layer_<i>_bias.csv     one row of fan_out values
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from absl import logging

from pacdiff import tensor as T
from pacdiff import tensor_io
from pacdiff.rng import Rng


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite."""


_ACTIVATIONS = {"tanh": T.tanh, "relu": T.relu}
_META_HEADER = ("key", "value")


@dataclasses.dataclass(frozen=True)
class TrainSettings:
    """Hidden widths and plain-SGD budget for one network."""

    layers: tuple[int, ...] = (64, 64)
    lr: float = 0.05
    steps: int = 2000
    batch: int = 128
    seed: int = 0
    activation: str = "tanh"


@dataclasses.dataclass(frozen=True)
class Mlp:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be nonempty and of equal length")

    @classmethod
    def init(cls, rng: Rng, sizes: Sequence[int], activation: str = "tanh") -> Mlp:
        """LeCun-normal weights, zero biases. `sizes` includes input and output."""
        if len(sizes) < 2:
            raise ValueError(f"need at least input and output sizes, got {list(sizes)}")
        weights = []
        biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.gaussian([fan_in, fan_out]) / math.sqrt(fan_in))
            biases.append(np.zeros(fan_out))
        return cls(weights=tuple(weights), biases=tuple(biases), activation=activation)

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def params(self) -> list[np.ndarray]:
        """Flat list W0, b0, W1, b1, ..."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> Mlp:
        return Mlp(
            weights=tuple(np.asarray(p, dtype=np.float64) for p in params[0::2]),
            biases=tuple(np.asarray(p, dtype=np.float64) for p in params[1::2]),
            activation=self.activation,
        )

    def watch(self, tape: T.Tape) -> list[T.Tensor]:
        return [tape.watch(p) for p in self.params()]

    def forward(
        self, x: T.Tensor, params: Sequence[T.Tensor] | None = None
    ) -> tuple[T.Tensor, T.Tensor]:
        """Returns (output, last hidden activation).

        Without `params` the stored parameters enter as constants.
        """
        if params is None:
            params = [T.Tensor(p) for p in self.params()]
        act = _ACTIVATIONS[self.activation]
        h = x
        n_layers = len(params) // 2
        for i in range(n_layers - 1):
            h = act(T.add(T.matmul(h, params[2 * i]), params[2 * i + 1]))
        out = T.add(T.matmul(h, params[-2]), params[-1])
        return out, h

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params())


def sgd_step(net: Mlp, grads: Sequence[np.ndarray], lr: float) -> Mlp:
    return net.with_params([p - lr * g for p, g in zip(net.params(), grads, strict=True)])


def fit(
    net: Mlp,
    loss_and_grads: Callable[[Mlp, int], tuple[float, list[np.ndarray]]],
    *,
    steps: int,
    lr: float,
    name: str,
    log_path: Path | None = None,
    log_every: int = 100,
) -> Mlp:
    """Plain SGD with a fixed learning rate; logs `step,loss` per step."""
    history: list[tuple[int, float]] = []
    for step in range(steps):
        loss, grads = loss_and_grads(net, step)
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"{name}: loss became {loss} at step {step}")
        history.append((step, loss))
        if step % log_every == 0 or step == steps - 1:
            logging.info("%s step %d loss %.6f", name, step, loss)
        net = sgd_step(net, grads, lr)
        if not net.is_finite():
            raise TrainingDivergedError(f"{name}: parameters became non-finite at step {step}")
    if log_path is not None:
        tensor_io.write_rows_csv(log_path, ("step", "loss"), history)
    return net


def save_params(net: Mlp, directory: Path, meta: Mapping[str, object]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    rows = [("sizes", ",".join(str(s) for s in net.sizes)), ("activation", net.activation)]
    rows.extend((k, str(v)) for k, v in meta.items())
    tensor_io.write_rows_csv(directory / "meta.csv", _META_HEADER, rows)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        tensor_io.write_matrix_csv(directory / f"layer_{i}_weight.csv", w)
        tensor_io.write_matrix_csv(directory / f"layer_{i}_bias.csv", b)


def load_params(directory: Path) -> tuple[Mlp, dict[str, str]]:
    meta = {k: v for _, (k, v) in tensor_io.read_rows_csv(directory / "meta.csv", _META_HEADER)}
    try:
        sizes = [int(s) for s in meta.pop("sizes").split(",")]
        activation = meta.pop("activation")
    except (KeyError, ValueError) as e:
        raise tensor_io.FormatError(f"{directory / 'meta.csv'}: bad sizes/activation: {e}") from e
    weights = []
    biases = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = tensor_io.read_matrix_csv(directory / f"layer_{i}_weight.csv")
        b = tensor_io.read_matrix_csv(directory / f"layer_{i}_bias.csv").reshape(-1)
        if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise tensor_io.FormatError(
                f"{directory}: layer {i} has shapes {w.shape}/{b.shape}, "
                f"expected ({fan_in}, {fan_out})/({fan_out},)"
            )
        weights.append(w)
        biases.append(b)
    return Mlp(weights=tuple(weights), biases=tuple(biases), activation=activation), meta
