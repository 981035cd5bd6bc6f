"""Procedural datasets with a balanced binary attribute, plus file I/O.

Two generators stand in for attribute-labelled face data:
  - `make_gmm2d`: points from an equal-weight mixture of isotropic Gaussians
    on a circle, labelled by component parity; its perturbed score is known in
    closed form (`analytic_score_gmm`).
  - `make_glyphs`: tiny grayscale faces whose mouth is a smile (label 1) or a
    flat line (label 0).
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np
from scipy import special

from pacdiff import tensor_io
from pacdiff.rng import Rng


class DatasetError(ValueError):
    """Raised for invalid generator parameters or dataset files."""


@dataclasses.dataclass(frozen=True)
class LabeledDataset:
    """Samples of a common shape with labels in {0, 1}."""

    samples: np.ndarray
    labels: np.ndarray
    name: str

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if samples.shape[0] != labels.shape[0]:
            raise DatasetError(
                f"{samples.shape[0]} samples but {labels.shape[0]} labels in {self.name}"
            )
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise DatasetError(f"labels outside {{0, 1}} in {self.name}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    @property
    def flat(self) -> np.ndarray:
        """Samples flattened to `(n, dim)`."""
        return self.samples.reshape(len(self), -1)

    def is_balanced(self) -> bool:
        ones = int(self.labels.sum())
        return abs(ones - (len(self) - ones)) <= 0.05 * len(self)

    def subset(self, indices: np.ndarray, name: str | None = None) -> LabeledDataset:
        return LabeledDataset(
            samples=self.samples[indices], labels=self.labels[indices], name=name or self.name
        )


@dataclasses.dataclass(frozen=True)
class GmmParams:
    """Equal-weight isotropic mixture: one row of `centers` per component."""

    centers: np.ndarray
    sigma_c: float

    @classmethod
    def on_circle(cls, components: int, radius: float, sigma_c: float) -> GmmParams:
        angles = 2.0 * math.pi * np.arange(components) / components
        centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return cls(centers=centers, sigma_c=float(sigma_c))


def make_gmm2d(
    *, seed: int, n: int, components: int, radius: float, sigma_c: float
) -> LabeledDataset:
    """Mixture on a circle; point i belongs to component i mod M."""
    if components < 2 or components % 2:
        raise DatasetError(f"components must be even and >= 2, got {components}")
    if n < components:
        raise DatasetError(f"n must be >= components, got n={n}, components={components}")
    params = GmmParams.on_circle(components, radius, sigma_c)
    component = np.arange(n) % components
    noise = Rng(seed).gaussian([n, 2])
    samples = params.centers[component] + sigma_c * noise
    return LabeledDataset(
        samples=samples,
        labels=component % 2,
        name=f"gmm2d(M={components},r={radius:g},s={sigma_c:g},seed={seed})",
    )


def component_of(x: np.ndarray, params: GmmParams) -> np.ndarray:
    """Index of the nearest mixture center for each row of `x`."""
    d2 = ((np.asarray(x)[:, None, :] - params.centers[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=1)


def _perturbed_variance(params: GmmParams, perturb_sigma: float) -> float:
    return params.sigma_c**2 + float(perturb_sigma) ** 2


def gmm_log_density(x: np.ndarray, params: GmmParams, perturb_sigma: float = 0.0) -> np.ndarray:
    """Log-density of the mixture convolved with N(0, perturb_sigma^2 I)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    var = _perturbed_variance(params, perturb_sigma)
    dim = x.shape[1]
    d2 = ((x[:, None, :] - params.centers[None, :, :]) ** 2).sum(axis=-1)
    log_comp = -0.5 * d2 / var - 0.5 * dim * math.log(2.0 * math.pi * var)
    return special.logsumexp(log_comp, axis=1) - math.log(params.centers.shape[0])


def analytic_score_gmm(x: np.ndarray, params: GmmParams, perturb_sigma: float = 0.0) -> np.ndarray:
    """Exact gradient of `gmm_log_density` with respect to x.

    Accepts a single point or a batch of rows; the output matches the input shape.
    """
    arr = np.asarray(x, dtype=np.float64)
    pts = np.atleast_2d(arr)
    var = _perturbed_variance(params, perturb_sigma)
    diff = params.centers[None, :, :] - pts[:, None, :]
    weights = special.softmax(-0.5 * (diff**2).sum(axis=-1) / var, axis=1)
    score = (weights[:, :, None] * diff).sum(axis=1) / var
    return score.reshape(arr.shape)


# Glyph geometry on the 8x8 reference grid; scaled for larger sides.
_EYE_ROW = 2
_EYE_COLS = (2, 5)
_MOUTH_ROW = 5
_MOUTH_COLS = (2, 3, 4, 5)
_GLYPH_NOISE = 0.03


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def render_glyph(
    *, side: int, smile: bool, shift: tuple[int, int], intensity: float
) -> np.ndarray:
    """Draws one face without noise; `shift` is (rows, cols)."""
    unit = side / 8.0
    image = np.zeros((side, side))

    def put(row: float, col: float, value: float) -> None:
        r = int(round(row * unit)) + shift[0]
        c = int(round(col * unit)) + shift[1]
        if 0 <= r < side and 0 <= c < side:
            image[r, c] = max(image[r, c], value)

    for col in _EYE_COLS:
        put(_EYE_ROW, col, 0.9)
    for col in _MOUTH_COLS:
        put(_MOUTH_ROW, col, intensity)
    if smile:
        # Upturned corners make the arc.
        put(_MOUTH_ROW - 1, _MOUTH_COLS[0] - 1, intensity)
        put(_MOUTH_ROW - 1, _MOUTH_COLS[-1] + 1, intensity)
    return image


def make_glyphs(*, seed: int, n: int, side: int = 8) -> LabeledDataset:
    """Smiling (label 1) and flat-mouthed (label 0) glyphs, exactly half each."""
    if side < 8:
        raise DatasetError(f"side must be >= 8, got {side}")
    if n < 2 or n % 2:
        raise DatasetError(f"n must be even and positive, got {n}")
    rng = Rng(seed)
    shifts = rng.integers(3, [n, 2]) - 1
    intensities = 0.6 + 0.4 * rng.uniform([n])
    noise = _GLYPH_NOISE * rng.gaussian([n, side, side])
    labels = (np.arange(n) + 1) % 2
    images = np.empty((n, side, side))
    for i in range(n):
        clean = render_glyph(
            side=side,
            smile=bool(labels[i]),
            shift=(int(shifts[i, 0]), int(shifts[i, 1])),
            intensity=float(intensities[i]),
        )
        images[i] = _quantize(clean + noise[i])
    return LabeledDataset(samples=images, labels=labels, name=f"glyphs(side={side},seed={seed})")


_POINTS_HEADER = ("x", "y", "label")
_MANIFEST_HEADER = ("filename", "label")
MANIFEST_NAME = "labels.csv"


def _parse_label(value: str, where: str) -> int:
    if value not in ("0", "1"):
        raise DatasetError(f"{where}: label must be 0 or 1, found {value!r}")
    return int(value)


def save_dataset(dataset: LabeledDataset, path: Path) -> None:
    """2-D points go to a CSV file; images go to a directory of PGMs + manifest."""
    if dataset.samples.ndim == 2 and dataset.sample_shape == (2,):
        tensor_io.write_rows_csv(
            path,
            _POINTS_HEADER,
            ((float(x), float(y), int(l)) for (x, y), l in zip(dataset.samples, dataset.labels)),
        )
        return
    if dataset.samples.ndim != 3:
        raise DatasetError(f"cannot save samples of shape {dataset.sample_shape}")
    path.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (image, label) in enumerate(zip(dataset.samples, dataset.labels)):
        filename = f"img_{i:05d}.pgm"
        tensor_io.write_pgm(path / filename, image)
        rows.append((filename, int(label)))
    tensor_io.write_rows_csv(path / MANIFEST_NAME, _MANIFEST_HEADER, rows)


def load_dataset(path: Path, name: str | None = None) -> LabeledDataset:
    """Inverse of `save_dataset`."""
    name = name or path.name
    if path.is_dir():
        rows = tensor_io.read_rows_csv(path / MANIFEST_NAME, _MANIFEST_HEADER)
        if not rows:
            raise DatasetError(f"{path / MANIFEST_NAME}: empty manifest")
        images = []
        labels = []
        for line_no, (filename, label) in rows:
            labels.append(_parse_label(label, f"{path / MANIFEST_NAME}:{line_no}"))
            images.append(tensor_io.read_pgm(path / filename))
        return LabeledDataset(samples=np.stack(images), labels=np.array(labels), name=name)

    rows = tensor_io.read_rows_csv(path, _POINTS_HEADER)
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    points = []
    labels = []
    for line_no, (x, y, label) in rows:
        try:
            points.append((float(x), float(y)))
        except ValueError as e:
            raise DatasetError(f"{path}:{line_no}: {e}") from e
        labels.append(_parse_label(label, f"{path}:{line_no}"))
    return LabeledDataset(samples=np.array(points), labels=np.array(labels), name=name)
