"""Nearest-neighbour privacy score and feature Frechet distance.

The privacy score is the fraction of generated samples whose nearest
ground-truth sample (L2 in feature space) gets a different predicted label
from a clean classifier. The classifier sees raw samples; only the neighbour
search uses the embedding. The feature map replaces a pretrained Inception
network, so Frechet distances here are comparable only to each other.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
from scipy.spatial import distance

from pacdiff import classifier
from pacdiff import linalg
from pacdiff import tensor_io
from pacdiff.classifier import ClassifierNet


class MetricInputError(ValueError):
    """Raised for empty or undersized sample sets and wrong classifier variants."""


class LabelPredictor(Protocol):
    name: str

    def predict(self, x: np.ndarray) -> np.ndarray: ...


Embedder = Callable[[np.ndarray], np.ndarray]


def classifier_embedder(net: ClassifierNet) -> Embedder:
    """Feature map of a clean classifier."""
    if net.noisy:
        raise MetricInputError(f"{net.name} is noise-conditioned; use a clean classifier")

    def embed(x: np.ndarray) -> np.ndarray:
        return classifier.features(net, x)

    embed.__name__ = f"features[{net.name}]"
    return embed


@dataclasses.dataclass(frozen=True)
class AuditRecord:
    gen_id: int
    nn_id: int
    l2: float
    label_gen: int
    label_nn: int

    @property
    def differs(self) -> bool:
        return self.label_gen != self.label_nn


@dataclasses.dataclass(frozen=True)
class PrivacyReport:
    score: float
    n: int
    audits: tuple[AuditRecord, ...]
    embedder: str
    classifier: str


def nearest_neighbors(queries: np.ndarray, references: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force L2 nearest reference for every query; ties go to the lowest index."""
    d2 = distance.cdist(queries, references, "sqeuclidean")
    nn = np.argmin(d2, axis=1)
    return nn, np.sqrt(d2[np.arange(nn.size), nn])


def embedder_name(embed: Embedder) -> str:
    return getattr(embed, "__name__", type(embed).__name__)


def privacy_score(
    generated: np.ndarray,
    ground_truth: np.ndarray,
    embed: Embedder,
    clf: ClassifierNet | LabelPredictor,
) -> PrivacyReport:
    """Fraction of generated samples whose nearest ground-truth neighbour is labelled differently."""
    generated = np.asarray(generated, dtype=np.float64)
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    if generated.shape[0] == 0 or ground_truth.shape[0] == 0:
        raise MetricInputError("privacy score needs nonempty generated and ground-truth sets")
    if isinstance(clf, ClassifierNet) and clf.noisy:
        raise MetricInputError(f"{clf.name} is noise-conditioned; use a clean classifier")

    gen_features = np.asarray(embed(generated)).reshape(generated.shape[0], -1)
    ref_features = np.asarray(embed(ground_truth)).reshape(ground_truth.shape[0], -1)
    nn, l2 = nearest_neighbors(gen_features, ref_features)
    label_gen = np.asarray(clf.predict(generated), dtype=np.int64)
    label_ref = np.asarray(clf.predict(ground_truth), dtype=np.int64)

    audits = tuple(
        AuditRecord(
            gen_id=i,
            nn_id=int(nn[i]),
            l2=float(l2[i]),
            label_gen=int(label_gen[i]),
            label_nn=int(label_ref[nn[i]]),
        )
        for i in range(generated.shape[0])
    )
    differing = sum(1 for a in audits if a.differs)
    return PrivacyReport(
        score=differing / len(audits),
        n=len(audits),
        audits=audits,
        embedder=embedder_name(embed),
        classifier=clf.name,
    )


def ffd(generated: np.ndarray, reference: np.ndarray, embed: Embedder) -> float:
    """Frechet distance between Gaussians fitted to the embedded sets."""
    gen = np.asarray(embed(np.asarray(generated, dtype=np.float64)))
    ref = np.asarray(embed(np.asarray(reference, dtype=np.float64)))
    gen = gen.reshape(gen.shape[0], -1)
    ref = ref.reshape(ref.shape[0], -1)
    dim = gen.shape[1]
    for label, feats in (("generated", gen), ("reference", ref)):
        if feats.shape[0] < dim + 1:
            raise MetricInputError(
                f"{label} set has {feats.shape[0]} samples; need at least {dim + 1} "
                f"for {dim}-dimensional features"
            )
    mu_g, cov_g = linalg.empirical_moments(gen)
    mu_r, cov_r = linalg.empirical_moments(ref)
    return linalg.frechet_distance(mu_g, cov_g, mu_r, cov_r)


_REPORT_HEADER = ("gen_id", "nn_id", "l2", "label_gen", "label_nn", "differs")


def write_report(
    report: PrivacyReport,
    directory: Path,
    *,
    ffd_value: float | None = None,
    generated: np.ndarray | None = None,
    ground_truth: np.ndarray | None = None,
) -> None:
    """Writes report.csv, summary.csv and, for images, audits/ PGM pairs."""
    tensor_io.write_rows_csv(
        directory / "report.csv",
        _REPORT_HEADER,
        (
            (a.gen_id, a.nn_id, a.l2, a.label_gen, a.label_nn, int(a.differs))
            for a in report.audits
        ),
    )
    summary = [
        ("score", report.score),
        ("n", report.n),
        ("embedder", report.embedder),
        ("classifier", report.classifier),
    ]
    if ffd_value is not None:
        summary.append(("ffd", ffd_value))
    tensor_io.write_rows_csv(directory / "summary.csv", ("key", "value"), summary)

    if generated is not None and ground_truth is not None and generated.ndim == 3:
        for a in report.audits:
            tensor_io.write_pgm(directory / "audits" / f"{a.gen_id:05d}_gen.pgm", generated[a.gen_id])
            tensor_io.write_pgm(directory / "audits" / f"{a.gen_id:05d}_nn.pgm", ground_truth[a.nn_id])
