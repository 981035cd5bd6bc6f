"""Symmetric eigendecomposition and Gaussian moment utilities.

The eigensolver is cyclic Jacobi: simple, provably convergent and accurate to
working precision on the small matrices (d up to a few hundred) used here.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np


class AsymmetricMatrixError(ValueError):
    """Raised when a matrix that must be symmetric is not."""


class NotPsdError(ValueError):
    """Raised when a matrix that must be PSD has a significant negative eigenvalue."""


_SYMMETRY_TOL = 1e-9
_OFFDIAG_TOL = 1e-12
_CLAMP_REL = 1e-12
_MAX_SWEEPS = 100


@dataclasses.dataclass(frozen=True)
class EigenSystem:
    """Columns of `vectors` are eigenvectors; `values` sorted descending."""

    vectors: np.ndarray
    values: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def empirical_moments(samples: Sequence[np.ndarray] | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance with divisor m (not m - 1)."""
    try:
        data = np.array(samples, dtype=np.float64)
    except ValueError as e:
        raise ValueError(f"samples have ragged dimensions: {e}") from e
    if data.dtype == object or data.ndim != 2:
        raise ValueError(f"samples must be m vectors of equal dimension, got shape {data.shape}")
    m = data.shape[0]
    if m < 2:
        raise ValueError(f"need at least 2 samples, got {m}")
    mu = data.mean(axis=0)
    centered = data - mu
    cov = centered.T @ centered / m
    return mu, 0.5 * (cov + cov.T)


def check_symmetric(matrix: np.ndarray) -> np.ndarray:
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise AsymmetricMatrixError(f"expected a square matrix, got shape {a.shape}")
    norm = np.linalg.norm(a)
    if np.linalg.norm(a - a.T) > _SYMMETRY_TOL * norm:
        raise AsymmetricMatrixError(
            f"matrix is not symmetric: ||A - A^T||_F = {np.linalg.norm(a - a.T):.3e}"
        )
    return a


def _off_diagonal_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a - np.diag(np.diag(a))))


def eigh(matrix: np.ndarray) -> EigenSystem:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix."""
    a = check_symmetric(matrix).copy()
    a = 0.5 * (a + a.T)
    d = a.shape[0]
    v = np.eye(d)
    norm = float(np.linalg.norm(a))
    if norm == 0.0 or d == 1:
        return EigenSystem(vectors=v, values=np.diag(a).copy())

    for _ in range(_MAX_SWEEPS):
        if _off_diagonal_norm(a) <= _OFFDIAG_TOL * norm:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                # Rotation J with J[p,p]=c, J[p,q]=s, J[q,p]=-s, J[q,q]=c zeroes a[p,q].
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c

                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0

                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    else:
        raise RuntimeError(
            f"Jacobi did not converge in {_MAX_SWEEPS} sweeps "
            f"(off-diagonal mass {_off_diagonal_norm(a):.3e})"
        )

    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return EigenSystem(vectors=v[:, order], values=values[order])


def clamp_small(values: np.ndarray) -> np.ndarray:
    """Zeroes eigenvalues below 1e-12 * lambda_max (negatives included)."""
    values = np.asarray(values, dtype=np.float64)
    top = float(values.max()) if values.size else 0.0
    out = values.copy()
    out[out < _CLAMP_REL * max(top, 0.0)] = 0.0
    return out


def sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix."""
    system = eigh(matrix)
    top = float(system.values.max()) if system.values.size else 0.0
    low = float(system.values.min()) if system.values.size else 0.0
    if low < -1e-6 * max(top, 0.0) and low < -1e-10:
        raise NotPsdError(f"matrix has negative eigenvalue {low:.3e} (lambda_max {top:.3e})")
    roots = np.sqrt(np.maximum(system.values, 0.0))
    root = (system.vectors * roots) @ system.vectors.T
    return 0.5 * (root + root.T)


def frechet_distance(
    mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray
) -> float:
    """Frechet distance between N(mu1, sigma1) and N(mu2, sigma2)."""
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    sigma1 = np.atleast_2d(np.asarray(sigma1, dtype=np.float64))
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    d = mu1.shape[0]
    if mu2.shape != (d,) or sigma1.shape != (d, d) or sigma2.shape != (d, d):
        raise ValueError(
            "dimension mismatch: "
            f"mu1 {mu1.shape}, sigma1 {sigma1.shape}, mu2 {mu2.shape}, sigma2 {sigma2.shape}"
        )
    root1 = sqrt_psd(sigma1)
    inner = root1 @ sigma2 @ root1
    cross = sqrt_psd(0.5 * (inner + inner.T))
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(cross))
    return max(value, 0.0)
