"""(1 - gamma)-confidence Gaussian noise determination for a deterministic mechanism.

The mechanism is retrained on m independently drawn datasets; the spread of
its outputs decides the covariance Sigma_B of Gaussian noise B such that
releasing M(X) + B keeps MI(X; M(X) + B) below nu + beta.

Branch rule: j0 counts eigenvalues strictly above c. The anisotropic branch
is taken when j0 >= 1 and every consecutive gap lambda_j - lambda_{j+1}
(j = 1..j0, lambda_{d+1} := 0) exceeds r * sqrt(d / c + 2c); otherwise the
isotropic fallback Sigma_B = (sum lambda + d c / (2 nu)) I.

gamma enters no formula; it is carried in the result as metadata.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Callable, Literal

import numpy as np
from absl import logging
from scipy import special

from pacdiff import linalg
from pacdiff import tensor_io
from pacdiff.datasets import LabeledDataset
from pacdiff.rng import Rng


BRANCH_CONDITION_FORM = "consecutive_gap"


class PacNoiseError(ValueError):
    """Raised for invalid noise-determination inputs."""


class MechanismRunError(RuntimeError):
    """Raised when one mechanism run fails; carries the run index."""

    def __init__(self, run_index: int, cause: BaseException) -> None:
        super().__init__(f"mechanism run {run_index} failed: {cause}")
        self.run_index = run_index


Branch = Literal["anisotropic", "isotropic"]
Allocation = Literal["printed", "proportional"]


@dataclasses.dataclass(frozen=True)
class PacParams:
    nu: float = 0.5
    beta: float = 0.5
    c: float = 0.01
    gamma: float = 0.01
    r: float = 0.1
    m: int = 200

    def __post_init__(self) -> None:
        for name in ("nu", "beta", "c", "r"):
            if not getattr(self, name) > 0.0:
                raise PacNoiseError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.m < 2:
            raise PacNoiseError(f"m must be >= 2, got {self.m}")


@dataclasses.dataclass(frozen=True)
class MechanismSpec:
    """A deterministic map dataset -> d-vector plus the retraining protocol.

    `source(seed)` draws a dataset realization; run k uses the k-th child of
    `resampling_seed`.
    """

    mechanism: Callable[[LabeledDataset], np.ndarray]
    source: Callable[[int], LabeledDataset]
    m: int
    resampling_seed: int = 0
    description: str = ""

    def run_seed(self, k: int) -> int:
        return Rng(self.resampling_seed).split(k).state


@dataclasses.dataclass(frozen=True)
class PacNoiseResult:
    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    eigensystem: linalg.EigenSystem
    branch: Branch
    condition: str
    sigma_b: np.ndarray
    noise_values: np.ndarray
    params: PacParams
    allocation: Allocation
    e_norm_mc: float = float("nan")
    e_norm_se: float = float("nan")
    e_norm_bound: float = float("nan")

    @property
    def trace(self) -> float:
        return float(np.trace(self.sigma_b))


def run_mechanism(spec: MechanismSpec, k: int) -> np.ndarray:
    """y^(k) = M(X^(k)) for the k-th dataset realization."""
    try:
        dataset = spec.source(spec.run_seed(k))
        out = np.asarray(spec.mechanism(dataset), dtype=np.float64).reshape(-1)
    except Exception as e:  # pylint: disable=broad-except
        raise MechanismRunError(k, e) from e
    if not np.isfinite(out).all():
        raise MechanismRunError(k, ValueError("non-finite mechanism output"))
    return out


def collect_outputs(spec: MechanismSpec) -> np.ndarray:
    """Runs k = 0..m-1 in order and stacks the outputs, shape (m, d)."""
    outputs = []
    for k in range(spec.m):
        outputs.append(run_mechanism(spec, k))
        logging.info("mechanism run %d/%d done", k + 1, spec.m)
    return np.stack(outputs)


def _allocation(values: np.ndarray, params: PacParams, allocation: Allocation) -> np.ndarray:
    shifted = np.sqrt(values + 10.0 * params.c * params.nu / params.beta)
    total = shifted.sum()
    if allocation == "printed":
        return 2.0 * params.nu / (shifted * total)
    if allocation == "proportional":
        return shifted * total / (2.0 * params.nu)
    raise PacNoiseError(f"unknown allocation {allocation!r}")


def select_branch(values: np.ndarray, c: float, r: float) -> tuple[Branch, str]:
    """Pure function of (eigenvalues, c, r); returns the branch and the evaluated condition."""
    d = values.shape[0]
    j0 = int(np.sum(values > c))
    threshold = r * math.sqrt(d / c + 2.0 * c)
    if j0 == 0:
        return "isotropic", f"j0=0 (no eigenvalue > c={c:g}); threshold r*sqrt(d/c+2c)={threshold:.6g}"
    padded = np.append(values, 0.0)
    gap = float(np.min(padded[:j0] - padded[1 : j0 + 1]))
    passed = gap > threshold
    condition = (
        f"min_{{1<=j<={j0}}}(lambda_j - lambda_{{j+1}}) = {gap:.6g} "
        f"{'>' if passed else '<='} r*sqrt(d/c+2c) = {threshold:.6g}"
    )
    return ("anisotropic" if passed else "isotropic"), condition


def determine_noise(
    outputs: np.ndarray,
    params: PacParams,
    *,
    branch: Literal["auto", "anisotropic", "isotropic"] = "auto",
    allocation: Allocation = "printed",
) -> PacNoiseResult:
    """Sigma_B from m mechanism outputs (rows of `outputs`)."""
    outputs = np.asarray(outputs, dtype=np.float64)
    if outputs.ndim != 2 or outputs.shape[0] < 2:
        raise PacNoiseError(f"need m >= 2 output vectors, got shape {outputs.shape}")
    mu_hat, sigma_hat = linalg.empirical_moments(outputs)
    system = linalg.eigh(sigma_hat)
    if not np.isfinite(system.values).all():
        raise PacNoiseError("empirical covariance has non-finite eigenvalues")
    values = linalg.clamp_small(system.values)
    d = values.shape[0]

    chosen, condition = select_branch(values, params.c, params.r)
    if branch != "auto":
        condition = f"forced {branch}; {condition}"
        chosen = branch
    logging.info("PAC branch %s: %s", chosen, condition)

    if chosen == "anisotropic":
        noise_values = _allocation(values, params, allocation)
        sigma_b = (system.vectors * noise_values) @ system.vectors.T
        sigma_b = 0.5 * (sigma_b + sigma_b.T)
    else:
        level = float(values.sum()) + d * params.c / (2.0 * params.nu)
        noise_values = np.full(d, level)
        sigma_b = level * np.eye(d)

    return PacNoiseResult(
        mu_hat=mu_hat,
        sigma_hat=sigma_hat,
        eigensystem=system,
        branch=chosen,
        condition=condition,
        sigma_b=sigma_b,
        noise_values=noise_values,
        params=params,
        allocation=allocation,
    )


def chi_mean(d: int) -> float:
    """E||z|| for z ~ N(0, I_d): sqrt(2) Gamma((d+1)/2) / Gamma(d/2)."""
    return math.sqrt(2.0) * math.exp(special.gammaln((d + 1) / 2.0) - special.gammaln(d / 2.0))


def _noise_factor(sigma_b: np.ndarray) -> np.ndarray:
    """F with F F^T = Sigma_B, as U diag(sqrt(lambda_B))."""
    system = linalg.eigh(sigma_b)
    if system.values.min(initial=0.0) < -1e-6 * max(float(system.values.max(initial=0.0)), 1e-300):
        raise PacNoiseError(f"Sigma_B is not PSD (min eigenvalue {system.values.min():.3e})")
    return system.vectors * np.sqrt(np.maximum(system.values, 0.0))


def expected_norm(sigma_b: np.ndarray, n_mc: int, rng: Rng) -> tuple[float, float, float]:
    """(Monte Carlo E||B||, its standard error, sqrt(tr Sigma_B))."""
    sigma_b = np.asarray(sigma_b, dtype=np.float64)
    if n_mc < 2:
        raise PacNoiseError(f"n_mc must be >= 2, got {n_mc}")
    factor = _noise_factor(sigma_b)
    z = rng.gaussian([n_mc, sigma_b.shape[0]])
    norms = np.linalg.norm(z @ factor.T, axis=1)
    bound = math.sqrt(max(float(np.trace(sigma_b)), 0.0))
    return float(norms.mean()), float(norms.std(ddof=1) / math.sqrt(n_mc)), bound


def with_expected_norm(result: PacNoiseResult, n_mc: int, rng: Rng) -> PacNoiseResult:
    mc, se, bound = expected_norm(result.sigma_b, n_mc, rng)
    return dataclasses.replace(result, e_norm_mc=mc, e_norm_se=se, e_norm_bound=bound)


def noised_output(output: np.ndarray, sigma_b: np.ndarray, rng: Rng) -> np.ndarray:
    """M(X) + B with B ~ N(0, Sigma_B)."""
    output = np.asarray(output, dtype=np.float64).reshape(-1)
    factor = _noise_factor(sigma_b)
    return output + factor @ rng.gaussian([output.shape[0]])


def _logdet_pd(matrix: np.ndarray) -> float:
    values = linalg.eigh(matrix).values
    if values.min() <= 0.0:
        raise PacNoiseError(
            f"matrix is singular (min eigenvalue {values.min():.3e}); mutual information is infinite"
        )
    return float(np.sum(np.log(values)))


def gaussian_mi_oracle(sigma_m: np.ndarray, sigma_b: np.ndarray) -> float:
    """MI between Gaussian M(X) ~ N(., Sigma_M) and M(X) + B, B ~ N(0, Sigma_B).

    Inputs must commute; the value is 0.5 * sum_j ln(1 + lambda_Mj / lambda_Bj)
    in their common eigenbasis.
    """
    sigma_m = linalg.check_symmetric(sigma_m)
    sigma_b = linalg.check_symmetric(sigma_b)
    if sigma_m.shape != sigma_b.shape:
        raise PacNoiseError(f"shape mismatch: {sigma_m.shape} vs {sigma_b.shape}")
    scale = max(float(np.linalg.norm(sigma_m)) * float(np.linalg.norm(sigma_b)), 1e-300)
    if np.linalg.norm(sigma_m @ sigma_b - sigma_b @ sigma_m) > 1e-9 * scale:
        raise PacNoiseError("Sigma_M and Sigma_B do not commute")
    return 0.5 * (_logdet_pd(sigma_m + sigma_b) - _logdet_pd(sigma_b))


def write_result(result: PacNoiseResult, outputs: np.ndarray, directory: Path) -> None:
    """pac_result.csv, sigma_b.csv and outputs.csv."""
    p = result.params
    rows = [
        ("nu", p.nu),
        ("beta", p.beta),
        ("c", p.c),
        ("gamma", p.gamma),
        ("r", p.r),
        ("m", outputs.shape[0]),
        ("d", outputs.shape[1]),
        ("branch", result.branch),
        ("condition", result.condition),
        ("allocation", result.allocation),
        ("trace_sigma_b", result.trace),
        ("e_norm_mc", result.e_norm_mc),
        ("e_norm_se", result.e_norm_se),
        ("e_norm_bound", result.e_norm_bound),
    ]
    tensor_io.write_rows_csv(directory / "pac_result.csv", ("key", "value"), rows)
    tensor_io.write_matrix_csv(directory / "sigma_b.csv", result.sigma_b)
    tensor_io.write_matrix_csv(directory / "outputs.csv", outputs)
