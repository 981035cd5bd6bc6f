"""Flat `key = value` experiment configs.

One assignment per line, `#` starts a comment. Every key must appear in
`SCHEMA`; keys without a default are required. Values are parsed per key and
the resolved config (defaults included) is hashed for the run manifest.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from pacdiff.mlp import TrainSettings
from pacdiff.pac_noise import PacParams
from pacdiff.score_model import RrConfig


class ConfigError(ValueError):
    """Raised for unknown, missing or malformed keys; the message names the key."""

    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"{key}: {message}")
        self.key = key


_REQUIRED = object()

# `sampler.base_step` as a multiple of schedule.delta_min^2.
AUTO_STEP_RATIO = 0.2
MAX_STEP_RATIO = 2.0


def _parse_float(text: str) -> float:
    lowered = text.strip().lower()
    if lowered in ("inf", "+inf", "infinity"):
        return math.inf
    value = float(text)
    if math.isnan(value):
        raise ValueError("nan is not allowed")
    return value


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _parse_layers(text: str) -> tuple[int, ...]:
    layers = tuple(int(v) for v in text.split(",") if v.strip())
    if not layers or any(v < 1 for v in layers):
        raise ValueError(f"expected comma-separated positive widths, got {text!r}")
    return layers


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        value = text.strip()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {value!r}")
        return value

    return parse


def _optional_float(text: str) -> float | None:
    return None if text.strip().lower() == "auto" else _parse_float(text)


def _train_keys(prefix: str, steps: int, layers: str, lr: float, seed: int) -> dict[str, tuple]:
    return {
        f"{prefix}.layers": (_parse_layers, layers),
        f"{prefix}.lr": (_parse_float, str(lr)),
        f"{prefix}.steps": (int, str(steps)),
        f"{prefix}.batch": (int, "128"),
        f"{prefix}.seed": (int, str(seed)),
        f"{prefix}.activation": (_choice("tanh", "relu"), "tanh"),
    }


SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "dataset.kind": (_choice("gmm2d", "glyphs"), _REQUIRED),
    "dataset.seed": (int, _REQUIRED),
    "dataset.n": (int, _REQUIRED),
    "dataset.components": (int, "2"),
    "dataset.radius": (_parse_float, "2.0"),
    "dataset.sigma_c": (_parse_float, "0.5"),
    "dataset.side": (int, "8"),
    "schedule.L": (int, "10"),
    "schedule.delta_min": (_parse_float, "0.01"),
    "schedule.delta_max": (_optional_float, "auto"),
    "rr.epsilon": (_parse_float, _REQUIRED),
    "rr.k": (int, _REQUIRED),
    "rr.paper_sign": (_parse_bool, "false"),
    **_train_keys("score", 2000, "64,64", 0.05, 1),
    **_train_keys("classifier.guide", 1500, "32", 0.1, 2),
    **_train_keys("classifier.metric", 1500, "16", 0.1, 3),
    "sampler.T": (int, "50"),
    "sampler.base_step": (_optional_float, "auto"),
    "sampler.gradient_scale": (_parse_float, "0"),
    "sampler.n_samples": (int, "500"),
    "sampler.seed": (int, "4"),
    "sampler.label_mode": (_choice("resample", "0", "1"), "resample"),
    "pac.m": (int, "200"),
    "pac.nu": (_parse_float, "0.5"),
    "pac.beta": (_parse_float, "0.5"),
    "pac.c": (_parse_float, "0.01"),
    "pac.r": (_parse_float, "0.1"),
    "pac.gamma": (_parse_float, "0.01"),
    "pac.n_mc": (int, "10000"),
    "pac.reduction": (_choice("mean", "first"), "mean"),
    "pac.allocation": (_choice("printed", "proportional"), "printed"),
    "pac.branch": (_choice("auto", "anisotropic", "isotropic"), "auto"),
    "pac.n_gen": (int, "200"),
    "pac.seed": (int, "5"),
    "out.dir": (str, "outputs/run"),
}


def parse_text(text: str, *, source: str = "<config>") -> dict[str, str]:
    """Raw `key -> value` strings, rejecting unknown keys and duplicates."""
    raw: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(stripped, f"{source}:{line_no}: expected 'key = value'")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, f"{source}:{line_no}: unknown key")
        if key in raw:
            raise ConfigError(key, f"{source}:{line_no}: duplicate key")
        raw[key] = value
    return raw


def apply_overrides(raw: Mapping[str, str], overrides: Sequence[str]) -> dict[str, str]:
    """Applies `key=value` overrides (e.g. from repeated --set flags)."""
    merged = dict(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        merged[key] = value
    return merged


@dataclasses.dataclass(frozen=True)
class DatasetSettings:
    kind: str
    seed: int
    n: int
    components: int
    radius: float
    sigma_c: float
    side: int


@dataclasses.dataclass(frozen=True)
class ScheduleSettings:
    count: int
    delta_min: float
    delta_max: float | None


@dataclasses.dataclass(frozen=True)
class SamplerSettings:
    steps_per_level: int
    base_step: float
    gradient_scale: float
    n_samples: int
    seed: int
    label_mode: str


@dataclasses.dataclass(frozen=True)
class PacSettings:
    params: PacParams
    n_mc: int
    reduction: str
    allocation: str
    branch: str
    n_gen: int
    seed: int


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    values: dict[str, Any]
    dataset: DatasetSettings
    schedule: ScheduleSettings
    rr: RrConfig
    score: TrainSettings
    guide: TrainSettings
    metric: TrainSettings
    sampler: SamplerSettings
    pac: PacSettings
    out_dir: Path

    def canonical(self) -> str:
        """Sorted `key=value` lines of the resolved config."""
        return "\n".join(f"{k}={_render(self.values[k])}" for k in sorted(self.values))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()


def _render(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "auto"
    return str(value)


def _positive(v: float) -> bool:
    return v > 0


_RANGE_CHECKS: tuple[tuple[str, Callable[[Any], bool], str], ...] = (
    ("dataset.n", _positive, "> 0"),
    ("schedule.L", _positive, "> 0"),
    ("schedule.delta_min", _positive, "> 0"),
    ("rr.epsilon", lambda v: v >= 0, ">= 0 or inf"),
    ("rr.k", _positive, ">= 1"),
    ("score.steps", lambda v: v >= 0, ">= 0"),
    ("classifier.guide.steps", lambda v: v >= 0, ">= 0"),
    ("classifier.metric.steps", lambda v: v >= 0, ">= 0"),
    ("score.batch", _positive, "> 0"),
    ("sampler.T", _positive, ">= 1"),
    ("sampler.base_step", lambda v: v is None or v > 0, "> 0 or auto"),
    ("sampler.gradient_scale", math.isfinite, "finite"),
    ("sampler.n_samples", _positive, ">= 1"),
    ("pac.m", lambda v: v >= 2, ">= 2"),
    ("pac.nu", _positive, "> 0"),
    ("pac.beta", _positive, "> 0"),
    ("pac.c", _positive, "> 0"),
    ("pac.r", _positive, "> 0"),
    ("pac.n_mc", lambda v: v >= 2, ">= 2"),
    ("pac.n_gen", _positive, ">= 1"),
)


def _train(values: Mapping[str, Any], prefix: str) -> TrainSettings:
    return TrainSettings(
        layers=values[f"{prefix}.layers"],
        lr=values[f"{prefix}.lr"],
        steps=values[f"{prefix}.steps"],
        batch=values[f"{prefix}.batch"],
        seed=values[f"{prefix}.seed"],
        activation=values[f"{prefix}.activation"],
    )


def resolve(raw: Mapping[str, str]) -> ExperimentConfig:
    """Parses every schema key, filling defaults and checking requirements."""
    values: dict[str, Any] = {}
    for key, (parser, default) in SCHEMA.items():
        if key in raw:
            text = raw[key]
        elif default is _REQUIRED:
            raise ConfigError(key, "missing required key")
        else:
            text = default
        try:
            values[key] = parser(text)
        except ValueError as e:
            raise ConfigError(key, f"invalid value {text!r}: {e}") from e

    for key, ok, rule in _RANGE_CHECKS:
        if not ok(values[key]):
            raise ConfigError(key, f"must be {rule}, got {values[key]!r}")

    if values["classifier.metric.seed"] == values["classifier.guide.seed"]:
        raise ConfigError(
            "classifier.metric.seed",
            f"must differ from classifier.guide.seed, both are {values['classifier.guide.seed']}",
        )

    # alpha_i / delta_i^2 == base_step / delta_L^2 at every level; chains on a
    # Gaussian of variance delta_i^2 diverge once that ratio passes 4.
    finest = values["schedule.delta_min"]
    base_step = values["sampler.base_step"]
    if base_step is None:
        base_step = AUTO_STEP_RATIO * finest**2
    elif base_step > MAX_STEP_RATIO * finest**2:
        raise ConfigError(
            "sampler.base_step",
            f"must be <= {MAX_STEP_RATIO} * schedule.delta_min^2 = "
            f"{MAX_STEP_RATIO * finest**2:.4g}, got {base_step!r}",
        )

    rr = RrConfig(
        epsilon=values["rr.epsilon"],
        k_neighbors=values["rr.k"],
        paper_sign=values["rr.paper_sign"],
    )
    pac_params = PacParams(
        nu=values["pac.nu"],
        beta=values["pac.beta"],
        c=values["pac.c"],
        gamma=values["pac.gamma"],
        r=values["pac.r"],
        m=values["pac.m"],
    )
    label_mode = values["sampler.label_mode"]

    return ExperimentConfig(
        values=values,
        dataset=DatasetSettings(
            kind=values["dataset.kind"],
            seed=values["dataset.seed"],
            n=values["dataset.n"],
            components=values["dataset.components"],
            radius=values["dataset.radius"],
            sigma_c=values["dataset.sigma_c"],
            side=values["dataset.side"],
        ),
        schedule=ScheduleSettings(
            count=values["schedule.L"],
            delta_min=values["schedule.delta_min"],
            delta_max=values["schedule.delta_max"],
        ),
        rr=rr,
        score=_train(values, "score"),
        guide=_train(values, "classifier.guide"),
        metric=_train(values, "classifier.metric"),
        sampler=SamplerSettings(
            steps_per_level=values["sampler.T"],
            base_step=base_step,
            gradient_scale=values["sampler.gradient_scale"],
            n_samples=values["sampler.n_samples"],
            seed=values["sampler.seed"],
            label_mode=label_mode,
        ),
        pac=PacSettings(
            params=pac_params,
            n_mc=values["pac.n_mc"],
            reduction=values["pac.reduction"],
            allocation=values["pac.allocation"],
            branch=values["pac.branch"],
            n_gen=values["pac.n_gen"],
            seed=values["pac.seed"],
        ),
        out_dir=Path(values["out.dir"]),
    )


def load(path: Path, overrides: Sequence[str] = (), out_dir: str | None = None) -> ExperimentConfig:
    if not path.exists():
        raise FileNotFoundError(path)
    raw = parse_text(path.read_text(encoding="utf-8"), source=str(path))
    raw = apply_overrides(raw, overrides)
    if out_dir is not None:
        raw["out.dir"] = out_dir
    return resolve(raw)


def with_overrides(cfg: ExperimentConfig, overrides: Sequence[str]) -> ExperimentConfig:
    """A copy of a resolved config with `key=value` overrides applied."""
    raw = dict(line.split("=", 1) for line in cfg.canonical().splitlines())
    return resolve(apply_overrides(raw, overrides))
