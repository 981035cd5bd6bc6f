"""Directional trend studies over the pipeline.

Two studies, each returning a JSON-serializable report:
  - guidance trend: privacy score and feature Frechet distance of unguided
    (gradient scale 0) against guided sampling, over several seeds, with the
    score network and classifiers trained once per seed;
  - noise trend: trace of Sigma_B and E||B|| across RR epsilon values.

Absolute values depend on the desk-scale datasets; only the directions are
meant to be compared.
"""

from __future__ import annotations

import json
import math
import shutil
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from absl import logging

from pacdiff import config
from pacdiff import pipeline
from pacdiff.config import ExperimentConfig


def run_guidance_trend(
    base: ExperimentConfig,
    *,
    scales: Sequence[float] = (0.0, 10.0),
    seeds: Sequence[int] = (0, 1, 2),
) -> dict[str, Any]:
    """Privacy score and FFD per (seed, gradient scale)."""
    rows: list[dict[str, Any]] = []
    for seed in seeds:
        seed_cfg = config.with_overrides(
            base,
            [
                f"score.seed={base.score.seed + 10 * seed}",
                f"classifier.guide.seed={base.guide.seed + 10 * seed}",
                f"classifier.metric.seed={base.metric.seed + 10 * seed}",
                f"sampler.seed={base.sampler.seed + 10 * seed}",
                f"out.dir={base.out_dir / f'seed_{seed}'}",
            ],
        )
        pipeline.gen_data(seed_cfg)
        pipeline.train_score_stage(seed_cfg)
        pipeline.train_classifiers_stage(seed_cfg)
        for scale in scales:
            cfg = config.with_overrides(
                seed_cfg,
                [f"sampler.gradient_scale={scale!r}", f"out.dir={seed_cfg.out_dir / f'k_{scale:g}'}"],
            )
            _copy_trained(seed_cfg, cfg)
            pipeline.sample_stage(cfg)
            report = pipeline.privacy_score_stage(cfg)
            ffd_value = pipeline.ffd_stage(cfg)
            logging.info(
                "seed %d scale %g: privacy %.4f ffd %.6g", seed, scale, report.score, ffd_value
            )
            rows.append({"seed": seed, "scale": scale, "privacy": report.score, "ffd": ffd_value})

    summary = {}
    for scale in scales:
        picked = [r for r in rows if r["scale"] == scale]
        summary[f"{scale:g}"] = {
            "privacy_mean": float(np.mean([r["privacy"] for r in picked])),
            "privacy_std": float(np.std([r["privacy"] for r in picked])),
            "ffd_mean": float(np.mean([r["ffd"] for r in picked])),
        }
    unguided = summary[f"{scales[0]:g}"]
    guided = summary[f"{scales[-1]:g}"]
    return {
        "kind": "guidance_trend",
        "config_hash": base.config_hash(),
        "scales": list(scales),
        "seeds": list(seeds),
        "rows": rows,
        "summary": summary,
        "privacy_gain": guided["privacy_mean"] - unguided["privacy_mean"],
        "ffd_relative_change": (guided["ffd_mean"] - unguided["ffd_mean"])
        / max(unguided["ffd_mean"], 1e-300),
    }


def _copy_trained(source: ExperimentConfig, target: ExperimentConfig) -> None:
    """Copies the data and trained networks of `source` into `target`'s run directory."""
    for name in ("data", "score", "guide", "metric"):
        shutil.copytree(source.out_dir / name, target.out_dir / name, dirs_exist_ok=True)


def run_noise_trend(
    base: ExperimentConfig,
    *,
    epsilons: Sequence[float] = (0.5, 2.0, math.inf),
    allocation: str = "proportional",
) -> dict[str, Any]:
    """Sigma_B trace and E||B|| per RR epsilon.

    The printed allocation shrinks the anisotropic noise as output variance
    grows, so the study uses `proportional` unless told otherwise.
    """
    rows: list[dict[str, Any]] = []
    for epsilon in epsilons:
        cfg = config.with_overrides(
            base,
            [
                f"rr.epsilon={epsilon!r}",
                f"pac.allocation={allocation}",
                f"out.dir={base.out_dir / f'eps_{epsilon:g}'}",
            ],
        )
        result = pipeline.pac_noise_stage(cfg)
        rows.append(
            {
                "epsilon": "inf" if math.isinf(epsilon) else epsilon,
                "branch": result.branch,
                "trace": result.trace,
                "e_norm_mc": result.e_norm_mc,
                "e_norm_se": result.e_norm_se,
                "e_norm_bound": result.e_norm_bound,
            }
        )
    traces = [r["trace"] for r in rows]
    norms = [r["e_norm_mc"] for r in rows]
    return {
        "kind": "noise_trend",
        "config_hash": base.config_hash(),
        "m": base.pac.params.m,
        "allocation": allocation,
        "rows": rows,
        "trace_non_decreasing": all(a <= b for a, b in zip(traces, traces[1:])),
        "norm_non_decreasing": all(a <= b for a, b in zip(norms, norms[1:])),
    }


def _guidance_lines(report: dict[str, Any]) -> list[str]:
    lines = [
        f"Seeds: {', '.join(str(s) for s in report['seeds'])}",
        "",
        "scale   privacy (mean +- std)   ffd (mean)",
    ]
    for scale, s in report["summary"].items():
        lines.append(
            f"{scale:>5}   {s['privacy_mean']:.4f} +- {s['privacy_std']:.4f}       {s['ffd_mean']:.6g}"
        )
    lines += [
        "",
        f"privacy gain (guided - unguided): {report['privacy_gain']:+.4f}",
        f"ffd relative change: {report['ffd_relative_change']:+.2%}",
    ]
    return lines


def _noise_lines(report: dict[str, Any]) -> list[str]:
    lines = [
        f"Mechanism runs per epsilon: {report['m']}",
        f"Noise allocation: {report['allocation']}",
        "",
        "epsilon   branch        trace(Sigma_B)   E||B|| (MC +- se)      sqrt(trace)",
    ]
    for r in report["rows"]:
        lines.append(
            f"{str(r['epsilon']):>7}   {r['branch']:<12}  {r['trace']:>14.6g}   "
            f"{r['e_norm_mc']:.6g} +- {r['e_norm_se']:.2g}   {r['e_norm_bound']:.6g}"
        )
    lines += [
        "",
        f"trace non-decreasing in epsilon: {report['trace_non_decreasing']}",
        f"E||B|| non-decreasing in epsilon: {report['norm_non_decreasing']}",
    ]
    return lines


def write_outputs(*, report: dict[str, Any], json_path: Path, text_path: Path) -> None:
    json_path.parent.mkdir(parents=True, exist_ok=True)
    text_path.parent.mkdir(parents=True, exist_ok=True)

    json_path.write_text(json.dumps(report, ensure_ascii=False, indent=2), encoding="utf-8")

    body = _guidance_lines(report) if report["kind"] == "guidance_trend" else _noise_lines(report)
    lines = [f"Config hash: {report['config_hash']}", *body, ""]
    text_path.write_text("\n".join(lines), encoding="utf-8")
