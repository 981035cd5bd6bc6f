"""Runs the directional trend studies and writes their reports.

Guidance trend (default config `configs/glyphs.cfg`): privacy score and
feature Frechet distance for unguided and guided sampling over three seeds.
Noise trend (default config `configs/gmm2d.cfg`): trace of Sigma_B and
E||B|| for RR epsilon in {0.5, 2, inf}.

Both retrain networks many times; expect minutes, not seconds.
"""

from __future__ import annotations

import sys
from pathlib import Path

from absl import app
from absl import flags

# Allow running both as `python -m tools.trend_experiments` and
# as `python tools/trend_experiments.py` from the repo root.
_REPO_ROOT = Path(__file__).resolve().parents[1]
if str(_REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(_REPO_ROOT))

from pacdiff import config  # pylint: disable=wrong-import-position
from pacdiff import experiments  # pylint: disable=wrong-import-position


_FLAGS = flags.FLAGS

flags.DEFINE_enum("study", "both", ["guidance", "noise", "both"], "Which study to run.")
flags.DEFINE_string("guidance_config", "configs/glyphs.cfg", "Config for the guidance trend.")
flags.DEFINE_string("noise_config", "configs/gmm2d.cfg", "Config for the noise trend.")
flags.DEFINE_list("scales", ["0", "10"], "Gradient scales; the first is the unguided baseline.")
flags.DEFINE_list("seeds", ["0", "1", "2"], "Seeds for the guidance trend.")
flags.DEFINE_list("epsilons", ["0.5", "2", "inf"], "RR epsilon values for the noise trend.")
flags.DEFINE_enum(
    "noise_allocation",
    "proportional",
    ["printed", "proportional"],
    "Anisotropic noise allocation for the noise trend.",
)
flags.DEFINE_multi_string("set", [], "Config override `key=value` applied to both configs.")
flags.DEFINE_string("out_dir", "outputs/trends", "Directory for run artifacts and reports.")


def main(argv: list[str]) -> None:
    del argv  # unused (absl handles flags)

    out_dir = Path(_FLAGS.out_dir)
    written: list[Path] = []

    if _FLAGS.study in ("guidance", "both"):
        cfg = config.load(
            Path(_FLAGS.guidance_config), _FLAGS.set, out_dir=str(out_dir / "guidance")
        )
        report = experiments.run_guidance_trend(
            cfg,
            scales=[float(s) for s in _FLAGS.scales],
            seeds=[int(s) for s in _FLAGS.seeds],
        )
        json_path = out_dir / "guidance_trend.json"
        text_path = out_dir / "guidance_trend.txt"
        experiments.write_outputs(report=report, json_path=json_path, text_path=text_path)
        written += [json_path, text_path]

    if _FLAGS.study in ("noise", "both"):
        cfg = config.load(Path(_FLAGS.noise_config), _FLAGS.set, out_dir=str(out_dir / "noise"))
        report = experiments.run_noise_trend(
            cfg,
            epsilons=[float(e) for e in _FLAGS.epsilons],
            allocation=_FLAGS.noise_allocation,
        )
        json_path = out_dir / "noise_trend.json"
        text_path = out_dir / "noise_trend.txt"
        experiments.write_outputs(report=report, json_path=json_path, text_path=text_path)
        written += [json_path, text_path]

    print(f"Wrote {' and '.join(str(p) for p in written)}")


if __name__ == "__main__":
    app.run(main)
