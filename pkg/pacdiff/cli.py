"""pacdiff command line: one subcommand per pipeline stage.

Usage:
  python main.py <subcommand> --config PATH [--set key=value ...] [--out DIR]

Subcommands are the pipeline stages (`gen-data`, `train-score`,
`train-classifier`, `sample`, `privacy-score`, `ffd`, `pac-noise`) and
`pipeline`, which chains all of them.
"""

from __future__ import annotations

import sys
from pathlib import Path

from absl import app
from absl import flags
from absl import logging

from pacdiff import config
from pacdiff import pipeline


FLAGS = flags.FLAGS

flags.DEFINE_string(
    "config",
    None,
    "Path to a flat `key = value` experiment config (e.g. configs/gmm2d.cfg).",
)
flags.DEFINE_multi_string(
    "set",
    [],
    "Config override `key=value`; may be repeated, applied after the file.",
)
flags.DEFINE_string("out", None, "Optional override for out.dir in the config file.")


def main(argv: list[str]) -> None:
    """Runs one stage, or the whole pipeline, for the given config."""
    if len(argv) < 2:
        raise app.UsageError(
            f"Missing subcommand. Choose one of: {', '.join(pipeline.RUNNERS)}."
        )
    if len(argv) > 2:
        raise app.UsageError(f"Unexpected arguments: {' '.join(argv[2:])}")
    command = argv[1]
    if command not in pipeline.RUNNERS:
        raise app.UsageError(
            f"Unknown subcommand {command!r}. Choose one of: {', '.join(pipeline.RUNNERS)}."
        )
    if FLAGS.config is None:
        raise app.UsageError("Missing config path. Provide --config.")

    try:
        cfg = config.load(Path(FLAGS.config), FLAGS.set, out_dir=FLAGS.out)
    except FileNotFoundError as e:
        raise app.UsageError(f"Config file not found: {e}") from e
    except config.ConfigError as e:
        raise app.UsageError(f"Invalid config: {e}") from e

    logging.info("config %s (hash %s)", FLAGS.config, cfg.config_hash())
    try:
        pipeline.RUNNERS[command](cfg)
    except pipeline.StageError as e:
        logging.error("%s", e)
        print(f"Stage {e.stage} failed: {e.__cause__}", file=sys.stderr)
        sys.exit(2)
    print(f"Wrote {cfg.out_dir}")
    sys.exit(0)


if __name__ == "__main__":
    app.run(main)
