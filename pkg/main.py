"""Runs `pacdiff.cli` from the repo root, e.g. `python main.py pipeline --config configs/gmm2d.cfg`."""

from __future__ import annotations

from absl import app

from pacdiff.cli import main


if __name__ == "__main__":
    app.run(main)
