"""CSV and PGM (P5) serialization for tensors.

CSV: one row per leading-dimension slice, row-major, '.' decimal separator,
floats written with `repr` so a save/load cycle is bit-exact.
PGM: binary P5, maxval 255, values clamped from [0, 1].
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class FormatError(ValueError):
    """Raised for malformed CSV/PGM input; message names the line or byte."""


def format_float(value: float) -> str:
    return repr(float(value))


def write_matrix_csv(path: Path, matrix: np.ndarray, header: Sequence[str] | None = None) -> None:
    """Writes a 1-D or 2-D array; 1-D arrays become a single row."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[None, :]
    if matrix.ndim != 2:
        matrix = matrix.reshape(matrix.shape[0], -1)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if header is not None:
            writer.writerow(header)
        for row in matrix:
            writer.writerow([format_float(v) for v in row])


def read_matrix_csv(path: Path, *, has_header: bool = False) -> np.ndarray:
    """Reads a rectangular float matrix written by `write_matrix_csv`."""
    text = path.read_text(encoding="utf-8")
    rows: list[list[float]] = []
    width: int | None = None
    for line_no, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if has_header and line_no == 1:
            continue
        if not row:
            continue
        try:
            values = [float(v) for v in row]
        except ValueError as e:
            raise FormatError(f"{path}:{line_no}: {e}") from e
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise FormatError(
                f"{path}:{line_no}: expected {width} columns, found {len(values)}"
            )
        rows.append(values)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)


def write_rows_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    """Writes a table with a header; floats are formatted bit-exactly."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [format_float(v) if isinstance(v, (float, np.floating)) else v for v in row]
            )


def read_rows_csv(path: Path, header: Sequence[str]) -> list[tuple[int, list[str]]]:
    """Returns `(line_no, fields)` pairs after checking the header."""
    text = path.read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        found = next(reader)
    except StopIteration:
        raise FormatError(f"{path}: empty file") from None
    if [h.strip() for h in found] != list(header):
        raise FormatError(f"{path}:1: expected header {','.join(header)}, found {','.join(found)}")
    rows = []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise FormatError(
                f"{path}:{line_no}: expected {len(header)} fields, found {len(row)}"
            )
        rows.append((line_no, [v.strip() for v in row]))
    return rows


def to_bytes(image: np.ndarray) -> bytes:
    clamped = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.round(clamped * 255.0).astype(np.uint8).tobytes()


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Writes a 2-D image with values in [0, 1] as binary PGM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {image.shape}")
    height, width = image.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + to_bytes(image))


def read_pgm(path: Path) -> np.ndarray:
    """Reads a binary P5 PGM (maxval 255) into floats in [0, 1]."""
    raw = path.read_bytes()
    tokens: list[int] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: byte {pos}: truncated header")
        token = raw[start:pos]
        if not tokens:
            if token != b"P5":
                raise FormatError(f"{path}: byte {start}: expected magic P5, found {token!r}")
            tokens.append(5)
            continue
        try:
            tokens.append(int(token))
        except ValueError:
            raise FormatError(f"{path}: byte {start}: bad header field {token!r}") from None
    _, width, height, maxval = tokens
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}, expected 255")
    pos += 1  # single whitespace after maxval
    body = raw[pos:]
    if len(body) != width * height:
        raise FormatError(
            f"{path}: byte {pos}: expected {width * height} pixel bytes, found {len(body)}"
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).astype(np.float64) / 255.0
