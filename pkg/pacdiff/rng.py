"""Deterministic SplitMix64 random streams with Box-Muller Gaussians.

SplitMix64 is counter based: the i-th output of a stream whose state is `s`
is `mix(s + i * GAMMA)`, so a block of draws is one vectorized numpy
expression and the same seed yields the same bits on every platform.

Gaussian draw order: a request for `k` variates consumes `2 * ceil(k / 2)`
uint64 outputs. Consecutive outputs `(a, b)` become uniforms
`u1 = 1 - (a >> 11) * 2**-53` in (0, 1] and `u2 = (b >> 11) * 2**-53`,
and produce the pair `r * cos(2*pi*u2), r * sin(2*pi*u2)` with
`r = sqrt(-2 ln u1)`, in that order. An odd request drops the last sine.
Nothing is cached across calls.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_SPLIT = np.uint64(0xD1B54A32D192ED03)
_MASK = (1 << 64) - 1
_INV_2_53 = 1.0 / float(1 << 53)


def _mix(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _block(states: np.ndarray, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns `count` outputs per stream and the advanced states."""
    steps = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        counters = states[..., None] + steps * _GAMMA
        advanced = states + np.uint64(count) * _GAMMA
    return _mix(counters), advanced


def _to_unit(bits: np.ndarray) -> np.ndarray:
    """Maps uint64 outputs to floats in [0, 1) with 53 bits of precision."""
    return (bits >> np.uint64(11)).astype(np.float64) * _INV_2_53


def _box_muller(bits: np.ndarray, count: int) -> np.ndarray:
    """Turns `2 * ceil(count / 2)` outputs per stream into `count` normals."""
    pairs = bits.reshape(bits.shape[:-1] + (-1, 2))
    u1 = 1.0 - _to_unit(pairs[..., 0])
    u2 = _to_unit(pairs[..., 1])
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * math.pi * u2
    normals = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)
    return normals.reshape(bits.shape[:-1] + (-1,))[..., :count]


def _child_seed(state: int, index: int) -> int:
    mixed = _mix(np.array([state], dtype=np.uint64))[0]
    with np.errstate(over="ignore"):
        salt = np.uint64((index + 1) & _MASK) * _SPLIT
    return int(_mix(np.array([mixed ^ salt], dtype=np.uint64))[0])


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError("shape must be nonempty")
    if any(s < 0 for s in shape):
        raise ValueError(f"negative dimension in shape {shape}")
    return shape


class Rng:
    """A single SplitMix64 stream."""

    def __init__(self, seed: int) -> None:
        self.state = int(seed) & _MASK

    def __repr__(self) -> str:
        return f"Rng(state=0x{self.state:016x})"

    def _draw(self, count: int) -> np.ndarray:
        bits, advanced = _block(np.array(self.state, dtype=np.uint64), count)
        self.state = int(advanced)
        return bits

    def next_uint64(self, count: int = 1) -> np.ndarray:
        return self._draw(count)

    def uniform(self, shape: Sequence[int]) -> np.ndarray:
        """Floats in [0, 1)."""
        shape = _check_shape(shape)
        return _to_unit(self._draw(math.prod(shape))).reshape(shape)

    def integers(self, high: int, shape: Sequence[int]) -> np.ndarray:
        """Integers in [0, high) by scaling 53-bit uniforms (bias below 2**-40)."""
        if high < 1:
            raise ValueError(f"high must be >= 1, got {high}")
        values = np.floor(self.uniform(shape) * high).astype(np.int64)
        return np.minimum(values, high - 1)

    def gaussian(self, shape: Sequence[int]) -> np.ndarray:
        """i.i.d. standard normals in the documented Box-Muller order."""
        shape = _check_shape(shape)
        count = math.prod(shape)
        bits = self._draw(2 * ((count + 1) // 2))
        return _box_muller(bits, count).reshape(shape)

    def split(self, index: int) -> Rng:
        """Child stream derived from the current state and `index`.

        Does not advance this stream.
        """
        return Rng(_child_seed(self.state, index))


class RngBank:
    """Independent child streams, one per chain, drawn in lockstep.

    Row `i` of every draw is bit-identical to what `master.split(i)` would
    have produced for the same sequence of calls.
    """

    def __init__(self, master: Rng, count: int) -> None:
        self.states = np.array(
            [_child_seed(master.state, i) for i in range(count)], dtype=np.uint64
        )

    def __len__(self) -> int:
        return int(self.states.shape[0])

    def gaussian(self, shape: Sequence[int]) -> np.ndarray:
        """Returns an array of shape `(len(self), *shape)`."""
        shape = _check_shape(shape)
        count = math.prod(shape)
        bits, self.states = _block(self.states, 2 * ((count + 1) // 2))
        return _box_muller(bits, count).reshape((len(self),) + shape)

    def integers(self, high: int) -> np.ndarray:
        """One integer in [0, high) per stream."""
        if high < 1:
            raise ValueError(f"high must be >= 1, got {high}")
        bits, self.states = _block(self.states, 1)
        values = np.floor(_to_unit(bits[:, 0]) * high).astype(np.int64)
        return np.minimum(values, high - 1)
