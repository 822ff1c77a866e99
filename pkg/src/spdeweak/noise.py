"""Truncated cylindrical Wiener increments.

Each Monte Carlo sample owns a Philox counter-based stream keyed by
``(seed, sample_index)``; entry ``(n, i)`` of a path is the ``n * M + i``-th
draw of ``Generator.standard_normal`` on that stream, scaled by ``sqrt(dt)``.
Streams for different samples never overlap, so any subset of samples can be
regenerated in any order, on any number of threads, with identical results.

Increments are rounded to integer multiples of ``QUANTUM = 2**-40``.  Sums of
such numbers are exact in double precision while the partial sums stay below
``2**13``, which makes coarsening (block sums) exact and associative.  The
rounding perturbs each increment by at most ``2**-41``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

QUANTUM = 2.0**-40
_INV_QUANTUM = 2.0**40


def quantize(x):
    return np.rint(x * _INV_QUANTUM) * QUANTUM


def stream(seed: int, sample_index: int) -> np.random.Generator:
    if seed < 0 or sample_index < 0:
        raise InvalidArgument("seed and sample index must be nonnegative")
    return np.random.Generator(np.random.Philox(key=[int(seed), int(sample_index)]))


@dataclass(frozen=True, eq=False)
class NoisePath:
    """``steps x modes`` matrix of modal Wiener increments ``Delta W_{n,i}``."""

    increments: np.ndarray
    dt: float
    seed: int = 0
    sample_index: int = 0

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim != 2:
            raise InvalidArgument(f"increments must be a steps x modes matrix, got shape {inc.shape}")
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def steps(self) -> int:
        return self.increments.shape[0]

    @property
    def modes(self) -> int:
        return self.increments.shape[1]

    @property
    def horizon(self) -> float:
        return self.steps * self.dt

    def perturbed(self, step: int, direction, eps: float) -> "NoisePath":
        """Copy with ``eps * direction`` added to increment ``step`` (no quantization)."""
        inc = np.array(self.increments)
        inc[step] = inc[step] + eps * np.asarray(direction, dtype=float)
        return NoisePath(inc, self.dt, self.seed, self.sample_index)


def sample_path(seed: int, sample_index: int, steps: int, modes: int, dt: float) -> NoisePath:
    if steps < 0 or modes < 1 or dt <= 0:
        raise InvalidArgument(f"need steps >= 0, modes >= 1, dt > 0; got {steps}, {modes}, {dt}")
    z = stream(seed, sample_index).standard_normal((steps, modes))
    return NoisePath(quantize(np.sqrt(dt) * z), dt, seed, sample_index)


def coarsen(path: NoisePath, r: int) -> NoisePath:
    """Sum consecutive blocks of ``r`` increments: the same Wiener path seen with step ``r dt``."""
    if r < 1 or path.steps % r:
        raise InvalidArgument(f"coarsening factor {r} must divide the step count {path.steps}")
    if r == 1:
        return path
    inc = path.increments.reshape(path.steps // r, r, path.modes).sum(axis=1)
    return NoisePath(inc, path.dt * r, path.seed, path.sample_index)


class IncrementStream:
    """Block-wise generation of increments for a batch of samples.

    Yields arrays of shape ``(samples, block, modes)`` whose rows agree exactly
    with :func:`sample_path` for the same ``(seed, sample_index)``.
    """

    def __init__(self, seed: int, sample_indices, modes: int, dt: float):
        self.modes = modes
        self.scale = np.sqrt(dt)
        self._gens = [stream(seed, int(i)) for i in sample_indices]

    def next_block(self, steps: int) -> np.ndarray:
        z = np.stack([g.standard_normal((steps, self.modes)) for g in self._gens])
        return quantize(self.scale * z)
