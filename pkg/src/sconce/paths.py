"""Reproducible discretized Brownian paths and their two transformations:
directional (Cameron-Martin) shifts and exponential-weight mixing of two
independent paths.

Randomness is counter-based: each path is generated from a Philox stream
keyed by the pair (seed, index), so path i is reproducible in isolation and
independent of how many other paths were generated, in which order, or on
how many threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .errors import GridMismatchError

_U64 = 1 << 64


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k * horizon / n_steps on [0, horizon]."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def step(self) -> float:
        return self.horizon / self.n_steps

    @cached_property
    def times(self) -> np.ndarray:
        ts = np.linspace(0.0, self.horizon, self.n_steps + 1)
        ts.setflags(write=False)
        return ts

    def index_of(self, t: float, *, snap: bool = False) -> int:
        """Grid index of time t; snaps to the nearest node when snap=True,
        otherwise requires t to lie on the grid (relative tolerance 1e-9)."""
        k = int(round(t / self.step))
        k = min(max(k, 0), self.n_steps)
        if not snap and abs(self.times[k] - t) > 1e-9 * max(1.0, self.horizon):
            raise ValueError(f"time {t!r} is not a grid node of {self}")
        return k

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "n_steps": self.n_steps}


@dataclass(frozen=True)
class BrownianPath:
    """A discretized Brownian path: independent N(0, h) increments on a grid.

    values[k] = B(t_k) = sum of increments before k, with B(0) = 0.
    Instances are immutable; transformations return new paths.
    """

    grid: TimeGrid
    increments: np.ndarray
    meta: Mapping = field(default_factory=lambda: MappingProxyType({}))

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.shape != (self.grid.n_steps,):
            raise ValueError(
                f"increments shape {inc.shape} does not match grid with {self.grid.n_steps} steps"
            )
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)
        object.__setattr__(self, "meta", MappingProxyType(dict(self.meta)))

    @cached_property
    def values(self) -> np.ndarray:
        b = np.concatenate(([0.0], np.cumsum(self.increments)))
        b.setflags(write=False)
        return b

    @property
    def terminal(self) -> float:
        return float(self.values[-1])

    def value_at(self, t: float) -> float:
        return float(self.values[self.grid.index_of(t)])


@dataclass(frozen=True)
class ShiftDirection:
    """Cameron-Martin direction 1_[0, alpha0] with magnitude epsilon.

    Shifting a path by this direction sends B(t) to B(t) + epsilon * min(t, alpha0).
    """

    alpha0: float
    epsilon: float

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be positive")


def _philox_key(seed: int, index: int) -> int:
    # 128-bit key: high word = seed, low word = index
    return (int(seed) % _U64) * _U64 + (int(index) % _U64)


def sample_increments(grid: TimeGrid, seed: int, indices) -> np.ndarray:
    """Increment rows for many path indices; row i equals the increments of
    sample_path(grid, seed, indices[i]) bit for bit."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty((indices.size, grid.n_steps))
    scale = np.sqrt(grid.step)
    for row, idx in enumerate(indices):
        gen = np.random.Generator(np.random.Philox(key=_philox_key(seed, int(idx))))
        out[row] = gen.standard_normal(grid.n_steps)
        out[row] *= scale
    return out


def sample_path(grid: TimeGrid, seed: int, index: int) -> BrownianPath:
    """Deterministic path for (grid, seed, index); distinct (seed, index)
    pairs give independent Philox streams."""
    return BrownianPath(grid, sample_increments(grid, seed, [index])[0])


def zero_path(grid: TimeGrid) -> BrownianPath:
    """The all-zero noise path (useful for deterministic ODE checks)."""
    return BrownianPath(grid, np.zeros(grid.n_steps))


def shift_path(path: BrownianPath, direction: ShiftDirection) -> BrownianPath:
    """Shift B(t) by epsilon * min(t, alpha0), adjusting increments consistently.

    alpha0 is snapped to the nearest grid node; a snap is recorded in the
    returned path's meta under "shift_alpha0_snapped".
    """
    grid = path.grid
    k0 = grid.index_of(direction.alpha0, snap=True)
    snapped = float(grid.times[k0])
    inc = path.increments.copy()
    inc[:k0] += direction.epsilon * grid.step
    meta = dict(path.meta)
    if abs(snapped - direction.alpha0) > 0:
        meta["shift_alpha0_snapped"] = snapped
    return BrownianPath(grid, inc, meta=meta)


def mix_paths(path: BrownianPath, other: BrownianPath, theta: float) -> BrownianPath:
    """Incrementwise mixture exp(-theta) * dB + sqrt(1 - exp(-2 theta)) * dB'.

    The weights are a point on the unit circle, so the mixture of two
    independent Brownian paths is again Brownian in distribution.
    """
    if theta < 0:
        raise ValueError("theta must be >= 0")
    if path.grid != other.grid:
        raise GridMismatchError(f"grids differ: {path.grid} vs {other.grid}")
    w = np.exp(-theta)
    inc = w * path.increments + np.sqrt(max(0.0, 1.0 - w * w)) * other.increments
    return BrownianPath(path.grid, inc)


def dump_path_csv(path: BrownianPath, fileobj) -> None:
    """Debug dump with header k,t,B (not used by the main pipeline)."""
    fileobj.write("k,t,B\n")
    for k, (t, b) in enumerate(zip(path.grid.times, path.values)):
        fileobj.write(f"{k},{t:.17g},{b:.17g}\n")
