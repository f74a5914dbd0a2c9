"""Bounded parameter spaces, implicit candidate grids and NROY sets.

All numerical work downstream happens on the unit hypercube; the
:class:`ParameterSpace` maps between native units and ``[0, 1]^d``.
Candidate grids are never materialised: a point is decoded from its
integer index on demand.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_open


class BoundsError(ValueError):
    """A coordinate lies outside its dimension's bounds."""


@dataclass(frozen=True)
class Dimension:
    name: str
    lo: float
    hi: float

    @property
    def width(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class ParameterSpace:
    """Ordered, named box ``[lo_1, hi_1] x ... x [lo_d, hi_d]``."""

    dims: tuple[Dimension, ...]

    def __post_init__(self):
        dims = tuple(d if isinstance(d, Dimension) else Dimension(*d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if not dims:
            raise ValueError("parameter space needs at least one dimension")
        names = [d.name for d in dims]
        if len(set(names)) != len(names):
            raise ValueError(f"dimension names must be unique, got {names}")
        for d in dims:
            if not (np.isfinite(d.lo) and np.isfinite(d.hi)) or not d.lo < d.hi:
                raise ValueError(f"dimension {d.name!r}: need finite lo < hi, got [{d.lo}, {d.hi}]")

    @classmethod
    def from_bounds(cls, bounds: dict[str, Sequence[float]]) -> "ParameterSpace":
        return cls(tuple(Dimension(name, float(lo), float(hi)) for name, (lo, hi) in bounds.items()))

    @property
    def d(self) -> int:
        return len(self.dims)

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    @property
    def lower(self) -> np.ndarray:
        return np.array([d.lo for d in self.dims])

    @property
    def upper(self) -> np.ndarray:
        return np.array([d.hi for d in self.dims])

    def check_bounds(self, x: np.ndarray, lo=None, hi=None) -> None:
        x = np.atleast_2d(x)
        lo = self.lower if lo is None else lo
        hi = self.upper if hi is None else hi
        if x.shape[-1] != self.d:
            raise ValueError(f"expected {self.d} coordinates, got {x.shape[-1]}")
        bad = (x < lo) | (x > hi) | ~np.isfinite(x)
        if bad.any():
            j = int(np.argwhere(bad)[0, 1])
            val = x[bad.any(axis=1)][0, j]
            raise BoundsError(
                f"dimension {self.dims[j].name!r}: value {val!r} outside [{lo[j]}, {hi[j]}]"
            )

    def normalize(self, x) -> np.ndarray:
        """Map native-unit coordinates onto the unit cube.

        Accepts a single point ``(d,)`` or a batch ``(q, d)``; raises
        :class:`BoundsError` naming the first offending dimension.
        """
        x = np.asarray(x, dtype=float)
        self.check_bounds(x)
        return (x - self.lower) / (self.upper - self.lower)

    def denormalize(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        self.check_bounds(u, np.zeros(self.d), np.ones(self.d))
        return self.lower + u * (self.upper - self.lower)


def normalize(space: ParameterSpace, x) -> np.ndarray:
    return space.normalize(x)


def denormalize(space: ParameterSpace, u) -> np.ndarray:
    return space.denormalize(u)


@dataclass(frozen=True)
class CandidateGrid:
    """Full-factorial lattice with ``m`` evenly spaced levels per dimension.

    Levels include both ends of the unit interval. Index ``i`` decodes in
    mixed radix ``m`` with the *last* dimension varying fastest, so the
    index order is the lexicographic order of the level tuples.
    """

    space: ParameterSpace
    m: int

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"m must be a positive integer, got {self.m}")

    @property
    def d(self) -> int:
        return self.space.d

    @property
    def size(self) -> int:
        return int(self.m) ** self.d

    @property
    def levels(self) -> np.ndarray:
        if self.m == 1:
            return np.array([0.5])
        return np.linspace(0.0, 1.0, self.m)

    def level_indices(self, index) -> np.ndarray:
        """Per-dimension level numbers for one index or an index array, shape ``(q, d)``."""
        idx = np.atleast_1d(np.asarray(index, dtype=np.int64))
        if idx.size and (idx.min() < 0 or idx.max() >= self.size):
            raise IndexError(f"grid index out of range [0, {self.size})")
        out = np.empty((idx.size, self.d), dtype=np.int64)
        rem = idx.copy()
        for j in range(self.d - 1, -1, -1):
            out[:, j] = rem % self.m
            rem //= self.m
        return out

    def points(self, index) -> np.ndarray:
        """Unit-cube coordinates of an index array, shape ``(q, d)``."""
        return self.levels[self.level_indices(index)]

    def point(self, index: int) -> np.ndarray:
        return self.points(index)[0]

    def index_of(self, levels: np.ndarray) -> np.ndarray:
        levels = np.atleast_2d(np.asarray(levels, dtype=np.int64))
        idx = np.zeros(levels.shape[0], dtype=np.int64)
        for j in range(self.d):
            idx = idx * self.m + levels[:, j]
        return idx

    def nearest_index(self, u) -> np.ndarray:
        """Index of the lattice point nearest to each unit-cube point."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        lev = np.clip(np.rint(u * (self.m - 1)), 0, self.m - 1) if self.m > 1 else np.zeros_like(u)
        return self.index_of(lev.astype(np.int64))

    def shards(self, size: int, indices: np.ndarray | None = None) -> Iterable[np.ndarray]:
        """Yield consecutive index blocks of at most ``size`` entries."""
        if indices is None:
            for start in range(0, self.size, size):
                yield np.arange(start, min(start + size, self.size), dtype=np.int64)
        else:
            for start in range(0, len(indices), size):
                yield indices[start:start + size]


def grid_point(grid: CandidateGrid, index: int) -> np.ndarray:
    return grid.point(index)


@dataclass(frozen=True)
class NROYSet:
    """Surviving grid indices with their maximum implausibility."""

    grid: CandidateGrid
    indices: np.ndarray
    imax: np.ndarray
    cutoff: float = field(default=np.inf)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        imax = np.asarray(self.imax, dtype=float)
        if idx.shape != imax.shape or idx.ndim != 1:
            raise ValueError("indices and imax must be 1-d arrays of equal length")
        if idx.size:
            if np.any(np.diff(idx) <= 0):
                raise ValueError("NROY indices must be strictly increasing")
            if idx[0] < 0 or idx[-1] >= self.grid.size:
                raise ValueError("NROY index outside the grid")
            if np.any(imax >= self.cutoff):
                raise ValueError("NROY point with implausibility at or above the cutoff")
        idx.flags.writeable = False
        imax.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "imax", imax)

    def __len__(self) -> int:
        return len(self.indices)

    def unit_points(self) -> np.ndarray:
        return self.grid.points(self.indices)

    def native_points(self) -> np.ndarray:
        return self.grid.space.denormalize(self.unit_points()) if len(self) else np.empty((0, self.grid.d))

    def contains(self, index) -> np.ndarray:
        index = np.atleast_1d(np.asarray(index, dtype=np.int64))
        if not len(self):
            return np.zeros(index.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(self.indices, index), len(self.indices) - 1)
        return self.indices[pos] == index

    def to_csv(self, path: str | Path, chunk: int = 100_000) -> None:
        """Write ``index,<dim names in native units>,imax``."""
        space = self.grid.space
        with atomic_open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", *space.names, "imax"])
            for start in range(0, len(self), chunk):
                idx = self.indices[start:start + chunk]
                pts = space.denormalize(self.grid.points(idx))
                for i, p, v in zip(idx, pts, self.imax[start:start + chunk]):
                    w.writerow([int(i), *(repr(float(c)) for c in p), repr(float(v))])


def full_nroy(grid: CandidateGrid) -> NROYSet:
    """The trivial NROY set before any wave: every grid point, imax 0."""
    return NROYSet(grid, np.arange(grid.size, dtype=np.int64), np.zeros(grid.size))


def volume_fraction(nroy: NROYSet) -> float:
    """Fraction of grid points still not ruled out."""
    return len(nroy.indices) / nroy.grid.size
