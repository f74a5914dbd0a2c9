"""Space-filling designs on the unit cube.

Wave one uses a best-of-restarts maximin Latin hypercube; later waves pick
points greedily from the surviving candidate set so that each new point is
as far as possible from everything already chosen.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from ._io import atomic_open


@dataclass(frozen=True)
class Design:
    """Unique design points (unit cube) and how often each is simulated.

    ``source_index`` optionally records where each point came from, e.g.
    candidate-grid indices for points chosen by :func:`maximin_select`.
    """

    points: np.ndarray
    replicates: np.ndarray
    source_index: np.ndarray | None = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        reps = np.asarray(self.replicates, dtype=np.int64).reshape(-1)
        if pts.shape[0] < 1:
            raise ValueError("a design needs at least one point")
        if reps.shape[0] != pts.shape[0]:
            raise ValueError("one replicate count per point required")
        if np.any(reps < 1):
            raise ValueError("replicate counts must be positive")
        if np.any((pts < 0) | (pts > 1)):
            raise ValueError("design coordinates must lie in [0, 1]")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "replicates", reps)
        if self.source_index is not None:
            object.__setattr__(self, "source_index", np.asarray(self.source_index, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def total_runs(self) -> int:
        return int(self.replicates.sum())

    def with_replicates(self, a: int) -> "Design":
        return Design(self.points, np.full(self.n, a), self.source_index)

    def to_csv(self, path: str | Path, names: Sequence[str] | None = None) -> None:
        names = list(names) if names is not None else [f"p{j + 1}" for j in range(self.points.shape[1])]
        with atomic_open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["point_id", *names, "replicates"])
            for i, (p, a) in enumerate(zip(self.points, self.replicates)):
                w.writerow([i, *(repr(float(c)) for c in p), int(a)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Design":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        pts = np.array([[float(c) for c in r[1:-1]] for r in rows])
        reps = np.array([int(r[-1]) for r in rows])
        return cls(pts, reps)


def min_pairwise_distance(points: np.ndarray) -> float:
    points = np.atleast_2d(points)
    if points.shape[0] < 2:
        return np.inf
    return float(pdist(points).min())


def is_latin_hypercube(points: np.ndarray) -> bool:
    """True if every column puts exactly one point in each of the n bins."""
    points = np.atleast_2d(points)
    n = points.shape[0]
    bins = np.minimum(np.floor(points * n).astype(np.int64), n - 1)
    return all(np.array_equal(np.sort(col), np.arange(n)) for col in bins.T)


def lhs_maximin(d: int, n: int, seed=None, restarts: int = 100) -> Design:
    """Best-of-``restarts`` Latin hypercube under the maximin criterion.

    Each restart draws an independent permutation per dimension and places
    points at bin centres, so the result is fully determined by ``seed``.
    """
    if d < 1 or n < 1 or restarts < 1:
        raise ValueError("need d >= 1, n >= 1 and restarts >= 1")
    rng = np.random.default_rng(seed)
    best, best_dist = None, -np.inf
    for _ in range(restarts):
        perm = np.column_stack([rng.permutation(n) for _ in range(d)])
        pts = (perm + 0.5) / n
        dist = min_pairwise_distance(pts)
        if best is None or dist > best_dist:
            best, best_dist = pts, dist
        if n == 1:
            break
    return Design(best, np.ones(n, dtype=np.int64))


def _farthest_pair(cand: np.ndarray, block: int = 2048) -> tuple[int, int]:
    """Exact diameter pair, lowest ``(i, j)`` among ties.

    A cheap lower bound from a few farthest-point sweeps prunes every point
    whose distance to the far corner of the bounding box cannot reach it.
    """
    n = cand.shape[0]
    if n == 1:
        return 0, 0
    start = 0
    best_sq = -1.0
    for _ in range(3):
        sq = ((cand - cand[start]) ** 2).sum(axis=1)
        far = int(np.argmax(sq))
        best_sq = max(best_sq, float(sq[far]))
        start = far
    lo, hi = cand.min(axis=0), cand.max(axis=0)
    reach = (np.maximum(cand - lo, hi - cand) ** 2).sum(axis=1)
    keep = np.flatnonzero(reach >= best_sq * (1 - 1e-12))
    sub = cand[keep]
    top, pair = -1.0, (0, 1)
    for s in range(0, len(keep), block):
        d2 = cdist(sub[s:s + block], sub, "sqeuclidean")
        rows = np.arange(s, min(s + block, len(keep)))
        d2[rows[:, None] >= np.arange(len(keep))[None, :]] = -1.0
        r, c = np.unravel_index(np.argmax(d2), d2.shape)
        if d2[r, c] > top:
            top, pair = float(d2[r, c]), (int(keep[s + r]), int(keep[c]))
    return pair


def maximin_select(candidates, k: int, existing=None) -> Design:
    """Greedy maximin choice of ``k`` candidates.

    Every pick maximises the minimum distance to the points already chosen
    plus ``existing``; ties go to the lowest candidate index. Without
    existing points the farthest candidate pair seeds the selection.
    ``Design.source_index`` holds the chosen candidate positions in order.
    """
    cand = np.atleast_2d(np.asarray(candidates, dtype=float))
    n = cand.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n:
        raise ValueError(f"cannot select {k} points from {n} candidates")
    existing = np.empty((0, cand.shape[1])) if existing is None else np.atleast_2d(np.asarray(existing, float))
    if existing.size == 0:
        existing = np.empty((0, cand.shape[1]))

    chosen: list[int] = []
    mind = np.full(n, np.inf)
    if existing.shape[0]:
        for s in range(0, existing.shape[0], 256):
            mind = np.minimum(mind, cdist(cand, existing[s:s + 256], "sqeuclidean").min(axis=1))
    elif n == 1:
        chosen = [0]
    else:
        i, j = _farthest_pair(cand)
        chosen = [i, j][:k]
        for c in chosen:
            mind = np.minimum(mind, ((cand - cand[c]) ** 2).sum(axis=1))
    taken = np.zeros(n, dtype=bool)
    taken[chosen] = True
    while len(chosen) < k:
        score = np.where(taken, -np.inf, mind)
        c = int(np.argmax(score))
        chosen.append(c)
        taken[c] = True
        mind = np.minimum(mind, ((cand - cand[c]) ** 2).sum(axis=1))
    chosen_arr = np.array(chosen, dtype=np.int64)
    return Design(cand[chosen_arr], np.ones(k, dtype=np.int64), chosen_arr)


class RunAssignment(NamedTuple):
    point_id: int
    point: np.ndarray
    seed: int


def plan_replicates(design: Design, a: int, start_seed: int = 0) -> list[RunAssignment]:
    """Expand a design into ``n * a`` runs with consecutive seeds, point-major."""
    if a < 1:
        raise ValueError("replicate count must be at least 1")
    out = []
    seed = int(start_seed)
    for i, p in enumerate(design.points):
        for _ in range(a):
            out.append(RunAssignment(i, p, seed))
            seed += 1
    return out
