"""Implausibility, NROY filtering and wave-by-wave history matching.

A point ``u`` is ruled out at a wave when, for some target ``q``,

    |Y_q - mean_q(u)| / sqrt(var_mean_q(u) + var_noise_q(u) + var_md_q + var_eps_q) >= cutoff

Filtering walks the candidate grid in shards and evaluates targets one at
a time, dropping a point as soon as one target rules it out. Targets are
visited in order of how much they rule out on a small pilot sample; the
order only affects speed, because a survivor's maximum implausibility is
exact whatever the order and each row's arithmetic is independent of
shard size.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import emulator as em
from ._io import read_json, save_npz, write_json
from .design import Design, lhs_maximin, maximin_select, plan_replicates
from .errors import DegenerateVarianceError, NROYEmptyError, PipelineOrderError
from .parallel import chunk_bounds, pmap
from .simulator import DAILY_SERIES, SERIES, RunOutput, SimConfig, run_many
from .space import CandidateGrid, NROYSet, ParameterSpace, volume_fraction
from .store import RunRecord, RunStore

log = logging.getLogger("histmatch")

DEFAULT_SHARD = 65_536


# --- targets ------------------------------------------------------------------

@dataclass(frozen=True)
class TargetSpec:
    """One observed quantity: ``series`` on ``day`` (daily series are weekly-smoothed)."""

    name: str
    series: str
    day: int
    observed: float
    var_eps: float = 0.0
    var_md: float = 0.0

    def __post_init__(self):
        if self.series not in SERIES:
            raise ValueError(f"target {self.name!r}: unknown series {self.series!r}")
        if self.day < 0:
            raise ValueError(f"target {self.name!r}: day must be nonnegative")
        for attr in ("observed", "var_eps", "var_md"):
            v = float(getattr(self, attr))
            if not np.isfinite(v):
                raise ValueError(f"target {self.name!r}: {attr} must be finite")
            object.__setattr__(self, attr, v)
        if self.var_eps < 0 or self.var_md < 0:
            raise ValueError(f"target {self.name!r}: variances must be nonnegative")

    @property
    def smoothed(self) -> bool:
        return self.series in DAILY_SERIES


def target_name(series: str, day: int) -> str:
    return f"{series}@{day}"


@dataclass(frozen=True)
class TargetSet:
    targets: tuple[TargetSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        names = self.names
        if len(set(names)) != len(names):
            raise ValueError(f"target names must be unique, got {names}")

    @classmethod
    def from_observed(cls, out: RunOutput, catalog: Sequence[tuple[str, int]],
                      var_eps: float = 0.0, var_md: float = 0.0) -> "TargetSet":
        """Targets for ``(series, day)`` pairs read off an observed series set."""
        specs = []
        for series, day in catalog:
            if not 0 <= day < out.horizon:
                raise IndexError(f"target day {day} outside observed horizon {out.horizon}")
            val = out.series(series, smoothed=series in DAILY_SERIES)[day]
            specs.append(TargetSpec(target_name(series, day), series, int(day), float(val), var_eps, var_md))
        return cls(tuple(specs))

    def __len__(self) -> int:
        return len(self.targets)

    def __iter__(self):
        return iter(self.targets)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.targets]

    @property
    def observed(self) -> np.ndarray:
        return np.array([t.observed for t in self.targets])

    def subset(self, names: Sequence[str]) -> "TargetSet":
        by = {t.name: t for t in self.targets}
        missing = [n for n in names if n not in by]
        if missing:
            raise KeyError(f"unknown targets {missing}")
        return TargetSet(tuple(by[n] for n in names))

    def values(self, out: RunOutput) -> np.ndarray:
        """This run's value of every target, smoothing daily series like the observations."""
        cache: dict[str, np.ndarray] = {}
        vals = np.empty(len(self.targets))
        for q, t in enumerate(self.targets):
            if t.series not in cache:
                cache[t.series] = out.series(t.series, smoothed=t.smoothed)
            if not 0 <= t.day < out.horizon:
                raise IndexError(f"target {t.name!r}: day outside horizon {out.horizon}")
            vals[q] = cache[t.series][t.day]
        return vals


CUMULATIVE_DAYS = (21, 45, 88)
ACTIVE_DAYS = (14, 38, 56)


def default_catalog() -> list[tuple[str, int]]:
    cat = [("cumulative_diagnoses", d) for d in CUMULATIVE_DAYS]
    cat += [("cumulative_deaths", d) for d in CUMULATIVE_DAYS]
    cat += [("active_infections", d) for d in ACTIVE_DAYS]
    cat += [("new_diagnoses", 21), ("new_diagnoses", 45)]
    return cat


# --- implausibility --------------------------------------------------------------

def implausibility(Y, mu, var_g, var_md=0.0, var_eps=0.0):
    """``|Y - mu| / sqrt(var_g + var_md + var_eps)``, elementwise."""
    mu = np.asarray(mu, dtype=float)
    total = np.asarray(var_g, dtype=float) + var_md + var_eps
    if np.any(~(total > 0)):
        raise DegenerateVarianceError("implausibility denominator is zero or undefined")
    out = np.abs(np.asarray(Y, dtype=float) - mu) / np.sqrt(total)
    if np.any(np.isnan(out)):
        raise DegenerateVarianceError("implausibility is not a number (non-finite prediction?)")
    return float(out) if out.ndim == 0 else out


def max_implausibility(values) -> np.ndarray | float:
    """Maximum over targets (axis 0)."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 0 or v.shape[0] == 0:
        raise ValueError("max_implausibility needs at least one target")
    out = v.max(axis=0)
    return float(out) if np.ndim(out) == 0 else out


def _check_pairing(emulators, targets):
    if len(emulators) != len(targets):
        raise ValueError(f"{len(emulators)} emulators for {len(targets)} targets")


def evaluate_imax(emulators: Sequence[em.HetGP], targets: TargetSet, U) -> np.ndarray:
    """Exact maximum implausibility at unit-cube points (no screening)."""
    _check_pairing(emulators, targets)
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if len(targets) == 0:
        raise ValueError("max_implausibility needs at least one target")
    rows = []
    for model, t in zip(emulators, targets):
        mu, vm, vn = model.predict(U)
        rows.append(implausibility(t.observed, mu, vm + vn, t.var_md, t.var_eps))
    return max_implausibility(np.vstack(rows))


def in_nroy(emulators, targets, cutoff: float, U) -> np.ndarray:
    return evaluate_imax(emulators, targets, U) < cutoff


def _filter_shard(emulators, targets, cutoff, U):
    alive = np.ones(len(U), dtype=bool)
    imax = np.zeros(len(U))
    for model, t in zip(emulators, targets):
        pos = np.flatnonzero(alive)
        if pos.size == 0:
            break
        mu, vm, vn = model.predict(U[pos])
        value = implausibility(t.observed, mu, vm + vn, t.var_md, t.var_eps)
        imax[pos] = np.maximum(imax[pos], value)
        alive[pos[~(value < cutoff)]] = False
    return alive, imax


def _pilot_order(emulators, targets, cutoff, grid, idx, size=2048) -> list[int]:
    """Targets sorted by the share of a pilot subsample they rule out (stable)."""
    if len(idx) <= size:
        return list(range(len(targets)))
    pilot = grid.points(idx[np.linspace(0, len(idx) - 1, size).astype(np.int64)])
    share = []
    for model, t in zip(emulators, targets):
        mu, vm, vn = model.predict(pilot)
        share.append(np.mean(~(implausibility(t.observed, mu, vm + vn, t.var_md, t.var_eps) < cutoff)))
    return sorted(range(len(targets)), key=lambda q: -share[q])


def _filter_block(args):
    emulators, targets, cutoff, grid, idx, shard_size = args
    keep, vals = [], []
    for sl in grid.shards(shard_size, idx):
        alive, imax = _filter_shard(emulators, targets, cutoff, grid.points(sl))
        keep.append(sl[alive])
        vals.append(imax[alive])
    if not keep:
        return np.empty(0, np.int64), np.empty(0)
    return np.concatenate(keep), np.concatenate(vals)


def nroy_filter(grid: CandidateGrid, emulators: Sequence[em.HetGP], targets: TargetSet, cutoff: float,
                candidates: np.ndarray | None = None, shard_size: int = DEFAULT_SHARD,
                jobs: int = 1) -> NROYSet:
    """Grid points (optionally only ``candidates``) whose maximum implausibility is below ``cutoff``."""
    _check_pairing(emulators, targets)
    if len(targets) == 0:
        raise ValueError("nroy_filter needs at least one target")
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    if shard_size < 1:
        raise ValueError("shard_size must be positive")
    idx = np.arange(grid.size, dtype=np.int64) if candidates is None else np.asarray(candidates, np.int64)
    if idx.size and np.any(np.diff(idx) <= 0):
        idx = np.unique(idx)
    order = _pilot_order(emulators, targets, cutoff, grid, idx)
    emulators = [emulators[q] for q in order]
    targets = TargetSet(tuple(targets.targets[q] for q in order))
    blocks = [(emulators, targets, cutoff, grid, idx[a:b], shard_size)
              for a, b in chunk_bounds(len(idx), jobs, per_job=4)]
    parts = pmap(_filter_block, blocks, jobs)
    keep = np.concatenate([p[0] for p in parts]) if parts else np.empty(0, np.int64)
    vals = np.concatenate([p[1] for p in parts]) if parts else np.empty(0)
    return NROYSet(grid, keep, vals, cutoff)


# --- optical depth ------------------------------------------------------------------

def optical_depth(nroy: NROYSet, i: int, j: int, bins: int) -> np.ndarray:
    """Share of grid points in each 2-d cell of dims ``(i, j)`` that are still NROY.

    Row index bins dimension ``i``; cells containing no grid level are 0.
    """
    grid = nroy.grid
    d = grid.d
    if i == j or not (0 <= i < d and 0 <= j < d):
        raise ValueError(f"need two distinct dimensions in [0, {d}), got {i}, {j}")
    if bins < 1:
        raise ValueError("bins must be at least 1")
    level_bin = np.minimum(np.floor(grid.levels * bins).astype(np.int64), bins - 1)
    per_bin = np.bincount(level_bin, minlength=bins).astype(float)
    rest = float(grid.m) ** (d - 2)
    total = np.outer(per_bin, per_bin) * rest
    counts = np.zeros((bins, bins))
    if len(nroy):
        lev = grid.level_indices(nroy.indices)
        np.add.at(counts, (level_bin[lev[:, i]], level_bin[lev[:, j]]), 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, counts / np.where(total > 0, total, 1.0), 0.0)


# --- waves --------------------------------------------------------------------------

@dataclass(frozen=True)
class WaveConfig:
    index: int
    targets: tuple[str, ...]
    cutoff: float
    n_design: int = 50
    replicates: int = 20

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.index < 1:
            raise ValueError("wave index starts at 1")
        if not self.targets:
            raise ValueError(f"wave {self.index}: needs at least one target")
        if not self.cutoff > 0:
            raise ValueError(f"wave {self.index}: cutoff must be positive")
        if self.n_design < 1 or self.replicates < 2:
            raise ValueError(f"wave {self.index}: need n_design >= 1 and replicates >= 2")


def validate_schedule(schedule: Sequence[WaveConfig]) -> None:
    for k, w in enumerate(schedule, start=1):
        if w.index != k:
            raise ValueError(f"wave indices must run 1..{len(schedule)}, got {w.index} at position {k}")
    cuts = [w.cutoff for w in schedule]
    if any(b > a for a, b in zip(cuts, cuts[1:])):
        raise ValueError(f"cutoffs must be nonincreasing across waves, got {cuts}")


def default_schedule() -> list[WaveConfig]:
    cum = [target_name(s, d) for s in ("cumulative_diagnoses", "cumulative_deaths") for d in CUMULATIVE_DAYS]
    w1 = cum + [target_name("active_infections", 14), target_name("active_infections", 56)]
    w2 = cum + [target_name("active_infections", d) for d in ACTIVE_DAYS] + [target_name("new_diagnoses", 21)]
    w4 = w2 + [target_name("new_diagnoses", 45)]
    return [
        WaveConfig(1, tuple(w1), 3.0, 50, 25),
        WaveConfig(2, tuple(w2), 3.0, 50, 20),
        WaveConfig(3, tuple(w2), 2.7, 50, 20),
        WaveConfig(4, tuple(w4), 2.5, 50, 20),
    ]


@dataclass
class WaveResult:
    config: WaveConfig
    emulators: list[em.HetGP]
    nroy: NROYSet
    next_design: Design
    n_train: int
    volume_fraction: float = field(init=False)

    def __post_init__(self):
        self.volume_fraction = volume_fraction(self.nroy)

    @property
    def emulator_ids(self) -> list[str]:
        return list(self.config.targets)


def wave_tag(k: int) -> str:
    return f"wave{k}"


def replicate_data(records: Sequence[RunRecord], values: np.ndarray) -> list[em.ReplicateData]:
    """One ReplicateData per column of ``values`` (runs x outputs), grouped by unit point."""
    U = np.array([r.unit for r in records], dtype=float)
    return [em.ReplicateData.from_runs(U, values[:, q]) for q in range(values.shape[1])]


def design_from_nroy(nroy: NROYSet, k: int, existing=None) -> Design:
    """Greedy maximin pick of up to ``k`` NROY points (all of them if fewer)."""
    if len(nroy) == 0:
        raise NROYEmptyError("cannot propose a design from an empty NROY set")
    k = min(k, len(nroy))
    sel = maximin_select(nroy.unit_points(), k, existing)
    return Design(sel.points, sel.replicates, nroy.indices[sel.source_index])


class HistoryMatcher:
    """Runs the wave schedule against a run store, checkpointing every stage.

    With ``run_dir`` set, each wave writes ``wave_<k>/`` containing
    ``design.csv``, ``emulators/``, ``nroy.npz``, ``next_design.csv`` and
    ``wave.json``; a stage whose artifact exists is loaded rather than
    recomputed, so re-running a finished wave is a no-op.
    """

    def __init__(self, space: ParameterSpace, grid: CandidateGrid, targets: TargetSet,
                 schedule: Sequence[WaveConfig], sim_cfg: SimConfig, store: RunStore,
                 run_dir: str | Path | None = None, *, seed: int = 0, family: int = 0, jobs: int = 1,
                 method: str = "joint", restarts: int = 5, lhs_restarts: int = 100,
                 shard_size: int = DEFAULT_SHARD, final_design: tuple[int, int] | None = None):
        validate_schedule(schedule)
        for w in schedule:
            targets.subset(w.targets)
        self.space, self.grid, self.targets = space, grid, targets
        self.schedule = list(schedule)
        self.sim_cfg, self.store = sim_cfg, store
        self.run_dir = None if run_dir is None else Path(run_dir)
        self.seed, self.family, self.jobs = int(seed), int(family), int(jobs)
        self.method, self.restarts, self.lhs_restarts = method, restarts, lhs_restarts
        self.shard_size = shard_size
        # (n_design, replicates) of the design proposed by the last wave
        self.final_design = final_design
        self.results: dict[int, WaveResult] = {}

    # -- paths
    def wave_dir(self, k: int) -> Path | None:
        return None if self.run_dir is None else self.run_dir / f"wave_{k}"

    def _artifact(self, k: int, name: str) -> Path | None:
        d = self.wave_dir(k)
        return None if d is None else d / name

    def is_complete(self, k: int) -> bool:
        if k in self.results:
            return True
        p = self._artifact(k, "wave.json")
        return p is not None and p.exists()

    # -- public
    def result(self, k: int) -> WaveResult:
        """Finished wave ``k``, loading it from its checkpoint if needed."""
        if k in self.results:
            return self.results[k]
        if not self.is_complete(k):
            raise PipelineOrderError(f"wave {k} has not been run (missing checkpoint wave_{k}/wave.json)")
        self.results[k] = self._load(k)
        return self.results[k]

    def run_all(self) -> list[WaveResult]:
        return [self.run_wave(w.index) for w in self.schedule]

    def run_wave(self, k: int) -> WaveResult:
        if not 1 <= k <= len(self.schedule):
            raise ValueError(f"wave must lie in 1..{len(self.schedule)}, got {k}")
        if self.is_complete(k):
            return self.result(k)
        prev = self.result(k - 1) if k > 1 else None
        cfg = self.schedule[k - 1]
        design = self._stage_design(k, cfg, prev)
        self._stage_simulate(k, cfg, design)
        emulators, n_train = self._stage_fit(k, cfg)
        nroy = self._stage_filter(k, cfg, emulators, prev)
        nxt = self._stage_propose(k, cfg, emulators, nroy)
        res = WaveResult(cfg, emulators, nroy, nxt, n_train)
        if self.run_dir is not None:
            write_json(self._artifact(k, "wave.json"), {
                "wave": k, "targets": list(cfg.targets), "cutoff": cfg.cutoff,
                "nroy_count": len(nroy), "grid_size": self.grid.size,
                "volume_fraction": res.volume_fraction, "n_train": n_train,
                "runs": design.total_runs,
            })
        self.results[k] = res
        log.info("wave %d: %d NROY points (%.4f%%)", k, len(nroy), 100 * res.volume_fraction)
        return res

    # -- stages
    def _stage_design(self, k, cfg, prev) -> Design:
        path = self._artifact(k, "design.csv")
        if path is not None and path.exists():
            return Design.from_csv(path)
        if prev is None:
            design = lhs_maximin(self.grid.d, cfg.n_design, seed=self.seed, restarts=self.lhs_restarts)
        else:
            design = prev.next_design
        design = design.with_replicates(cfg.replicates)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            design.to_csv(path, [f"u_{n}" for n in self.space.names])
        return design

    def _stage_simulate(self, k, cfg, design) -> None:
        tag = wave_tag(k)
        done = self.store.tagged(tag)
        if done:
            if len(done) != design.total_runs:
                raise PipelineOrderError(f"store holds {len(done)} {tag} runs, design needs {design.total_runs}")
            return
        plan = plan_replicates(design, cfg.replicates, self.store.next_seed)
        simulate_plan(self.space, self.sim_cfg, self.store, plan, tag, self.family, self.jobs)

    def training_records(self, k: int) -> list[RunRecord]:
        """Runs of waves ``1..k`` whose design point passes every filter before wave ``k``."""
        recs = [r for j in range(1, k + 1) for r in self.store.tagged(wave_tag(j))]
        return self._surviving(recs, range(1, k))

    def _surviving(self, recs, waves) -> list[RunRecord]:
        if not recs:
            return recs
        U = np.array([r.unit for r in recs], dtype=float)
        uniq, inv = np.unique(U, axis=0, return_inverse=True)
        ok = np.ones(len(uniq), dtype=bool)
        for j in waves:
            res = self.result(j)
            tg = self.targets.subset(res.config.targets)
            pos = np.flatnonzero(ok)
            if pos.size:
                ok[pos] = in_nroy(res.emulators, tg, res.config.cutoff, uniq[pos])
        keep = ok[np.ravel(inv)]
        return [r for r, good in zip(recs, keep) if good]

    def _stage_fit(self, k, cfg):
        tg = self.targets.subset(cfg.targets)
        edir = self._artifact(k, "emulators")
        files = [None if edir is None else edir / f"{q:02d}.npz" for q in range(len(tg))]
        recs = self.training_records(k)
        if edir is not None and all(f.exists() for f in files):
            return [em.HetGP.load(f) for f in files], len({r.unit for r in recs})
        if len({r.unit for r in recs}) < self.grid.d + 2:
            raise NROYEmptyError(f"wave {k}: too few surviving design points to train emulators")
        values = np.array([tg.values(r.output) for r in recs])
        datasets = replicate_data(recs, values)
        models = em.fit_many(datasets, method=self.method, restarts=self.restarts, jobs=self.jobs)
        if edir is not None:
            edir.mkdir(parents=True, exist_ok=True)
            for m, f in zip(models, files):
                m.save(f)
            write_json(edir / "index.json", {f"{q:02d}": name for q, name in enumerate(tg.names)})
        return models, datasets[0].n

    def _stage_filter(self, k, cfg, emulators, prev) -> NROYSet:
        path = self._artifact(k, "nroy.npz")
        if path is not None and path.exists():
            return load_nroy(path, self.grid)
        tg = self.targets.subset(cfg.targets)
        cand = None if prev is None else prev.nroy.indices
        nroy = nroy_filter(self.grid, emulators, tg, cfg.cutoff, cand, self.shard_size, self.jobs)
        if len(nroy) == 0:
            raise NROYEmptyError(
                f"wave {k}: NROY set is empty; revisit the model and its discrepancy variances")
        if path is not None:
            save_nroy(path, nroy)
        return nroy

    def _stage_propose(self, k, cfg, emulators, nroy) -> Design:
        path = self._artifact(k, "next_design.csv")
        if path is not None and path.exists():
            return _design_with_index(path, self.grid)
        if k < len(self.schedule):
            n_next, reps = self.schedule[k].n_design, self.schedule[k].replicates
        else:
            n_next, reps = self.final_design or (cfg.n_design, cfg.replicates)
        recs = self.training_records(k)
        tg = self.targets.subset(cfg.targets)
        existing = np.unique(np.array([r.unit for r in recs], dtype=float), axis=0) if recs else None
        if existing is not None:
            existing = existing[in_nroy(emulators, tg, cfg.cutoff, existing)]
        design = design_from_nroy(nroy, n_next, existing).with_replicates(reps)
        if path is not None:
            design.to_csv(path, [f"u_{n}" for n in self.space.names])
        return design

    def _load(self, k) -> WaveResult:
        cfg = self.schedule[k - 1]
        edir = self._artifact(k, "emulators")
        models = [em.HetGP.load(edir / f"{q:02d}.npz") for q in range(len(cfg.targets))]
        nroy = load_nroy(self._artifact(k, "nroy.npz"), self.grid)
        nxt = _design_with_index(self._artifact(k, "next_design.csv"), self.grid)
        meta = read_json(self._artifact(k, "wave.json"))
        return WaveResult(cfg, models, nroy, nxt, int(meta["n_train"]))


def _design_with_index(path, grid) -> Design:
    d = Design.from_csv(path)
    return Design(d.points, d.replicates, grid.nearest_index(d.points))


def simulate_plan(space: ParameterSpace, sim_cfg: SimConfig, store: RunStore, plan, tag: str,
                  family: int = 0, jobs: int = 1, cfg_override: SimConfig | None = None) -> list[RunRecord]:
    """Simulate planned ``(point_id, unit point, seed)`` runs and append them to ``store``."""
    if not plan:
        return []
    units = np.array([a.point for a in plan], dtype=float)
    thetas = space.denormalize(units)
    seeds = np.array([a.seed for a in plan], dtype=np.int64)
    outs = run_many(space.names, thetas, seeds, cfg_override or sim_cfg, jobs, family)
    recs = [RunRecord(int(a.seed), tag, int(a.point_id), tuple(map(float, th)), tuple(map(float, u)), o)
            for a, th, u, o in zip(plan, thetas, units, outs)]
    store.append(recs)
    return recs


def save_nroy(path, nroy: NROYSet) -> None:
    save_npz(path, indices=nroy.indices, imax=nroy.imax, cutoff=np.array(nroy.cutoff),
             m=np.array(nroy.grid.m), d=np.array(nroy.grid.d))


def load_nroy(path, grid: CandidateGrid) -> NROYSet:
    with np.load(path, allow_pickle=False) as z:
        if int(z["m"]) != grid.m or int(z["d"]) != grid.d:
            raise ValueError(f"{path}: NROY set belongs to a different grid")
        return NROYSet(grid, z["indices"], z["imax"], float(z["cutoff"]))
