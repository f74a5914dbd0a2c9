"""End-to-end calibration run in a single directory.

Layout of ``run_dir``::

    config.yaml               resolved configuration (jobs and run_dir omitted)
    observed.csv              data the waves are matched to
    store/                    every simulator run, seeds 0, 1, 2, ...
    wave_<k>/                 history-matching checkpoints
    abc/                      ABC design, series emulators, priors, traces
    ppc/                      posterior predictive runs summarised as bands
    counterfactual/           paired intervention comparison
    exports/                  NROY tables and optical depths
    report.csv                one row per wave

Each stage loads its artifacts when they exist, so commands can be repeated
or resumed after an interruption and produce the same files.
"""
from __future__ import annotations

import csv
import itertools
import logging
from functools import cached_property
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import abc_sampler as abc
from . import emulator as em
from ._io import atomic_open, read_json, write_json
from .config import PipelineConfig
from .errors import ConfigError, PipelineOrderError
from .design import plan_replicates
from .history import (HistoryMatcher, TargetSet, WaveResult, nroy_filter, optical_depth, simulate_plan,
                      wave_tag)
from .simulator import MAX_FAMILY, TRUTH_FAMILY, RunOutput, Theta, run
from .space import NROYSet, volume_fraction
from .store import RunRecord, RunStore

log = logging.getLogger(__name__)

ABC_TAG, PPC_TAG, CF_TAG = "abc", "ppc", "counterfactual"


def _snapshot(cfg: PipelineConfig) -> str:
    d = cfg.to_dict()
    d.pop("jobs")
    d.pop("run_dir")
    return yaml.safe_dump(d, sort_keys=False, default_flow_style=None)


class Pipeline:
    def __init__(self, cfg: PipelineConfig, run_dir: str | Path | None = None):
        if not 0 <= cfg.seed < MAX_FAMILY - 1:
            raise ConfigError(f"seed: must lie in [0, {MAX_FAMILY - 1})")
        self.cfg = cfg
        self.dir = Path(run_dir if run_dir is not None else cfg.run_dir)

    # -- shared state
    def _claim(self) -> None:
        """Bind the run directory to this configuration, or verify it already is."""
        path = self.dir / "config.yaml"
        snap = _snapshot(self.cfg)
        if path.exists():
            if path.read_text() != snap:
                raise ConfigError(f"{self.dir} was created with a different configuration "
                                  f"(see {path}); use a fresh --out directory")
            return
        with atomic_open(path, "w") as fh:
            fh.write(snap)

    @cached_property
    def store(self) -> RunStore:
        return RunStore.open(self.dir / "store", self.cfg.space.names, self.cfg.simulator.horizon)

    @property
    def observed_path(self) -> Path:
        return self.dir / "observed.csv"

    def observed(self) -> RunOutput:
        if not self.observed_path.exists():
            raise PipelineOrderError(f"missing {self.observed_path}; run 'truth' or supply observed data")
        obs = RunOutput.from_csv(self.observed_path)
        if obs.horizon != self.cfg.simulator.horizon:
            raise ConfigError(f"{self.observed_path}: {obs.horizon} days, simulator horizon is "
                              f"{self.cfg.simulator.horizon}")
        return obs

    def targets(self) -> TargetSet:
        names = dict.fromkeys(t for w in self.cfg.waves for t in w.targets)
        catalog = [(n.partition("@")[0], int(n.partition("@")[2])) for n in names]
        tv = self.cfg.targets
        return TargetSet.from_observed(self.observed(), catalog, tv.var_eps, tv.var_md)

    @cached_property
    def matcher(self) -> HistoryMatcher:
        c = self.cfg
        return HistoryMatcher(c.space, c.grid, self.targets(), c.waves, c.simulator, self.store, self.dir,
                              seed=c.seed, family=c.seed, jobs=c.jobs, method=c.emulator.method,
                              restarts=c.emulator.restarts, shard_size=c.emulator.shard_size,
                              final_design=(c.abc.n_design, c.abc.replicates))

    @property
    def n_waves(self) -> int:
        return len(self.cfg.waves)

    def final_wave(self) -> WaveResult:
        k = self.n_waves
        if not self.matcher.is_complete(k):
            raise PipelineOrderError(f"history matching is incomplete (missing checkpoint wave_{k}/wave.json)")
        return self.matcher.result(k)

    # -- stages
    def truth(self) -> RunOutput:
        """Simulate the synthetic observed data at the configured truth."""
        self._claim()
        theta = Theta.from_vector(self.cfg.space.names, self.cfg.truth_theta)
        out = run(theta, self.cfg.truth.seed, self.cfg.simulator, family=TRUTH_FAMILY)
        out.to_csv(self.observed_path)
        return out

    def wave(self, k: int) -> WaveResult:
        self._claim()
        if not 1 <= k <= self.n_waves:
            raise ConfigError(f"wave must lie in 1..{self.n_waves}, got {k}")
        if k > 1 and not self.matcher.is_complete(k - 1):
            raise PipelineOrderError(f"wave {k} needs wave {k - 1} (missing checkpoint wave_{k - 1}/wave.json)")
        with threadpool_limits(1):
            return self.matcher.run_wave(k)

    def waves(self) -> list[WaveResult]:
        return [self.wave(k) for k in range(1, self.n_waves + 1)]

    def export_nroy(self, k: int | None = None) -> dict:
        """Re-filter wave ``k`` from its emulators and export the NROY set, optical depths and volume."""
        self._claim()
        if k is None:
            done = [j for j in range(1, self.n_waves + 1) if self.matcher.is_complete(j)]
            if not done:
                raise PipelineOrderError("no wave has finished yet (missing checkpoint wave_1/wave.json)")
            k = done[-1]
        res = self.matcher.result(k)
        cand = self.matcher.result(k - 1).nroy.indices if k > 1 else None
        tg = self.matcher.targets.subset(res.config.targets)
        with threadpool_limits(1):
            nroy = nroy_filter(self.cfg.grid, res.emulators, tg, res.config.cutoff, cand,
                               self.cfg.emulator.shard_size, self.cfg.jobs)
        if not np.array_equal(nroy.indices, res.nroy.indices):
            raise PipelineOrderError(f"wave {k}: re-filtered NROY set differs from the checkpoint")
        out = self.dir / "exports"
        out.mkdir(parents=True, exist_ok=True)
        nroy.to_csv(out / f"nroy_wave{k}.csv")
        write_optical_depths(out, f"optical_depth_wave{k}", nroy, self.cfg.space.names)
        summary = {"wave": k, "nroy_count": len(nroy), "grid_size": self.cfg.grid.size,
                   "volume_fraction": volume_fraction(nroy), "volume_pct": 100 * volume_fraction(nroy)}
        write_json(out / f"volume_wave{k}.json", summary)
        return summary

    # ABC ------------------------------------------------------------------------
    def _abc_design(self, final: WaveResult) -> None:
        design = final.next_design
        if self.store.has_tag(ABC_TAG):
            n = len(self.store.tagged(ABC_TAG))
            if n != design.total_runs:
                raise PipelineOrderError(f"store holds {n} {ABC_TAG} runs, design needs {design.total_runs}")
            return
        plan = plan_replicates(design, self.cfg.abc.replicates, self.store.next_seed)
        simulate_plan(self.cfg.space, self.cfg.simulator, self.store, plan, ABC_TAG, self.cfg.seed, self.cfg.jobs)

    def abc_training(self) -> list[RunRecord]:
        """Runs from every wave and the ABC design whose point survives every filter."""
        recs = [r for j in range(1, self.n_waves + 1) for r in self.store.tagged(wave_tag(j))]
        recs += self.store.tagged(ABC_TAG)
        return self.matcher._surviving(recs, range(1, self.n_waves + 1))

    def series_emulator(self) -> abc.SeriesEmulator:
        d = self.dir / "abc" / "emulators"
        keys = self.cfg.abc.keys
        files = [d / f"{q:02d}.npz" for q in range(len(keys))]
        if all(f.exists() for f in files):
            return abc.SeriesEmulator(keys, tuple(em.HetGP.load(f) for f in files), self.cfg.space)
        recs = self.abc_training()
        if len({r.unit for r in recs}) < self.cfg.space.d + 2:
            raise PipelineOrderError("too few design points survive history matching to train ABC emulators")
        values = np.array([series_values(r.output, keys) for r in recs])
        U = np.array([r.unit for r in recs], dtype=float)
        datasets = [em.ReplicateData.from_runs(U, values[:, q]) for q in range(len(keys))]
        with threadpool_limits(1):
            models = em.fit_many(datasets, self.cfg.emulator.method, self.cfg.emulator.restarts, self.cfg.jobs)
        d.mkdir(parents=True, exist_ok=True)
        for m, f in zip(models, files):
            m.save(f)
        write_json(d / "index.json", {f"{q:02d}": f"{s}@{t}" for q, (s, t) in enumerate(keys)})
        return abc.SeriesEmulator(keys, tuple(models), self.cfg.space)

    def abc(self) -> abc.Posterior:
        self._claim()
        out = self.dir / "abc"
        if (out / "posterior_summary.json").exists():
            return abc.Posterior.load(out)
        final = self.final_wave()
        self._abc_design(final)
        model = self.series_emulator()
        priors = abc.fit_priors(final.nroy, self.cfg.space)
        write_json(out / "priors.json", priors.to_dict())
        obs = series_values(self.observed(), self.cfg.abc.keys)
        with threadpool_limits(1):
            post = abc.abc_sample(priors, model, obs, self.cfg.abc, self.cfg.seed, self.cfg.jobs)
        post.meta = {"n_train_points": len({r.unit for r in self.abc_training()})}
        post.export(out)
        return post

    def posterior(self) -> abc.Posterior:
        path = self.dir / "abc"
        if not (path / "posterior_summary.json").exists():
            raise PipelineOrderError("ABC has not been run (missing checkpoint abc/posterior_summary.json)")
        return abc.Posterior.load(path)

    # simulator checks -----------------------------------------------------------
    def _fresh_runs(self, tag: str, theta: np.ndarray, outputs: list, seeds) -> None:
        unit = self.cfg.space.normalize(theta)
        self.store.append(RunRecord(int(s), tag, i, tuple(map(float, th)), tuple(map(float, u)), o)
                          for i, (s, th, u, o) in enumerate(zip(seeds, theta, unit, outputs)))

    def _seeds_for(self, tag: str, k: int) -> np.ndarray:
        if self.store.has_tag(tag):
            seeds = np.array([r.seed for r in self.store.tagged(tag)], dtype=np.int64)
            if len(seeds) != k:
                raise PipelineOrderError(f"store holds {len(seeds)} {tag} runs, expected {k}")
            return seeds
        return np.arange(self.store.next_seed, self.store.next_seed + k, dtype=np.int64)

    def ppc(self) -> abc.PredictiveCheck:
        self._claim()
        post = self.posterior()
        k = self.cfg.ppc.draws
        stored = self.store.has_tag(PPC_TAG)
        seeds = self._seeds_for(PPC_TAG, k)
        if stored:
            recs = self.store.tagged(PPC_TAG)
            outs = [r.output for r in recs]
            chk = abc.PredictiveCheck(np.array([r.theta for r in recs]), seeds, outs, abc.quantile_bands(outs))
        else:
            chk = abc.posterior_predictive(post, k, self.cfg.space, self.cfg.simulator, seeds,
                                           self.cfg.seed, self.cfg.seed, self.cfg.jobs)
            self._fresh_runs(PPC_TAG, chk.theta, chk.outputs, seeds)
        out = self.dir / "ppc"
        abc.write_bands(out / "bands.csv", chk.bands)
        obs = self.observed()
        write_json(out / "coverage.json", {
            s: {"band_90": abc.band_coverage(obs.series(s), chk.bands[s], 0, -1),
                "band_50": abc.band_coverage(obs.series(s), chk.bands[s], 1, -2)}
            for s in chk.bands})
        return chk

    def counterfactual(self) -> abc.Counterfactual:
        self._claim()
        post = self.posterior()
        c = self.cfg.counterfactual
        seeds = self._seeds_for(CF_TAG, c.draws)
        res = abc.intervention_counterfactual(post, c.draws, self.cfg.space, self.cfg.counterfactual_sim(), seeds,
                                              c.window, self.cfg.seed, self.cfg.seed, self.cfg.jobs)
        if not self.store.has_tag(CF_TAG):
            self._fresh_runs(CF_TAG, res.theta, res.status_quo, seeds)
        out = self.dir / "counterfactual"
        res.to_csv(out / "counterfactual.csv")
        t, p = res.paired_test()
        write_json(out / "summary.json", {
            "draws": c.draws, "start_day": c.start_day, "test_multiplier": c.test_multiplier,
            "window": list(c.window), "mean_reduction": res.reduction(), "t_statistic": t, "p_value": p})
        return res

    # report -----------------------------------------------------------------------
    def report(self) -> list[dict]:
        self._claim()
        rows = []
        for k in range(1, self.n_waves + 1):
            if not self.matcher.is_complete(k):
                break
            meta = read_json(self.dir / f"wave_{k}" / "wave.json")
            rows.append({"wave": k, "n_targets": len(meta["targets"]), "targets": ";".join(meta["targets"]),
                         "cutoff": meta["cutoff"], "nroy_count": meta["nroy_count"],
                         "volume_pct": round(100 * meta["volume_fraction"], 2)})
        if not rows:
            raise PipelineOrderError("no wave has finished yet (missing checkpoint wave_1/wave.json)")
        with atomic_open(self.dir / "report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        return rows

    def run_all(self) -> None:
        if not self.observed_path.exists():
            self.truth()
        self.waves()
        self.export_nroy()
        self.abc()
        self.ppc()
        self.counterfactual()
        self.report()


def series_values(out: RunOutput, keys) -> np.ndarray:
    """Smoothed daily values at ``(series, day)`` keys, the ABC comparison vector."""
    cache = {}
    vals = np.empty(len(keys))
    for q, (s, t) in enumerate(keys):
        if s not in cache:
            cache[s] = out.series(s, smoothed=s in ("new_diagnoses", "new_deaths"))
        vals[q] = cache[s][t]
    return vals


def write_optical_depths(directory, prefix: str, nroy: NROYSet, names, bins: int | None = None) -> list[Path]:
    """One long-format CSV per dimension pair: ``<prefix>_<x>_<y>.csv``."""
    bins = bins or nroy.grid.m
    mids = (np.arange(bins) + 0.5) / bins
    paths = []
    for i, j in itertools.combinations(range(len(names)), 2):
        dep = optical_depth(nroy, i, j, bins)
        path = Path(directory) / f"{prefix}_{names[i]}_{names[j]}.csv"
        with atomic_open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "x_bin", "y_bin", "x_mid", "y_mid", "depth"])
            for a in range(bins):
                for b in range(bins):
                    w.writerow([names[i], names[j], a, b, repr(float(mids[a])), repr(float(mids[b])),
                                repr(float(dep[a, b]))])
        paths.append(path)
    return paths
