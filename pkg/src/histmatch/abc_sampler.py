"""Approximate Bayesian computation on emulated time series.

Priors are truncated normals matched to the NROY point cloud. Each chain
is an independence Metropolis-Hastings sampler whose proposal is the prior
(optionally widened). A proposal is scored by drawing a pseudo-observation
from the emulators' predictive distribution and comparing it with the data
through a Gaussian kernel

    w = exp(-dist^2 / (2 eps^2)),   dist^2 = sum_t (sim_t - obs_t)^2 / T

(``aggregate="mean"``; ``"sum"`` drops the ``1/T`` and ``"max"`` uses the
largest squared deviation). A chain starts from a rejection-ABC draw, so
no transient has to be discarded; the burn-in budget bounds how many
proposals that first draw may take.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from . import emulator as em
from ._io import atomic_open, write_json
from .errors import EpsilonTooSmallError
from .simulator import SimConfig, run_many
from .space import NROYSet, ParameterSpace

AGGREGATES = ("mean", "sum", "max")
BAND_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


# --- priors -------------------------------------------------------------------

@dataclass(frozen=True)
class TruncNormal:
    loc: float
    scale: float
    lo: float
    hi: float

    @property
    def dist(self):
        a, b = (self.lo - self.loc) / self.scale, (self.hi - self.loc) / self.scale
        return stats.truncnorm(a, b, loc=self.loc, scale=self.scale)

    def widened(self, factor: float) -> "TruncNormal":
        return TruncNormal(self.loc, self.scale * factor, self.lo, self.hi)


@dataclass(frozen=True)
class PriorSet:
    names: tuple[str, ...]
    dims: tuple[TruncNormal, ...]

    @property
    def d(self) -> int:
        return len(self.dims)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` independent draws, shape ``(n, d)``, native units."""
        u = rng.random((n, self.d))
        out = np.column_stack([p.dist.ppf(u[:, k]) for k, p in enumerate(self.dims)])
        lo = np.array([p.lo for p in self.dims])
        hi = np.array([p.hi for p in self.dims])
        return np.clip(out, lo, hi)

    def logpdf(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return sum(p.dist.logpdf(X[:, k]) for k, p in enumerate(self.dims))

    def widened(self, factors) -> "PriorSet":
        factors = np.broadcast_to(np.asarray(factors, dtype=float), (self.d,))
        return PriorSet(self.names, tuple(p.widened(f) for p, f in zip(self.dims, factors)))

    def to_dict(self) -> dict:
        return {n: {"loc": p.loc, "scale": p.scale, "lo": p.lo, "hi": p.hi} for n, p in zip(self.names, self.dims)}


def fit_priors(nroy: NROYSet, space: ParameterSpace, min_scale: float = 1e-3) -> PriorSet:
    """Per-dimension mean and sd of the NROY points (native units), truncated at the bounds.

    A standard deviation below ``min_scale`` times the bound width is
    raised to that floor with a warning.
    """
    if len(nroy) < 2:
        raise ValueError(f"need at least 2 NROY points to fit priors, got {len(nroy)}")
    pts = nroy.native_points()
    dims = []
    for k, dim in enumerate(space.dims):
        loc = float(pts[:, k].mean())
        sd = float(pts[:, k].std(ddof=1))
        floor = min_scale * dim.width
        if not sd >= floor:
            warnings.warn(f"prior for {dim.name!r}: NROY sd {sd:.3g} floored at {floor:.3g}", RuntimeWarning)
            sd = floor
        dims.append(TruncNormal(loc, sd, dim.lo, dim.hi))
    return PriorSet(tuple(space.names), tuple(dims))


# --- kernel -------------------------------------------------------------------

def distance(sim, obs, aggregate: str = "mean") -> np.ndarray | float:
    """Distance along the last axis: RMS (``mean``), root sum of squares (``sum``) or max deviation."""
    sim, obs = np.asarray(sim, dtype=float), np.asarray(obs, dtype=float)
    if sim.shape[-1] != obs.shape[-1]:
        raise ValueError(f"length mismatch: {sim.shape[-1]} vs {obs.shape[-1]}")
    if obs.shape[-1] == 0:
        raise ValueError("empty series")
    sq = (sim - obs) ** 2
    if aggregate == "mean":
        out = np.sqrt(sq.mean(axis=-1))
    elif aggregate == "sum":
        out = np.sqrt(sq.sum(axis=-1))
    elif aggregate == "max":
        out = np.sqrt(sq.max(axis=-1))
    else:
        raise ValueError(f"aggregate must be one of {AGGREGATES}")
    return float(out) if np.ndim(out) == 0 else out


def distance_weight(sim, obs, epsilon: float, aggregate: str = "mean"):
    """Gaussian kernel weight in ``(0, 1]``; ``exp(-sum (sim-obs)^2 / (2 eps^2 T))`` by default."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    dist = distance(sim, obs, aggregate)
    return np.exp(-0.5 * (np.asarray(dist) / epsilon) ** 2) if np.ndim(dist) else float(np.exp(-0.5 * (dist / epsilon) ** 2))


# --- emulated series ------------------------------------------------------------

@dataclass(frozen=True)
class SeriesEmulator:
    """Independent per-day emulators whose outputs are concatenated."""

    keys: tuple[tuple[str, int], ...]
    models: tuple[em.HetGP, ...]
    space: ParameterSpace

    def predict(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """Mean and single-run variance, each ``(n, len(keys))``."""
        U = self.space.normalize(np.atleast_2d(theta))
        mean = np.empty((U.shape[0], len(self.models)))
        var = np.empty_like(mean)
        for j, m in enumerate(self.models):
            mu, vm, vn = m.predict(U)
            mean[:, j], var[:, j] = mu, vm + vn
        return mean, var

    def sample(self, theta, rng: np.random.Generator) -> np.ndarray:
        mean, var = self.predict(theta)
        return mean + np.sqrt(var) * rng.standard_normal(mean.shape)


# --- sampler ---------------------------------------------------------------------

@dataclass(frozen=True)
class ABCConfig:
    epsilon: float | str = "auto"
    chains: int = 5
    samples_per_chain: int = 2000
    burn_in: int = 2000
    proposal_scale: tuple[float, ...] | float = 1.0
    series: tuple[str, ...] = ("new_diagnoses", "new_deaths")
    days: tuple[int, ...] = tuple(range(3, 90, 7))
    aggregate: str = "mean"
    pilot: int = 1000
    pilot_quantile: float = 0.10
    ladder_steps: int = 0
    ladder_factor: float = 10.0
    ladder_iters: int = 200
    n_design: int = 50
    replicates: int = 20

    def __post_init__(self):
        object.__setattr__(self, "series", tuple(self.series))
        object.__setattr__(self, "days", tuple(int(d) for d in self.days))
        if isinstance(self.proposal_scale, (list, tuple)):
            object.__setattr__(self, "proposal_scale", tuple(float(v) for v in self.proposal_scale))
        if isinstance(self.epsilon, str):
            if self.epsilon != "auto":
                raise ValueError("epsilon must be a positive number or 'auto'")
        elif not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.chains < 1 or self.samples_per_chain < 1 or self.burn_in < 1:
            raise ValueError("chains, samples_per_chain and burn_in must be positive")
        if self.aggregate not in AGGREGATES:
            raise ValueError(f"aggregate must be one of {AGGREGATES}")
        if not self.series or not self.days:
            raise ValueError("need at least one series and one day")
        if not 0 < self.pilot_quantile < 1 or self.pilot < 1:
            raise ValueError("pilot must be positive and pilot_quantile in (0, 1)")
        if self.ladder_steps < 0 or self.ladder_factor < 1 or self.ladder_iters < 1:
            raise ValueError("ladder_steps >= 0, ladder_factor >= 1 and ladder_iters >= 1 required")
        if np.any(np.asarray(self.proposal_scale, dtype=float) <= 0):
            raise ValueError("proposal_scale must be positive")

    @property
    def total(self) -> int:
        return self.chains * self.samples_per_chain

    @property
    def keys(self) -> tuple[tuple[str, int], ...]:
        return tuple((s, d) for s in self.series for d in self.days)


@dataclass
class Chain:
    theta: np.ndarray
    distance: np.ndarray
    accepted: np.ndarray

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted.mean()) if len(self.accepted) else 0.0


@dataclass
class Posterior:
    names: tuple[str, ...]
    chains: list[Chain]
    epsilon: float
    aggregate: str = "mean"
    meta: dict = field(default_factory=dict)

    @property
    def draws(self) -> np.ndarray:
        return np.vstack([c.theta for c in self.chains])

    @property
    def distances(self) -> np.ndarray:
        return np.concatenate([c.distance for c in self.chains])

    @property
    def acceptance_rates(self) -> list[float]:
        return [c.acceptance_rate for c in self.chains]

    def summary(self) -> dict:
        X = self.draws
        per = {}
        for k, name in enumerate(self.names):
            q = np.quantile(X[:, k], [0.05, 0.25, 0.5, 0.75, 0.95])
            per[name] = {"mean": float(X[:, k].mean()), "sd": float(X[:, k].std(ddof=1)),
                         "q05": float(q[0]), "q25": float(q[1]), "median": float(q[2]),
                         "q75": float(q[3]), "q95": float(q[4])}
        return {"epsilon": self.epsilon, "aggregate": self.aggregate, "draws": int(len(X)),
                "acceptance_rates": self.acceptance_rates, "parameters": per, **self.meta}

    def export(self, directory: str | Path) -> None:
        """``trace_chain<k>.csv`` per chain plus ``posterior_summary.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for k, c in enumerate(self.chains):
            with atomic_open(directory / f"trace_chain{k + 1}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["step", *self.names, "distance", "accepted"])
                for i in range(len(c.distance)):
                    w.writerow([i, *(repr(float(v)) for v in c.theta[i]), repr(float(c.distance[i])),
                                int(c.accepted[i])])
        write_json(directory / "posterior_summary.json", self.summary())

    @classmethod
    def load(cls, directory: str | Path) -> "Posterior":
        directory = Path(directory)
        with open(directory / "posterior_summary.json") as fh:
            summ = json.load(fh)
        chains = []
        k = 1
        while (directory / f"trace_chain{k}.csv").exists():
            with open(directory / f"trace_chain{k}.csv", newline="") as fh:
                rows = list(csv.reader(fh))
            names = tuple(rows[0][1:-2])
            body = rows[1:]
            theta = np.array([[float(v) for v in r[1:-2]] for r in body]).reshape(len(body), len(names))
            chains.append(Chain(theta, np.array([float(r[-2]) for r in body]),
                                np.array([int(r[-1]) for r in body], dtype=bool)))
            k += 1
        if not chains:
            raise FileNotFoundError(f"no traces in {directory}")
        meta = {k: v for k, v in summ.items()
                if k not in ("epsilon", "aggregate", "draws", "acceptance_rates", "parameters")}
        return cls(names, chains, float(summ["epsilon"]), summ["aggregate"], meta)


def pilot_epsilon(priors: PriorSet, model, obs, cfg: ABCConfig, seed) -> float:
    """The ``pilot_quantile`` of distances for ``pilot`` prior draws."""
    rng = np.random.default_rng([int(seed), 0xE95])
    theta = priors.sample(rng, cfg.pilot)
    sims = model.sample(theta, rng)
    eps = float(np.quantile(distance(sims, obs, cfg.aggregate), cfg.pilot_quantile))
    if not eps > 0:
        raise EpsilonTooSmallError("pilot distances are all zero; set epsilon explicitly")
    return eps


def _log_correction(priors, proposal, theta):
    """log prior(theta) - log proposal(theta); zero when they coincide."""
    if proposal is priors:
        return np.zeros(len(theta))
    return priors.logpdf(theta) - proposal.logpdf(theta)


def _run_chain(priors, proposal, model, obs, cfg, eps, seed, chain):
    rng = np.random.default_rng([int(seed), int(chain)])
    ladder = [eps * cfg.ladder_factor ** ((cfg.ladder_steps - k) / cfg.ladder_steps)
              for k in range(cfg.ladder_steps)] if cfg.ladder_steps else []
    eps0 = ladder[0] if ladder else eps

    # initial state: rejection draw under the first kernel
    theta_b = proposal.sample(rng, cfg.burn_in)
    dist_b = distance(model.sample(theta_b, rng), obs, cfg.aggregate)
    u_b = rng.random(cfg.burn_in)
    ok = np.flatnonzero(np.log(u_b) < -0.5 * (dist_b / eps0) ** 2)
    if ok.size == 0:
        raise EpsilonTooSmallError(
            f"chain {chain + 1}: no acceptance in {cfg.burn_in} burn-in proposals at epsilon {eps0:.4g}; "
            f"smallest distance seen {dist_b.min():.4g}")
    cur_t = theta_b[ok[0]]
    cur_d = float(dist_b[ok[0]])
    cur_c = float(_log_correction(priors, proposal, cur_t[None])[0])

    n_ladder = len(ladder) * cfg.ladder_iters
    n = n_ladder + cfg.samples_per_chain
    props = proposal.sample(rng, n)
    dists = distance(model.sample(props, rng), obs, cfg.aggregate)
    corr = _log_correction(priors, proposal, props)
    logu = np.log(rng.random(n))
    epss = np.concatenate([np.repeat(ladder, cfg.ladder_iters), np.full(cfg.samples_per_chain, eps)])

    out_t = np.empty((cfg.samples_per_chain, priors.d))
    out_d = np.empty(cfg.samples_per_chain)
    out_a = np.zeros(cfg.samples_per_chain, dtype=bool)
    for i in range(n):
        e = epss[i]
        log_ratio = -0.5 * ((dists[i] / e) ** 2 - (cur_d / e) ** 2) + corr[i] - cur_c
        acc = logu[i] < log_ratio
        if acc:
            cur_t, cur_d, cur_c = props[i], float(dists[i]), float(corr[i])
        j = i - n_ladder
        if j >= 0:
            out_t[j], out_d[j], out_a[j] = cur_t, cur_d, acc
    return Chain(out_t, out_d, out_a)


def _chain_job(args):
    return _run_chain(*args)


def abc_sample(priors: PriorSet, model: SeriesEmulator, obs, cfg: ABCConfig, seed: int,
               jobs: int = 1) -> Posterior:
    """Run ``cfg.chains`` independent chains; deterministic given ``seed``."""
    from .parallel import pmap

    obs = np.asarray(obs, dtype=float)
    if len(model.keys) != obs.shape[-1]:
        raise ValueError(f"{len(model.keys)} emulated outputs for {obs.shape[-1]} observations")
    eps = pilot_epsilon(priors, model, obs, cfg, seed) if cfg.epsilon == "auto" else float(cfg.epsilon)
    scale = np.broadcast_to(np.asarray(cfg.proposal_scale, dtype=float), (priors.d,))
    proposal = priors if np.all(scale == 1.0) else priors.widened(scale)
    chains = pmap(_chain_job, [(priors, proposal, model, obs, cfg, eps, seed, c) for c in range(cfg.chains)], jobs)
    return Posterior(tuple(priors.names), chains, eps, cfg.aggregate)


# --- simulator checks -------------------------------------------------------------

def pick_draws(posterior: Posterior, k: int, seed, stream: int) -> np.ndarray:
    """``k`` posterior draws without replacement."""
    X = posterior.draws
    if not 1 <= k <= len(X):
        raise ValueError(f"k must lie in [1, {len(X)}], got {k}")
    rng = np.random.default_rng([int(seed), int(stream)])
    return X[np.sort(rng.choice(len(X), size=k, replace=False))]


def quantile_bands(outputs, series=("new_diagnoses", "new_deaths", "active_infections"),
                   quantiles=BAND_QUANTILES) -> dict[str, np.ndarray]:
    """Per-day quantiles, ``{series: (len(quantiles), horizon)}``."""
    return {s: np.quantile(np.array([o.series(s) for o in outputs]), quantiles, axis=0) for s in series}


def write_bands(path, bands: dict[str, np.ndarray], quantiles=BAND_QUANTILES) -> None:
    with atomic_open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variable", "day", "quantile", "value"])
        for s, arr in bands.items():
            for t in range(arr.shape[1]):
                for qi, q in enumerate(quantiles):
                    w.writerow([s, t, q, repr(float(arr[qi, t]))])


def band_coverage(observed, bands: np.ndarray, lo: int = 0, hi: int = -1) -> float:
    """Share of days where ``observed`` lies inside quantile rows ``lo``..``hi``."""
    obs = np.asarray(observed, dtype=float)
    inside = (obs >= bands[lo]) & (obs <= bands[hi])
    return float(inside.mean())


@dataclass
class PredictiveCheck:
    theta: np.ndarray
    seeds: np.ndarray
    outputs: list
    bands: dict[str, np.ndarray]


def posterior_predictive(posterior: Posterior, k: int, space: ParameterSpace, cfg: SimConfig,
                         seeds: Sequence[int], seed: int = 0, family: int = 0,
                         jobs: int = 1) -> PredictiveCheck:
    """Simulate ``k`` posterior draws on the given fresh ``seeds``."""
    seeds = np.asarray(seeds, dtype=np.int64)
    if len(seeds) != k:
        raise ValueError("one seed per draw required")
    theta = pick_draws(posterior, k, seed, 0x99C)
    outs = run_many(space.names, theta, seeds, cfg, jobs, family)
    return PredictiveCheck(theta, seeds, outs, quantile_bands(outs))


@dataclass
class Counterfactual:
    theta: np.ndarray
    seeds: np.ndarray
    status_quo: list
    intervention: list
    window: tuple[int, int]

    def window_means(self) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.window
        sq = np.array([o.active_infections[a:b + 1].mean() for o in self.status_quo])
        iv = np.array([o.active_infections[a:b + 1].mean() for o in self.intervention])
        return sq, iv

    def reduction(self) -> float:
        sq, iv = self.window_means()
        return float(np.mean(sq - iv))

    def paired_test(self):
        """One-sided paired t-test of status quo > intervention."""
        sq, iv = self.window_means()
        diff = sq - iv
        if np.all(diff == 0):
            return 0.0, 1.0
        res = stats.ttest_rel(sq, iv, alternative="greater")
        return float(res.statistic), float(res.pvalue)

    def to_csv(self, path) -> None:
        with atomic_open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["arm", "day", "mean_active_infections", "mean_new_diagnoses"])
            for arm, outs in (("status_quo", self.status_quo), ("intervention", self.intervention)):
                act = np.mean([o.active_infections for o in outs], axis=0)
                dx = np.mean([o.new_diagnoses for o in outs], axis=0)
                for t in range(len(act)):
                    w.writerow([arm, t, repr(float(act[t])), repr(float(dx[t]))])


def intervention_counterfactual(posterior: Posterior, k: int, space: ParameterSpace, cfg: SimConfig,
                                seeds: Sequence[int], window: tuple[int, int], seed: int = 0,
                                family: int = 0, jobs: int = 1) -> Counterfactual:
    """Paired status-quo and intervention runs on shared draws and seeds.

    ``cfg.intervention`` must be set; the status-quo arm drops it.
    """
    if cfg.intervention is None:
        raise ValueError("counterfactual needs a configured intervention")
    seeds = np.asarray(seeds, dtype=np.int64)
    if len(seeds) != k:
        raise ValueError("one seed per draw required")
    a, b = window
    if not 0 <= a <= b < cfg.horizon:
        raise ValueError(f"window {window} outside the horizon")
    theta = pick_draws(posterior, k, seed, 0xCF)
    base = SimConfig(cfg.n_agents, cfg.horizon, cfg.layers, cfg.disease, cfg.seed_infections, cfg.change_day, None)
    sq = run_many(space.names, theta, seeds, base, jobs, family)
    iv = run_many(space.names, theta, seeds, cfg, jobs, family)
    return Counterfactual(theta, seeds, sq, iv, (a, b))
