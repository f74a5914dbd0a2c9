"""Desk-scale stochastic SEIRD agent-based epidemic model.

Agents live on static layered contact networks (home, school, work,
community, long-term care). Each day:

1. infectious, undiagnosed agents are tested; symptomatic agents test with
   ``tn`` times the odds of asymptomatic ones, and a positive test both
   counts a diagnosis and puts the agent into isolation;
2. every infectious -> susceptible contact in layer ``L`` transmits with
   probability ``beta * weight_L * multiplier_L(t)`` (times the isolation
   factor for diagnosed sources), where the multiplier is ``bc_wc`` for
   work/community and ``bc_lf`` for ltcf from ``change_day`` onwards;
3. exposed agents become infectious and infectious agents are removed with
   geometric durations; symptomatic removals die with probability
   ``ifr_ltcf`` for care-home residents and ``ifr_symptomatic`` otherwise.

Randomness comes from a stateless counter-based hash of
``(seed, stream, day, index)``, so a run is a pure function of
``(theta, seed, cfg)`` and independent of iteration order.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from ._io import atomic_open
from .parallel import chunk_bounds, pmap

LAYER_NAMES = ("home", "work", "school", "community", "ltcf")
SERIES = (
    "new_diagnoses",
    "new_deaths",
    "active_infections",
    "cumulative_diagnoses",
    "cumulative_deaths",
)
DAILY_SERIES = ("new_diagnoses", "new_deaths")

# Seeds are 32-bit; a "family" occupies the bits above them so that whole
# sets of runs (one pipeline repetition, or the synthetic truth) draw from
# disjoint random streams while keeping small per-run seed numbers.
MAX_SEED = 2**32
MAX_FAMILY = 2**31
TRUTH_FAMILY = MAX_FAMILY - 1

# states
S, E, I, R, D = 0, 1, 2, 3, 4

# RNG streams
_NET, _SEED, _TRANSMIT, _SYMPTOM, _PROGRESS, _DEATH, _TEST = range(7)


@dataclass(frozen=True)
class Layer:
    """Contact layer over a ``fraction`` of the agents.

    Ordinary layers cover the lowest agent ids and the ``ltcf`` layer the
    highest, so shrinking the other layers' fractions keeps care-home
    residents out of them.
    """

    name: str
    contacts: float
    weight: float
    fraction: float = 1.0


@dataclass(frozen=True)
class Disease:
    exposed_days: float = 4.0
    infectious_days: float = 7.0
    symptomatic_frac: float = 0.6
    ifr_symptomatic: float = 0.01
    ifr_ltcf: float = 0.4
    test_prob: float = 0.01
    isolation_factor: float = 0.5


@dataclass(frozen=True)
class Intervention:
    """Policy change layered on top of the calibrated behaviour.

    From ``start_day`` work/community and ltcf transmission are further
    multiplied by ``wc_multiplier`` and ``lf_multiplier``; from
    ``test_start_day`` (default ``start_day``) the base daily test
    probability is multiplied by ``test_multiplier``.
    """

    start_day: int = 60
    test_multiplier: float = 1.0
    wc_multiplier: float = 1.0
    lf_multiplier: float = 1.0
    test_start_day: int | None = None

    @property
    def test_day(self) -> int:
        return self.start_day if self.test_start_day is None else self.test_start_day


def TestingExpansion(start_day: int = 60, test_multiplier: float = 5.0) -> Intervention:
    """Testing-only intervention, the counterfactual default."""
    return Intervention(start_day=start_day, test_multiplier=test_multiplier)


DEFAULT_LAYERS = (
    Layer("home", 3.0, 0.2, 0.92),
    Layer("school", 6.0, 0.05, 0.92),
    Layer("work", 8.0, 0.3, 0.92),
    Layer("community", 12.0, 0.25, 1.0),
    Layer("ltcf", 10.0, 0.8, 0.08),
)


@dataclass(frozen=True)
class SimConfig:
    n_agents: int = 2000
    horizon: int = 90
    layers: tuple[Layer, ...] = DEFAULT_LAYERS
    disease: Disease = field(default_factory=Disease)
    seed_infections: int = 20
    change_day: int = 21
    intervention: Intervention | None = None

    def __post_init__(self):
        layers = tuple(l if isinstance(l, Layer) else Layer(**l) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        if isinstance(self.disease, dict):
            object.__setattr__(self, "disease", Disease(**self.disease))
        if isinstance(self.intervention, dict):
            object.__setattr__(self, "intervention", Intervention(**self.intervention))
        self.validate()

    def validate(self) -> None:
        if self.n_agents < 1:
            raise ValueError("n_agents must be positive")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if not 0 <= self.seed_infections <= self.n_agents:
            raise ValueError("seed_infections must lie in [0, n_agents]")
        for l in self.layers:
            if l.name not in LAYER_NAMES:
                raise ValueError(f"unknown layer {l.name!r}; expected one of {LAYER_NAMES}")
            if l.contacts < 0 or l.weight < 0:
                raise ValueError(f"layer {l.name!r}: contacts and weight must be >= 0")
            if not 0 <= l.fraction <= 1:
                raise ValueError(f"layer {l.name!r}: fraction must lie in [0, 1]")
        if len({l.name for l in self.layers}) != len(self.layers):
            raise ValueError("layer names must be unique")
        dz = self.disease
        if dz.exposed_days < 1 or dz.infectious_days < 1:
            raise ValueError("mean state durations must be at least one day")
        for name in ("symptomatic_frac", "ifr_symptomatic", "ifr_ltcf", "test_prob", "isolation_factor"):
            v = getattr(dz, name)
            if not 0 <= v <= 1:
                raise ValueError(f"disease.{name} must lie in [0, 1], got {v}")
        iv = self.intervention
        if iv is not None:
            for name in ("test_multiplier", "wc_multiplier", "lf_multiplier"):
                if getattr(iv, name) < 0:
                    raise ValueError(f"intervention.{name} must be nonnegative")
            if iv.start_day < 0 or iv.test_day < 0:
                raise ValueError("intervention start days must be nonnegative")

    def with_intervention(self, start_day: int = 60, test_multiplier: float = 5.0, **kw) -> "SimConfig":
        return replace(self, intervention=Intervention(start_day, test_multiplier, **kw))


@dataclass(frozen=True)
class Theta:
    """The four calibrated inputs, in native units."""

    beta: float = 0.03
    bc_wc: float = 1.0
    bc_lf: float = 1.0
    tn: float = 1.0

    def __post_init__(self):
        if not 0 <= self.beta < 1:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        for name in ("bc_wc", "bc_lf"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not self.tn >= 1:
            raise ValueError(f"tn must be >= 1, got {self.tn}")

    @classmethod
    def from_vector(cls, names: Sequence[str], values) -> "Theta":
        known = {f.name for f in fields(cls)}
        unknown = set(names) - known
        if unknown:
            raise ValueError(f"simulator has no parameters {sorted(unknown)}")
        return cls(**{n: float(v) for n, v in zip(names, values)})


@dataclass(frozen=True)
class RunOutput:
    """Daily counts from one run; cumulative series derive from the daily ones."""

    new_diagnoses: np.ndarray
    new_deaths: np.ndarray
    active_infections: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.new_diagnoses)

    @property
    def cumulative_diagnoses(self) -> np.ndarray:
        return np.cumsum(self.new_diagnoses)

    @property
    def cumulative_deaths(self) -> np.ndarray:
        return np.cumsum(self.new_deaths)

    def series(self, name: str, smoothed: bool = False) -> np.ndarray:
        if name not in SERIES:
            raise KeyError(f"unknown series {name!r}; expected one of {SERIES}")
        s = np.asarray(getattr(self, name), dtype=float)
        return smooth_weekly(s) if smoothed else s

    def __eq__(self, other):
        if not isinstance(other, RunOutput):
            return NotImplemented
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in SERIES[:3])

    def to_csv(self, path: str | Path) -> None:
        with atomic_open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["day", "new_diagnoses", "new_deaths", "active_infections"])
            for t in range(self.horizon):
                w.writerow([t, self.new_diagnoses[t], self.new_deaths[t], self.active_infections[t]])

    @classmethod
    def from_csv(cls, path: str | Path) -> "RunOutput":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        cols = {k: np.array([int(float(r[k])) for r in rows], dtype=np.int64)
                for k in ("new_diagnoses", "new_deaths", "active_infections")}
        return cls(**cols)


def smooth_weekly(series) -> np.ndarray:
    """Centred 7-day moving average, renormalised where the window is cut off."""
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.size < 1:
        raise ValueError("smooth_weekly needs a non-empty 1-d series")
    k = np.ones(7)
    n = x.size
    num = np.convolve(x, k)[3:3 + n]
    den = np.convolve(np.ones(n), k)[3:3 + n]
    return num / den


def extract_targets(out: RunOutput, spec: Sequence[tuple[str, int]], smooth_daily: bool = False) -> np.ndarray:
    """Values of ``(series, day)`` pairs in ``spec`` order.

    With ``smooth_daily`` the daily-count series are weekly-smoothed first;
    cumulative series and active infections are always taken raw.
    """
    vals = np.empty(len(spec))
    for q, (name, day) in enumerate(spec):
        if not 0 <= day < out.horizon:
            raise IndexError(f"day {day} outside horizon {out.horizon}")
        vals[q] = out.series(name, smoothed=smooth_daily and name in DAILY_SERIES)[day]
    return vals


def test_probabilities(p0: float, tn: float) -> tuple[float, float]:
    """Daily test probability for (symptomatic, asymptomatic) agents.

    Symptomatic odds are ``tn`` times the asymptomatic odds ``p0 / (1 - p0)``.
    """
    p0 = min(max(p0, 0.0), 1.0)
    if p0 >= 1.0:
        return 1.0, 1.0
    return tn * p0 / (1.0 - p0 + tn * p0), p0


# --- counter-based random numbers -------------------------------------------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


@numba.njit(cache=True)
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _key(seed, stream, day):
    k = _mix(np.uint64(seed) * _GOLD + np.uint64(stream))
    return _mix(k ^ (np.uint64(day + 1) * _M2))


@numba.njit(cache=True)
def _uniform(key, idx):
    return (_mix(key + np.uint64(idx + 1) * _GOLD) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


# --- network construction -----------------------------------------------------

@numba.njit(cache=True)
def _layer_edges(n, mean_contacts, seed, layer):
    """Configuration-model graph with degrees floor/ceil of the mean."""
    key = _key(seed, _NET, layer)
    base = int(np.floor(mean_contacts))
    frac = mean_contacts - base
    deg = np.empty(n, dtype=np.int64)
    for i in range(n):
        deg[i] = base + (1 if _uniform(key, i) < frac else 0)
    total = deg.sum()
    stubs = np.empty(total, dtype=np.int64)
    pos = 0
    for i in range(n):
        for _ in range(deg[i]):
            stubs[pos] = i
            pos += 1
    for i in range(total - 1, 0, -1):
        j = int(_uniform(key, n + i) * (i + 1))
        stubs[i], stubs[j] = stubs[j], stubs[i]
    m = total // 2
    src = np.empty(m, dtype=np.int64)
    dst = np.empty(m, dtype=np.int64)
    k = 0
    for e in range(m):
        a, b = stubs[2 * e], stubs[2 * e + 1]
        if a != b:
            src[k] = a
            dst[k] = b
            k += 1
    return src[:k], dst[:k]


@numba.njit(cache=True)
def _csr(n, src, dst, lay):
    """Directed adjacency (both directions of every edge) in CSR form."""
    m = src.shape[0]
    counts = np.zeros(n + 1, dtype=np.int64)
    for e in range(m):
        counts[src[e] + 1] += 1
        counts[dst[e] + 1] += 1
    ptr = np.cumsum(counts)
    fill = ptr[:-1].copy()
    nbr = np.empty(2 * m, dtype=np.int64)
    nlay = np.empty(2 * m, dtype=np.int64)
    for e in range(m):
        a, b = src[e], dst[e]
        nbr[fill[a]] = b
        nlay[fill[a]] = lay[e]
        fill[a] += 1
        nbr[fill[b]] = a
        nlay[fill[b]] = lay[e]
        fill[b] += 1
    return ptr, nbr, nlay


def layer_members(n_agents: int, layer: Layer) -> int:
    return int(round(layer.fraction * n_agents))


def layer_offset(n_agents: int, layer: Layer) -> int:
    """Id of the first member: ltcf occupies the top of the id range."""
    return n_agents - layer_members(n_agents, layer) if layer.name == "ltcf" else 0


def ltcf_residents(cfg: SimConfig) -> np.ndarray:
    """Mask of agents belonging to the long-term-care layer (none if absent)."""
    res = np.zeros(cfg.n_agents, dtype=np.bool_)
    for layer in cfg.layers:
        if layer.name == "ltcf":
            res[layer_offset(cfg.n_agents, layer):] = True
    return res


def build_network(cfg: SimConfig, seed: int):
    """CSR adjacency ``(ptr, nbr, layer_of_slot)`` for all layers of ``cfg``."""
    srcs, dsts, lays = [], [], []
    for li, layer in enumerate(cfg.layers):
        members = layer_members(cfg.n_agents, layer)
        if layer.contacts <= 0 or members < 2:
            continue
        s, d = _layer_edges(members, float(layer.contacts), int(seed), li)
        off = layer_offset(cfg.n_agents, layer)
        s, d = s + off, d + off
        srcs.append(s)
        dsts.append(d)
        lays.append(np.full(len(s), li, dtype=np.int64))
    if srcs:
        src, dst, lay = np.concatenate(srcs), np.concatenate(dsts), np.concatenate(lays)
    else:
        src = dst = lay = np.empty(0, dtype=np.int64)
    return _csr(cfg.n_agents, src, dst, lay)


# --- daily dynamics -------------------------------------------------------------

@numba.njit(cache=True)
def transmission_step(state, diagnosed, ptr, nbr, nlay, prob_by_layer, isolation, key):
    """Agents infected today by the infectious agents in ``state``.

    Returns a boolean mask; the caller applies it after the step so no one
    infected today transmits today.
    """
    n = state.shape[0]
    newly = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        if state[i] != I:
            continue
        scale = isolation if diagnosed[i] else 1.0
        for s in range(ptr[i], ptr[i + 1]):
            j = nbr[s]
            if state[j] != S or newly[j]:
                continue
            if _uniform(key, s) < prob_by_layer[nlay[s]] * scale:
                newly[j] = True
    return newly


@numba.njit(cache=True)
def _simulate(n, horizon, ptr, nbr, nlay, weights, is_wc, is_lf,
              beta, bc_wc, bc_lf, tn, change_day,
              p_exp, p_inf, symp_frac, ifr, ifr_ltcf, resident, test_prob, isolation,
              test_mult, test_day, iv_day, iv_wc, iv_lf, n_seed, seed):
    state = np.zeros(n, dtype=np.int8)
    diagnosed = np.zeros(n, dtype=np.bool_)
    symptomatic = np.zeros(n, dtype=np.bool_)
    ksym = _key(seed, _SYMPTOM, 0)
    for i in range(n):
        symptomatic[i] = _uniform(ksym, i) < symp_frac

    # seed infections: partial Fisher-Yates over agent ids
    ids = np.arange(n)
    kseed = _key(seed, _SEED, 0)
    for r in range(n_seed):
        j = r + int(_uniform(kseed, r) * (n - r))
        ids[r], ids[j] = ids[j], ids[r]
        state[ids[r]] = I

    new_dx = np.zeros(horizon, dtype=np.int64)
    new_dead = np.zeros(horizon, dtype=np.int64)
    active = np.zeros(horizon, dtype=np.int64)
    nl = weights.shape[0]
    prob = np.empty(nl)
    for t in range(horizon):
        # testing
        p0 = test_prob * (test_mult if t >= test_day else 1.0)
        if p0 > 1.0:
            p0 = 1.0
        p_sym = 1.0 if p0 >= 1.0 else tn * p0 / (1.0 - p0 + tn * p0)
        ktest = _key(seed, _TEST, t)
        for i in range(n):
            if state[i] == I and not diagnosed[i]:
                p = p_sym if symptomatic[i] else p0
                if _uniform(ktest, i) < p:
                    diagnosed[i] = True
                    new_dx[t] += 1
        # transmission
        for l in range(nl):
            m = 1.0
            if t >= change_day:
                if is_wc[l]:
                    m = bc_wc
                elif is_lf[l]:
                    m = bc_lf
            if t >= iv_day:
                if is_wc[l]:
                    m *= iv_wc
                elif is_lf[l]:
                    m *= iv_lf
            prob[l] = beta * weights[l] * m
        newly = transmission_step(state, diagnosed, ptr, nbr, nlay, prob, isolation,
                                  _key(seed, _TRANSMIT, t))
        # progression on start-of-day states
        kprog = _key(seed, _PROGRESS, t)
        kdeath = _key(seed, _DEATH, t)
        for i in range(n):
            st = state[i]
            if st == E:
                if _uniform(kprog, i) < p_exp:
                    state[i] = I
            elif st == I:
                if _uniform(kprog, i) < p_inf:
                    f = ifr_ltcf if resident[i] else ifr
                    if symptomatic[i] and _uniform(kdeath, i) < f:
                        state[i] = D
                        new_dead[t] += 1
                    else:
                        state[i] = R
        count = 0
        for i in range(n):
            if newly[i]:
                state[i] = E
            if state[i] == E or state[i] == I:
                count += 1
        active[t] = count
    return new_dx, new_dead, active


def stream_key(seed: int, family: int = 0) -> int:
    if not 0 <= seed < MAX_SEED:
        raise ValueError(f"seed must lie in [0, 2**32), got {seed}")
    if not 0 <= family < MAX_FAMILY:
        raise ValueError(f"seed family must lie in [0, 2**31), got {family}")
    return (int(family) << 32) | int(seed)


def run(theta: Theta, seed: int, cfg: SimConfig = SimConfig(), family: int = 0) -> RunOutput:
    """Simulate one epidemic; bit-identical for identical ``(theta, seed, cfg, family)``."""
    if not isinstance(theta, Theta):
        theta = Theta(**theta)
    seed = stream_key(seed, family)
    cfg.validate()
    ptr, nbr, nlay = build_network(cfg, seed)
    names = [l.name for l in cfg.layers]
    weights = np.array([l.weight for l in cfg.layers], dtype=float)
    is_wc = np.array([n in ("work", "community") for n in names])
    is_lf = np.array([n == "ltcf" for n in names])
    dz = cfg.disease
    iv = cfg.intervention
    if iv is None:
        test_mult, test_day, iv_day, iv_wc, iv_lf = 1.0, cfg.horizon, cfg.horizon, 1.0, 1.0
    else:
        test_mult, test_day = iv.test_multiplier, iv.test_day
        iv_day, iv_wc, iv_lf = iv.start_day, iv.wc_multiplier, iv.lf_multiplier
    dx, dead, active = _simulate(
        cfg.n_agents, cfg.horizon, ptr, nbr, nlay, weights, is_wc, is_lf,
        theta.beta, theta.bc_wc, theta.bc_lf, theta.tn, cfg.change_day,
        1.0 / dz.exposed_days, 1.0 / dz.infectious_days, dz.symptomatic_frac,
        dz.ifr_symptomatic, dz.ifr_ltcf, ltcf_residents(cfg), dz.test_prob, dz.isolation_factor,
        float(test_mult), int(test_day), int(iv_day), float(iv_wc), float(iv_lf),
        cfg.seed_infections, int(seed),
    )
    return RunOutput(dx, dead, active)


def _run_chunk(args):
    names, thetas, seeds, cfg, family = args
    return [run(Theta.from_vector(names, th), int(s), cfg, family) for th, s in zip(thetas, seeds)]


def run_many(names: Sequence[str], thetas, seeds, cfg: SimConfig = SimConfig(), jobs: int = 1,
             family: int = 0) -> list[RunOutput]:
    """Run a batch of ``(theta, seed)`` pairs; output order follows input order."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    seeds = np.asarray(seeds, dtype=np.int64)
    if thetas.shape[0] != seeds.shape[0]:
        raise ValueError("one seed per parameter vector required")
    bounds = chunk_bounds(len(seeds), jobs)
    chunks = [(list(names), thetas[a:b], seeds[a:b], cfg, family) for a, b in bounds]
    return [out for part in pmap(_run_chunk, chunks, jobs) for out in part]
