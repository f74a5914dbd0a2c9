"""Pipeline configuration: one YAML file with a section per stage.

Every key is checked against the fields it may set; a typo fails with the
dotted path of the offending key instead of being silently ignored.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .abc_sampler import ABCConfig
from .errors import ConfigError
from .history import WaveConfig, default_schedule, validate_schedule
from .simulator import SERIES, Disease, Intervention, Layer, SimConfig, Theta
from .space import CandidateGrid, ParameterSpace


@dataclass(frozen=True)
class TruthConfig:
    theta: dict[str, float] = field(default_factory=lambda: {"beta": 0.06, "bc_wc": 0.4, "bc_lf": 0.5, "tn": 6.0})
    seed: int = 999


@dataclass(frozen=True)
class TargetVariances:
    var_eps: float = 0.0
    var_md: float = 0.0


@dataclass(frozen=True)
class EmulatorConfig:
    method: str = "joint"
    restarts: int = 5
    shard_size: int = 65_536


@dataclass(frozen=True)
class PPCConfig:
    draws: int = 50


@dataclass(frozen=True)
class CounterfactualConfig:
    draws: int = 50
    start_day: int = 60
    test_multiplier: float = 5.0
    window: tuple[int, int] = (75, 89)


DEFAULT_BOUNDS = {"beta": (0.02, 0.10), "bc_wc": (0.1, 1.0), "bc_lf": (0.0, 1.0), "tn": (1.0, 20.0)}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    jobs: int = 1
    run_dir: str = "run"
    grid_m: int = 40
    space: ParameterSpace = field(default_factory=lambda: ParameterSpace.from_bounds(DEFAULT_BOUNDS))
    simulator: SimConfig = field(default_factory=SimConfig)
    truth: TruthConfig = field(default_factory=TruthConfig)
    targets: TargetVariances = field(default_factory=TargetVariances)
    waves: tuple[WaveConfig, ...] = field(default_factory=lambda: tuple(default_schedule()))
    emulator: EmulatorConfig = field(default_factory=EmulatorConfig)
    abc: ABCConfig = field(default_factory=ABCConfig)
    ppc: PPCConfig = field(default_factory=PPCConfig)
    counterfactual: CounterfactualConfig = field(default_factory=CounterfactualConfig)

    @property
    def grid(self) -> CandidateGrid:
        return CandidateGrid(self.space, self.grid_m)

    @property
    def truth_theta(self) -> list[float]:
        return [float(self.truth.theta[n]) for n in self.space.names]

    def counterfactual_sim(self) -> SimConfig:
        c = self.counterfactual
        return self.simulator.with_intervention(c.start_day, c.test_multiplier)

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    # -- serialisation
    def to_dict(self) -> dict:
        sim = self.simulator
        return {
            "seed": self.seed,
            "jobs": self.jobs,
            "run_dir": self.run_dir,
            "grid_m": self.grid_m,
            "space": {d.name: [d.lo, d.hi] for d in self.space.dims},
            "simulator": {
                "n_agents": sim.n_agents,
                "horizon": sim.horizon,
                "seed_infections": sim.seed_infections,
                "change_day": sim.change_day,
                "layers": [dataclasses.asdict(l) for l in sim.layers],
                "disease": dataclasses.asdict(sim.disease),
            },
            "truth": {"theta": dict(self.truth.theta), "seed": self.truth.seed},
            "targets": dataclasses.asdict(self.targets),
            "waves": [{"targets": list(w.targets), "cutoff": w.cutoff, "n_design": w.n_design,
                       "replicates": w.replicates} for w in self.waves],
            "emulator": dataclasses.asdict(self.emulator),
            "abc": {f.name: _plain(getattr(self.abc, f.name)) for f in dataclasses.fields(ABCConfig)},
            "ppc": dataclasses.asdict(self.ppc),
            "counterfactual": {**dataclasses.asdict(self.counterfactual),
                               "window": list(self.counterfactual.window)},
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


# --- parsing ------------------------------------------------------------------------

def _mapping(data, where: str) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    return data


def _check_keys(data: dict, allowed, where: str) -> None:
    unknown = [k for k in data if k not in allowed]
    if unknown:
        loc = f"{where}." if where else ""
        raise ConfigError(f"unknown key{'s' if len(unknown) > 1 else ''} "
                          f"{', '.join(loc + str(k) for k in unknown)}; allowed: {', '.join(sorted(allowed))}")


def _build(cls, data, where: str, convert: dict | None = None):
    data = _mapping(data, where)
    names = {f.name for f in dataclasses.fields(cls)}
    _check_keys(data, names, where)
    kw = dict(data)
    for k, fn in (convert or {}).items():
        if k in kw:
            kw[k] = fn(kw[k])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _space(data) -> ParameterSpace:
    data = _mapping(data, "space")
    if not data:
        return ParameterSpace.from_bounds(DEFAULT_BOUNDS)
    known = {f.name for f in dataclasses.fields(Theta)}
    _check_keys(data, known, "space")
    try:
        bounds = {}
        for name, b in data.items():
            if not isinstance(b, (list, tuple)) or len(b) != 2:
                raise ValueError(f"bounds for {name!r} must be [lo, hi]")
            bounds[name] = (float(b[0]), float(b[1]))
        return ParameterSpace.from_bounds(bounds)
    except ValueError as exc:
        raise ConfigError(f"space: {exc}") from None


def _simulator(data) -> SimConfig:
    data = _mapping(data, "simulator")
    allowed = {"n_agents", "horizon", "seed_infections", "change_day", "layers", "disease", "intervention"}
    _check_keys(data, allowed, "simulator")
    kw = {k: data[k] for k in ("n_agents", "horizon", "seed_infections", "change_day") if k in data}
    if "layers" in data:
        if not isinstance(data["layers"], list):
            raise ConfigError("simulator.layers: expected a list")
        kw["layers"] = tuple(_build(Layer, l, f"simulator.layers[{i}]") for i, l in enumerate(data["layers"]))
    if "disease" in data:
        kw["disease"] = _build(Disease, data["disease"], "simulator.disease")
    if data.get("intervention") is not None:
        kw["intervention"] = _build(Intervention, data["intervention"], "simulator.intervention")
    try:
        return SimConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"simulator: {exc}") from None


def _waves(data) -> tuple[WaveConfig, ...]:
    if data is None:
        return tuple(default_schedule())
    if not isinstance(data, list) or not data:
        raise ConfigError("waves: expected a non-empty list")
    out = []
    for i, w in enumerate(data):
        where = f"waves[{i}]"
        w = _mapping(w, where)
        _check_keys(w, {"targets", "cutoff", "n_design", "replicates"}, where)
        for t in w.get("targets", []):
            series, _, day = str(t).partition("@")
            if series not in SERIES or not day.isdigit():
                raise ConfigError(f"{where}.targets: {t!r} is not '<series>@<day>' with series in {SERIES}")
        try:
            out.append(WaveConfig(i + 1, tuple(w.get("targets", ())), float(w.get("cutoff", 0)),
                                  int(w.get("n_design", 50)), int(w.get("replicates", 20))))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
    try:
        validate_schedule(out)
    except ValueError as exc:
        raise ConfigError(f"waves: {exc}") from None
    return tuple(out)


def from_dict(data: Any) -> PipelineConfig:
    data = _mapping(data, "")
    top = {f.name for f in dataclasses.fields(PipelineConfig)}
    _check_keys(data, top, "")
    kw: dict[str, Any] = {}
    for k in ("seed", "jobs", "grid_m"):
        if k in data:
            if not isinstance(data[k], int) or isinstance(data[k], bool):
                raise ConfigError(f"{k}: expected an integer")
            kw[k] = data[k]
    if "run_dir" in data:
        kw["run_dir"] = str(data["run_dir"])
    kw["space"] = _space(data.get("space"))
    kw["simulator"] = _simulator(data.get("simulator"))
    kw["truth"] = _build(TruthConfig, data.get("truth"), "truth")
    kw["targets"] = _build(TargetVariances, data.get("targets"), "targets")
    kw["waves"] = _waves(data.get("waves"))
    kw["emulator"] = _build(EmulatorConfig, data.get("emulator"), "emulator")
    kw["abc"] = _build(ABCConfig, data.get("abc"), "abc")
    kw["ppc"] = _build(PPCConfig, data.get("ppc"), "ppc")
    kw["counterfactual"] = _build(CounterfactualConfig, data.get("counterfactual"), "counterfactual",
                                  {"window": lambda w: tuple(int(v) for v in w)})
    cfg = PipelineConfig(**kw)
    validate(cfg)
    return cfg


def validate(cfg: PipelineConfig) -> None:
    """Cross-section checks that no single section can do alone."""
    if cfg.seed < 0:
        raise ConfigError("seed: must be nonnegative")
    if cfg.jobs < 1:
        raise ConfigError("jobs: must be at least 1")
    if cfg.grid_m < 2:
        raise ConfigError("grid_m: must be at least 2")
    names = cfg.space.names
    if set(cfg.truth.theta) != set(names):
        raise ConfigError(f"truth.theta: needs exactly the parameters {names}")
    for n, d in zip(names, cfg.space.dims):
        if not d.lo <= cfg.truth.theta[n] <= d.hi:
            raise ConfigError(f"truth.theta.{n}: {cfg.truth.theta[n]} outside bounds [{d.lo}, {d.hi}]")
    h = cfg.simulator.horizon
    for w in cfg.waves:
        for t in w.targets:
            if int(t.partition("@")[2]) >= h:
                raise ConfigError(f"waves[{w.index - 1}].targets: {t!r} lies beyond the horizon {h}")
    if any(not 0 <= d < h for d in cfg.abc.days):
        raise ConfigError(f"abc.days: must lie in [0, {h})")
    bad = [s for s in cfg.abc.series if s not in SERIES]
    if bad:
        raise ConfigError(f"abc.series: unknown series {bad}")
    if cfg.emulator.method not in ("joint", "staged"):
        raise ConfigError("emulator.method: must be 'joint' or 'staged'")
    if cfg.emulator.restarts < 1 or cfg.emulator.shard_size < 1:
        raise ConfigError("emulator: restarts and shard_size must be positive")
    if cfg.ppc.draws < 1 or cfg.counterfactual.draws < 1:
        raise ConfigError("ppc.draws and counterfactual.draws must be positive")
    if cfg.ppc.draws > cfg.abc.total or cfg.counterfactual.draws > cfg.abc.total:
        raise ConfigError("ppc/counterfactual draws exceed the number of posterior draws")
    a, b = cfg.counterfactual.window
    if not 0 <= a <= b < h:
        raise ConfigError(f"counterfactual.window: must satisfy 0 <= start <= end < {h}")
    if not 0 <= cfg.counterfactual.start_day < h or cfg.counterfactual.test_multiplier < 0:
        raise ConfigError("counterfactual: start_day must lie in the horizon and test_multiplier be >= 0")
    if not 0 <= cfg.truth.seed < 2**32:
        raise ConfigError("truth.seed: must lie in [0, 2**32)")


def load(path: str | Path) -> PipelineConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return from_dict(data)


TEMPLATE_HEADER = """\
# histmatch pipeline configuration.
# Parameter bounds are in native units; targets are '<series>@<day>' with
# day counted from 0. abc.epsilon 'auto' takes the pilot_quantile of pilot
# distances drawn from the priors.
"""


def template() -> str:
    return TEMPLATE_HEADER + PipelineConfig().to_yaml()
