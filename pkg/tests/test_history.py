import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from histmatch.errors import DegenerateVarianceError, NROYEmptyError, PipelineOrderError
from histmatch.history import (HistoryMatcher, TargetSet, TargetSpec, WaveConfig, default_catalog,
                               default_schedule, evaluate_imax, implausibility, load_nroy,
                               max_implausibility, nroy_filter, optical_depth, save_nroy, validate_schedule)
from histmatch.simulator import TRUTH_FAMILY, SimConfig, Theta, run
from histmatch.space import CandidateGrid, NROYSet, ParameterSpace, full_nroy, volume_fraction
from histmatch.store import RunStore


class LinearEmulator:
    """Stand-in emulator: mean = coefficient . u, constant variances."""

    def __init__(self, coef, var_mean=1.0, var_noise=0.0):
        self.coef, self.vm, self.vn = np.asarray(coef, float), var_mean, var_noise

    def predict(self, U):
        U = np.atleast_2d(U)
        mu = (U * self.coef).sum(axis=1)  # row-wise, no BLAS blocking
        return mu, np.full(len(U), self.vm), np.full(len(U), self.vn)


def target(y, name="t", var_md=0.0, var_eps=0.0):
    return TargetSpec(name, "new_diagnoses", 1, y, var_eps, var_md)


def unit_space(d):
    return ParameterSpace(tuple((f"p{i}", 0.0, 1.0) for i in range(d)))


def test_implausibility_examples():
    assert implausibility(5.0, 5.0, 1.0) == 0.0
    assert implausibility(10.0, 4.0, 4.0) == pytest.approx(3.0)
    assert implausibility(10.0, 4.0, 4.0, var_md=5.0) == pytest.approx(2.0)
    assert np.allclose(implausibility(1.0, [1.0, 3.0], [1.0, 4.0]), [0.0, 1.0])


def test_implausibility_degenerate():
    with pytest.raises(DegenerateVarianceError):
        implausibility(1.0, 1.0, 0.0)
    with pytest.raises(DegenerateVarianceError):
        implausibility(1.0, np.nan, 1.0)


def test_max_implausibility_examples():
    assert max_implausibility([0.5, 2.9, 1.1]) == 2.9
    assert max_implausibility([1.7]) == 1.7
    with pytest.raises(ValueError):
        max_implausibility([])


@given(st.lists(st.floats(0, 100), min_size=1, max_size=12), st.randoms())
def test_max_implausibility_permutation_invariant(vals, rnd):
    perm = list(vals)
    rnd.shuffle(perm)
    assert max_implausibility(perm) == max_implausibility(vals)


def test_vacuous_cutoff_keeps_everything():
    grid = CandidateGrid(unit_space(2), 9)
    nroy = nroy_filter(grid, [LinearEmulator([1.0, 1.0])], TargetSet((target(0.3),)), 1e12)
    assert len(nroy) == grid.size


def test_one_dimensional_interval_oracle():
    grid = CandidateGrid(unit_space(1), 101)
    tg = TargetSet((target(0.5),))
    assert len(nroy_filter(grid, [LinearEmulator([1.0], 1.0)], tg, 3.0)) == 101
    nroy = nroy_filter(grid, [LinearEmulator([1.0], 0.0025)], tg, 3.0)
    kept = grid.points(nroy.indices)[:, 0]
    expected = grid.levels[np.abs(grid.levels - 0.5) / 0.05 < 3.0]
    assert np.array_equal(kept, expected)
    # retained set is the grid inside [0.35, 0.65] up to one grid step at the open ends
    assert 0.35 - 1e-12 <= kept.min() <= 0.36 and 0.64 <= kept.max() <= 0.65 + 1e-12


def random_emulators(rng, d, q):
    return [LinearEmulator(rng.normal(size=d), rng.uniform(0.01, 0.1), rng.uniform(0.0, 0.05)) for _ in range(q)]


def test_shard_sizes_give_identical_sets():
    rng = np.random.default_rng(3)
    grid = CandidateGrid(unit_space(3), 14)
    ems = random_emulators(rng, 3, 3)
    tg = TargetSet(tuple(target(0.2 * k, f"t{k}") for k in range(3)))
    ref = nroy_filter(grid, ems, tg, 3.0, shard_size=grid.size)
    assert 0 < len(ref) < grid.size
    for s in (1, 1000):
        other = nroy_filter(grid, ems, tg, 3.0, shard_size=s)
        assert np.array_equal(other.indices, ref.indices) and np.array_equal(other.imax, ref.imax)
    assert np.array_equal(nroy_filter(grid, ems, tg, 3.0, jobs=2).indices, ref.indices)


def test_filter_exact_and_excluded_points_really_excluded():
    rng = np.random.default_rng(4)
    grid = CandidateGrid(unit_space(4), 12)
    ems = random_emulators(rng, 4, 4)
    tg = TargetSet(tuple(target(rng.normal(), f"t{k}", var_md=0.01) for k in range(4)))
    nroy = nroy_filter(grid, ems, tg, 3.0)
    assert np.all(nroy.imax < 3.0)
    assert np.allclose(nroy.imax, evaluate_imax(ems, tg, grid.points(nroy.indices)), rtol=0, atol=0)
    excluded = np.setdiff1d(np.arange(grid.size), nroy.indices)
    spot = rng.choice(excluded, size=min(1000, len(excluded)), replace=False)
    assert np.all(evaluate_imax(ems, tg, grid.points(spot)) >= 3.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 3.0), st.floats(0.1, 1.0))
def test_cutoff_nesting(seed, c, shrink):
    rng = np.random.default_rng(seed)
    grid = CandidateGrid(unit_space(2), 15)
    ems = random_emulators(rng, 2, 2)
    tg = TargetSet((target(0.1, "a"), target(-0.2, "b")))
    big = nroy_filter(grid, ems, tg, c)
    small = nroy_filter(grid, ems, tg, c * shrink)
    assert set(small.indices.tolist()) <= set(big.indices.tolist())


def test_filter_argument_errors():
    grid = CandidateGrid(unit_space(1), 4)
    with pytest.raises(ValueError):
        nroy_filter(grid, [LinearEmulator([1.0])] * 2, TargetSet((target(0.0),)), 3.0)
    with pytest.raises(ValueError):
        nroy_filter(grid, [LinearEmulator([1.0])], TargetSet((target(0.0),)), 0.0)


def test_optical_depth_examples():
    grid = CandidateGrid(unit_space(2), 4)
    left = np.flatnonzero(grid.points(np.arange(grid.size))[:, 0] < 0.5)
    od = optical_depth(NROYSet(grid, left, np.zeros(len(left))), 0, 1, 2)
    assert od.tolist() == [[1.0, 1.0], [0.0, 0.0]]
    assert np.all(optical_depth(full_nroy(grid), 0, 1, 3) == 1.0)
    single = optical_depth(NROYSet(grid, np.array([5]), np.zeros(1)), 0, 1, 4)
    assert np.count_nonzero(single) == 1
    with pytest.raises(ValueError):
        optical_depth(full_nroy(grid), 1, 1, 2)


@pytest.mark.parametrize("m,d,bins", [(3, 2, 2), (5, 3, 3), (8, 3, 4), (6, 4, 5)])
def test_optical_depth_brute_force(m, d, bins):
    rng = np.random.default_rng(m * d)
    grid = CandidateGrid(unit_space(d), m)
    keep = np.flatnonzero(rng.random(grid.size) < 0.3)
    nroy = NROYSet(grid, keep, np.zeros(len(keep)))
    kept = set(keep.tolist())
    binof = lambda v: min(int(np.floor(v * bins)), bins - 1)
    for i, j in itertools.permutations(range(d), 2):
        num = np.zeros((bins, bins))
        den = np.zeros((bins, bins))
        for idx in range(grid.size):
            p = grid.point(idx)
            cell = binof(p[i]), binof(p[j])
            den[cell] += 1
            num[cell] += idx in kept
        ref = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        assert np.array_equal(optical_depth(nroy, i, j, bins), ref)


def test_default_schedule_rows():
    sched = default_schedule()
    assert [len(w.targets) for w in sched] == [8, 10, 10, 11]
    assert [w.cutoff for w in sched] == [3.0, 3.0, 2.7, 2.5]
    assert [w.n_design * w.replicates for w in sched] == [1250, 1000, 1000, 1000]
    catalog = {f"{s}@{d}" for s, d in default_catalog()}
    assert all(set(w.targets) <= catalog for w in sched)


def test_schedule_validation():
    with pytest.raises(ValueError):
        validate_schedule([WaveConfig(1, ("a",), 2.0), WaveConfig(2, ("a",), 3.0)])
    with pytest.raises(ValueError):
        validate_schedule([WaveConfig(2, ("a",), 3.0)])
    with pytest.raises(ValueError):
        WaveConfig(1, (), 3.0)


def test_nroy_checkpoint_roundtrip(tmp_path):
    grid = CandidateGrid(unit_space(2), 5)
    nroy = NROYSet(grid, np.array([1, 7, 20]), np.array([0.1, 2.0, 2.9]), 3.0)
    save_nroy(tmp_path / "n.npz", nroy)
    back = load_nroy(tmp_path / "n.npz", grid)
    assert np.array_equal(back.indices, nroy.indices) and back.cutoff == 3.0
    with pytest.raises(ValueError):
        load_nroy(tmp_path / "n.npz", CandidateGrid(unit_space(2), 6))


BOUNDS = {"beta": (0.02, 0.10), "bc_wc": (0.1, 1.0), "bc_lf": (0.0, 1.0), "tn": (1.0, 20.0)}


def small_matcher(tmp_path, targets=None, schedule=None):
    space = ParameterSpace.from_bounds(BOUNDS)
    grid = CandidateGrid(space, 8)
    cfg = SimConfig()
    if targets is None:
        obs = run(Theta(0.06, 0.4, 0.5, 6.0), 999, cfg, family=TRUTH_FAMILY)
        targets = TargetSet.from_observed(obs, default_catalog())
    schedule = schedule or [WaveConfig(1, tuple(default_schedule()[0].targets), 3.0, 12, 4),
                            WaveConfig(2, tuple(default_schedule()[1].targets), 3.0, 10, 4)]
    store = RunStore.open(tmp_path / "store", space.names, cfg.horizon)
    return HistoryMatcher(space, grid, targets, schedule, cfg, store, tmp_path / "hm", restarts=2,
                          lhs_restarts=5)


def test_history_matcher_small_run(tmp_path):
    hm = small_matcher(tmp_path)
    with pytest.raises(PipelineOrderError):
        hm.result(1)
    r1, r2 = hm.run_all()
    assert len(hm.store) == 12 * 4 + 10 * 4
    assert [r.seed for r in hm.store] == list(range(88))
    assert set(r2.nroy.indices.tolist()) <= set(r1.nroy.indices.tolist())
    assert r2.volume_fraction <= r1.volume_fraction
    assert np.all(r2.nroy.imax < 3.0)
    # every proposed point lies inside the NROY set that proposed it
    assert set(r1.next_design.source_index.tolist()) <= set(r1.nroy.indices.tolist())
    again = small_matcher(tmp_path)
    back = again.run_wave(2)
    assert np.array_equal(back.nroy.indices, r2.nroy.indices) and len(again.store) == 88


def test_empty_nroy_error(tmp_path):
    obs = run(Theta(0.06, 0.4, 0.5, 6.0), 999, SimConfig(), family=TRUTH_FAMILY)
    tg = TargetSet.from_observed(obs, default_catalog())
    far = TargetSet(tuple(TargetSpec(t.name, t.series, t.day, t.observed + 1e7) for t in tg))
    hm = small_matcher(tmp_path, targets=far,
                       schedule=[WaveConfig(1, tuple(default_schedule()[0].targets), 3.0, 8, 3)])
    with pytest.raises(NROYEmptyError, match="discrepancy"):
        hm.run_wave(1)


def test_target_set_rules():
    with pytest.raises(ValueError):
        TargetSet((target(1.0, "a"), target(2.0, "a")))
    with pytest.raises(ValueError):
        TargetSpec("x", "bogus", 1, 0.0)
    tg = TargetSet((target(1.0, "a"), target(2.0, "b")))
    assert tg.subset(["b"]).observed.tolist() == [2.0]
    with pytest.raises(KeyError):
        tg.subset(["c"])


def test_volume_matches_count():
    grid = CandidateGrid(unit_space(2), 10)
    nroy = NROYSet(grid, np.arange(0, 100, 4), np.zeros(25))
    assert volume_fraction(nroy) == 0.25
