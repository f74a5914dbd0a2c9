import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from histmatch.design import (Design, is_latin_hypercube, lhs_maximin, maximin_select, min_pairwise_distance,
                              plan_replicates)

from oracles import greedy_maximin_trace, optimal_maximin_distance


def bin_occupancy_ok(points):
    n = len(points)
    bins = np.minimum(np.floor(points * n).astype(int), n - 1)
    return all(sorted(bins[:, j]) == list(range(n)) for j in range(points.shape[1]))


def test_lhs_eight_by_two():
    des = lhs_maximin(2, 8, seed=1)
    assert bin_occupancy_ok(des.points)
    assert np.all(des.replicates == 1)


def test_lhs_single_point():
    des = lhs_maximin(3, 1, seed=0)
    assert des.n == 1 and is_latin_hypercube(des.points)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 40), st.integers(0, 2**31), st.integers(1, 5))
def test_lhs_stratification_property(d, n, seed, restarts):
    des = lhs_maximin(d, n, seed=seed, restarts=restarts)
    assert des.points.shape == (n, d)
    assert bin_occupancy_ok(des.points)
    assert is_latin_hypercube(des.points)


def test_lhs_deterministic_given_seed():
    a, b = lhs_maximin(4, 50, seed=20, restarts=10), lhs_maximin(4, 50, seed=20, restarts=10)
    assert np.array_equal(a.points, b.points)


def test_lhs_restarts_beat_median_single_draw():
    best = min_pairwise_distance(lhs_maximin(2, 10, seed=3, restarts=50).points)
    singles = [min_pairwise_distance(lhs_maximin(2, 10, seed=1000 + s, restarts=1).points) for s in range(100)]
    assert best >= np.median(singles)


def test_maximin_examples():
    sel = maximin_select(np.array([[0.0], [0.5], [1.0]]), 1, existing=np.array([[0.0]]))
    assert sel.points[:, 0].tolist() == [1.0]
    sel = maximin_select(np.array([[0.0], [0.4], [0.6], [1.0]]), 2)
    assert sorted(sel.points[:, 0].tolist()) == [0.0, 1.0]


def test_maximin_matches_greedy_trace_oracle():
    rng = np.random.default_rng(5)
    for _ in range(10):
        cand = rng.random((30, 2))
        sel = maximin_select(cand, 3)
        ref = greedy_maximin_trace(cand, 3, np.empty((0, 2)))
        assert sorted(sel.source_index.tolist()) == sorted(ref)
        assert min_pairwise_distance(sel.points) == min_pairwise_distance(cand[ref])
        ex = rng.random((4, 2))
        sel = maximin_select(cand, 5, existing=ex)
        assert sel.source_index.tolist() == greedy_maximin_trace(cand, 5, ex)


def test_maximin_ties_lowest_index():
    cand = np.array([[0.0], [1.0], [0.5], [0.5]])
    sel = maximin_select(cand, 3)
    assert sel.source_index.tolist()[2] == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(1, 4), st.integers(0, 10_000))
def test_maximin_greedy_half_optimal(n, k, seed):
    k = min(k, n)
    cand = np.random.default_rng(seed).random((n, 2))
    sel = maximin_select(cand, k)
    assert len(set(sel.source_index.tolist())) == k
    assert all(any(np.array_equal(p, c) for c in cand) for p in sel.points)
    if k >= 2:
        assert min_pairwise_distance(sel.points) >= 0.5 * optimal_maximin_distance(cand, k) - 1e-12


def test_maximin_rejects_too_many():
    with pytest.raises(ValueError):
        maximin_select(np.zeros((3, 2)), 4)


def test_plan_replicates_counts_and_seeds():
    des = lhs_maximin(4, 50, seed=0, restarts=5)
    plan = plan_replicates(des, 25)
    assert len(plan) == 1250 and [a.seed for a in plan] == list(range(1250))
    assert [a.point_id for a in plan[:26]] == [0] * 25 + [1]
    plan = plan_replicates(des, 20, start_seed=1250)
    assert len(plan) == 1000 and plan[0].seed == 1250 and plan[-1].seed == 2249
    one = plan_replicates(Design(np.array([[0.3]]), np.array([1])), 1)
    assert len(one) == 1 and one[0].seed == 0


def test_design_validation_and_csv(tmp_path):
    with pytest.raises(ValueError):
        Design(np.array([[1.2]]), np.array([1]))
    with pytest.raises(ValueError):
        Design(np.array([[0.2]]), np.array([0]))
    des = Design(np.array([[0.1, 0.2], [0.3, 0.4]]), np.array([2, 3]))
    assert des.total_runs == 5
    des.to_csv(tmp_path / "d.csv", ["beta", "tn"])
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "point_id,beta,tn,replicates"
    back = Design.from_csv(tmp_path / "d.csv")
    assert np.array_equal(back.points, des.points) and np.array_equal(back.replicates, des.replicates)
