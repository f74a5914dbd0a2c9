import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from histmatch import abc_sampler as abc
from histmatch.abc_sampler import (ABCConfig, Chain, Posterior, PriorSet, TruncNormal, abc_sample, band_coverage,
                                   distance, distance_weight, fit_priors, intervention_counterfactual,
                                   posterior_predictive)
from histmatch.errors import EpsilonTooSmallError
from histmatch.simulator import SimConfig
from histmatch.space import CandidateGrid, NROYSet, ParameterSpace, full_nroy

from oracles import kernel_smoothed_gaussian_posterior

NAMES = ["beta", "bc_wc", "bc_lf", "tn"]
SPACE = ParameterSpace.from_bounds({"beta": (0.02, 0.10), "bc_wc": (0.1, 1.0), "bc_lf": (0.0, 1.0), "tn": (1.0, 20.0)})


class NoisyLinear:
    """Emulator stand-in: output ``j`` is ``A[j] . theta`` plus N(0, sigma^2) noise."""

    def __init__(self, A, sigma):
        self.A, self.sigma = np.atleast_2d(A), sigma
        self.keys = tuple(("x", j) for j in range(self.A.shape[0]))

    def sample(self, theta, rng):
        mean = np.atleast_2d(theta) @ self.A.T
        return mean + self.sigma * rng.standard_normal(mean.shape)


def test_distance_weight_examples():
    assert distance_weight([1.0, 2.0], [1.0, 2.0], 3.0) == 1.0
    assert distance_weight([2.5], [0.5], 2.0) == pytest.approx(np.exp(-0.5))
    assert distance_weight([3.0, 4.0], [0.0, 0.0], 5.0) == pytest.approx(np.exp(-0.25), rel=1e-14)
    dev = np.array([3.0, 4.0])
    assert distance_weight(dev, np.zeros(2), 5.0) == pytest.approx(np.exp(-np.sum(dev**2) / (2 * 25 * 2)))


def test_distance_weight_errors_and_aggregates():
    with pytest.raises(ValueError):
        distance_weight([1.0], [1.0, 2.0], 1.0)
    with pytest.raises(ValueError):
        distance_weight([1.0], [1.0], 0.0)
    assert distance([3.0, 4.0], [0.0, 0.0], "sum") == 5.0
    assert distance([3.0, 4.0], [0.0, 0.0], "max") == 4.0
    with pytest.raises(ValueError):
        distance([1.0], [1.0], "median")


vec = st.lists(st.floats(-50, 50), min_size=1, max_size=8)


@given(vec, st.data(), st.floats(0.1, 20))
def test_distance_weight_symmetric_and_decreasing(a, data, eps):
    b = data.draw(st.lists(st.floats(-50, 50), min_size=len(a), max_size=len(a)))
    w = distance_weight(a, b, eps)
    assert w == distance_weight(b, a, eps)
    assert 0 < w <= 1 or w == 0.0
    k = data.draw(st.integers(0, len(a) - 1))
    far = list(a)
    far[k] = b[k] + (a[k] - b[k]) * 2 + (1.0 if a[k] >= b[k] else -1.0)
    assert distance_weight(far, b, eps) <= w
    assert distance(far, b) > distance(a, b)


def test_fit_priors_examples():
    space = ParameterSpace.from_bounds({"x": (0.0, 1.0), "y": (0.0, 1.0)})
    grid = CandidateGrid(space, 11)
    two = NROYSet(grid, grid.index_of(np.array([[4, 3], [6, 3]])), np.zeros(2))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        pri = fit_priors(two, space)
    assert pri.dims[0].loc == pytest.approx(0.5)
    assert pri.dims[0].scale == pytest.approx(np.std([0.4, 0.6], ddof=1))
    # the y coordinates coincide, so that scale is floored and flagged
    assert pri.dims[1].scale == pytest.approx(1e-3) and any("floored" in str(w.message) for w in caught)
    assert (pri.dims[0].lo, pri.dims[0].hi) == (0.0, 1.0)


def test_fit_priors_uniform_cloud():
    space = ParameterSpace.from_bounds({"x": (0.0, 1.0), "y": (0.0, 1.0)})
    pri = fit_priors(full_nroy(CandidateGrid(space, 101)), space)
    for p in pri.dims:
        assert p.loc == pytest.approx(0.5)
        assert p.scale == pytest.approx(1 / np.sqrt(12), rel=0.02)


def test_fit_priors_needs_two_points():
    space = ParameterSpace.from_bounds({"x": (0.0, 1.0), "y": (0.0, 1.0)})
    with pytest.raises(ValueError):
        fit_priors(NROYSet(CandidateGrid(space, 3), np.array([1]), np.zeros(1)), space)


def demo_priors():
    return PriorSet(tuple(NAMES), (TruncNormal(0.06, 0.01, 0.02, 0.10), TruncNormal(0.5, 0.2, 0.1, 1.0),
                                   TruncNormal(0.4, 0.3, 0.0, 1.0), TruncNormal(6.0, 3.0, 1.0, 20.0)))


def test_vacuous_epsilon_returns_prior():
    pri = demo_priors()
    model = NoisyLinear(np.eye(4)[:2], 1.0)
    cfg = ABCConfig(epsilon=1e9, chains=5, samples_per_chain=2000, burn_in=100)
    post = abc_sample(pri, model, np.zeros(2), cfg, seed=11)
    X = post.draws
    assert X.shape == (10_000, 4)
    for k, p in enumerate(pri.dims):
        assert stats.kstest(X[:, k], p.dist.cdf).statistic < 0.05


def test_conjugate_gaussian_toy():
    mu, tau, y, sigma, eps = 0.0, 1.0, 1.2, 0.5, 0.4
    pri = PriorSet(("t",), (TruncNormal(mu, tau, -60.0, 60.0),))
    cfg = ABCConfig(epsilon=eps, chains=20, samples_per_chain=4000, burn_in=2000)
    post = abc_sample(pri, NoisyLinear([[1.0]], sigma), np.array([y]), cfg, seed=3)
    means = np.array([c.theta[:, 0].mean() for c in post.chains])
    se = means.std(ddof=1) / np.sqrt(len(means))
    ref_mean, ref_sd = kernel_smoothed_gaussian_posterior(mu, tau, y, sigma, eps)
    assert abs(post.draws[:, 0].mean() - ref_mean) < 3 * se
    assert post.draws[:, 0].std() == pytest.approx(ref_sd, rel=0.1)


class Deterministic:
    keys = (("x", 0),)

    def sample(self, theta, rng):
        return np.atleast_2d(theta)[:, :1].copy()


def test_acceptance_ratio_is_kernel_weight_ratio():
    # replay the generator to recover every proposal and uniform, then check each decision by hand
    pri = PriorSet(("t",), (TruncNormal(0.0, 1.0, -5.0, 5.0),))
    cfg = ABCConfig(epsilon=0.7, chains=1, samples_per_chain=30, burn_in=50)
    post = abc_sample(pri, Deterministic(), np.array([0.3]), cfg, seed=5)
    rng = np.random.default_rng([5, 0])
    tb = pri.sample(rng, 50)
    ub = rng.random(50)
    w = lambda t: np.exp(-0.5 * ((t - 0.3) / 0.7) ** 2)
    first = next(i for i in range(50) if ub[i] < w(tb[i, 0]))
    cur = tb[first, 0]
    props = pri.sample(rng, 30)[:, 0]
    u = rng.random(30)
    for i in range(30):
        accept = u[i] < w(props[i]) / w(cur)
        assert bool(post.chains[0].accepted[i]) == accept
        if accept:
            cur = props[i]
        assert post.chains[0].theta[i, 0] == cur
        assert post.chains[0].distance[i] == pytest.approx(abs(cur - 0.3))


def test_chains_deterministic_and_within_bounds():
    pri = demo_priors()
    model = NoisyLinear(np.array([[10.0, 1.0, 1.0, 0.1]]), 0.2)
    cfg = ABCConfig(epsilon="auto", chains=3, samples_per_chain=300, burn_in=500, pilot=200)
    a = abc_sample(pri, model, np.array([2.0]), cfg, seed=9)
    b = abc_sample(pri, model, np.array([2.0]), cfg, seed=9, jobs=2)
    assert np.array_equal(a.draws, b.draws) and a.epsilon == b.epsilon
    lo = np.array([p.lo for p in pri.dims])
    hi = np.array([p.hi for p in pri.dims])
    assert np.all(a.draws >= lo) and np.all(a.draws <= hi)
    assert not np.array_equal(a.draws, abc_sample(pri, model, np.array([2.0]), cfg, seed=10).draws)


def test_epsilon_ladder_and_widened_proposal_run():
    pri = demo_priors()
    model = NoisyLinear(np.array([[10.0, 1.0, 1.0, 0.1]]), 0.2)
    cfg = ABCConfig(epsilon=0.5, chains=2, samples_per_chain=200, burn_in=2000, ladder_steps=3,
                    ladder_iters=50, proposal_scale=(1.5, 1.5, 1.5, 1.5))
    post = abc_sample(pri, model, np.array([2.0]), cfg, seed=1)
    assert post.draws.shape == (400, 4)


def test_epsilon_too_small_reports_distance():
    pri = demo_priors()
    model = NoisyLinear(np.eye(4)[:1], 0.0)
    cfg = ABCConfig(epsilon=1e-6, chains=1, samples_per_chain=10, burn_in=50)
    with pytest.raises(EpsilonTooSmallError, match="smallest distance"):
        abc_sample(pri, model, np.array([10.0]), cfg, seed=0)


def test_trace_export_roundtrip(tmp_path):
    pri = demo_priors()
    cfg = ABCConfig(epsilon=1.0, chains=2, samples_per_chain=25, burn_in=100)
    post = abc_sample(pri, NoisyLinear(np.eye(4)[:1], 0.01), np.array([0.06]), cfg, seed=2)
    post.export(tmp_path)
    header = (tmp_path / "trace_chain1.csv").read_text().splitlines()[0]
    assert header == "step,beta,bc_wc,bc_lf,tn,distance,accepted"
    back = Posterior.load(tmp_path)
    assert np.array_equal(back.draws, post.draws) and back.acceptance_rates == post.acceptance_rates


def single_draw_posterior(theta):
    return Posterior(tuple(NAMES), [Chain(np.array([theta]), np.zeros(1), np.ones(1, bool))], 1.0)


def test_ppc_single_draw_collapses_bands():
    check = posterior_predictive(single_draw_posterior([0.06, 0.4, 0.5, 6.0]), 1, SPACE, SimConfig(), [6000])
    bands = check.bands["new_diagnoses"]
    assert np.all(bands == bands[0]) and np.array_equal(bands[0], check.outputs[0].new_diagnoses)
    assert band_coverage(check.outputs[0].new_diagnoses, bands) == 1.0
    with pytest.raises(ValueError):
        posterior_predictive(single_draw_posterior([0.06, 0.4, 0.5, 6.0]), 2, SPACE, SimConfig(), [1, 2])


def test_counterfactual_null_and_zero_transmission():
    post = Posterior(tuple(NAMES), [Chain(np.tile([0.06, 0.4, 0.5, 6.0], (4, 1)), np.zeros(4),
                                          np.ones(4, bool))], 1.0)
    null = intervention_counterfactual(post, 4, SPACE, SimConfig().with_intervention(60, 1.0), [1, 2, 3, 4],
                                       (75, 89))
    assert all(a == b for a, b in zip(null.status_quo, null.intervention))
    assert null.reduction() == 0.0 and null.paired_test() == (0.0, 1.0)
    space0 = ParameterSpace.from_bounds({"beta": (0.0, 0.1), "bc_wc": (0.1, 1.0), "bc_lf": (0.0, 1.0),
                                         "tn": (1.0, 20.0)})
    flat = Posterior(tuple(NAMES), [Chain(np.tile([0.0, 0.4, 0.5, 6.0], (3, 1)), np.zeros(3),
                                          np.ones(3, bool))], 1.0)
    cf = intervention_counterfactual(flat, 3, space0, SimConfig().with_intervention(60, 5.0), [7, 8, 9], (75, 89))
    sq, iv = cf.window_means()
    assert np.array_equal(sq, iv) and cf.reduction() == 0.0
    with pytest.raises(ValueError):
        intervention_counterfactual(flat, 3, space0, SimConfig(), [7, 8, 9], (75, 89))


def test_config_validation():
    for bad in (dict(epsilon=-1.0), dict(epsilon="small"), dict(chains=0), dict(aggregate="median"),
                dict(pilot_quantile=1.5), dict(proposal_scale=0.0)):
        with pytest.raises(ValueError):
            ABCConfig(**bad)
    assert ABCConfig().total == 10_000 and len(ABCConfig().keys) == 26
