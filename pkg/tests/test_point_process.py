import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from poissonmfg.errors import InvalidInput, InvalidParameter, SimulationFault
from poissonmfg.measures import EmpiricalMeasure, MeasureFlow
from poissonmfg.point_process import (ConstantIntensity, Event, ExpKernel, FunctionIntensity, HawkesIntensity,
                                      HawkesParams, MarkedEventLog, TableKernel, ZeroKernel, compensator,
                                      finite_marks, hawkes_intensity, hawkes_lipschitz_ratio, interval_marks,
                                      kernel_config, make_kernel, pooled_residuals, simulate_marked_process,
                                      time_change_residuals)
from poissonmfg.rng import child_seed


def _const_flow(atoms, T=5.0):
    return MeasureFlow.constant(np.array([0.0, T]), EmpiricalMeasure(np.atleast_1d(np.asarray(atoms, float))))


def test_hawkes_intensity_examples():
    p = HawkesParams(1.3, 0.0, 1.0, ZeroKernel())
    assert hawkes_intensity(0.7, p, None, []) == 1.3
    p2 = HawkesParams(1.3, 3.0, 1.0, ZeroKernel())
    assert hawkes_intensity(0.7, p2, _const_flow(0.0), []) == 1.3
    p3 = HawkesParams(1.0, 0.0, 1.0, ExpKernel(1.0, 1.0))
    assert hawkes_intensity(2.0, p3, None, [1.0]) == pytest.approx(1.0 + math.exp(-1.0), rel=1e-15)


def test_hawkes_params_validation():
    with pytest.raises(InvalidParameter):
        HawkesParams(0.0, 0.0, 1.0)
    with pytest.raises(InvalidParameter):
        HawkesParams(1.0, -1.0, 1.0)
    with pytest.raises(InvalidParameter):
        HawkesParams(1.0, 0.0, 0.0)


def test_kernel_config_roundtrip():
    for k in (ExpKernel(0.5, 1.0), ZeroKernel(), TableKernel([0.0, 1.0, 2.0], [1.0, 0.5, 0.0])):
        assert kernel_config(make_kernel(kernel_config(k))) == kernel_config(k)
    with pytest.raises(InvalidParameter):
        make_kernel({"kind": "gauss"})


def test_table_kernel_interpolates_and_vanishes_past_support():
    k = TableKernel([0.0, 1.0, 2.0], [1.0, 0.5, 0.0])
    assert k.value(0.5) == pytest.approx(0.75)
    assert k.value(3.0) == 0.0
    assert k.integral(0.0, 2.0) == pytest.approx(1.0)


def test_zero_rate_gives_empty_log():
    log = simulate_marked_process(ConstantIntensity(0.0), None, 5.0, 1)
    assert len(log) == 0
    assert time_change_residuals(log, ConstantIntensity(0.0), None)[0].size == 0
    assert compensator(ConstantIntensity(0.0), None, log, 3.0)[0] == 0.0


def test_compensator_constant_rate_is_linear():
    spec = ConstantIntensity(2.5)
    log = simulate_marked_process(spec, None, 4.0, 3)
    for t in (0.0, 1.0, 2.7, 4.0):
        assert compensator(spec, None, log, t)[0] == pytest.approx(2.5 * t, rel=1e-14, abs=1e-14)


def test_compensator_piecewise_rate():
    spec = FunctionIntensity(lambda t, j, m: 1.0 if t < 1.0 else 2.0, 2.0, breakpoints=[1.0])
    log = MarkedEventLog.empty(2.0)
    assert compensator(spec, None, log, 2.0)[0] == pytest.approx(3.0, rel=1e-14)


def test_compensator_is_nondecreasing_for_hawkes():
    spec = HawkesIntensity(HawkesParams(1.0, 0.5, 1.0, ExpKernel(0.5, 1.0)), 5.0)
    env = _const_flow([0.3, 1.5])
    log = simulate_marked_process(spec, env, 5.0, 9)
    vals = [compensator(spec, env, log, t)[0] for t in np.linspace(0, 5, 41)]
    assert np.all(np.diff(vals) >= 0)


def test_unit_rate_residuals_are_gaps():
    spec = ConstantIntensity(1.0)
    log = simulate_marked_process(spec, None, 20.0, 4)
    res = time_change_residuals(log, spec, None)[0]
    assert np.allclose(res, np.diff(log.times, prepend=0.0), rtol=1e-12, atol=1e-12)


def test_hawkes_exponential_recursion_matches_direct_sum():
    params = HawkesParams(1.0, 0.0, 1.0, ExpKernel(0.8, 1.3))
    spec = HawkesIntensity(params, 5.0)
    log = simulate_marked_process(spec, None, 5.0, 12)
    assert len(log) > 3
    state = spec.initial_state()
    for t, e in zip(log.times[1:], log.events()):
        state = spec.update(state, e.time, 0, e.mark)
        probe = 0.5 * (e.time + t)
        assert spec.scalar_rate(probe, None, state) == pytest.approx(hawkes_intensity(probe, params, None, log),
                                                                     rel=1e-12)


def test_hawkes_mean_count_matches_linear_ode():
    # the mean rate solves m' = lambda0 - (alpha - beta) m with m(0) = lambda0
    lam0, beta, alpha, T = 1.0, 0.5, 1.0, 5.0
    spec = HawkesIntensity(HawkesParams(lam0, 0.0, 1.0, ExpKernel(beta, alpha)), T)
    counts = np.array([len(simulate_marked_process(spec, None, T, child_seed(5, i))) for i in range(4000)])
    kappa = alpha - beta
    stat = lam0 / kappa
    expected = stat * T + (lam0 - stat) * (1 - math.exp(-kappa * T)) / kappa
    assert abs(counts.mean() - expected) <= 3 * counts.std() / math.sqrt(counts.size)


def test_environment_feedback_raises_rate():
    p = HawkesParams(1.0, 2.0, 1.0, ZeroKernel())
    spec = HawkesIntensity(p, 5.0)
    env = _const_flow([3.0, -3.0])  # v_1 = 1, rate 3
    counts = [len(simulate_marked_process(spec, env, 5.0, child_seed(6, i))) for i in range(2000)]
    assert abs(np.mean(counts) - 15.0) <= 3 * math.sqrt(15.0 / 2000)


def test_pooled_residuals_are_exponential_for_hawkes():
    spec = HawkesIntensity(HawkesParams(1.0, 0.5, 1.0, ExpKernel(0.5, 1.0)), 5.0)
    env = _const_flow([0.3, 2.0])
    logs = [simulate_marked_process(spec, env, 5.0, child_seed(7, i)) for i in range(200)]
    res = np.concatenate(pooled_residuals(logs, spec, env))
    assert stats.kstest(res, "expon").pvalue > 0.01


def test_martingale_property_at_constant_rate():
    spec = ConstantIntensity(1.7)
    diffs = np.array([len(simulate_marked_process(spec, None, 3.0, child_seed(8, i))) - 1.7 * 3.0
                      for i in range(10_000)])
    assert abs(diffs.mean()) < 3 * diffs.std() / math.sqrt(diffs.size)


def test_channel_independence():
    spec = ConstantIntensity([1.0, 2.0])
    counts = np.array([simulate_marked_process(spec, None, 2.0, child_seed(9, i)).counts() for i in range(5000)])
    assert counts.mean(axis=0) == pytest.approx([2.0, 4.0], rel=0.05)
    corr = np.corrcoef(counts.T)[0, 1]
    assert abs(corr) < 3 / math.sqrt(5000)


def test_finite_mark_law_follows_kernel():
    marks = finite_marks([1.0, 2.0, 3.0], [0.2, 0.3, 0.5])
    spec = ConstantIntensity([[1.0, 1.0, 2.0]], marks=[marks])
    log = simulate_marked_process(spec, None, 2000.0, 10)
    k = np.array([0.2, 0.3, 1.0])
    observed = np.array([np.sum(log.marks == v) for v in (1.0, 2.0, 3.0)])
    assert stats.chisquare(observed, k / k.sum() * observed.sum()).pvalue > 0.01
    assert len(log) / 2000.0 == pytest.approx(k.sum(), rel=0.05)


def test_interval_marks_inverse_cdf():
    marks = interval_marks(0.0, 1.0)
    spec = ConstantIntensity([np.ones(marks.size)], marks=[marks])
    log = simulate_marked_process(spec, None, 3000.0, 11)
    assert np.all((log.marks >= 0) & (log.marks <= 1))
    assert stats.kstest(log.marks, "uniform").pvalue > 0.001


def test_majorant_violation_raises():
    spec = FunctionIntensity(lambda t, j, m: 5.0, 1.0)
    with pytest.raises(SimulationFault) as info:
        simulate_marked_process(spec, None, 10.0, 0)
    assert info.value.rate == 5.0 and info.value.bound == 1.0


def test_determinism_and_csv_roundtrip(tmp_path):
    spec = HawkesIntensity(HawkesParams(1.0, 0.5, 1.0, ExpKernel(0.5, 1.0)), 5.0)
    env = _const_flow([0.3])
    a = simulate_marked_process(spec, env, 5.0, 42)
    b = simulate_marked_process(spec, env, 5.0, 42)
    assert a == b
    assert a != simulate_marked_process(spec, env, 5.0, 43)
    a.to_csv(tmp_path / "log.csv")
    assert MarkedEventLog.from_csv(tmp_path / "log.csv", 5.0) == a
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "time,channel,mark"


def test_log_invariants_and_queries():
    log = MarkedEventLog.from_events([Event(0.5, 1.0, 1), Event(1.0, 2.0, 2), Event(1.5, 1.0, 1)], 2.0, 2)
    assert [e.time for e in log.between(0.5, 1.5)] == [1.0, 1.5]
    assert list(log.counts()) == [2, 1]
    with pytest.raises(InvalidInput):
        MarkedEventLog(np.array([1.0, 0.5]), np.zeros(2), np.ones(2, dtype=int), 2.0)
    with pytest.raises(InvalidInput):
        MarkedEventLog(np.array([3.0]), np.zeros(1), np.ones(1, dtype=int), 2.0)
    with pytest.raises(InvalidInput):
        MarkedEventLog(np.array([1.0]), np.zeros(1), np.array([2]), 2.0, 1)


def test_lipschitz_ratio_within_bound():
    worst, bound = hawkes_lipschitz_ratio(HawkesParams(1.0, 0.5, 1.0), seed=3)
    assert 0 < worst <= bound


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 5.0), st.integers(0, 2**32))
def test_thinning_respects_horizon_and_order(rate, seed):
    log = simulate_marked_process(ConstantIntensity(rate), None, 2.0, seed)
    assert np.all(np.diff(log.times) > 0)
    assert np.all((log.times >= 0) & (log.times <= 2.0))
