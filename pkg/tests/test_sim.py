"""Simulator modes, bookkeeping and rate estimation."""

import filecmp

import numpy as np
import pytest

from gsp_routing.analysis import ob_utilizations
from gsp_routing.errors import ConfigInvalid, NoCompletedJobs
from gsp_routing.network import REFERENCE_SPEC, NetworkSpec
from gsp_routing.policy import REFERENCE_ETA, Policy
from gsp_routing.sim import (
    JOB_COLUMNS,
    RateEstimates,
    SimConfig,
    average_system_time,
    estimate_rates,
    littles_law_gap,
    rates_from_samples,
    run_episode,
    write_jobs_csv,
)

GSP = Policy.gsp(1.2, 1.1)
TANDEM = NetworkSpec((0.2, 0.2, 5.0, 5.0, 5.0), 0.05)


@pytest.mark.parametrize("mode", ["event_driven", "bernoulli_dt"])
def test_tandem_mm1(mode):
    # two M/M/1 queues in series: E[T] = 2 / (mu - lam)
    expected = 2 / (0.2 - 0.05)
    ws = [
        average_system_time(run_episode(TANDEM, Policy.ob((1, 0, 0)), SimConfig(mode=mode, horizon=1e6, seed=s,
                                                                                  record_states=False)))
        for s in range(2)
    ]
    assert np.mean(ws) == pytest.approx(expected, rel=0.03)


@pytest.mark.parametrize("mode", ["event_driven", "bernoulli_dt"])
@pytest.mark.parametrize("policy", [GSP, Policy.ssp(), Policy.ob(REFERENCE_ETA)], ids=["gsp", "ssp", "ob"])
def test_conservation(mode, policy):
    cfg = SimConfig(mode=mode, horizon=2e4, seed=4, initial_state=(3, 1, 0, 2, 5, 0, 1))
    d = run_episode(REFERENCE_SPEC, policy, cfg)
    assert d.initial_jobs == 12
    assert d.arrivals + d.initial_jobs == d.completed_total + d.censored
    assert d.censored == d.final_state.sum()
    assert np.all(d.final_state >= 0)
    W = d.completed.system_time
    assert np.all(W > 0)
    assert len(d.completed) == d.completed_total - (d.initial_jobs - int(np.isnan(d.all_jobs.t_depart[:12]).sum()))
    assert np.all(d.utilization <= 1 + 1e-12)
    # the recorded pre-arrival state never exceeds the jobs in the system
    assert np.all(d.completed.states >= 0)


def test_zero_arrivals():
    spec = REFERENCE_SPEC.with_rates(arrival_rate=0.0)
    d = run_episode(spec, GSP, SimConfig(horizon=1000))
    assert d.arrivals == 0 and len(d.completed) == 0 and d.time_integral_queue == 0
    with pytest.raises(NoCompletedJobs):
        average_system_time(d)
    d = run_episode(spec, GSP, SimConfig(mode="event_driven", horizon=1e4, initial_state=(2, 0, 0, 0, 0, 0, 0)))
    assert d.time_integral_queue > 0 and d.final_state.sum() == 0 and len(d.completed) == 0


@pytest.mark.parametrize("mode", ["event_driven", "bernoulli_dt"])
def test_reproducible(mode, tmp_path):
    cfg = SimConfig(mode=mode, horizon=2e4, seed=11)
    a, b = run_episode(REFERENCE_SPEC, GSP, cfg), run_episode(REFERENCE_SPEC, GSP, cfg)
    write_jobs_csv(a, tmp_path / "a.csv")
    write_jobs_csv(b, tmp_path / "b.csv")
    assert filecmp.cmp(tmp_path / "a.csv", tmp_path / "b.csv", shallow=False)
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == ",".join(JOB_COLUMNS)
    c = run_episode(REFERENCE_SPEC, GSP, cfg.replace(seed=12))
    assert len(c.completed) != len(a.completed) or not np.array_equal(c.completed.t_arrival, a.completed.t_arrival)


def test_bernoulli_mode_rejects_large_rate_dt():
    with pytest.raises(ConfigInvalid):
        run_episode(REFERENCE_SPEC, GSP, SimConfig(dt=5.0))
    with pytest.raises(ConfigInvalid):
        SimConfig(mode="fluid")


def test_littles_law():
    d = run_episode(REFERENCE_SPEC, GSP, SimConfig(horizon=1e6, seed=5, record_states=False))
    assert littles_law_gap(d) < 0.02


def test_ob_utilization_flow_balance():
    pred = ob_utilizations(REFERENCE_SPEC, REFERENCE_ETA.eta)
    U = np.array([
        run_episode(REFERENCE_SPEC, Policy.ob(REFERENCE_ETA), SimConfig(mode="event_driven", horizon=2e5, seed=s,
                                                                 record_states=False)).utilization
        for s in range(8)
    ])
    se = U.std(axis=0, ddof=1) / np.sqrt(len(U))
    assert np.all(np.abs(U.mean(axis=0) - pred) < 3 * se + 1e-3)


def test_estimate_rates_examples():
    est = rates_from_samples([2.0, 2.0, 2.0], {})
    assert est.arrival_rate == pytest.approx(0.5)
    assert est.service_rates == (0.5,) * 5
    rng = np.random.default_rng(0)
    est = rates_from_samples([], {3: rng.exponential(1 / 0.25, 10**5)})
    assert est.service_rates[2] == pytest.approx(0.25, rel=0.01)
    assert est.arrival_rate == 0.1 and est.service_rates[3] == 0.5


def test_estimates_accumulate():
    a = run_episode(REFERENCE_SPEC, GSP, SimConfig(horizon=5e4, seed=1, record_states=False))
    b = run_episode(REFERENCE_SPEC, GSP, SimConfig(horizon=5e4, seed=2, record_states=False))
    est = estimate_rates(estimate_rates(RateEstimates(), a), b)
    pooled = np.concatenate([a.interarrival_samples, b.interarrival_samples])
    assert est.arrival_rate == pytest.approx(1 / pooled.mean())
    for n in range(1, 6):
        s = np.concatenate([a.service_samples[n], b.service_samples[n]])
        assert est.service_rates[n - 1] == pytest.approx(1 / s.mean())


@pytest.mark.parametrize("mode", ["event_driven", "bernoulli_dt"])
def test_service_samples_match_rates(mode):
    d = run_episode(REFERENCE_SPEC, GSP, SimConfig(mode=mode, horizon=3e5, seed=8, record_states=False))
    est = estimate_rates(RateEstimates(), d)
    assert est.arrival_rate == pytest.approx(0.2, rel=0.02)
    np.testing.assert_allclose(est.service_rates, REFERENCE_SPEC.rates, rtol=0.03)


def test_warmup_excludes_early_arrivals():
    d = run_episode(REFERENCE_SPEC, GSP, SimConfig(horizon=2e4, warmup=5e3, seed=3))
    assert d.completed.t_arrival.min() >= 5e3
    assert d.duration == pytest.approx(1.5e4)
