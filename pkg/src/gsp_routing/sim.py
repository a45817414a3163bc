"""Monte-Carlo simulation of the bridge network under a routing policy.

Two time bases are available:

``bernoulli_dt``
    Fixed step ``dt``. In each step every busy server completes its current
    job with probability ``mu_n * dt`` (servers visited downstream first, in
    the order 2, 5, 3, 4, 1), then an arrival occurs with probability
    ``lam * dt``.
``event_driven``
    Exact continuous-time dynamics via the exponential race between the
    arrival clock and the clocks of the classes currently in service.

Scheduling is re-evaluated after every state change.  Within a path jobs
never overtake each other, so each path keeps one append-only list of job
ids and the head job of any class is found by offsetting past the jobs held
further downstream.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .errors import ConfigInvalid, NoCompletedJobs
from .network import PATH_NAMES, NetworkSpec
from .plq import CLASS_PATH, CLASS_SERVER, FIRST_CLASS, N_CLASSES, NEXT_CLASS, PATH_CLASSES, PATH_LEN
from .policy import _choose_path, _evaluate, _schedule

MODES = {"bernoulli_dt": 0, "event_driven": 1}
BERNOULLI_ORDER = np.array([2, 5, 3, 4, 1], dtype=np.int64)


@dataclass(frozen=True)
class SimConfig:
    mode: str = "bernoulli_dt"
    dt: float = 0.1
    horizon: float = 1e5
    seed: int = 0
    warmup: float = 0.0
    initial_state: tuple[int, ...] | None = None
    record_states: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigInvalid(f"unknown simulation mode {self.mode!r}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigInvalid("dt must be positive")
        if not self.horizon >= 0:
            raise ConfigInvalid("horizon must be non-negative")
        if not 0 <= self.warmup <= self.horizon:
            raise ConfigInvalid("warmup must lie in [0, horizon]")
        if self.initial_state is not None:
            x0 = tuple(int(v) for v in self.initial_state)
            if len(x0) != N_CLASSES or min(x0) < 0:
                raise ConfigInvalid("initial_state needs 7 non-negative integers")
            object.__setattr__(self, "initial_state", x0)

    def replace(self, **changes) -> "SimConfig":
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return SimConfig(**values)

    def validate_for(self, spec: NetworkSpec) -> None:
        if self.mode != "bernoulli_dt":
            return
        probs = [spec.arrival_rate * self.dt] + [r * self.dt for r in spec.service_rates]
        if max(probs) >= 1.0:
            raise ConfigInvalid(f"rate * dt must be < 1 in bernoulli_dt mode, got {max(probs):g}")


@njit(cache=True)
def _grow(a, n):
    out = np.empty(max(2 * a.shape[0], n), dtype=a.dtype)
    out[: a.shape[0]] = a
    return out


@njit(cache=True)
def _grow2(a, n):
    out = np.zeros((max(2 * a.shape[0], n), a.shape[1]), dtype=a.dtype)
    out[: a.shape[0]] = a
    return out


@njit(cache=True)
def _head_job(c, x, pj, phead):
    p = CLASS_PATH[c]
    off = 0
    k = PATH_LEN[p] - 1
    while PATH_CLASSES[p, k] != c:
        off += x[PATH_CLASSES[p, k]]
        k -= 1
    return pj[p, phead[p] + off]


@njit(cache=True)
def _simulate(
    mode, kind, beta, gamma, tier_rates, eta, mu, lam, dt, horizon, warmup, seed, x0, record_states, cap
):
    if seed >= 0:
        np.random.seed(seed)
    cap = max(cap, 16)
    x = x0.copy()
    n0 = 0
    for c in range(N_CLASSES):
        n0 += x0[c]
    cap = max(cap, n0 + 16)

    t_a = np.empty(cap)
    t_d = np.empty(cap)
    jpath = np.empty(cap, dtype=np.int64)
    qw = np.empty(cap)
    served = np.zeros(cap)
    t_enter = np.empty(cap)
    initial = np.zeros(cap, dtype=np.bool_)
    xs = np.zeros((cap if record_states else 1, N_CLASSES), dtype=np.int64)
    pj = np.empty((3, cap), dtype=np.int64)
    ptail = np.zeros(3, dtype=np.int64)
    phead = np.zeros(3, dtype=np.int64)
    inter = np.empty(64)
    svc_server = np.empty(64, dtype=np.int64)
    svc_dur = np.empty(64)
    n_inter = 0
    n_svc = 0
    busy = np.zeros(5)
    integral = 0.0
    n_jobs = 0
    n_arrivals = 0

    # jobs present at time 0, oldest (most downstream) first within each path
    for p in range(3):
        for k in range(PATH_LEN[p] - 1, -1, -1):
            c = PATH_CLASSES[p, k]
            for _ in range(x0[c]):
                t_a[n_jobs] = 0.0
                t_d[n_jobs] = np.nan
                jpath[n_jobs] = p
                qw[n_jobs] = np.nan
                t_enter[n_jobs] = 0.0
                initial[n_jobs] = True
                pj[p, ptail[p]] = n_jobs
                ptail[p] += 1
                n_jobs += 1

    q = np.empty(3)
    b = np.empty(3, dtype=np.int64)
    scores = np.empty(3)
    head_t = np.zeros(N_CLASSES)
    sched = np.empty(5, dtype=np.int64)
    last_arrival = 0.0

    # initial schedule
    _evaluate(kind, x, beta, gamma, tier_rates, q, b, scores)
    for c in range(N_CLASSES):
        if x[c] > 0:
            head_t[c] = t_enter[_head_job(c, x, pj, phead)]
    _schedule(kind, x, q, b, head_t, np.random.random(), np.random.random(), sched)

    nsteps = int(round(horizon / dt)) if mode == 0 else 0
    t = 0.0
    k = 0
    while True:
        event_server = 0  # 0: none, -1: arrival, 1..5 server completion
        if mode == 0:
            if k >= nsteps:
                break
            t0 = k * dt
            t = (k + 1) * dt
            tot = 0
            for c in range(N_CLASSES):
                tot += x[c]
            if t0 >= warmup:
                integral += tot * dt
            for idx in range(5):
                n = BERNOULLI_ORDER[idx]
                c = sched[n - 1]
                if c < 0:
                    continue
                j = _head_job(c, x, pj, phead)
                served[j] += dt
                if t0 >= warmup:
                    busy[n - 1] += dt
                if np.random.random() < mu[n - 1] * dt:
                    # completion at server n
                    if n_svc >= svc_dur.shape[0]:
                        svc_dur = _grow(svc_dur, n_svc + 1)
                        svc_server = _grow(svc_server, n_svc + 1)
                    svc_server[n_svc] = n
                    svc_dur[n_svc] = served[j]
                    n_svc += 1
                    served[j] = 0.0
                    x[c] -= 1
                    nc = NEXT_CLASS[c]
                    if nc >= 0:
                        x[nc] += 1
                        t_enter[j] = t
                    else:
                        t_d[j] = t
                        phead[CLASS_PATH[c]] += 1
                    _evaluate(kind, x, beta, gamma, tier_rates, q, b, scores)
                    for cc in range(N_CLASSES):
                        if x[cc] > 0:
                            head_t[cc] = t_enter[_head_job(cc, x, pj, phead)]
                    _schedule(kind, x, q, b, head_t, np.random.random(), np.random.random(), sched)
            if np.random.random() < lam * dt:
                event_server = -1
            k += 1
            if event_server == 0:
                continue
        else:
            rate = lam
            for n in range(1, 6):
                if sched[n - 1] >= 0:
                    rate += mu[n - 1]
            if rate > 0:
                tau = np.random.exponential(1.0 / rate)
            else:
                tau = np.inf
            t_next = t + tau
            end = min(t_next, horizon)
            span = end - t
            lo = max(t, warmup)
            tot = 0
            for c in range(N_CLASSES):
                tot += x[c]
            if end > lo:
                integral += tot * (end - lo)
            for n in range(1, 6):
                c = sched[n - 1]
                if c >= 0:
                    served[_head_job(c, x, pj, phead)] += span
                    if end > lo:
                        busy[n - 1] += end - lo
            if t_next > horizon:
                t = horizon
                break
            t = t_next
            u = np.random.random() * rate
            if u < lam:
                event_server = -1
            else:
                acc = lam
                for n in range(1, 6):
                    if sched[n - 1] >= 0:
                        acc += mu[n - 1]
                        event_server = n
                        if u < acc:
                            break
                c = sched[event_server - 1]
                j = _head_job(c, x, pj, phead)
                if n_svc >= svc_dur.shape[0]:
                    svc_dur = _grow(svc_dur, n_svc + 1)
                    svc_server = _grow(svc_server, n_svc + 1)
                svc_server[n_svc] = event_server
                svc_dur[n_svc] = served[j]
                n_svc += 1
                served[j] = 0.0
                x[c] -= 1
                nc = NEXT_CLASS[c]
                if nc >= 0:
                    x[nc] += 1
                    t_enter[j] = t
                else:
                    t_d[j] = t
                    phead[CLASS_PATH[c]] += 1

        if event_server == -1:
            # arrival: route on the pre-arrival state
            _evaluate(kind, x, beta, gamma, tier_rates, q, b, scores)
            p = _choose_path(kind, scores, eta, np.random.random())
            if n_jobs >= t_a.shape[0]:
                t_a = _grow(t_a, n_jobs + 1)
                t_d = _grow(t_d, n_jobs + 1)
                jpath = _grow(jpath, n_jobs + 1)
                qw = _grow(qw, n_jobs + 1)
                served = _grow(served, n_jobs + 1)
                t_enter = _grow(t_enter, n_jobs + 1)
                initial = _grow(initial, n_jobs + 1)
                if record_states:
                    xs = _grow2(xs, n_jobs + 1)
            if ptail[p] >= pj.shape[1]:
                pj = _grow2(pj.T.copy(), ptail[p] + 1).T.copy()
            t_a[n_jobs] = t
            t_d[n_jobs] = np.nan
            jpath[n_jobs] = p
            qw[n_jobs] = np.nan if kind == 2 else scores[p]
            served[n_jobs] = 0.0
            t_enter[n_jobs] = t
            initial[n_jobs] = False
            if record_states:
                for c in range(N_CLASSES):
                    xs[n_jobs, c] = x[c]
            pj[p, ptail[p]] = n_jobs
            ptail[p] += 1
            n_jobs += 1
            n_arrivals += 1
            if n_inter >= inter.shape[0]:
                inter = _grow(inter, n_inter + 1)
            inter[n_inter] = t - last_arrival
            n_inter += 1
            last_arrival = t
            x[FIRST_CLASS[p]] += 1

        _evaluate(kind, x, beta, gamma, tier_rates, q, b, scores)
        for c in range(N_CLASSES):
            if x[c] > 0:
                head_t[c] = t_enter[_head_job(c, x, pj, phead)]
        _schedule(kind, x, q, b, head_t, np.random.random(), np.random.random(), sched)

    if mode == 0:
        t = nsteps * dt
    return (
        n_jobs,
        t_a[:n_jobs].copy(),
        t_d[:n_jobs].copy(),
        jpath[:n_jobs].copy(),
        qw[:n_jobs].copy(),
        xs[: (n_jobs if record_states else 0)].copy(),
        initial[:n_jobs].copy(),
        inter[:n_inter].copy(),
        svc_server[:n_svc].copy(),
        svc_dur[:n_svc].copy(),
        integral,
        busy,
        x,
        n_arrivals,
        t,
    )


@njit(cache=True)
def _final_states(mode, kind, beta, gamma, tier_rates, eta, mu, lam, dt, h, x0, runs, seed):
    """Final states of ``runs`` independent short episodes started at ``x0``."""
    np.random.seed(seed)
    out = np.empty((runs, N_CLASSES), dtype=np.int64)
    for r in range(runs):
        res = _simulate(mode, kind, beta, gamma, tier_rates, eta, mu, lam, dt, h, 0.0, -1, x0, False, 16)
        out[r] = res[12]
    return out


@dataclass
class JobTable:
    """Columnar per-job records."""

    path: np.ndarray
    t_arrival: np.ndarray
    t_depart: np.ndarray
    states: np.ndarray  # pre-arrival state snapshot, shape (n, 7)
    q_weighted: np.ndarray

    def __len__(self) -> int:
        return len(self.path)

    @property
    def system_time(self) -> np.ndarray:
        return self.t_depart - self.t_arrival

    def records(self):
        W = self.system_time
        for i in range(len(self)):
            yield JobRecord(
                i,
                int(self.path[i]),
                float(self.t_arrival[i]),
                float(self.t_depart[i]),
                float(W[i]),
                tuple(int(v) for v in self.states[i]) if len(self.states) else None,
                float(self.q_weighted[i]),
            )


@dataclass(frozen=True)
class JobRecord:
    id: int
    path: int
    t_arrival: float
    t_depart: float
    W: float
    state: tuple[int, ...] | None
    q_weighted: float


@dataclass
class EpisodeData:
    completed: JobTable
    interarrival_samples: np.ndarray
    service_samples: dict[int, np.ndarray]
    time_integral_queue: float
    duration: float
    arrivals: int
    censored: int
    initial_jobs: int
    completed_total: int
    busy_time: np.ndarray
    final_state: np.ndarray
    seed: int
    all_jobs: JobTable = field(repr=False, default=None)

    @property
    def completed_jobs(self) -> JobTable:
        return self.completed

    @property
    def utilization(self) -> np.ndarray:
        return self.busy_time / self.duration if self.duration > 0 else np.zeros(5)

    @property
    def time_average_queue(self) -> float:
        return self.time_integral_queue / self.duration if self.duration > 0 else 0.0


def run_episode(spec: NetworkSpec, policy, config: SimConfig) -> EpisodeData:
    """Simulate one episode and collect job records and rate samples."""
    config.validate_for(spec)
    x0 = np.zeros(N_CLASSES, dtype=np.int64)
    if config.initial_state is not None:
        x0[:] = config.initial_state
    tier = policy.tier_rates if policy.tier_rates is not None else spec.service_rates
    cap = int(spec.arrival_rate * config.horizon * 1.2) + 64
    (n_jobs, t_a, t_d, jpath, qw, xs, initial, inter, svc_server, svc_dur,
     integral, busy, x_final, n_arrivals, t_end) = _simulate(
        MODES[config.mode],
        policy.kind,
        float(policy.beta),
        float(policy.gamma),
        np.asarray(tier, dtype=float),
        np.asarray(policy.eta, dtype=float),
        spec.rates,
        spec.arrival_rate,
        float(config.dt),
        float(config.horizon),
        float(config.warmup),
        int(config.seed) % (2**32),
        x0,
        bool(config.record_states),
        cap,
    )
    states = xs if config.record_states else np.zeros((0, N_CLASSES), dtype=np.int64)
    all_jobs = JobTable(jpath, t_a, t_d, states, qw)
    done = ~np.isnan(t_d)
    keep = done & ~initial & (t_a >= config.warmup)
    completed = JobTable(
        jpath[keep],
        t_a[keep],
        t_d[keep],
        states[keep] if config.record_states else states,
        qw[keep],
    )
    service = {n: svc_dur[svc_server == n] for n in range(1, 6)}
    return EpisodeData(
        completed=completed,
        interarrival_samples=inter,
        service_samples=service,
        time_integral_queue=float(integral),
        duration=float(t_end - config.warmup),
        arrivals=int(n_arrivals),
        censored=int((~done).sum()),
        initial_jobs=int(initial.sum()),
        completed_total=int(done.sum()),
        busy_time=busy,
        final_state=x_final,
        seed=int(config.seed),
        all_jobs=all_jobs,
    )


def final_states(spec: NetworkSpec, policy, x0, h: float, runs: int, seed: int, mode="event_driven", dt=0.1):
    """States reached after time ``h`` from ``x0`` in ``runs`` independent runs."""
    tier = policy.tier_rates if policy.tier_rates is not None else spec.service_rates
    return _final_states(
        MODES[mode], policy.kind, float(policy.beta), float(policy.gamma),
        np.asarray(tier, dtype=float), np.asarray(policy.eta, dtype=float),
        spec.rates, spec.arrival_rate, float(dt), float(h),
        np.asarray(x0, dtype=np.int64), int(runs), int(seed) % (2**32),
    )


@dataclass
class RateEstimates:
    """Cumulative sample sums for arrival and service rate estimation."""

    arrival_rate: float = 0.1
    service_rates: tuple[float, ...] = (0.5, 0.5, 0.5, 0.5, 0.5)
    interarrival_sum: float = 0.0
    interarrival_count: int = 0
    service_sum: np.ndarray = field(default_factory=lambda: np.zeros(5))
    service_count: np.ndarray = field(default_factory=lambda: np.zeros(5, dtype=np.int64))

    def copy(self) -> "RateEstimates":
        return RateEstimates(
            self.arrival_rate,
            tuple(self.service_rates),
            self.interarrival_sum,
            self.interarrival_count,
            self.service_sum.copy(),
            self.service_count.copy(),
        )


def estimate_rates(history: RateEstimates, data: EpisodeData | None = None) -> RateEstimates:
    """Fold one episode's samples into running totals and return new estimates.

    Quantities with no samples so far keep their prior estimate.
    """
    est = history.copy()
    if data is not None:
        est.interarrival_sum += float(np.sum(data.interarrival_samples))
        est.interarrival_count += len(data.interarrival_samples)
        for n in range(1, 6):
            s = data.service_samples.get(n, ())
            est.service_sum[n - 1] += float(np.sum(s))
            est.service_count[n - 1] += len(s)
    if est.interarrival_count > 0 and est.interarrival_sum > 0:
        est.arrival_rate = est.interarrival_count / est.interarrival_sum
    rates = list(est.service_rates)
    for i in range(5):
        if est.service_count[i] > 0 and est.service_sum[i] > 0:
            rates[i] = est.service_count[i] / est.service_sum[i]
    est.service_rates = tuple(rates)
    return est


def rates_from_samples(interarrival, service: dict[int, np.ndarray], prior: RateEstimates | None = None) -> RateEstimates:
    """Estimate rates from raw samples (reciprocal of sample means)."""
    est = prior.copy() if prior is not None else RateEstimates()
    est.interarrival_sum += float(np.sum(interarrival))
    est.interarrival_count += len(interarrival)
    for n, s in service.items():
        est.service_sum[n - 1] += float(np.sum(s))
        est.service_count[n - 1] += len(s)
    return estimate_rates(est)


def average_system_time(data: EpisodeData) -> float:
    W = data.completed.system_time
    if len(W) == 0:
        raise NoCompletedJobs("no job completed within the horizon")
    return float(W.mean())


def littles_law_gap(data: EpisodeData, arrival_rate: float | None = None) -> float:
    """Relative gap between mean W and time-average queue length / arrival rate."""
    lam = arrival_rate
    if lam is None:
        lam = len(data.interarrival_samples) / np.sum(data.interarrival_samples)
    w = average_system_time(data)
    return abs(w - data.time_average_queue / lam) / w


def summary(data: EpisodeData, spec: NetworkSpec, policy) -> dict:
    W = data.completed.system_time
    return {
        "schema_version": 1,
        "policy": policy.name,
        "beta": policy.beta if policy.name == "gsp" else None,
        "gamma": policy.gamma if policy.name == "gsp" else None,
        "eta": list(policy.eta) if policy.name == "ob" else None,
        "seed": data.seed,
        "duration": data.duration,
        "arrivals": data.arrivals,
        "completed": len(W),
        "censored": data.censored,
        "mean_system_time": float(W.mean()) if len(W) else None,
        "time_average_queue": data.time_average_queue,
        "utilization": {str(n): float(u) for n, u in enumerate(data.utilization, start=1)},
        "arrival_rate": spec.arrival_rate,
        "service_rates": list(spec.service_rates),
    }


JOB_COLUMNS = ("id", "path", "t_arrival", "t_depart", "W", "Q_weighted_at_arrival")


def write_jobs_csv(data: EpisodeData, path) -> None:
    jobs = data.completed
    W = jobs.system_time
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(JOB_COLUMNS)
        for i in range(len(jobs)):
            w.writerow((
                i,
                PATH_NAMES[jobs.path[i]],
                repr(float(jobs.t_arrival[i])),
                repr(float(jobs.t_depart[i])),
                repr(float(W[i])),
                repr(float(jobs.q_weighted[i])),
            ))


def write_summary_json(summary_dict: dict, path) -> None:
    Path(path).write_text(json.dumps(summary_dict, indent=2, sort_keys=True) + "\n")
