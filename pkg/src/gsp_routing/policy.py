"""Routing and scheduling policies: GSP, simple shortest path, Bernoulli.

All decision logic lives in numba kernels that take pre-drawn uniforms for
tie-breaking, so the Python functions here and the simulator make identical
choices given identical random draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import InvalidWeights
from .network import PATH_NAMES, NetworkSpec
from .plq import (
    CLASS_PATH,
    N_CLASSES,
    N_PATHS,
    PATH_CLASSES,
    PATH_LEN,
    TIE_RTOL,
    GspParams,
    _path_q,
    _tier_exponents,
    as_state,
)

GSP, SSP, OB = 0, 1, 2
KINDS = {"gsp": GSP, "ssp": SSP, "ob": OB}

# classes competing at each server (servers 1..5 -> rows 0..4), padded with -1
SERVER_CLASSES = np.array([[0, 1], [2, -1], [3, -1], [4, -1], [5, 6]], dtype=np.int64)


@njit(cache=True)
def _path_sums(x, out):
    for p in range(N_PATHS):
        s = 0.0
        for k in range(PATH_LEN[p]):
            s += x[PATH_CLASSES[p, k]]
        out[p] = s


@njit(cache=True)
def _evaluate(kind, x, beta, gamma, tier_rates, q, b, scores):
    """Fill path costs ``q``, bottlenecks ``b`` and routing ``scores``.

    For SSP and OB, ``q`` holds the plain per-path job counts and ``b`` is -1.
    """
    if kind == GSP:
        seg = np.empty(N_PATHS, dtype=np.int64)
        e = np.empty(N_PATHS, dtype=np.int64)
        _path_q(x, beta, q, b, seg)
        _tier_exponents(b, tier_rates, e)
        for p in range(N_PATHS):
            scores[p] = gamma ** e[p] * q[p]
    else:
        _path_sums(x, q)
        for p in range(N_PATHS):
            b[p] = -1
            scores[p] = q[p]


@njit(cache=True)
def _argmin_set(scores, out):
    lo = scores.min()
    thresh = lo + TIE_RTOL * abs(lo)
    n = 0
    for p in range(scores.shape[0]):
        if scores[p] <= thresh:
            out[n] = p
            n += 1
    return n


@njit(cache=True)
def _choose_path(kind, scores, eta, u):
    if kind == OB:
        acc = 0.0
        for p in range(N_PATHS):
            acc += eta[p]
            if u < acc:
                return p
        # u beyond accumulated mass because of rounding
        for p in range(N_PATHS - 1, -1, -1):
            if eta[p] > 0:
                return p
        return N_PATHS - 1
    cand = np.empty(N_PATHS, dtype=np.int64)
    n = _argmin_set(scores, cand)
    return cand[min(int(u * n), n - 1)]


@njit(cache=True)
def _server_candidates(kind, server, x, q, b, head_t, out):
    """Classes at ``server`` eligible for service; returns their count."""
    row = SERVER_CLASSES[server - 1]
    if row[1] < 0:
        if x[row[0]] > 0:
            out[0] = row[0]
            return 1
        return 0
    pool = np.empty(2, dtype=np.int64)
    npool = 0
    if kind == GSP:
        for c in row:
            if x[c] > 0 and b[CLASS_PATH[c]] == server:
                pool[npool] = c
                npool += 1
    if npool == 0:
        # work-conserving fallback, and the only rule for SSP/OB
        for c in row:
            if x[c] > 0:
                pool[npool] = c
                npool += 1
    if npool <= 1:
        if npool == 1:
            out[0] = pool[0]
        return npool
    if kind == OB:
        best = min(head_t[pool[0]], head_t[pool[1]])
        n = 0
        for k in range(npool):
            if head_t[pool[k]] <= best:
                out[n] = pool[k]
                n += 1
        return n
    best = max(q[CLASS_PATH[pool[0]]], q[CLASS_PATH[pool[1]]])
    thresh = best - TIE_RTOL * abs(best)
    n = 0
    for k in range(npool):
        if q[CLASS_PATH[pool[k]]] >= thresh:
            out[n] = pool[k]
            n += 1
    return n


@njit(cache=True)
def _schedule(kind, x, q, b, head_t, u1, u5, sched):
    """Class served at each server (index 0..4 for servers 1..5), -1 if idle."""
    out = np.empty(2, dtype=np.int64)
    for server in range(1, 6):
        n = _server_candidates(kind, server, x, q, b, head_t, out)
        if n == 0:
            sched[server - 1] = -1
        elif n == 1:
            sched[server - 1] = out[0]
        else:
            u = u1 if server == 1 else u5
            sched[server - 1] = out[min(int(u * n), n - 1)]


@dataclass(frozen=True)
class RoutingDecision:
    path: int
    candidates: tuple[int, ...]
    arrival_rates: np.ndarray = field(repr=False)

    @property
    def name(self) -> str:
        return PATH_NAMES[self.path]


@dataclass(frozen=True)
class SchedulingDecision:
    served: tuple[int, ...]  # class index per server 1..5, -1 when idle
    service_rates: np.ndarray = field(repr=False)  # length 7, per class


@dataclass(frozen=True)
class BernoulliWeights:
    eta: tuple[float, ...]

    def __post_init__(self):
        eta = tuple(float(v) for v in self.eta)
        object.__setattr__(self, "eta", eta)
        if len(eta) != N_PATHS:
            raise InvalidWeights(f"need {N_PATHS} routing probabilities, got {len(eta)}")
        if any(v < 0 for v in eta) or abs(sum(eta) - 1.0) > 1e-9:
            raise InvalidWeights(f"routing probabilities must be >= 0 and sum to 1: {eta}")


REFERENCE_ETA = BernoulliWeights((0.28, 0.20, 0.52))


@dataclass(frozen=True)
class Policy:
    """What the simulator needs to run a policy.

    ``tier_rates`` are the service rates the GSP controller believes in when it
    assigns path weight tiers; they default to the true rates of the network
    being simulated.
    """

    name: str
    beta: float = 1.0
    gamma: float = 1.0
    tier_rates: tuple[float, ...] | None = None
    eta: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)

    @property
    def kind(self) -> int:
        return KINDS[self.name]

    @classmethod
    def gsp(cls, beta: float, gamma: float, tier_rates=None) -> "Policy":
        GspParams(beta, gamma)
        rates = None if tier_rates is None else tuple(float(r) for r in tier_rates)
        return cls("gsp", float(beta), float(gamma), rates)

    @classmethod
    def ssp(cls) -> "Policy":
        return cls("ssp")

    @classmethod
    def ob(cls, weights) -> "Policy":
        if not isinstance(weights, BernoulliWeights):
            weights = BernoulliWeights(weights)
        return cls("ob", eta=weights.eta)


def _arrival_vector(path: int, lam: float) -> np.ndarray:
    v = np.zeros(N_PATHS)
    v[path] = lam
    return v


def _rates_of(spec_or_rates) -> np.ndarray:
    return np.asarray(getattr(spec_or_rates, "service_rates", spec_or_rates), dtype=float)


def gsp_candidates(x, params: GspParams, rates) -> tuple[int, ...]:
    """The argmin set of weighted path costs."""
    x = as_state(x)
    q, b, scores = np.empty(3), np.empty(3, dtype=np.int64), np.empty(3)
    _evaluate(GSP, x, params.beta, params.gamma, _rates_of(rates), q, b, scores)
    out = np.empty(3, dtype=np.int64)
    n = _argmin_set(scores, out)
    return tuple(int(p) for p in out[:n])


def gsp_route(x, params: GspParams, spec: NetworkSpec, rng: np.random.Generator) -> RoutingDecision:
    """Send the arrival to a uniformly chosen path minimising ``gamma_p * Q_p``."""
    x = as_state(x)
    q, b, scores = np.empty(3), np.empty(3, dtype=np.int64), np.empty(3)
    _evaluate(GSP, x, params.beta, params.gamma, _rates_of(spec), q, b, scores)
    path = int(_choose_path(GSP, scores, np.zeros(3), rng.random()))
    return RoutingDecision(path, gsp_candidates(x, params, spec), _arrival_vector(path, spec.arrival_rate))


def ssp_route(x, rng: np.random.Generator, arrival_rate: float = 1.0) -> RoutingDecision:
    """Route to the path holding the fewest jobs."""
    x = as_state(x)
    phi = np.empty(3)
    _path_sums(x, phi)
    out = np.empty(3, dtype=np.int64)
    n = _argmin_set(phi, out)
    path = int(_choose_path(SSP, phi, np.zeros(3), rng.random()))
    return RoutingDecision(path, tuple(int(p) for p in out[:n]), _arrival_vector(path, arrival_rate))


def bernoulli_route(weights, rng: np.random.Generator, arrival_rate: float = 1.0) -> RoutingDecision:
    if not isinstance(weights, BernoulliWeights):
        weights = BernoulliWeights(weights)
    eta = np.asarray(weights.eta)
    path = int(_choose_path(OB, np.zeros(3), eta, rng.random()))
    support = tuple(int(p) for p in np.flatnonzero(eta > 0))
    return RoutingDecision(path, support, _arrival_vector(path, arrival_rate))


def _schedule_decision(kind, x, params, spec, rng, head_t=None) -> SchedulingDecision:
    x = as_state(x)
    q, b, scores = np.empty(3), np.empty(3, dtype=np.int64), np.empty(3)
    beta = params.beta if params is not None else 1.0
    gamma = params.gamma if params is not None else 1.0
    _evaluate(kind, x, beta, gamma, _rates_of(spec), q, b, scores)
    head = np.zeros(N_CLASSES) if head_t is None else np.asarray(head_t, dtype=float)
    sched = np.empty(5, dtype=np.int64)
    _schedule(kind, x, q, b, head, rng.random(), rng.random(), sched)
    mu = np.zeros(N_CLASSES)
    for server, c in enumerate(sched, start=1):
        if c >= 0:
            mu[c] = spec.rate(server) if isinstance(spec, NetworkSpec) else _rates_of(spec)[server - 1]
    return SchedulingDecision(tuple(int(c) for c in sched), mu)


def gsp_schedule(x, params: GspParams, spec: NetworkSpec, rng: np.random.Generator) -> SchedulingDecision:
    """Bottleneck-priority scheduling at servers 1 and 5.

    A shared server serves, among its classes whose path has it as bottleneck,
    the one with the largest Q; when there is none it falls back to the
    nonempty class with the largest Q, so it never idles while holding jobs.
    """
    return _schedule_decision(GSP, x, params, spec, rng)


def ssp_schedule(x, spec: NetworkSpec, rng: np.random.Generator) -> SchedulingDecision:
    return _schedule_decision(SSP, x, None, spec, rng)


def fifo_schedule(x, head_arrival_times, spec: NetworkSpec, rng: np.random.Generator) -> SchedulingDecision:
    """First-come-first-served across classes; ``head_arrival_times`` per class."""
    return _schedule_decision(OB, x, None, spec, rng, head_t=head_arrival_times)
