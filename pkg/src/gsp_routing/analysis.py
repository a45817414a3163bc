"""Lyapunov drift of the GSP policy, drift certificates, and policy comparison.

The drift of ``V(x) = sum_p Q_p(x)**2`` under the network generator is an
exact finite sum over the possible next transitions; it is computed here by
enumeration, with routing and scheduling ties averaged uniformly.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import InfeasibleParams, MissingBaseline
from .network import PATH_NAMES, NetworkSpec, feasible_region
from .plq import CLASS_LABELS, FIRST_CLASS, N_CLASSES, N_PATHS, NEXT_CLASS, GspParams, _path_q, as_state
from .policy import GSP, KINDS, OB, _argmin_set, _evaluate, _server_candidates


@njit(cache=True)
def _v(x, beta):
    q = np.empty(N_PATHS)
    b = np.empty(N_PATHS, dtype=np.int64)
    s = np.empty(N_PATHS, dtype=np.int64)
    _path_q(x, beta, q, b, s)
    return q[0] * q[0] + q[1] * q[1] + q[2] * q[2]


@njit(cache=True)
def _drift_terms(kind, x, beta, gamma, tier_rates, mu, lam, eta, rates_out, dv_out, label_out):
    """Per-transition (rate, V change); returns the number of transitions.

    ``label_out`` holds the path index for arrivals and ``10 + class`` for
    service completions.
    """
    v0 = _v(x, beta)
    q = np.empty(N_PATHS)
    b = np.empty(N_PATHS, dtype=np.int64)
    scores = np.empty(N_PATHS)
    _evaluate(kind, x, beta, gamma, tier_rates, q, b, scores)
    y = x.copy()
    n = 0
    if lam > 0:
        targets = np.empty(N_PATHS, dtype=np.int64)
        weights = np.empty(N_PATHS)
        if kind == OB:
            nt = 0
            for p in range(N_PATHS):
                if eta[p] > 0:
                    targets[nt] = p
                    weights[nt] = eta[p]
                    nt += 1
        else:
            nt = _argmin_set(scores, targets)
            for k in range(nt):
                weights[k] = 1.0 / nt
        for k in range(nt):
            c = FIRST_CLASS[targets[k]]
            y[c] += 1
            rates_out[n] = lam * weights[k]
            dv_out[n] = _v(y, beta) - v0
            label_out[n] = targets[k]
            y[c] -= 1
            n += 1
    cand = np.empty(2, dtype=np.int64)
    head_t = np.zeros(N_CLASSES)
    for server in range(1, 6):
        nc = _server_candidates(kind, server, x, q, b, head_t, cand)
        for k in range(nc):
            c = cand[k]
            y[c] -= 1
            if NEXT_CLASS[c] >= 0:
                y[NEXT_CLASS[c]] += 1
            rates_out[n] = mu[server - 1] / nc
            dv_out[n] = _v(y, beta) - v0
            label_out[n] = 10 + c
            if NEXT_CLASS[c] >= 0:
                y[NEXT_CLASS[c]] -= 1
            y[c] += 1
            n += 1
    return n


@njit(cache=True)
def _drift_batch(kind, X, beta, gamma, tier_rates, mu, lam, eta):
    out = np.empty(X.shape[0])
    r = np.empty(16)
    dv = np.empty(16)
    lab = np.empty(16, dtype=np.int64)
    for i in range(X.shape[0]):
        n = _drift_terms(kind, X[i], beta, gamma, tier_rates, mu, lam, eta, r, dv, lab)
        tot = 0.0
        for k in range(n):
            tot += r[k] * dv[k]
        out[i] = tot
    return out


def lyapunov_v(x, beta: float) -> float:
    """Sum of squared path costs."""
    return float(_v(as_state(x), float(beta)))


@dataclass(frozen=True)
class Transition:
    label: str
    rate: float
    delta_v: float

    @property
    def contribution(self) -> float:
        return self.rate * self.delta_v


@dataclass(frozen=True)
class DriftReport:
    state: tuple[int, ...]
    drift: float
    transitions: tuple[Transition, ...]
    routing: dict = field(default_factory=dict)  # path name -> probability
    scheduling: dict = field(default_factory=dict)  # class label -> service rate


def _policy_inputs(policy: str, params: GspParams | None, spec: NetworkSpec, tier_rates, eta):
    if policy not in KINDS:
        raise ValueError(f"unknown policy {policy!r}")
    kind = KINDS[policy]
    if kind == OB and eta is None:
        raise ValueError("the Bernoulli policy needs routing probabilities eta")
    beta = params.beta if params is not None else 1.0
    gamma = params.gamma if params is not None else 1.0
    tier = np.asarray(spec.service_rates if tier_rates is None else tier_rates, dtype=float)
    eta = np.asarray((1 / 3,) * 3 if eta is None else eta, dtype=float)
    return kind, beta, gamma, tier, eta


def generator_drift(x, params: GspParams, spec: NetworkSpec, policy: str = "gsp", tier_rates=None, eta=None) -> DriftReport:
    """Exact generator applied to V at ``x`` under the given policy.

    For ``policy="ob"`` shared servers are treated as serving their nonempty
    classes with equal probability, since first-come-first-served order is
    not a function of the state vector.
    """
    x = as_state(x).astype(np.int64)
    kind, beta, gamma, tier, eta = _policy_inputs(policy, params, spec, tier_rates, eta)
    r, dv, lab = np.empty(16), np.empty(16), np.empty(16, dtype=np.int64)
    n = _drift_terms(kind, x, beta, gamma, tier, spec.rates, spec.arrival_rate, eta, r, dv, lab)
    trans, routing, sched = [], {}, {}
    for k in range(n):
        if lab[k] < 10:
            name = f"arrive:{PATH_NAMES[lab[k]]}"
            routing[PATH_NAMES[lab[k]]] = r[k] / spec.arrival_rate
        else:
            c = int(lab[k] - 10)
            name = f"serve:{CLASS_LABELS[c]}"
            sched[CLASS_LABELS[c]] = float(r[k])
        trans.append(Transition(name, float(r[k]), float(dv[k])))
    drift = float(sum(t.contribution for t in trans))
    return DriftReport(tuple(int(v) for v in x), drift, tuple(trans), routing, sched)


def drift_batch(X, params: GspParams, spec: NetworkSpec, policy: str = "gsp", tier_rates=None, eta=None) -> np.ndarray:
    kind, beta, gamma, tier, eta = _policy_inputs(policy, params, spec, tier_rates, eta)
    X = np.ascontiguousarray(X, dtype=np.int64)
    return _drift_batch(kind, X, beta, gamma, tier, spec.rates, spec.arrival_rate, eta)


def sample_compositions(total: int, size: int, rng: np.random.Generator, parts: int = N_CLASSES) -> np.ndarray:
    """Uniform random compositions of ``total`` into ``parts`` non-negative parts."""
    out = np.empty((size, parts), dtype=np.int64)
    for i in range(size):
        bars = np.sort(rng.choice(total + parts - 1, parts - 1, replace=False))
        edges = np.concatenate(([-1], bars, [total + parts - 1]))
        out[i] = np.diff(edges) - 1
    return out


@dataclass(frozen=True)
class SamplerConfig:
    shells: tuple[int, ...] = (10, 50, 200, 1000)
    per_shell: int = 2000
    seed: int = 0
    # shells at or above this norm must show strictly negative drift
    check_from: int = 200


@dataclass
class Certificate:
    epsilon_hat: float
    C_hat: float
    violations: list  # (state, drift) pairs on checked shells with drift >= 0
    shells: dict  # norm -> (min drift, max drift)
    norms: np.ndarray = field(repr=False, default=None)
    drifts: np.ndarray = field(repr=False, default=None)
    states: np.ndarray = field(repr=False, default=None)

    @property
    def threshold(self) -> float:
        return self.C_hat / self.epsilon_hat if self.epsilon_hat > 0 else math.inf

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "epsilon_hat": self.epsilon_hat,
            "C_hat": self.C_hat,
            "threshold_norm": self.threshold,
            "violations": [{"state": list(s), "drift": d} for s, d in self.violations],
            "shells": {str(k): {"min_drift": v[0], "max_drift": v[1]} for k, v in self.shells.items()},
        }


def certify_drift(spec: NetworkSpec, params: GspParams, sampler: SamplerConfig = SamplerConfig()) -> Certificate:
    """Empirical constants with drift <= -epsilon_hat * |x|_1 + C_hat on all samples.

    ``epsilon_hat`` is half the smallest decay rate ``-drift / |x|_1`` seen on
    the largest shell (zero when that shell has a non-negative drift);
    ``C_hat`` is then the smallest constant that bounds every sample.
    """
    region = feasible_region(spec)
    if not region.contains(params.beta, params.gamma):
        raise InfeasibleParams(
            f"(beta, gamma) = ({params.beta}, {params.gamma}) is outside the stability region "
            f"beta < {region.beta_upper:.6g}, 1 < gamma < beta"
        )
    rng = np.random.default_rng(sampler.seed)
    X = np.concatenate([sample_compositions(s, sampler.per_shell, rng) for s in sampler.shells])
    norms = X.sum(axis=1).astype(float)
    drifts = drift_batch(X, params, spec)
    top = norms == max(sampler.shells)
    decay = -drifts[top] / norms[top]
    eps = max(0.0, 0.5 * float(decay.min()))
    C = float(np.max(drifts + eps * norms))
    checked = norms >= sampler.check_from
    bad = np.flatnonzero(checked & (drifts >= 0))
    violations = [(tuple(int(v) for v in X[i]), float(drifts[i])) for i in bad]
    shells = {s: (float(drifts[norms == s].min()), float(drifts[norms == s].max())) for s in sampler.shells}
    return Certificate(eps, C, violations, shells, norms, drifts, X)


def mc_drift_estimate(x, params: GspParams, spec: NetworkSpec, h: float, runs: int, seed: int = 0) -> tuple[float, float]:
    """Finite-difference drift ``(E[V(x(h))] - V(x)) / h`` from short exact runs.

    Returns the estimate and its standard error.
    """
    from .policy import Policy
    from .sim import final_states

    x = as_state(x).astype(np.int64)
    policy = Policy.gsp(params.beta, params.gamma)
    Y = final_states(spec, policy, x, h, runs, seed)
    v0 = lyapunov_v(x, params.beta)
    dv = np.array([lyapunov_v(y, params.beta) for y in Y]) - v0
    return float(dv.mean() / h), float(dv.std(ddof=1) / math.sqrt(runs) / h)


def ob_utilizations(spec: NetworkSpec, eta) -> np.ndarray:
    """Flow-balance utilisation of servers 1..5 under Bernoulli routing."""
    e12, e135, e45 = (float(v) for v in eta)
    flow = spec.arrival_rate * np.array([e12 + e135, e12, e135, e45, e135 + e45])
    return flow / spec.rates


def jackson_mean_system_time(spec: NetworkSpec, eta) -> float:
    """Product-form mean system time ``sum_n rho_n / (1 - rho_n) / lam``."""
    rho = ob_utilizations(spec, eta)
    if rho.max() >= 1.0:
        return math.inf
    return float(np.sum(rho / (1.0 - rho)) / spec.arrival_rate)


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple[tuple[str, float, float], ...]  # (policy, mean system time, NAST)
    baseline: str
    baseline_mean: float

    def nast(self, name: str) -> float:
        return dict((r[0], r[2]) for r in self.rows)[name]

    def to_text(self) -> str:
        width = max(len("policy"), max(len(r[0]) for r in self.rows))
        lines = [f"{'policy':<{width}}  {'mean W (s)':>10}  {'NAST':>6}"]
        for name, mean, value in self.rows:
            lines.append(f"{name:<{width}}  {mean:>10.2f}  {value:>6.2f}")
        lines.append(f"baseline: {self.baseline} ({self.baseline_mean:.2f} s)")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("policy", "mean_system_time", "nast"))
        for name, mean, value in self.rows:
            w.writerow((name, repr(mean), repr(value)))
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "baseline": self.baseline,
            "baseline_mean": self.baseline_mean,
            "rows": [{"policy": n, "mean_system_time": m, "nast": v} for n, m, v in self.rows],
        }


def nast(results: dict, baseline=None) -> ComparisonTable:
    """Normalise mean system times by a baseline.

    ``baseline`` may name one of the policies, give an external mean in
    seconds, or be None to use the best observed mean.
    """
    if any(not v > 0 for v in results.values()):
        raise ValueError("mean system times must be positive")
    if baseline is None:
        name = min(results, key=results.get)
        ref = results[name]
    elif isinstance(baseline, str):
        if baseline not in results:
            raise MissingBaseline(f"baseline {baseline!r} not among {sorted(results)}")
        name, ref = baseline, results[baseline]
    else:
        name, ref = "external", float(baseline)
        if not ref > 0:
            raise MissingBaseline("external baseline must be positive")
    rows = tuple((k, float(v), float(v) / ref) for k, v in results.items())
    return ComparisonTable(rows, name, float(ref))
