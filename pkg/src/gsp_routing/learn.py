"""Policy iteration for the GSP parameters (beta, gamma).

Each iteration simulates one episode under the current policy, folds the
observed inter-arrival and service times into running rate estimates,
rebuilds the stability region from those estimates, and refits beta and then
gamma so that ``gamma_p * Q_p(x; beta)`` at each arrival matches the system
time the job went on to experience.

Beta is fitted with a least-squares partition scheme: the rows are split by
which linear piece of their path cost is active (and which weight tier
applies), the frozen piecewise objective is minimised, and the split is
recomputed until it stops changing.  A fixed point of that loop can sit next
to a tier switch with a lower basin on the other side, so every fit ends
with a dense scan of the true objective and restarts from any better point.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.optimize import minimize_scalar

from .analysis import ob_utilizations
from .errors import InfeasibleParams, NoCompletedJobs, NoFeasibleCandidate, NotStabilizable
from .network import FeasibleRegion, NetworkSpec, compute_delta_g, compute_m
from .plq import N_PATHS, PATH_CLASSES, PATH_LEN, TIE_RTOL, q_batch, tier_batch
from .policy import BernoulliWeights, Policy
from .sim import EpisodeData, RateEstimates, SimConfig, average_system_time, estimate_rates, run_episode

log = logging.getLogger(__name__)

MAX_PARTITION_ROUNDS = 20
# beta grid for the global scan that follows each partition loop
SCAN_POINTS = 401
MAX_RESTARTS = 10


@dataclass(frozen=True)
class FitDataset:
    """Pre-arrival states, chosen paths and realised system times (W > 0)."""

    states: np.ndarray
    paths: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int64).reshape(-1, 7)
        paths = np.asarray(self.paths, dtype=np.int64).reshape(-1)
        W = np.asarray(self.W, dtype=float).reshape(-1)
        if not len(states) == len(paths) == len(W):
            raise ValueError("states, paths and W must have equal length")
        keep = W > 0
        object.__setattr__(self, "states", np.ascontiguousarray(states[keep]))
        object.__setattr__(self, "paths", paths[keep])
        object.__setattr__(self, "W", W[keep])

    def __len__(self) -> int:
        return len(self.W)

    @classmethod
    def from_episode(cls, data: EpisodeData) -> "FitDataset":
        jobs = data.completed
        return cls(jobs.states, jobs.path, jobs.system_time)


def _chosen(ds: FitDataset, beta: float, rates):
    """Per-row (Q, active segment, weight exponent) on the row's own path."""
    Q, B, S = q_batch(ds.states, beta)
    E = tier_batch(B, rates)
    rows = np.arange(len(ds))
    return Q[rows, ds.paths], S[rows, ds.paths], E[rows, ds.paths]


def sse(ds: FitDataset, beta: float, gamma: float, rates) -> float:
    """Sum over rows of ``(gamma**e * Q_p(x; beta) - W)**2``."""
    if len(ds) == 0:
        return 0.0
    q, _, e = _chosen(ds, beta, np.asarray(rates, dtype=float))
    r = gamma**e * q - ds.W
    return float(r @ r)


@njit(cache=True)
def _sse_scan(pref, paths, W, betas, gamma, rates, tie_rtol):
    """Objective at every beta of ``betas`` for a fixed gamma.

    ``pref[i, p, s]`` is the prefix sum of segment ``s`` of path ``p`` on
    row ``i``; segment ``s`` is scaled by ``beta ** (2 - s)``.
    """
    n = pref.shape[0]
    out = np.zeros(betas.shape[0])
    seg_server = np.array([[1, 2, -1], [1, 3, 5], [4, 5, -1]])
    path_len = np.array([2, 3, 2])
    scale = np.empty(3)
    r = np.empty(3)
    qv = np.empty(3)
    for j in range(betas.shape[0]):
        beta = betas[j]
        scale[0] = beta * beta
        scale[1] = beta
        scale[2] = 1.0
        acc = 0.0
        for i in range(n):
            for p in range(3):
                top = -1.0
                for k in range(path_len[p]):
                    v = scale[k] * pref[i, p, k]
                    if v > top:
                        top = v
                thresh = top - tie_rtol * abs(top)
                srv = seg_server[p, path_len[p] - 1]
                for k in range(path_len[p] - 1, -1, -1):
                    if scale[k] * pref[i, p, k] >= thresh:
                        srv = seg_server[p, k]
                        break
                qv[p] = top
                r[p] = rates[srv - 1]
            p = paths[i]
            hi = max(r[0], max(r[1], r[2]))
            if r[p] >= hi * (1.0 - tie_rtol):
                w = 1.0
            else:
                second = -1.0
                for k in range(3):
                    if r[k] < hi * (1.0 - tie_rtol) and r[k] > second:
                        second = r[k]
                w = gamma if r[p] >= second * (1.0 - tie_rtol) else gamma * gamma
            d = w * qv[p] - W[i]
            acc += d * d
        out[j] = acc
    return out


def sse_scan(ds: FitDataset, betas, gamma: float, rates) -> np.ndarray:
    """:func:`sse` over an array of betas in one compiled pass.

    Powers of beta are formed by multiplication, so values can differ from
    :func:`sse` in the last few ulps.
    """
    betas = np.asarray(betas, dtype=float)
    if len(ds) == 0:
        return np.zeros(len(betas))
    pref = np.zeros((len(ds), N_PATHS, 3))
    X = np.asarray(ds.states, dtype=float)
    for p in range(N_PATHS):
        pref[:, p, : PATH_LEN[p]] = np.cumsum(X[:, PATH_CLASSES[p, : PATH_LEN[p]]], axis=1)
    return _sse_scan(pref, np.asarray(ds.paths, dtype=np.int64), np.asarray(ds.W, dtype=float),
                     betas, float(gamma), np.asarray(rates, dtype=float), TIE_RTOL)


def partition(ds: FitDataset, beta: float, rates) -> tuple[np.ndarray, np.ndarray]:
    """Active segment and weight exponent of every row at ``beta``."""
    _, s, e = _chosen(ds, beta, np.asarray(rates, dtype=float))
    return s, e


def segment_sums(ds: FitDataset, seg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Linear part ``L`` and beta power ``k`` of each row's frozen segment."""
    L = np.zeros(len(ds))
    k = np.zeros(len(ds), dtype=np.int64)
    for p in range(N_PATHS):
        n = PATH_LEN[p]
        for s in range(n):
            rows = (ds.paths == p) & (seg == s)
            if not rows.any():
                continue
            cols = PATH_CLASSES[p, : s + 1]
            L[rows] = ds.states[np.ix_(rows, cols)].sum(axis=1)
            k[rows] = 2 - s
    return L, k


def quadratic_poly(a: np.ndarray, k: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Coefficients (highest power first) of ``sum((a * t**k - W)**2)`` in ``t``."""
    deg = 2 * int(k.max()) if len(k) else 0
    c = np.zeros(deg + 1)
    np.add.at(c, deg - 2 * k, a * a)
    np.add.at(c, deg - k, -2.0 * a * W)
    c[deg] += float(W @ W)
    return c


def bounded_minimize(f, lo: float, hi: float, xtol: float = 1e-7) -> float | None:
    """Global minimiser of a smooth scalar function on ``[lo, hi]``.

    A coarse scan brackets the best cell, then bounded Brent refines it.
    Returns None when ``f`` is flat on the interval.
    """
    grid = np.linspace(lo, hi, 41)
    vals = np.array([f(t) for t in grid])
    scale = max(1.0, float(np.abs(vals).max()))
    if float(vals.max() - vals.min()) <= 1e-13 * scale:
        return None
    i = int(vals.argmin())
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(f, bounds=(a, b), method="bounded", options={"xatol": xtol})
    cands = [(vals[i], grid[i])]
    if res.success:
        cands.append((float(f(res.x)), float(res.x)))
    return min(cands)[1]


@dataclass
class BetaTrace:
    betas: list = field(default_factory=list)
    sses: list = field(default_factory=list)


def fit_beta(
    ds: FitDataset,
    beta_prev: float,
    gamma_fixed: float,
    region: FeasibleRegion,
    rates,
    max_rounds: int = MAX_PARTITION_ROUNDS,
    trace: BetaTrace | None = None,
) -> float:
    """Least-squares partition update of beta with gamma held fixed.

    A round whose refit would raise the true objective is rejected and the
    loop stops, so the objective never increases across rounds.  When the
    loop settles, the true objective is scanned on a dense beta grid and the
    loop restarts from the best grid point if that point is strictly lower.
    """
    rates = np.asarray(rates, dtype=float)
    lo, hi = region.beta_bounds
    beta = min(max(beta_prev, lo), hi)
    if len(ds) == 0:
        return beta
    cur = sse(ds, beta, gamma_fixed, rates)
    if trace is not None:
        trace.betas.append(beta)
        trace.sses.append(cur)
    grid = np.linspace(lo, hi, SCAN_POINTS)
    for _ in range(MAX_RESTARTS + 1):
        beta, cur = _partition_loop(ds, beta, cur, gamma_fixed, lo, hi, rates, max_rounds, trace)
        vals = sse_scan(ds, grid, gamma_fixed, rates)
        j = int(vals.argmin())
        cand = float(grid[j])
        cand_sse = sse(ds, cand, gamma_fixed, rates)
        if not cand_sse < cur * (1.0 - 1e-9):
            break
        beta, cur = cand, cand_sse
        if trace is not None:
            trace.betas.append(beta)
            trace.sses.append(cur)
    return beta


def _partition_loop(ds, beta, cur, gamma_fixed, lo, hi, rates, max_rounds, trace):
    part = partition(ds, beta, rates)
    for _ in range(max_rounds):
        L, k = segment_sums(ds, part[0])
        a = gamma_fixed ** part[1] * L
        poly = quadratic_poly(a, k, ds.W)
        new = bounded_minimize(lambda t: np.polyval(poly, t), lo, hi)
        if new is None:
            break
        new_sse = sse(ds, new, gamma_fixed, rates)
        if new_sse > cur:
            break
        beta, cur = new, new_sse
        if trace is not None:
            trace.betas.append(beta)
            trace.sses.append(cur)
        new_part = partition(ds, beta, rates)
        if all(np.array_equal(u, v) for u, v in zip(part, new_part)):
            break
        part = new_part
    return beta, cur


def fit_gamma(ds: FitDataset, beta_fixed: float, gamma_prev: float, region: FeasibleRegion, rates) -> float:
    """Least-squares gamma with weight tiers frozen at ``beta_fixed``."""
    lo, hi = region.gamma_bounds(beta_fixed)
    gamma = min(max(gamma_prev, lo), hi)
    if len(ds) == 0:
        return gamma
    q, _, e = _chosen(ds, beta_fixed, np.asarray(rates, dtype=float))
    if not np.any((e > 0) & (q > 0)):
        return gamma
    poly = quadratic_poly(q, e, ds.W)
    new = bounded_minimize(lambda t: np.polyval(poly, t), lo, hi)
    return gamma if new is None else new


@dataclass(frozen=True)
class PiConfig:
    init_arrival_rate: float = 0.1
    init_service_rate: float = 0.5
    beta0: float | None = None
    gamma0: float | None = None
    max_iters: int = 50
    theta_beta: float = 1e-3
    theta_gamma: float = 1e-3
    episode_length: float = 1e5
    estimate_rates: bool = True
    # replace simulated W by gamma0**e * Q(x; beta0) from these parameters
    synthetic_params: tuple[float, float] | None = None
    max_partition_rounds: int = MAX_PARTITION_ROUNDS


HISTORY_COLUMNS = (
    "i", "beta", "gamma", "lambda_hat", "mu_hat_1", "mu_hat_2", "mu_hat_3", "mu_hat_4",
    "mu_hat_5", "m_hat", "delta_g", "sse", "mean_w",
)


@dataclass
class PiState:
    iteration: int
    beta: float
    gamma: float
    estimates: RateEstimates
    region: FeasibleRegion
    history: list = field(default_factory=list)
    converged: bool = False

    def __post_init__(self):
        self._check()

    def _check(self):
        if not self.region.contains(self.beta, self.gamma):
            raise InfeasibleParams(
                f"(beta, gamma) = ({self.beta}, {self.gamma}) outside the region "
                f"with m={self.region.m:g}, delta_g={self.region.delta_g}"
            )

    def record(self, sse_value: float, mean_w: float) -> None:
        self._check()
        est = self.estimates
        self.history.append(dict(zip(HISTORY_COLUMNS, (
            self.iteration, self.beta, self.gamma, est.arrival_rate, *est.service_rates,
            self.region.m, self.region.delta_g, sse_value, mean_w,
        ))))

    @property
    def params(self) -> tuple[float, float]:
        return self.beta, self.gamma

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "iterations": self.iteration,
            "converged": self.converged,
            "beta": self.beta,
            "gamma": self.gamma,
            "lambda_hat": self.estimates.arrival_rate,
            "mu_hat": list(self.estimates.service_rates),
            "m_hat": self.region.m,
            "delta_g": self.region.delta_g,
            "beta_upper": self.region.beta_upper,
        }


def region_for(service_rates, arrival_rate) -> FeasibleRegion:
    spec = NetworkSpec(service_rates, arrival_rate)
    return FeasibleRegion(compute_m(spec), compute_delta_g(spec)[0])


def synthetic_w(ds_states, paths, beta0: float, gamma0: float, rates) -> np.ndarray:
    """Noiseless system times ``gamma0**e * Q_p(x; beta0)``."""
    Q, B, _ = q_batch(np.ascontiguousarray(ds_states), beta0)
    E = tier_batch(B, rates)
    rows = np.arange(len(paths))
    return gamma0 ** E[rows, paths] * Q[rows, paths]


def policy_iteration(spec: NetworkSpec, sim_config: SimConfig, pi_config: PiConfig = PiConfig()) -> PiState:
    """Learn (beta, gamma) from simulated episodes of ``spec``.

    The true rates of ``spec`` drive the simulator only; the learner sees
    them only when ``pi_config.estimate_rates`` is False.
    """
    if pi_config.estimate_rates:
        est = RateEstimates(pi_config.init_arrival_rate, (pi_config.init_service_rate,) * 5)
    else:
        est = RateEstimates(spec.arrival_rate, tuple(spec.service_rates))
    region = region_for(est.service_rates, est.arrival_rate)
    beta, gamma = region.midpoint()
    if pi_config.beta0 is not None:
        beta = pi_config.beta0
        gamma = pi_config.gamma0 if pi_config.gamma0 is not None else 0.5 * (1 + beta)
    beta, gamma = region.project(beta, gamma)
    state = PiState(0, beta, gamma, est, region)
    state.record(math.nan, math.nan)

    config = sim_config.replace(horizon=pi_config.episode_length, record_states=True)
    for i in range(1, pi_config.max_iters + 1):
        policy = Policy.gsp(state.beta, state.gamma, tier_rates=state.estimates.service_rates)
        data = run_episode(spec, policy, config.replace(seed=sim_config.seed + i))
        if pi_config.estimate_rates:
            est = estimate_rates(state.estimates, data)
        else:
            est = state.estimates
        try:
            region = region_for(est.service_rates, est.arrival_rate)
        except NotStabilizable:
            log.error("estimated rates are not stabilizable at iteration %d", i)
            raise
        beta_prev, gamma_prev = state.beta, state.gamma
        beta, gamma = region.project(beta_prev, gamma_prev)

        ds = FitDataset.from_episode(data)
        if pi_config.synthetic_params is not None:
            b0, g0 = pi_config.synthetic_params
            ds = FitDataset(ds.states, ds.paths, synthetic_w(ds.states, ds.paths, b0, g0, est.service_rates))
        rates = np.asarray(est.service_rates)
        beta = fit_beta(ds, beta, gamma, region, rates, pi_config.max_partition_rounds)
        gamma = fit_gamma(ds, beta, gamma, region, rates)

        state.iteration = i
        state.beta, state.gamma = beta, gamma
        state.estimates = est
        state.region = region
        try:
            mean_w = average_system_time(data)
        except NoCompletedJobs:
            mean_w = math.nan
        state.record(sse(ds, beta, gamma, rates), mean_w)
        log.info("iteration %d: beta=%.6f gamma=%.6f m_hat=%.4f", i, beta, gamma, region.m)
        if abs(beta - beta_prev) < pi_config.theta_beta and abs(gamma - gamma_prev) < pi_config.theta_gamma:
            state.converged = True
            break
    return state


def simplex_grid(step: float) -> np.ndarray:
    n = round(1.0 / step)
    if not math.isclose(n * step, 1.0, rel_tol=1e-9):
        raise ValueError(f"grid step {step} does not divide 1")
    pts = [(i, j, n - i - j) for i in range(n + 1) for j in range(n + 1 - i)]
    return np.array(pts, dtype=float) / n


def optimize_bernoulli(
    spec: NetworkSpec,
    sim_config: SimConfig,
    grid_step: float = 0.02,
    refine_top: int = 10,
    refine_factor: float = 10.0,
) -> tuple[BernoulliWeights, float]:
    """Grid search over routing probabilities, evaluated by simulation.

    Every candidate that keeps all servers below full utilisation is
    simulated for ``sim_config.horizon`` with the same seed (common random
    numbers); the ``refine_top`` best are re-simulated ``refine_factor``
    times longer and the winner of that round is returned with its mean
    system time.
    """
    cands = [eta for eta in simplex_grid(grid_step) if ob_utilizations(spec, eta).max() < 1.0]
    if not cands:
        raise NoFeasibleCandidate("every routing split overloads some server")

    def evaluate(eta, config):
        data = run_episode(spec, Policy.ob(BernoulliWeights(eta)), config)
        try:
            return average_system_time(data)
        except NoCompletedJobs:
            return math.inf

    screen = sim_config.replace(record_states=False)
    scores = np.array([evaluate(eta, screen) for eta in cands])
    order = np.argsort(scores, kind="stable")[: max(1, refine_top)]
    long = screen.replace(horizon=screen.horizon * refine_factor)
    final = [(evaluate(cands[i], long), i) for i in order]
    best_w, best_i = min(final)
    eta = tuple(float(round(v, 12)) for v in cands[best_i])
    return BernoulliWeights(eta), float(best_w)
