"""Bridge network topology and the stability constants derived from it.

The network has five servers and three origin-destination paths::

    origin -> 1 -> 2 -> sink
    origin -> 1 -> 3 -> 5 -> sink
    origin -> 4 -> 5 -> sink

Everything here is a pure function of a :class:`NetworkSpec`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations

import numpy as np

from .errors import ConfigInvalid, NotStabilizable

SERVERS = (1, 2, 3, 4, 5)
PATHS = ((1, 2), (1, 3, 5), (4, 5))
PATH_NAMES = ("12", "135", "45")
ORIGIN = "origin"
SINK = "sink"
ADJACENCY = {
    ORIGIN: (1, 4),
    1: (2, 3),
    2: (SINK,),
    3: (5,),
    4: (5,),
    5: (SINK,),
}

# relative margin used for the strict inequalities of the stability region
FEASIBILITY_MARGIN = 1e-9
# relative tolerance for treating two service rates as equal
RATE_RTOL = 1e-12


def _as_rates(values) -> tuple[float, ...]:
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class NetworkSpec:
    """Service rates of servers 1..5 and the Poisson arrival rate (jobs/sec)."""

    service_rates: tuple[float, ...]
    arrival_rate: float
    paths: tuple[tuple[int, ...], ...] = field(default=PATHS, repr=False)

    def __post_init__(self):
        rates = _as_rates(self.service_rates)
        object.__setattr__(self, "service_rates", rates)
        object.__setattr__(self, "arrival_rate", float(self.arrival_rate))
        if len(rates) != len(SERVERS):
            raise ConfigInvalid(f"expected {len(SERVERS)} service rates, got {len(rates)}")
        if not all(math.isfinite(r) and r > 0 for r in rates):
            raise ConfigInvalid(f"service rates must be finite and > 0: {rates}")
        if not (math.isfinite(self.arrival_rate) and self.arrival_rate >= 0):
            raise ConfigInvalid(f"arrival rate must be finite and >= 0: {self.arrival_rate}")
        if tuple(self.paths) != PATHS:
            raise ConfigInvalid("only the bridge topology is supported")
        for path in self.paths:
            if not _is_walk((ORIGIN,) + tuple(path) + (SINK,)):
                raise ConfigInvalid(f"path {path} is not an origin-sink walk")

    @property
    def rates(self) -> np.ndarray:
        return np.asarray(self.service_rates, dtype=float)

    def rate(self, server: int) -> float:
        return self.service_rates[server - 1]

    def with_rates(self, service_rates=None, arrival_rate=None) -> "NetworkSpec":
        return NetworkSpec(
            self.service_rates if service_rates is None else service_rates,
            self.arrival_rate if arrival_rate is None else arrival_rate,
        )


def _is_walk(nodes) -> bool:
    return all(b in ADJACENCY.get(a, ()) for a, b in zip(nodes, nodes[1:]))


def _exact(value: float) -> Fraction:
    """Rational value of the shortest decimal that round-trips to ``value``.

    Rates are entered as decimals, so sums like 0.15 + 0.15 should equal 0.3
    exactly when comparing cut capacities and forming ratios.
    """
    return Fraction(repr(float(value)))


def _exact_sum(spec: "NetworkSpec", servers) -> Fraction:
    return sum((_exact(spec.rate(n)) for n in servers), Fraction(0))


def _connected(removed: frozenset) -> bool:
    """True if the sink is reachable from the origin avoiding ``removed``."""
    stack, seen = [ORIGIN], {ORIGIN}
    while stack:
        node = stack.pop()
        if node == SINK:
            return True
        for nxt in ADJACENCY.get(node, ()):
            if nxt not in seen and nxt not in removed:
                seen.add(nxt)
                stack.append(nxt)
    return False


REFERENCE_SPEC = NetworkSpec((0.15, 0.1, 0.25, 0.15, 0.2), 0.2)


@dataclass(frozen=True)
class Cut:
    servers: frozenset
    capacity: float


def enumerate_cuts(spec: NetworkSpec) -> list[Cut]:
    """Minimal server sets whose removal disconnects origin from sink.

    Exhaustive over all subsets of the five servers, ordered by size and then
    by server ids.
    """
    cuts: list[frozenset] = []
    for size in range(1, len(SERVERS) + 1):
        for combo in combinations(SERVERS, size):
            s = frozenset(combo)
            if _connected(s):
                continue
            # by increasing size, so any smaller cut found earlier is a subset candidate
            if any(c < s for c in cuts):
                continue
            cuts.append(s)
    return [Cut(c, float(_exact_sum(spec, c))) for c in cuts]


def min_cut_capacity(spec: NetworkSpec) -> float:
    return min(c.capacity for c in enumerate_cuts(spec))


def is_stabilizable(spec: NetworkSpec) -> bool:
    return _exact(spec.arrival_rate) < _exact(min_cut_capacity(spec))


def compute_m(spec: NetworkSpec, cuts: list[Cut] | None = None) -> float:
    """Worst ratio of residual cut capacity to residual demand.

    Minimum over cuts ``M`` and proper subsets ``S`` of ``M`` (the empty set
    included) with ``lam - sum(mu[S]) > 0`` of
    ``sum(mu[M \\ S]) / (lam - sum(mu[S]))``.
    """
    cuts = enumerate_cuts(spec) if cuts is None else cuts
    lam = _exact(spec.arrival_rate)
    # compare against the reported (float) capacity so that this agrees with
    # is_stabilizable and min_cut_capacity
    cap = _exact(min(c.capacity for c in cuts))
    if not lam < cap:
        raise NotStabilizable(
            f"arrival rate {float(lam):g} is not below the min-cut capacity {float(cap):g}"
        )
    best = None
    for cut in cuts:
        members = sorted(cut.servers)
        for size in range(len(members)):
            for sub in combinations(members, size):
                residual_demand = lam - _exact_sum(spec, sub)
                if residual_demand <= 0:
                    continue
                rest = _exact_sum(spec, [n for n in members if n not in sub])
                ratio = rest / residual_demand
                best = ratio if best is None or ratio < best else best
    return float(best)


def compute_depths(spec: NetworkSpec | None = None) -> dict[int, int]:
    """Number of links on the longest origin-to-server path (origin edge counts)."""
    depth: dict = {ORIGIN: 0}

    def visit(node):
        for nxt in ADJACENCY.get(node, ()):
            if nxt == SINK:
                continue
            d = depth[node] + 1
            if d > depth.get(nxt, 0):
                depth[nxt] = d
                visit(nxt)

    visit(ORIGIN)
    return {n: depth[n] for n in SERVERS}


def _close(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=RATE_RTOL, abs_tol=0.0)


def cut_g(spec: NetworkSpec, cut: Cut, depths: dict[int, int] | None = None) -> int:
    depths = compute_depths(spec) if depths is None else depths
    rates = {n: spec.rate(n) for n in cut.servers}
    hi, lo = max(rates.values()), min(rates.values())
    if _close(hi, lo):
        return 0
    g1 = sum(depths[n] for n, r in rates.items() if _close(r, hi))
    g2 = min(depths[n] for n, r in rates.items() if _close(r, lo))
    return max(g2 - g1, 0)


def compute_delta_g(spec: NetworkSpec) -> tuple[int, dict[frozenset, int]]:
    """Return ``(delta_g, per_cut_g)``; ``delta_g`` is 1 if any cut has ``G > 0``."""
    depths = compute_depths(spec)
    per_cut = {cut.servers: cut_g(spec, cut, depths) for cut in enumerate_cuts(spec)}
    return (1 if max(per_cut.values()) > 0 else 0), per_cut


@dataclass(frozen=True)
class FeasibleRegion:
    """Open set ``1 < gamma**k < beta**k < m`` with ``k = 2 + delta_g``."""

    m: float
    delta_g: int
    margin: float = FEASIBILITY_MARGIN

    @property
    def exponent(self) -> int:
        return 2 + self.delta_g

    @property
    def beta_upper(self) -> float:
        return self.m ** (1.0 / self.exponent)

    @property
    def beta_bounds(self) -> tuple[float, float]:
        """Closed bounds for clamping beta, shrunk inside the open interval."""
        # the lower bound leaves room for gamma strictly between 1 and beta
        return 1.0 + 5 * self.margin, self.beta_upper * (1.0 - 2 * self.margin)

    def gamma_bounds(self, beta: float) -> tuple[float, float]:
        return 1.0 + 2 * self.margin, beta / (1.0 + 2 * self.margin)

    def contains(self, beta: float, gamma: float) -> bool:
        k, eps = self.exponent, self.margin
        g, b = gamma**k, beta**k
        return g > 1.0 + eps and b > g * (1.0 + eps) and self.m > b * (1.0 + eps)

    def project(self, beta: float, gamma: float) -> tuple[float, float]:
        """Nearest interior point (componentwise clamp, beta first)."""
        lo, hi = self.beta_bounds
        beta = min(max(beta, lo), hi)
        glo, ghi = self.gamma_bounds(beta)
        gamma = min(max(gamma, glo), ghi)
        return beta, gamma

    def midpoint(self) -> tuple[float, float]:
        beta = 0.5 * (1.0 + self.beta_upper)
        return beta, 0.5 * (1.0 + beta)


@dataclass(frozen=True)
class StabilityConstants:
    cuts: tuple[Cut, ...]
    min_cut_capacity: float
    m: float
    delta_g: int
    depths: dict
    per_cut_g: dict

    @property
    def region(self) -> FeasibleRegion:
        return FeasibleRegion(self.m, self.delta_g)

    def to_dict(self) -> dict:
        region = self.region
        return {
            "cuts": [
                {"servers": sorted(c.servers), "capacity": c.capacity, "g": self.per_cut_g[c.servers]}
                for c in self.cuts
            ],
            "min_cut_capacity": self.min_cut_capacity,
            "m": self.m,
            "delta_g": self.delta_g,
            "depths": {str(k): v for k, v in self.depths.items()},
            "beta_interval": [1.0, region.beta_upper],
            "gamma_rule": "1 < gamma < beta",
            "exponent": region.exponent,
        }


def stability_constants(spec: NetworkSpec) -> StabilityConstants:
    cuts = enumerate_cuts(spec)
    m = compute_m(spec, cuts)
    delta_g, per_cut = compute_delta_g(spec)
    return StabilityConstants(
        cuts=tuple(cuts),
        min_cut_capacity=min(c.capacity for c in cuts),
        m=m,
        delta_g=delta_g,
        depths=compute_depths(spec),
        per_cut_g=per_cut,
    )


def feasible_region(spec: NetworkSpec) -> FeasibleRegion:
    """Stability region for (beta, gamma); raises NotStabilizable."""
    m = compute_m(spec)
    delta_g, _ = compute_delta_g(spec)
    return FeasibleRegion(m, delta_g)
