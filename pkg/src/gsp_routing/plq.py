"""Piecewise-linear path costs, bottleneck detection and path weight tiers.

State layout (7 classes, one per (server, path) pair)::

    index   0      1       2      3       4      5       6
    class   x1^12  x1^135  x2^12  x3^135  x4^45  x5^135  x5^45

Paths are indexed 0 = (1,2), 1 = (1,3,5), 2 = (4,5).  The scalar kernels are
numba-compiled so the simulator can call them directly; the functions without
a leading underscore are the Python-facing surface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

N_CLASSES = 7
N_PATHS = 3

CLASS_SERVER = np.array([1, 1, 2, 3, 4, 5, 5], dtype=np.int64)
CLASS_PATH = np.array([0, 1, 0, 1, 2, 1, 2], dtype=np.int64)
# successor class along the path, -1 means the job leaves the network
NEXT_CLASS = np.array([2, 3, -1, 5, 6, -1, -1], dtype=np.int64)
# first class of each path (where an arrival enters)
FIRST_CLASS = np.array([0, 1, 4], dtype=np.int64)
# classes of each path, padded with -1
PATH_CLASSES = np.array([[0, 2, -1], [1, 3, 5], [4, 6, -1]], dtype=np.int64)
PATH_LEN = np.array([2, 3, 2], dtype=np.int64)
# server id of each PL segment, padded with -1
SEGMENT_SERVER = np.array([[1, 2, -1], [1, 3, 5], [4, 5, -1]], dtype=np.int64)
# segment s of every path is multiplied by beta ** (2 - s)
TIE_RTOL = 1e-12

CLASS_LABELS = ("x1_12", "x1_135", "x2_12", "x3_135", "x4_45", "x5_135", "x5_45")


@njit(cache=True)
def _segment_values(x, beta, p, out):
    """Fill ``out[:L]`` with the linear segments of path ``p``; return L."""
    n = PATH_LEN[p]
    prefix = 0.0
    for s in range(n):
        prefix += x[PATH_CLASSES[p, s]]
        out[s] = beta ** (2 - s) * prefix
    return n


@njit(cache=True)
def _active_segment(vals, n):
    """Index of the most downstream segment attaining the maximum."""
    top = vals[0]
    for s in range(1, n):
        if vals[s] > top:
            top = vals[s]
    thresh = top - TIE_RTOL * abs(top)
    for s in range(n - 1, -1, -1):
        if vals[s] >= thresh:
            return s
    return n - 1


@njit(cache=True)
def _path_q(x, beta, q, b, seg):
    """Q value, bottleneck server and active segment of every path."""
    vals = np.empty(3)
    for p in range(N_PATHS):
        n = _segment_values(x, beta, p, vals)
        s = _active_segment(vals, n)
        top = vals[0]
        for k in range(1, n):
            if vals[k] > top:
                top = vals[k]
        q[p] = top
        seg[p] = s
        b[p] = SEGMENT_SERVER[p, s]


@njit(cache=True)
def _tier_exponents(b, rates, e):
    """Weight exponent (0, 1 or 2) per path from bottleneck service rates."""
    r = np.empty(N_PATHS)
    for p in range(N_PATHS):
        r[p] = rates[b[p] - 1]
    top = r.max()
    second = -1.0
    for p in range(N_PATHS):
        if r[p] >= top * (1.0 - TIE_RTOL):
            e[p] = 0
        else:
            e[p] = -1
            if r[p] > second:
                second = r[p]
    for p in range(N_PATHS):
        if e[p] < 0:
            e[p] = 1 if r[p] >= second * (1.0 - TIE_RTOL) else 2


@njit(cache=True)
def _q_batch(X, beta):
    m = X.shape[0]
    Q = np.empty((m, N_PATHS))
    B = np.empty((m, N_PATHS), dtype=np.int64)
    S = np.empty((m, N_PATHS), dtype=np.int64)
    q = np.empty(N_PATHS)
    b = np.empty(N_PATHS, dtype=np.int64)
    s = np.empty(N_PATHS, dtype=np.int64)
    for i in range(m):
        _path_q(X[i], beta, q, b, s)
        for p in range(N_PATHS):
            Q[i, p] = q[p]
            B[i, p] = b[p]
            S[i, p] = s[p]
    return Q, B, S


@njit(cache=True)
def _tier_batch(B, rates):
    m = B.shape[0]
    E = np.empty((m, N_PATHS), dtype=np.int64)
    e = np.empty(N_PATHS, dtype=np.int64)
    for i in range(m):
        _tier_exponents(B[i], rates, e)
        for p in range(N_PATHS):
            E[i, p] = e[p]
    return E


def as_state(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.shape != (N_CLASSES,):
        raise ValueError(f"state must have {N_CLASSES} components, got shape {arr.shape}")
    if np.any(arr < 0):
        raise ValueError("state components must be non-negative")
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(np.int64)
    return arr.astype(float)


def make_state(**classes) -> np.ndarray:
    """Build a state from class labels, e.g. ``make_state(x1_12=2, x2_12=3)``."""
    x = np.zeros(N_CLASSES, dtype=np.int64)
    for label, value in classes.items():
        x[CLASS_LABELS.index(label)] = value
    return x


def server_totals(x) -> np.ndarray:
    """Jobs at each server 1..5 summed over classes."""
    return np.bincount(CLASS_SERVER - 1, weights=np.asarray(x, dtype=float), minlength=5)


@dataclass(frozen=True)
class GspParams:
    beta: float
    gamma: float

    def __post_init__(self):
        if not 1.0 < self.gamma < self.beta:
            raise ValueError(f"need 1 < gamma < beta, got beta={self.beta}, gamma={self.gamma}")


def q_values(x, beta: float) -> np.ndarray:
    """``(Q_12, Q_135, Q_45)`` at state ``x``."""
    q = np.empty(N_PATHS)
    b = np.empty(N_PATHS, dtype=np.int64)
    s = np.empty(N_PATHS, dtype=np.int64)
    _path_q(as_state(x), float(beta), q, b, s)
    return q


def bottlenecks(x, beta: float) -> tuple[int, int, int]:
    """Bottleneck server of each path; ties resolve to the downstream server."""
    q = np.empty(N_PATHS)
    b = np.empty(N_PATHS, dtype=np.int64)
    s = np.empty(N_PATHS, dtype=np.int64)
    _path_q(as_state(x), float(beta), q, b, s)
    return tuple(int(v) for v in b)


def weight_exponents(B, rates) -> np.ndarray:
    e = np.empty(N_PATHS, dtype=np.int64)
    _tier_exponents(np.asarray(B, dtype=np.int64), np.asarray(rates, dtype=float), e)
    return e


def path_weights(B, rates, gamma: float) -> np.ndarray:
    """Per-path multipliers in ``{1, gamma, gamma**2}``.

    ``rates`` are the service rates of servers 1..5 (a NetworkSpec is
    accepted as well).
    """
    rates = getattr(rates, "service_rates", rates)
    return float(gamma) ** weight_exponents(B, rates)


def q_batch(X, beta: float):
    """Vectorised :func:`q_values` over rows of ``X``.

    Returns ``(Q, B, S)``: Q values, bottleneck servers and active segment
    indices, each of shape ``(n, 3)``.
    """
    X = np.ascontiguousarray(X)
    if X.ndim != 2 or X.shape[1] != N_CLASSES:
        raise ValueError("X must have shape (n, 7)")
    if not np.issubdtype(X.dtype, np.integer):
        X = X.astype(float)
    return _q_batch(X, float(beta))


def tier_batch(B, rates) -> np.ndarray:
    return _tier_batch(np.ascontiguousarray(B, dtype=np.int64), np.asarray(rates, dtype=float))
