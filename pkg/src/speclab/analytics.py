"""Closed-form speculative-decoding speedup model and its Monte Carlo check.

With i.i.d. per-token acceptance probability ``alpha`` and draft length
``gamma``, the tokens emitted per target pass follow a truncated geometric
law with mean ``(1 - alpha**(gamma+1)) / (1 - alpha)``. Dividing by the
relative cost of one cycle ``1 + gamma * c`` gives the walltime speedup.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

ALPHA_ONE_EPS = 1e-12
SWEEP_COLUMNS = ["alpha", "gamma", "c", "expected_tokens", "speedup", "optimal_gamma_flag"]


@dataclass(frozen=True)
class SpeedupParams:
    alpha: float
    gamma: int
    cost_ratio: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0 or np.isnan(self.alpha):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if int(self.gamma) != self.gamma or self.gamma < 1:
            raise ValueError(f"gamma must be an integer >= 1, got {self.gamma}")
        if not self.cost_ratio >= 0.0:
            raise ValueError(f"cost ratio must be >= 0, got {self.cost_ratio}")


def expected_tokens(p: SpeedupParams) -> float:
    a, g = p.alpha, p.gamma
    if abs(1.0 - a) < ALPHA_ONE_EPS:
        return float(g + 1)
    return (1.0 - a ** (g + 1)) / (1.0 - a)


def speedup(p: SpeedupParams) -> float:
    return expected_tokens(p) / (1.0 + p.gamma * p.cost_ratio)


def simulate_cycles(p: SpeedupParams, n_cycles: int, seed: int = 0, chunk: int = 1 << 18) -> float:
    """Mean emitted tokens over ``n_cycles`` simulated draft/verify cycles."""
    if n_cycles < 1:
        raise ValueError("n_cycles must be >= 1")
    rng = np.random.default_rng(seed)
    total = 0
    left = n_cycles
    while left:
        n = min(chunk, left)
        acc = rng.random((n, p.gamma)) < p.alpha
        # accepted run length = index of the first rejection (or gamma)
        run = np.where(acc.all(axis=1), p.gamma, np.argmin(acc, axis=1))
        total += int(run.sum()) + n
        left -= n
    return total / n_cycles


def simulate_stderr(p: SpeedupParams, n_cycles: int) -> float:
    """Standard error of :func:`simulate_cycles` from the exact law's variance."""
    a, g = p.alpha, p.gamma
    k = np.arange(g + 1)
    probs = np.where(k < g, a**k * (1 - a), a**g)
    emitted = k + 1
    mean = float((probs * emitted).sum())
    var = float((probs * (emitted - mean) ** 2).sum())
    return (var / n_cycles) ** 0.5


def invert_alpha(tau: float, gamma: int, tol: float = 1e-12) -> float:
    """The alpha whose expected tokens at ``gamma`` equal ``tau`` (bisection, clipped)."""
    if tau <= 1.0:
        return 0.0
    if tau >= gamma + 1:
        return 1.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if expected_tokens(SpeedupParams(mid, gamma)) < tau:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    gamma: int
    c: float
    expected_tokens: float
    speedup: float
    optimal_gamma_flag: bool


def sweep(alphas: Sequence[float], gammas: Sequence[int], costs: Sequence[float]) -> List[SweepRow]:
    """Evaluate the model on a grid; flag the best gamma for each (alpha, c)."""
    rows = []
    gammas = sorted(set(int(g) for g in gammas))
    for a, c in itertools.product(alphas, costs):
        s = [speedup(SpeedupParams(a, g, c)) for g in gammas]
        best = int(np.argmax(s))  # first maximum, i.e. smallest gamma on ties
        for i, g in enumerate(gammas):
            e = expected_tokens(SpeedupParams(a, g, c))
            rows.append(SweepRow(a, g, c, e, s[i], i == best))
    return rows


def optimal_gamma(rows: Iterable[SweepRow], alpha: float, c: float) -> Optional[int]:
    for r in rows:
        if r.alpha == alpha and r.c == c and r.optimal_gamma_flag:
            return r.gamma
    return None


def sweep_csv(rows: Iterable[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([repr(r.alpha), r.gamma, repr(r.c), f"{r.expected_tokens:.6f}", f"{r.speedup:.6f}", int(r.optimal_gamma_flag)])
    return buf.getvalue()
