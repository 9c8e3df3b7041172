"""Exact small-case results used to calibrate the Monte Carlo estimators.

Everything here is deterministic arithmetic, no sampling:

* generating-function iteration gives the exact law of the extinction
  time for any offspring family — P(extinct by n from one line) obeys
  q_{n+1} = f(q_n) with q_0 = 0, and K independent lines give
  P(tau_K <= n) = q_n^K;
* exact summation of E m^tau_K from that law;
* exhaustive enumeration of every bernoulli trajectory for tiny K,
  with its exact probability, so estimator pipelines can be checked
  against closed-form conditional expectations path by path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .offspring import OffspringDistribution


def _tail_from_survival(s: float, K: int) -> float:
    """P(tau_K > n) = 1 - (1 - s)^K from the single-line survival s."""
    if s >= 1.0:
        return 1.0
    if s <= 0.0:
        return 0.0
    return -math.expm1(K * math.log1p(-s))


def line_survival_probs(dist: OffspringDistribution, horizon: int) -> np.ndarray:
    """s_n = P(a single line is alive at generation n), n = 0..horizon.

    Iterates the complement map s -> 1 - f(1 - s), which stays accurate
    down to denormal survival probabilities where the plain fixed-point
    iteration of the generating function saturates one ulp short of 1.
    """
    if horizon < 0:
        raise ValueError(f"horizon must be >= 0, got {horizon}")
    s = np.empty(horizon + 1)
    s[0] = 1.0
    for n in range(horizon):
        s[n + 1] = dist.pgf_complement(s[n])
    return s


def line_extinction_probs(dist: OffspringDistribution, horizon: int) -> np.ndarray:
    """q_n = P(a single line is extinct by generation n), n = 0..horizon."""
    return 1.0 - line_survival_probs(dist, horizon)


def extinction_cdf(dist: OffspringDistribution, K: int, horizon: int) -> np.ndarray:
    """P(tau_K <= n) for n = 0..horizon, exact for any offspring law."""
    if K < 0:
        raise ValueError(f"initial size must be >= 0, got {K}")
    if K == 0:
        return np.ones(horizon + 1)
    s = line_survival_probs(dist, horizon)
    with np.errstate(divide="ignore"):
        return np.exp(K * np.log1p(-np.minimum(s, 1.0)))


def tau_quantile(dist: OffspringDistribution, K: int, prob: float = 0.5) -> int:
    """Smallest n with P(tau_K <= n) >= prob (the median by default)."""
    if not 0.0 < prob < 1.0:
        raise ValueError(f"prob must be in (0, 1), got {prob}")
    if K == 0:
        return 0
    if dist.mean >= 1.0:
        raise ValueError("quantiles need a strictly subcritical mean")
    n, s = 0, 1.0
    while _tail_from_survival(s, K) > 1.0 - prob:
        n += 1
        s = dist.pgf_complement(s)
        if n > 10_000_000:
            raise RuntimeError("extinction quantile did not converge")
    return n


def tau_mean(dist: OffspringDistribution, K: int, tol: float = 1e-13) -> float:
    """E tau_K = sum_n P(tau_K > n), summed to absolute tail tol."""
    if K == 0:
        return 0.0
    total, s, n = 0.0, 1.0, 0
    while True:
        tail = _tail_from_survival(s, K)
        total += tail
        if tail < tol:
            return total
        s = dist.pgf_complement(s)
        n += 1
        if n > 10_000_000:
            raise RuntimeError("extinction mean did not converge")


def mean_m_tau(dist: OffspringDistribution, K: int, tol: float = 1e-15) -> float:
    """E[m^tau_K] by exact summation of m^n * P(tau_K = n)."""
    m = dist.mean
    if not 0.0 < m < 1.0:
        raise ValueError(f"needs a strictly subcritical positive mean, got {m}")
    if K == 0:
        return 1.0
    total = 0.0
    s_prev, n = 1.0, 0
    power = 1.0
    while True:
        s = dist.pgf_complement(s_prev)
        n += 1
        power *= m
        total += power * (_tail_from_survival(s_prev, K) - _tail_from_survival(s, K))
        # remaining mass contributes at most m^{n+1} * P(tau > n)
        if power * m * _tail_from_survival(s, K) < tol:
            return total
        s_prev = s
        if n > 10_000_000:
            raise RuntimeError("m^tau summation did not converge")


@dataclass(frozen=True)
class EnumeratedPath:
    """One bernoulli trajectory with its exact probability."""

    sizes: tuple[int, ...]
    prob: float

    @property
    def extinct(self) -> bool:
        return self.sizes[-1] == 0

    @property
    def tau(self) -> int | None:
        return len(self.sizes) - 1 if self.extinct else None


def enumerate_bernoulli_paths(p: float, K: int, horizon: int) -> list[EnumeratedPath]:
    """Every trajectory of the bernoulli(p) process from K, with weights.

    Bernoulli offspring never branch, so trajectories are nonincreasing
    and the step law is binomial(X_n, p); the full tree is tiny for
    K <= 12 and horizon <= 6. Paths still alive at the horizon are
    returned censored (sizes end at a positive value); probabilities of
    the returned set sum to one.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must be in (0, 1), got {p}")
    if K < 0 or K > 16:
        raise ValueError(f"enumeration is for 0 <= K <= 16, got {K}")
    if not 1 <= horizon <= 8:
        raise ValueError(f"enumeration is for 1 <= horizon <= 8, got {horizon}")

    @lru_cache(maxsize=None)
    def binom_pmf(n: int, k: int) -> float:
        return math.comb(n, k) * p**k * (1.0 - p) ** (n - k)

    out: list[EnumeratedPath] = []

    def recurse(sizes: tuple[int, ...], prob: float):
        x = sizes[-1]
        if x == 0 or len(sizes) - 1 == horizon:
            out.append(EnumeratedPath(sizes, prob))
            return
        for nxt in range(x + 1):
            recurse(sizes + (nxt,), prob * binom_pmf(x, nxt))

    if K == 0:
        return [EnumeratedPath((0,), 1.0)]
    recurse((K,), 1.0)
    return out
