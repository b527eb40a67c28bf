"""RDP accounting for the Poisson-subsampled Gaussian mechanism.

Integer orders only; the per-step RDP at order ``alpha`` is

    log( sum_k C(alpha, k) (1-q)^(alpha-k) q^k exp(k(k-1) / (2 sigma^2)) ) / (alpha - 1)

evaluated with log-sum-exp, and the composed curve is converted to (eps, delta)
with ``eps = min_alpha T*rdp(alpha) + log(1/delta)/(alpha-1)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from lmdp.errors import CalibrationRangeError, ConfigError

logger = logging.getLogger(__name__)

DEFAULT_ORDERS = tuple(range(2, 65)) + (128, 256)

SIGMA_MIN = 0.3
SIGMA_MAX = 100.0
SIGMA_TOL = 1e-3


@dataclass(frozen=True)
class PrivacySpec:
    epsilon: float
    delta: float
    q: float
    T: int
    n: int | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0 < self.q <= 1:
            raise ConfigError(f"sampling probability must lie in (0, 1], got {self.q}")
        if self.T < 1:
            raise ConfigError(f"iteration count must be >= 1, got {self.T}")
        if self.n is not None and self.delta >= 1.0 / self.n:
            logger.warning("delta=%g is not below 1/N=%g", self.delta, 1.0 / self.n)


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = max(a, b), min(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def _log_binom(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: int) -> float:
    """RDP of one Poisson-subsampled Gaussian step at integer order ``alpha``."""
    if not sigma > 0:
        raise ConfigError(f"noise multiplier must be > 0, got {sigma}")
    if int(alpha) != alpha or alpha < 2:
        raise ConfigError(f"order must be an integer >= 2, got {alpha}")
    if not 0 <= q <= 1:
        raise ConfigError(f"sampling probability must lie in [0, 1], got {q}")
    alpha = int(alpha)
    if q == 0:
        return 0.0
    if q == 1:
        return alpha / (2 * sigma**2)
    log_q, log_1mq = math.log(q), math.log1p(-q)
    log_a = -math.inf
    for k in range(alpha + 1):
        term = _log_binom(alpha, k) + k * log_q + (alpha - k) * log_1mq + k * (k - 1) / (2 * sigma**2)
        log_a = _log_add(log_a, term)
    # rounding can push a zero-valued sum a hair below 0
    return max(log_a, 0.0) / (alpha - 1)


def rdp_curve(q: float, sigma: float, orders: Sequence[int] = DEFAULT_ORDERS) -> np.ndarray:
    return np.array([rdp_subsampled_gaussian(q, sigma, a) for a in orders])


@dataclass
class AccountantState:
    """RDP ledger; ``step`` composes one subsampled Gaussian release."""

    orders: tuple = DEFAULT_ORDERS
    rdp: np.ndarray = None
    steps_taken: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.orders = tuple(int(a) for a in self.orders)
        if self.rdp is None:
            self.rdp = np.zeros(len(self.orders))

    def step(self, q: float, sigma: float, count: int = 1) -> "AccountantState":
        key = (q, sigma)
        if key not in self._cache:
            self._cache[key] = rdp_curve(q, sigma, self.orders)
        self.rdp = self.rdp + count * self._cache[key]
        self.steps_taken += count
        return self


def compose_and_convert(state: AccountantState, delta: float) -> tuple[float, int]:
    """Return ``(epsilon, optimal_order)`` for the accumulated RDP curve."""
    if len(state.orders) == 0:
        raise ConfigError("empty RDP order grid")
    if not 0 < delta < 1:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    if state.steps_taken == 0:
        return 0.0, state.orders[0]
    orders = np.asarray(state.orders, dtype=np.float64)
    eps = state.rdp + math.log(1 / delta) / (orders - 1)
    i = int(np.argmin(eps))
    return float(max(eps[i], 0.0)), state.orders[i]


def epsilon_for(q: float, sigma: float, T: int, delta: float,
                orders: Sequence[int] = DEFAULT_ORDERS) -> float:
    state = AccountantState(orders)
    if T > 0:
        state.step(q, sigma, T)
    return compose_and_convert(state, delta)[0]


def calibrate_sigma(spec: PrivacySpec, orders: Sequence[int] = DEFAULT_ORDERS,
                    lo: float = SIGMA_MIN, hi: float = SIGMA_MAX, tol: float = SIGMA_TOL) -> float:
    """Smallest noise multiplier (to ``tol``) whose accounted epsilon stays within budget.

    The returned value always satisfies the budget; it is the upper end of the
    final bisection bracket.
    """
    def eps(sigma):
        return epsilon_for(spec.q, sigma, spec.T, spec.delta, orders)

    if eps(hi) > spec.epsilon:
        raise CalibrationRangeError(
            f"epsilon={spec.epsilon} unreachable with sigma <= {hi} (q={spec.q}, T={spec.T})")
    if eps(lo) <= spec.epsilon:
        return lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if eps(mid) <= spec.epsilon:
            hi = mid
        else:
            lo = mid
    return hi
