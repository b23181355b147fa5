"""On-device aggregation across views with the Gaussian mechanism.

Each call subsamples views, clips every vector to ``l2 <= C``, sums, adds one
Gaussian draw with std ``sigma*C`` per coordinate and divides by ``|B|``.
``account_epsilon`` bounds the cumulative privacy loss with Renyi-DP
composition of the (optionally subsampled) Gaussian mechanism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

DEFAULT_ORDERS = tuple(
    [1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 3.0, 3.5, 4.0, 4.5]
    + list(range(5, 64))
    + [80, 96, 128, 160, 192, 256, 320, 384, 512, 768, 1024]
)


@dataclass(frozen=True)
class DpParams:
    clip: float = 0.5
    sigma: float = 1.0
    delta: float = 1e-3
    batch_views: int | None = None  # None means all N views

    def __post_init__(self) -> None:
        if not self.clip > 0:
            raise ValueError(f"clip threshold must be positive, got {self.clip}")
        if self.sigma < 0:
            raise ValueError(f"noise multiplier must be >= 0, got {self.sigma}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        if self.batch_views is not None and self.batch_views < 1:
            raise ValueError("view subsample size must be >= 1")

    def views_for(self, n: int) -> int:
        b = n if self.batch_views is None else self.batch_views
        if b > n:
            raise ValueError(f"view subsample |B|={b} exceeds N={n}")
        return b


@dataclass(frozen=True)
class PrivacySpend:
    epsilon: float
    delta: float
    rounds: int
    order: float | None = None


def clip(g: np.ndarray, c: float) -> np.ndarray:
    """Scale ``g`` down to l2 norm ``c`` if it is longer."""
    norm = float(np.linalg.norm(g))
    return g / max(1.0, norm / c)


def average(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Sequential sum in the given order, then divide by the count."""
    total = vectors[0].copy()
    for v in vectors[1:]:
        total += v
    return total / len(vectors)


def local_secure_aggregate(
    vectors: Sequence[np.ndarray],
    params: DpParams,
    rng: np.random.Generator,
) -> np.ndarray:
    if len(vectors) == 0:
        raise ValueError("nothing to aggregate")
    dim = vectors[0].shape
    if any(v.shape != dim for v in vectors):
        raise ValueError("view vectors differ in shape")
    n = len(vectors)
    b = params.views_for(n)
    chosen = range(n) if b == n else np.sort(rng.choice(n, size=b, replace=False))
    clipped = [clip(vectors[i], params.clip) for i in chosen]
    total = clipped[0].copy()
    for v in clipped[1:]:
        total += v
    if params.sigma > 0:
        total += rng.standard_normal(total.shape) * (params.sigma * params.clip)
    return total / b


def noisy_probability(p, params: DpParams, rng: np.random.Generator):
    """Gaussian-distorted probability (or array of them) for prediction-time aggregation."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    if params.sigma == 0:
        return p
    return p + rng.standard_normal(p.shape) * (params.sigma * params.clip)


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    # log E[(p/q)^alpha] for the sampled Gaussian, integer alpha (binomial expansion)
    k = np.arange(alpha + 1)
    log_binom = gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
    with np.errstate(divide="ignore"):
        terms = (
            log_binom
            + k * math.log(q)
            + (alpha - k) * (math.log1p(-q) if q < 1 else -np.inf)
            + (k * k - k) / (2 * sigma**2)
        )
    if q == 1:
        terms = np.where(k == alpha, terms, -np.inf)
    return float(logsumexp(terms))


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """Renyi-DP of one release of the Poisson-subsampled Gaussian at order ``alpha``."""
    full = alpha / (2 * sigma**2)
    if q == 1.0 or not float(alpha).is_integer():
        # subsampling never hurts (joint convexity), so the full-batch value bounds fractional orders
        return full
    return min(full, _log_a_int(q, sigma, int(alpha)) / (alpha - 1))


def account_epsilon(
    sigma: float,
    delta: float,
    rounds: int,
    q: float = 1.0,
    orders: Sequence[float] = DEFAULT_ORDERS,
) -> PrivacySpend:
    """Smallest ``eps`` over ``orders`` of ``T*rdp(alpha) + log(1/delta)/(alpha-1)``."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if not 0 < q <= 1:
        raise ValueError("sampling ratio must be in (0, 1]")
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    if sigma == 0:
        return PrivacySpend(math.inf, delta, rounds, None)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    best, best_order = math.inf, None
    for a in orders:
        eps = rounds * rdp_subsampled_gaussian(q, sigma, a) + math.log(1 / delta) / (a - 1)
        if eps < best:
            best, best_order = eps, a
    return PrivacySpend(best, delta, rounds, best_order)


def gaussian_single_release_epsilon(sigma: float, delta: float) -> float:
    """Classic bound: sigma = sqrt(2 ln(1.25/delta)) / eps, solved for eps."""
    return math.sqrt(2 * math.log(1.25 / delta)) / sigma
