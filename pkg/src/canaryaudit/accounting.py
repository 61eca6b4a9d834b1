"""Renyi-DP accountant for the Poisson-subsampled Gaussian mechanism.

Per-step Renyi divergence bounds follow the standard sampled-Gaussian
analysis (integer orders by binomial expansion, fractional orders by the
two-sided erfc series), composed linearly over steps and converted to
(epsilon, delta) with the classic conversion eps = rdp + log(1/delta)/(a-1),
minimized over a fixed order grid. Conservative but standard.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special


def _default_orders():
    # 1.25, 1.5, then integers 2..64, then powers of two. The large tail
    # matters in the vanishing-noise regime, where the conversion term
    # log(1/delta)/(alpha-1) dominates epsilon.
    orders = [1.25, 1.5] + list(range(2, 65)) + [128, 256, 512, 1024, 2048, 4096, 8192, 16384, 32768]
    return tuple(float(a) for a in orders)


DEFAULT_ORDERS = _default_orders()


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = (a, b) if a > b else (b, a)
    return hi + math.log1p(math.exp(lo - hi))


def _log_sub(a: float, b: float) -> float:
    """log(exp(a) - exp(b)) for a >= b."""
    if b == -math.inf:
        return a
    if a == b:
        return -math.inf
    return a + math.log1p(-math.exp(b - a))


def _log_erfc(x: float) -> float:
    # erfc(x) = 2 * Phi(-x * sqrt(2))
    return math.log(2.0) + special.log_ndtr(-x * math.sqrt(2.0))


def _log_comb(a: float, k: int) -> float:
    return (
        special.gammaln(a + 1.0) - special.gammaln(k + 1.0) - special.gammaln(a - k + 1.0)
    )


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    log_a = -math.inf
    for k in range(alpha + 1):
        term = (
            _log_comb(alpha, k)
            + k * math.log(q)
            + (alpha - k) * math.log1p(-q)
            + (k * k - k) / (2.0 * sigma * sigma)
        )
        log_a = _log_add(log_a, term)
    return log_a


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    log_a0 = -math.inf
    log_a1 = -math.inf
    z0 = sigma * sigma * math.log(1.0 / q - 1.0) + 0.5
    k = 0
    while True:
        coef = special.binom(alpha, k)
        log_coef = math.log(abs(coef))
        j = alpha - k
        log_t0 = log_coef + k * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + k * math.log1p(-q)
        log_e0 = math.log(0.5) + _log_erfc((k - z0) / (math.sqrt(2.0) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2.0) * sigma))
        log_s0 = log_t0 + (k * k - k) / (2.0 * sigma * sigma) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1
        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        k += 1
        if max(log_s0, log_s1) < -40 and k > alpha:
            break
    return _log_add(log_a0, log_a1)


def rdp_sampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """Renyi divergence of order alpha for one Poisson-subsampled Gaussian
    step with sampling rate q and noise multiplier sigma."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"sampling rate must be in [0, 1], got {q}")
    if sigma <= 0.0:
        return math.inf
    if q == 0.0:
        return 0.0
    if q == 1.0:
        return alpha / (2.0 * sigma * sigma)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return max(log_a / (alpha - 1.0), 0.0)


def accountant_epsilon(
    sigma: float,
    q: float,
    steps: int,
    delta: float,
    orders=DEFAULT_ORDERS,
) -> float:
    """Upper-bound-style epsilon for ``steps`` compositions of the subsampled
    Gaussian mechanism. sigma = 0 reports infinite epsilon."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if not 0.0 < q <= 1.0:
        raise ValueError(f"sampling rate must be in (0, 1], got {q}")
    if sigma < 0.0:
        raise ValueError(f"noise multiplier must be >= 0, got {sigma}")
    if sigma == 0.0:
        return math.inf
    best = math.inf
    log_inv_delta = math.log(1.0 / delta)
    for a in orders:
        rdp = steps * rdp_sampled_gaussian(q, sigma, a)
        eps = rdp + log_inv_delta / (a - 1.0)
        best = min(best, eps)
    return max(best, 0.0)


def calibrate_sigma(
    target_epsilon: float,
    q: float,
    steps: int,
    delta: float,
    rtol: float = 1e-4,
    sigma_lo: float = 1e-3,
    sigma_hi: float = 1e4,
) -> float:
    """Smallest-noise sigma whose accounted epsilon matches the target to
    relative tolerance 1e-3 (bisection; epsilon is decreasing in sigma)."""
    if target_epsilon <= 0.0:
        raise ValueError(f"target epsilon must be positive, got {target_epsilon}")
    lo, hi = sigma_lo, sigma_hi
    if accountant_epsilon(lo, q, steps, delta) < target_epsilon:
        raise ValueError(
            f"target epsilon {target_epsilon} not bracketed: even sigma={lo} is below it"
        )
    if accountant_epsilon(hi, q, steps, delta) > target_epsilon:
        raise ValueError(
            f"target epsilon {target_epsilon} not bracketed: sigma={hi} still exceeds it"
        )
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        eps = accountant_epsilon(mid, q, steps, delta)
        if abs(eps - target_epsilon) / target_epsilon < rtol:
            return mid
        if eps > target_epsilon:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)
