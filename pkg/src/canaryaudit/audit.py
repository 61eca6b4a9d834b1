"""One-run privacy audit: random canary inclusion, loss-based scoring,
TPR at fixed FPR, and epsilon / Gaussian-DP lower bounds.

Membership bits are fair coins; the model is trained once with the selected
canaries included; every canary is then scored with s = -loss. The epsilon
bound guesses the k_+ highest-scoring canaries as members and the k_- lowest
as non-members and inverts a one-sided binomial tail: under an eps-DP
mechanism (delta treated as 0) each guess on a distinct canary is correct
with probability at most e^eps / (1 + e^eps). A nonzero mechanism delta is
carried through for reporting only - the dominated-binomial model here is
the delta = 0 member of the bound family, which makes the certified
eps_hat slightly optimistic for delta > 0 mechanisms. The GDP variant uses
the per-guess accuracy bound Phi(mu/2) and converts mu to epsilon at a
reporting delta by root finding on the standard GDP conversion.

(k_+, k_-) are chosen on a small fixed grid with Bonferroni correction, so
maximizing over the grid stays valid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, special, stats

from .bilevel import CanarySet
from .data import Dataset
from .models import Arch
from .training import DPConfig, TrainConfig, train

DEFAULT_ALPHAS = (0.01, 0.05, 0.1)
DEFAULT_CONFIDENCE = 0.95


@dataclass(frozen=True)
class MembershipVector:
    bits: np.ndarray
    seed: int

    @property
    def m(self) -> int:
        return self.bits.size


@dataclass
class AuditResult:
    scores: np.ndarray
    bits: np.ndarray
    tpr_table: list
    eps_hat: float
    k_plus: int
    k_minus: int
    gdp_mu: float
    gdp_eps: float
    confidence: float
    mechanism_delta: float
    seed: int


def draw_membership(m: int, seed: int) -> MembershipVector:
    """m fair coin flips, deterministic given the seed."""
    if m < 1:
        raise ValueError("m must be >= 1")
    bits = np.random.default_rng(seed).integers(0, 2, size=m).astype(np.int64)
    return MembershipVector(bits, seed)


def tpr_at_fpr(scores, bits, alpha: float) -> float:
    """Exact maximum TPR over thresholds tau (score >= tau guesses member)
    whose FPR is at most alpha. Candidate taus are the distinct scores plus
    +inf; +inf always qualifies with TPR 0."""
    scores = np.asarray(scores, dtype=np.float64)
    bits = np.asarray(bits)
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    member = np.sort(scores[bits == 1])
    non = np.sort(scores[bits == 0])
    if member.size == 0 or non.size == 0:
        raise ValueError("bits are degenerate: need at least one member and one non-member")
    taus = np.unique(scores)
    tpr = (member.size - np.searchsorted(member, taus, side="left")) / member.size
    fpr = (non.size - np.searchsorted(non, taus, side="left")) / non.size
    admissible = tpr[fpr <= alpha]
    return float(admissible.max(initial=0.0))


def _abstention_grid(m: int):
    """k_+ = k_- grid: ceil(m/20), ceil(m/10), ceil(m/4), ceil(m/2), clipped
    so the two guess sets can stay disjoint, deduplicated in order."""
    raw = [math.ceil(m / 20), math.ceil(m / 10), math.ceil(m / 4), math.ceil(m / 2)]
    grid = []
    for k in raw:
        k = max(1, min(k, m // 2))
        if k not in grid:
            grid.append(k)
    return grid


def _guess_counts(scores, bits, k: int):
    """Correct-guess count when the k highest scores are guessed in and the k
    lowest are guessed out. Ties break toward the lower canary index, and the
    two guess sets are kept disjoint (every guess is on a distinct canary)."""
    scores = np.asarray(scores, dtype=np.float64)
    bits = np.asarray(bits)
    m = scores.size
    idx = np.arange(m)
    top = np.lexsort((idx, -scores))[:k]
    taken = np.zeros(m, dtype=bool)
    taken[top] = True
    asc = np.lexsort((idx, scores))
    bottom = np.array([i for i in asc if not taken[i]][:k], dtype=np.int64)
    r = int(bits[top].sum()) + int((1 - bits[bottom]).sum())
    return r, k + bottom.size


def _binomial_inversion(r: int, k: int, significance: float, acc_of_param, param_hi) -> float:
    """Largest parameter value at which the one-sided tail
    P[Bin(k, acc_of_param(theta)) >= r] still stays within the significance
    level. Returns 0 when even the chance hypothesis is not rejected."""

    def p_value(theta):
        return stats.binom.sf(r - 1, k, acc_of_param(theta))

    if p_value(0.0) > significance:
        return 0.0
    if r >= k:
        # p(theta) = acc^k exactly: invert analytically via the accuracy level
        return param_hi(significance ** (1.0 / k))
    hi = param_hi(r / k)  # accuracy matches the observed rate: p ~ 0.5 > significance
    return float(optimize.brentq(lambda t: p_value(t) - significance, 0.0, hi, xtol=1e-12))


def epsilon_lower_bound(scores, bits, confidence: float = DEFAULT_CONFIDENCE,
                        delta_audit: float = 0.0):
    """(eps_hat, k_plus, k_minus): the largest epsilon rejected by the
    dominated-binomial test on any grid cell, Bonferroni-corrected.

    delta_audit is validated and recorded by callers but the test model is
    the delta = 0 bound (see the module docstring for the caveat).
    """
    scores = np.asarray(scores, dtype=np.float64)
    bits = np.asarray(bits)
    if bits.sum() in (0, bits.size):
        raise ValueError("bits are degenerate: need at least one member and one non-member")
    if not 0 < confidence < 1:
        raise ValueError(f"confidence must be in (0, 1), got {confidence}")
    if not 0 <= delta_audit < 1:
        raise ValueError(f"delta_audit must be in [0, 1), got {delta_audit}")
    grid = _abstention_grid(bits.size)
    significance = (1.0 - confidence) / len(grid)
    best, best_k = 0.0, grid[0]

    def acc(eps):
        return special.expit(eps)

    def hi_from_acc(a):
        a = min(a, 1.0 - 1e-12)
        return float(special.logit(a))

    for k in grid:
        r, kk = _guess_counts(scores, bits, k)
        eps = _binomial_inversion(r, kk, significance, acc, hi_from_acc)
        if eps > best:
            best, best_k = eps, k
    return best, best_k, best_k


def gdp_estimate(scores, bits, confidence: float = DEFAULT_CONFIDENCE,
                 delta_report: float = 1e-5):
    """(mu_hat, eps_at_delta): the largest GDP parameter rejected by the
    binomial test with per-guess accuracy bound Phi(mu/2), then the epsilon
    solving the mu-GDP to (eps, delta)-DP conversion at delta_report."""
    scores = np.asarray(scores, dtype=np.float64)
    bits = np.asarray(bits)
    if bits.sum() in (0, bits.size):
        raise ValueError("bits are degenerate: need at least one member and one non-member")
    if not 0 < confidence < 1:
        raise ValueError(f"confidence must be in (0, 1), got {confidence}")
    if not 0 < delta_report < 1:
        raise ValueError(f"delta_report must be in (0, 1), got {delta_report}")
    grid = _abstention_grid(bits.size)
    significance = (1.0 - confidence) / len(grid)
    mu_hat = 0.0

    def acc(mu):
        return stats.norm.cdf(mu / 2.0)

    def hi_from_acc(a):
        a = min(a, 1.0 - 1e-15)
        return float(2.0 * stats.norm.ppf(a))

    for k in grid:
        r, kk = _guess_counts(scores, bits, k)
        mu = _binomial_inversion(r, kk, significance, acc, hi_from_acc)
        mu_hat = max(mu_hat, mu)
    return mu_hat, gdp_to_epsilon(mu_hat, delta_report)


def gdp_delta(eps: float, mu: float) -> float:
    """delta(eps) of a mu-GDP mechanism: Phi(-eps/mu + mu/2) - e^eps Phi(-eps/mu - mu/2)."""
    return float(
        stats.norm.cdf(-eps / mu + mu / 2.0)
        - math.exp(eps) * stats.norm.cdf(-eps / mu - mu / 2.0)
    )


def gdp_to_epsilon(mu: float, delta: float, eps_tol: float = 1e-10) -> float:
    """Epsilon of a mu-GDP mechanism at the given delta (0 when the mechanism
    already satisfies (0, delta)-DP). Root finding in the log domain."""
    if mu <= 0.0:
        return 0.0

    def log_delta_gap(eps):
        a = stats.norm.logcdf(-eps / mu + mu / 2.0)
        b = eps + stats.norm.logcdf(-eps / mu - mu / 2.0)
        if b >= a:
            return -math.inf
        return a + math.log1p(-math.exp(b - a)) - math.log(delta)

    if log_delta_gap(0.0) <= 0.0:
        return 0.0
    hi = 1.0
    while log_delta_gap(hi) > 0.0:
        hi *= 2.0
        if hi > 1e6:
            raise RuntimeError("GDP conversion failed to bracket epsilon")
    return float(optimize.brentq(log_delta_gap, 0.0, hi, xtol=eps_tol))


def run_audit(
    dataset: Dataset,
    canaries: CanarySet,
    arch: Arch,
    train_cfg: TrainConfig,
    dp_cfg: Optional[DPConfig] = None,
    seed: int = 0,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    confidence: float = DEFAULT_CONFIDENCE,
) -> AuditResult:
    """One audit run: draw memberships, train on the canary-free dataset plus
    the included canaries, score every canary, compute the metrics.
    Deterministic given (inputs, seed)."""
    ss = np.random.SeedSequence(seed)
    mem_ss, train_ss = ss.spawn(2)
    membership = draw_membership(canaries.m, int(mem_ss.generate_state(1)[0]))
    bits = membership.bits
    base = dataset.without(canaries.origin_indices)
    included = bits == 1
    train_ds = base.with_rows(canaries.features[included], canaries.labels[included])
    cfg = replace(train_cfg, seed=int(train_ss.generate_state(1)[0]))
    model = train(train_ds, arch, cfg, dp_cfg)
    scores = -model.losses_batch(canaries.features, canaries.labels)
    tpr_table = [(float(a), tpr_at_fpr(scores, bits, a)) for a in alphas]
    mech_delta = dp_cfg.delta if dp_cfg is not None else 0.0
    eps_hat, k_plus, k_minus = epsilon_lower_bound(scores, bits, confidence, 0.0)
    gdp_mu, gdp_eps = gdp_estimate(
        scores, bits, confidence, mech_delta if mech_delta > 0 else 1e-5
    )
    return AuditResult(
        scores=scores,
        bits=bits,
        tpr_table=tpr_table,
        eps_hat=eps_hat,
        k_plus=k_plus,
        k_minus=k_minus,
        gdp_mu=gdp_mu,
        gdp_eps=gdp_eps,
        confidence=confidence,
        mechanism_delta=mech_delta,
        seed=seed,
    )
