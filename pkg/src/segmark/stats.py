"""Closed-form probability math for segment watermarking.

Everything here is a pure function of its arguments: color masses under a
softmax, the effect of an additive logit bias on those masses, prior-smoothed
expectations of drawing the desired color, running segment statistics with
their normal approximation, the confidence boundary test that closes a
segment, and the two extraction losses that the segmentation DP minimizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

GREEN = 1
RED = 0

# Segments where every step is deterministic have zero variance; their
# f statistic is capped so DP totals stay finite.
F_CAP = 1e6

_NORMAL = NormalDist()
_SQRT2 = math.sqrt(2.0)

ORIENT_MAJORITY = "majority"
ORIENT_LITERAL = "literal"


def green_mass(logits, green) -> float:
    """Probability mass of the green tokens under softmax(logits).

    `green` is a boolean mask over the vocabulary or a ColorPartition.
    Computed with max-logit subtraction so large logits cannot overflow.
    """
    z = np.asarray(logits, dtype=np.float64)
    mask = green if isinstance(green, np.ndarray) else green.as_mask(z.shape[0])
    e = np.exp(z - z.max())
    return float(np.dot(e, mask) / e.sum())


def biased_mass(p, delta):
    """Color mass after adding bias `delta` to that color's logits.

    Closed form e^d*p / (e^d*p + 1-p); accepts scalars or arrays.
    Monotone increasing in both arguments, with fixed points at p=0 and p=1.
    """
    ed = np.exp(delta) if isinstance(p, np.ndarray) else math.exp(delta)
    return ed * p / (ed * p + (1.0 - p))


def prior_estimate(green_count: int, red_count: int, lam: float) -> tuple[float, float]:
    """Smoothed prior that the current bit is 1 (resp. 0), from observed colors."""
    if green_count < 0 or red_count < 0:
        raise ValueError("color counts must be non-negative")
    if lam <= 0:
        raise ValueError("smoothing lambda must be positive")
    denom = green_count + red_count + 2.0 * lam
    return (green_count + lam) / denom, (red_count + lam) / denom


def expected_desired(p_green, delta, p1, p0):
    """Pre-sampling probability that the next token lands on the desired color.

    Marginalizes the unknown bit: with prior p1 the desired color is green
    (biased green mass), with p0 it is red (biased red mass).
    """
    return p1 * biased_mass(p_green, delta) + p0 * biased_mass(1.0 - p_green, delta)


@dataclass(frozen=True)
class StepStat:
    """Per-token record: unbiased green mass, desired-color expectation, sampled color."""

    p_green: float
    expected_desired: float
    color: int


@dataclass
class SegmentStats:
    """Running statistics of one open segment.

    mu and var are the mean and variance of the desired-color count under the
    per-step expectations pushed so far (Poisson-binomial moments). Sums use
    Kahan compensation so multi-thousand-token segments keep full precision.
    """

    mu: float = 0.0
    var: float = 0.0
    n: int = 0
    green_count: int = 0
    red_count: int = 0
    _mu_c: float = field(default=0.0, repr=False)
    _var_c: float = field(default=0.0, repr=False)

    def push(self, step: StepStat) -> None:
        e = step.expected_desired
        if not 0.0 <= e <= 1.0:
            raise ValueError(f"expected_desired out of [0,1]: {e}")
        y = e - self._mu_c
        t = self.mu + y
        self._mu_c = (t - self.mu) - y
        self.mu = t
        v = (e - e * e) - self._var_c
        t = self.var + v
        self._var_c = (t - self.var) - v
        self.var = t
        self.n += 1
        if step.color == GREEN:
            self.green_count += 1
        else:
            self.red_count += 1

    def copy(self) -> "SegmentStats":
        return SegmentStats(self.mu, self.var, self.n, self.green_count,
                            self.red_count, self._mu_c, self._var_c)


def segment_stats_push(stats: SegmentStats, step: StepStat) -> SegmentStats:
    """Functional push: returns a new SegmentStats with `step` accumulated."""
    out = stats.copy()
    out.push(step)
    return out


def normal_quantile(q: float) -> float:
    """Inverse standard normal CDF."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile argument must be in (0,1), got {q}")
    return _NORMAL.inv_cdf(q)


def normal_cdf(z: float) -> float:
    """Standard normal CDF via erf."""
    return 0.5 * (1.0 + math.erf(z / _SQRT2))


def default_lambda(alpha: float) -> float:
    """Default prior smoothing: alpha times the squared confidence quantile."""
    return alpha * normal_quantile(alpha) ** 2


@dataclass
class ConfidenceConfig:
    """Shared knobs for the boundary test and the extraction losses.

    alpha is the confidence that a closed segment's majority matches its bit.
    inequality_orientation selects how the boundary inequality is read:
    "majority" requires the desired-color proportion to exceed 1/2 with
    confidence alpha, which is the orientation under which higher alpha
    demands longer segments; "literal" is the mirrored reading, kept only
    for comparison.
    """

    alpha: float = 0.9
    delta: float = 2.0
    lam: float | None = None
    beta: float = 3.0
    eps_s: float = 0.0
    eps_d: float = 0.0
    inequality_orientation: str = ORIENT_MAJORITY

    def __post_init__(self):
        if not 0.5 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0.5, 1), got {self.alpha}")
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if self.lam is None:
            self.lam = default_lambda(self.alpha)
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.inequality_orientation not in (ORIENT_MAJORITY, ORIENT_LITERAL):
            raise ValueError(f"unknown inequality orientation "
                             f"{self.inequality_orientation!r}")

    @property
    def z_alpha(self) -> float:
        return normal_quantile(self.alpha)


def boundary_core(mu: float, var: float, n: int, z_alpha: float, literal: bool) -> bool:
    """The raw boundary comparison, shared with the embedding hot loop.

    A strict majority needs X >= floor(n/2) + 1 desired tokens, so the
    normal-approximation margin is taken against that count's continuity
    point rather than n/2; for even n this accounts for the tie atom at
    X = n/2, whose mass the plain n/2 margin would wrongly credit toward
    the majority. Zero-variance segments use the exact comparison mu > n/2.
    """
    if var <= 0.0:
        return mu - n / 2.0 > 0.0
    margin = mu - (n // 2 + 0.5)
    threshold = z_alpha * math.sqrt(var)
    return margin <= threshold if literal else margin >= threshold


def boundary_satisfied(stats: SegmentStats, cfg: ConfidenceConfig) -> bool:
    """True when the segment holds one bit at confidence alpha.

    Tests whether the desired-color proportion exceeds 1/2 with confidence
    alpha under the normal approximation: (mu - n/2) >= z_alpha * sqrt(var).
    """
    if stats.n < 1:
        raise ValueError("boundary test needs at least one step")
    return boundary_core(stats.mu, stats.var, stats.n, normal_quantile(cfg.alpha),
                         cfg.inequality_orientation == ORIENT_LITERAL)


def f_statistic(stats: SegmentStats) -> float:
    """Squared boundary margin over variance: (mu - n/2)^2 / var.

    Returns +inf when var == 0 (degenerate segment); loss functions cap it.
    """
    margin = stats.mu - stats.n / 2.0
    if stats.var <= 0.0:
        return math.inf
    return margin * margin / stats.var


def seg_loss(stats: SegmentStats, cfg: ConfidenceConfig) -> float:
    """Squared residual between the f statistic and the boundary threshold."""
    f = min(f_statistic(stats), F_CAP)
    z2 = cfg.z_alpha ** 2
    resid = f - z2 - cfg.eps_s
    return resid * resid


def color_loss(stats: SegmentStats, cfg: ConfidenceConfig) -> float:
    """Deviation of the minority-color fraction from the eps_d offset."""
    if stats.n < 1:
        raise ValueError("color loss needs at least one token")
    minority = min(stats.green_count, stats.red_count) / stats.n
    return abs(minority - cfg.eps_d)


def total_loss(segments, cfg: ConfidenceConfig) -> float:
    """Weighted sum beta * seg_loss + color_loss over all segments."""
    if not segments:
        raise ValueError("total loss needs at least one segment")
    return sum(cfg.beta * seg_loss(s, cfg) + color_loss(s, cfg) for s in segments)
