"""Watermark extraction.

Extraction never trusts the embedding-time boundaries: edits shift tokens,
and replaying the confidence rule on edited text derails. Instead it colors
the text, teacher-forces the source to recover per-position desired-color
expectations, and searches for the k-segment split minimizing the combined
segmentation and color loss with dynamic programming. The loss offsets
eps_s/eps_d are re-estimated from each segmentation and the loop iterates to
convergence; bits are finally read as the majority color of each segment.

Positions are text indices into the (possibly edited) generated tokens.
Position 0 has no in-text predecessor, so it carries no color or expectation
and is excluded from every segment; reported boundaries are exclusive
segment ends in text coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .coloring import SecretKey, green_mask
from .sources import LogitsSource, apply_repetition_penalty
from .stats import (F_CAP, GREEN, RED, ORIENT_LITERAL, ORIENT_MAJORITY,
                    SegmentStats, StepStat, biased_mass, boundary_core,
                    default_lambda, green_mass, normal_quantile)


class InfeasibleSegmentation(ValueError):
    """Text too short to hold k segments at the configured minimum length."""


@dataclass
class ExtractConfig:
    k: int
    alpha: float = 0.9
    delta: float = 2.0
    lam: float | None = None
    beta: float = 3.0
    max_epsilon_iters: int = 10
    epsilon_tol: float = 1e-3
    min_segment_len: int = 1
    padding_penalty: float = 14.0
    repetition_penalty: float = 1.0
    inequality_orientation: str = ORIENT_MAJORITY

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.5 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0.5, 1), got {self.alpha}")
        if self.max_epsilon_iters < 1:
            raise ValueError("max_epsilon_iters must be >= 1")
        if self.epsilon_tol <= 0:
            raise ValueError("epsilon_tol must be positive")
        if self.min_segment_len < 1:
            raise ValueError("min_segment_len must be >= 1")
        if self.lam is None:
            self.lam = default_lambda(self.alpha)
        if self.inequality_orientation not in (ORIENT_MAJORITY, ORIENT_LITERAL):
            raise ValueError(f"unknown inequality orientation "
                             f"{self.inequality_orientation!r}")


@dataclass(frozen=True)
class SegmentReport:
    """Diagnostics for one extracted segment (text coordinates, end exclusive)."""

    start: int
    end: int
    green_count: int
    red_count: int
    f: float
    minority_fraction: float
    seg_loss: float
    color_loss: float


@dataclass(frozen=True)
class ExtractionResult:
    bits: tuple[int, ...]
    segmentation: tuple[int, ...]
    padding_start: int | None
    total_loss: float
    eps_s: float
    eps_d: float
    iterations: int
    per_segment: tuple[SegmentReport, ...]
    loss_history: tuple[float, ...]


def color_text(ids, key: SecretKey, vocab_size: int) -> np.ndarray:
    """Color of each position given its in-text predecessor; position 0 is -1."""
    ids = [int(t) for t in ids]
    if len(ids) < 2:
        raise ValueError("need at least two tokens to color a text")
    colors = np.full(len(ids), -1, dtype=np.int8)
    for t in range(1, len(ids)):
        mask = green_mask(key, ids[t - 1], vocab_size)
        colors[t] = GREEN if mask[ids[t]] else RED
    return colors


def _position_expectations(ids, colors, tf_logits, cfg: ExtractConfig,
                           key: SecretKey, vocab_size: int) -> np.ndarray:
    """Unbiased green mass per position t >= 1 under teacher forcing."""
    n = len(ids)
    pg = np.full(n, np.nan)
    for t in range(1, n):
        logits = tf_logits[t - 1]
        if cfg.repetition_penalty != 1.0:
            logits = apply_repetition_penalty(logits, ids[:t], cfg.repetition_penalty)
        pg[t] = green_mass(logits, green_mask(key, ids[t - 1], vocab_size))
    return pg


class CostMatrix:
    """Per-span f statistics and minority fractions, built once per text.

    Entry [a][b] describes the candidate segment of scoreable positions
    [a, b) (score index i is text position i+1). The actual DP cost folds in
    the eps offsets, which change across iterations, so values() is a cheap
    transform over the precomputed matrices.
    """

    def __init__(self, f: np.ndarray, minority: np.ndarray, green_prefix: np.ndarray,
                 n: int, min_segment_len: int):
        self.f = f
        self.minority = minority
        self.green_prefix = green_prefix
        self.n = n
        self.min_segment_len = min_segment_len

    @classmethod
    def build(cls, colors_s: np.ndarray, pg_s: np.ndarray, delta: float,
              lam: float, min_segment_len: int) -> "CostMatrix":
        m = colors_s.shape[0]
        bg = biased_mass(pg_s, delta)
        br = biased_mass(1.0 - pg_s, delta)
        d = bg - br
        cpre = np.concatenate(([0], np.cumsum(colors_s, dtype=np.int64)))

        idx = np.arange(m)
        span = idx[None, :] - idx[:, None]             # tokens before t within [a, t)
        valid_at = span >= 0
        cnt = cpre[:m][None, :] - cpre[:m][:, None]    # greens in [a, t)
        p1 = (cnt + lam) / (np.maximum(span, 0) + 2.0 * lam)
        e = np.where(valid_at, br[None, :] + p1 * d[None, :], 0.0)
        var_terms = e - e * e

        mu = np.zeros((m + 1, m + 1))
        var = np.zeros((m + 1, m + 1))
        mu[:m, 1:] = np.cumsum(e, axis=1)
        var[:m, 1:] = np.cumsum(var_terms, axis=1)

        a_idx = np.arange(m + 1)[:, None]
        b_idx = np.arange(m + 1)[None, :]
        length = b_idx - a_idx
        g_ab = cpre[None, :] - cpre[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            minority = np.where(length > 0,
                                np.minimum(g_ab, length - g_ab) / np.maximum(length, 1),
                                np.nan)
            margin = mu - length / 2.0
            f = np.where(var > 0.0, margin * margin / np.where(var > 0, var, 1.0),
                         np.inf)
        f[length <= 0] = np.nan
        return cls(f, minority, cpre, m, min_segment_len)

    def values(self, beta: float, z2: float, eps_s: float, eps_d: float) -> np.ndarray:
        """DP cost matrix for the current eps offsets; invalid spans are +inf."""
        resid = np.minimum(self.f, F_CAP) - z2 - eps_s
        cost = beta * resid * resid + np.abs(self.minority - eps_d)
        a_idx = np.arange(self.n + 1)[:, None]
        b_idx = np.arange(self.n + 1)[None, :]
        cost = np.where(b_idx - a_idx >= self.min_segment_len, cost, np.inf)
        return np.nan_to_num(cost, nan=np.inf, posinf=np.inf)

    def span_counts(self, a: int, b: int) -> tuple[int, int]:
        g = int(self.green_prefix[b] - self.green_prefix[a])
        return g, (b - a) - g


def build_costs(ids, colors: np.ndarray, tf_logits, cfg: ExtractConfig,
                key: SecretKey, vocab_size: int) -> CostMatrix:
    """Cost matrix over scoreable positions of `ids` (text positions 1..N-1)."""
    pg = _position_expectations(ids, colors, tf_logits, cfg, key, vocab_size)
    return CostMatrix.build(colors[1:].astype(np.int64), pg[1:], cfg.delta,
                            cfg.lam, cfg.min_segment_len)


def _dp_tables(values: np.ndarray, k: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Min-cost split of [0, b) into t segments for all t <= k, b <= n.

    L[t][b] is the minimal summed cost, prev[t][b] the start of the last
    segment on an optimal path (smallest such start on ties).
    """
    sub = values[: n + 1, : n + 1]
    loss = np.full((k + 1, n + 1), np.inf)
    prev = np.full((k + 1, n + 1), -1, dtype=np.int64)
    loss[0, 0] = 0.0
    for t in range(1, k + 1):
        stacked = loss[t - 1][:, None] + sub
        loss[t] = stacked.min(axis=0)
        arg = stacked.argmin(axis=0)
        prev[t] = np.where(np.isfinite(loss[t]), arg, -1)
    return loss, prev


def _backtrack(prev: np.ndarray, k: int, end: int) -> list[int]:
    bounds = [end]
    b = end
    for t in range(k, 0, -1):
        b = int(prev[t][b])
        if b < 0:
            raise InfeasibleSegmentation("no feasible segmentation")
        bounds.append(b)
    bounds.reverse()
    if bounds[0] != 0:
        raise InfeasibleSegmentation("backtrack did not reach the origin")
    return bounds[1:]


def dp_segment(costs, k: int, n_effective: int,
               min_segment_len: int = 1) -> tuple[list[int], float]:
    """Optimal split of score positions [0, n_effective) into exactly k segments.

    `costs` is a (n+1, n+1) cost array (or a CostMatrix whose values were
    already materialized upstream). Returns exclusive segment ends in score
    coordinates and the minimal total cost. Ties resolve toward the smallest
    last-segment start.
    """
    values = np.asarray(costs, dtype=np.float64)
    if n_effective < k * min_segment_len:
        raise InfeasibleSegmentation(
            f"{n_effective} positions cannot hold {k} segments of length "
            f">= {min_segment_len}")
    loss, prev = _dp_tables(values, k, n_effective)
    total = float(loss[k][n_effective])
    if not math.isfinite(total):
        raise InfeasibleSegmentation("no feasible segmentation")
    return _backtrack(prev, k, n_effective), total


def _majority(green: int, red: int) -> int:
    if green > red:
        return GREEN
    if red > green:
        return RED
    return -1


def _choose_padding(loss: np.ndarray, prev: np.ndarray, cm: CostMatrix, k: int,
                    padding_penalty: float) -> tuple[int, float]:
    """Split point p (score space) minimizing DP loss plus a coherence penalty.

    The suffix [p, n) is credible padding only if its majority color opposes
    the last segment's; otherwise the candidate pays `padding_penalty`.
    p == n means no padding.
    """
    n = cm.n
    best_p, best_total = -1, np.inf
    for p in range(k * cm.min_segment_len, n + 1):
        base = float(loss[k][p])
        if not math.isfinite(base):
            continue
        if p == n:
            pen = 0.0
        else:
            g_pad, r_pad = cm.span_counts(p, n)
            a = int(prev[k][p])
            g_seg, r_seg = cm.span_counts(a, p)
            maj_pad, maj_seg = _majority(g_pad, r_pad), _majority(g_seg, r_seg)
            opposed = maj_pad != -1 and maj_seg != -1 and maj_pad != maj_seg
            pen = 0.0 if opposed else padding_penalty
        total = base + pen
        if total < best_total:
            best_p, best_total = p, total
    if best_p < 0:
        raise InfeasibleSegmentation("no feasible padding split")
    return best_p, best_total


def identify_padding(ids, colors: np.ndarray, tf_logits, cfg: ExtractConfig,
                     key: SecretKey, vocab_size: int) -> int:
    """First padding position in text coordinates; len(ids) means no padding.

    Evaluated at the replay-seeded eps offsets, matching the first
    extraction iteration.
    """
    pg = _position_expectations(ids, colors, tf_logits, cfg, key, vocab_size)
    cm = CostMatrix.build(colors[1:].astype(np.int64), pg[1:], cfg.delta,
                          cfg.lam, cfg.min_segment_len)
    z2 = normal_quantile(cfg.alpha) ** 2
    eps_s, eps_d = _initial_epsilons(colors, pg, cfg)
    values = cm.values(cfg.beta, z2, eps_s, eps_d)
    loss, prev = _dp_tables(values, cfg.k, cm.n)
    p, _ = _choose_padding(loss, prev, cm, cfg.k, cfg.padding_penalty)
    return p + 1


def update_epsilons(segments, cfg: ExtractConfig) -> tuple[float, float]:
    """Averaged residuals of the current segmentation, the next eps offsets."""
    if not segments:
        raise ValueError("need at least one segment")
    z2 = normal_quantile(cfg.alpha) ** 2
    eps_s = float(np.mean([min(s.f, F_CAP) - z2 for s in segments]))
    eps_d = float(np.mean([s.minority_fraction for s in segments]))
    return eps_s, eps_d


def _replay_walk(colors: np.ndarray, pg: np.ndarray, cfg: ExtractConfig):
    """Greedy re-run of the embedding-time boundary rule over the text.

    Yields (start, end, SegmentStats) in text coordinates for every segment
    the rule closes (not capped at k). Used both by the naive baseline and
    to seed the eps offsets for the DP.
    """
    z_alpha = normal_quantile(cfg.alpha)
    literal = cfg.inequality_orientation == ORIENT_LITERAL
    seg = SegmentStats()
    start = 1
    out = []
    for t in range(1, len(colors)):
        denom = seg.n + 2.0 * cfg.lam
        p1 = (seg.green_count + cfg.lam) / denom
        p0 = (seg.red_count + cfg.lam) / denom
        e = p1 * biased_mass(pg[t], cfg.delta) + p0 * biased_mass(1.0 - pg[t], cfg.delta)
        seg.push(StepStat(p_green=pg[t], expected_desired=e, color=int(colors[t])))
        if boundary_core(seg.mu, seg.var, seg.n, z_alpha, literal):
            out.append((start, t + 1, seg))
            seg = SegmentStats()
            start = t + 1
    return out, seg, start


def _initial_epsilons(colors: np.ndarray, pg: np.ndarray,
                      cfg: ExtractConfig) -> tuple[float, float]:
    """Seed eps offsets from the replayed boundary rule.

    The f statistic of a segment closed by the boundary rule overshoots the
    squared quantile by however far the final step jumped past the
    threshold. Starting the DP at eps = 0 therefore biases it toward
    spurious sub-threshold micro-segments; replaying the rule on the text
    estimates the actual overshoot (and minority fraction) the embedder
    produced, which is exactly what the offsets are meant to absorb.
    """
    replayed, _, _ = _replay_walk(colors, pg, cfg)
    if not replayed:
        return 0.0, 0.0
    z2 = normal_quantile(cfg.alpha) ** 2
    fs = []
    ds = []
    for _, _, seg in replayed:
        margin = seg.mu - seg.n / 2.0
        f = (margin * margin / seg.var) if seg.var > 0 else F_CAP
        fs.append(min(f, F_CAP) - z2)
        ds.append(min(seg.green_count, seg.red_count) / seg.n)
    return float(np.mean(fs)), float(np.mean(ds))


def _segment_reports(cm: CostMatrix, bounds: list[int], beta: float, z2: float,
                     eps_s: float, eps_d: float) -> list[SegmentReport]:
    reports = []
    a = 0
    for b in bounds:
        g, r = cm.span_counts(a, b)
        f = float(cm.f[a][b])
        minority = float(cm.minority[a][b])
        resid = min(f, F_CAP) - z2 - eps_s
        reports.append(SegmentReport(
            start=a + 1, end=b + 1, green_count=g, red_count=r, f=f,
            minority_fraction=minority, seg_loss=resid * resid,
            color_loss=abs(minority - eps_d)))
        a = b
    return reports


def extract(ids, cfg: ExtractConfig, source: LogitsSource,
            key: SecretKey) -> ExtractionResult:
    """Recover cfg.k bits from a (possibly edited) token sequence.

    Iterates DP segmentation and eps re-estimation until both offsets move
    less than epsilon_tol or max_epsilon_iters is reached; the reported
    segmentation is the lowest-loss iterate. Bits read as the majority color
    per segment, exact ties as 0.
    """
    ids = [int(t) for t in ids]
    vocab_size = source.vocab_size
    m = len(ids) - 1
    if m < cfg.k * cfg.min_segment_len:
        raise InfeasibleSegmentation(
            f"text with {m} scoreable positions cannot hold {cfg.k} segments")
    colors = color_text(ids, key, vocab_size)
    tf_logits = source.teacher_force(ids)
    pg = _position_expectations(ids, colors, tf_logits, cfg, key, vocab_size)
    cm = CostMatrix.build(colors[1:].astype(np.int64), pg[1:], cfg.delta,
                          cfg.lam, cfg.min_segment_len)
    z2 = normal_quantile(cfg.alpha) ** 2

    eps_s, eps_d = _initial_epsilons(colors, pg, cfg)
    history: list[float] = []
    best = None
    iterations = 0
    for _ in range(cfg.max_epsilon_iters):
        iterations += 1
        values = cm.values(cfg.beta, z2, eps_s, eps_d)
        loss, prev = _dp_tables(values, cfg.k, cm.n)
        p, _ = _choose_padding(loss, prev, cm, cfg.k, cfg.padding_penalty)
        bounds = _backtrack(prev, cfg.k, p)
        base = float(loss[cfg.k][p])
        segments = _segment_reports(cm, bounds, cfg.beta, z2, eps_s, eps_d)
        history.append(base)
        if best is None or base < best[0]:
            best = (base, p, bounds, segments, eps_s, eps_d)
        new_s, new_d = update_epsilons(segments, cfg)
        if abs(new_s - eps_s) < cfg.epsilon_tol and abs(new_d - eps_d) < cfg.epsilon_tol:
            break
        eps_s, eps_d = new_s, new_d

    base, p, bounds, segments, used_s, used_d = best
    bits = tuple(1 if s.green_count > s.red_count else 0 for s in segments)
    return ExtractionResult(
        bits=bits,
        segmentation=tuple(b + 1 for b in bounds),
        padding_start=p + 1 if p < cm.n else None,
        total_loss=base,
        eps_s=used_s,
        eps_d=used_d,
        iterations=iterations,
        per_segment=tuple(segments),
        loss_history=tuple(history))


def naive_extract(ids, cfg: ExtractConfig, source: LogitsSource,
                  key: SecretKey) -> tuple[int, ...]:
    """Baseline that replays the embedding-time boundary rule on the text.

    This is exactly the procedure whose fragility motivates the DP extractor:
    a single insertion or deletion shifts every later boundary. Missing bits
    (rule closed fewer than k segments) are read from the open segment's
    majority, then zero-filled.
    """
    ids = [int(t) for t in ids]
    vocab_size = source.vocab_size
    colors = color_text(ids, key, vocab_size)
    tf_logits = source.teacher_force(ids)
    pg = _position_expectations(ids, colors, tf_logits, cfg, key, vocab_size)
    replayed, open_seg, _ = _replay_walk(colors, pg, cfg)

    bits = [GREEN if seg.green_count > seg.red_count else RED
            for _, _, seg in replayed[: cfg.k]]
    if len(bits) < cfg.k and open_seg.n > 0:
        bits.append(GREEN if open_seg.green_count > open_seg.red_count else RED)
    while len(bits) < cfg.k:
        bits.append(0)
    return tuple(bits[: cfg.k])
