"""Fused per-token kernels for the generation hot path.

Generation runs one of these once per token. sample_plain is the raw
sampler; wm_step additionally applies the color bias, recovers the unbiased
green mass, forms the desired-color expectation from the open segment's
priors, pushes the segment statistics (Kahan-compensated, mirroring
SegmentStats), and evaluates the confidence boundary. Keeping all of that in
one compiled pass is what holds the watermarking overhead to a few percent
of raw generation.

Both samplers consume exactly one uniform per token and pick the first index
whose cumulative unnormalized weight strictly exceeds u * total, so a plain
run and a delta=0 watermarked run with the same seed emit identical tokens.

The boundary comparison duplicated here must match stats.boundary_core; the
trace-replay tests enforce that agreement.

numba is optional: the fallbacks implement identical semantics in numpy.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


# state vector layout for wm_step
MU, VAR, MU_C, VAR_C, N, G, R = range(7)


if HAVE_NUMBA:

    @njit(cache=True)
    def sample_plain(logits, u):
        n = logits.shape[0]
        m = logits[0]
        for i in range(1, n):
            if logits[i] > m:
                m = logits[i]
        e = np.empty(n)
        total = 0.0
        for i in range(n):
            e[i] = np.exp(logits[i] - m)
            total += e[i]
        target = u * total
        c = 0.0
        for i in range(n):
            c += e[i]
            if c > target:
                return i
        return n - 1

    @njit(cache=True)
    def wm_step(logits, green_f, delta, bias_green, u, lam, ed, z_alpha,
                literal, push_stats, state):
        """One watermarked generation step; mutates `state` in place.

        Returns (token, p_green, e_desired, color, boundary_satisfied).
        """
        n = logits.shape[0]
        if bias_green:
            d_g, d_r = delta, 0.0
        else:
            d_g, d_r = 0.0, delta
        b = np.empty(n)
        m = logits[0] + d_g * green_f[0] + d_r * (1.0 - green_f[0])
        b[0] = m
        for i in range(1, n):
            v = logits[i] + d_g * green_f[i] + d_r * (1.0 - green_f[i])
            b[i] = v
            if v > m:
                m = v
        total = 0.0
        green = 0.0
        for i in range(n):
            e = np.exp(b[i] - m)
            b[i] = e
            total += e
            green += e * green_f[i]
        target = u * total
        c = 0.0
        token = n - 1
        for i in range(n):
            c += b[i]
            if c > target:
                token = i
                break

        pgb = green / total
        if delta == 0.0:
            p_green = pgb
        elif bias_green:
            q = pgb / ed
            p_green = q / (q + 1.0 - pgb)
        else:
            q = ed * pgb
            p_green = q / (q + 1.0 - pgb)

        bg = ed * p_green / (ed * p_green + 1.0 - p_green)
        p_red = 1.0 - p_green
        br = ed * p_red / (ed * p_red + 1.0 - p_red)
        e_des = ((state[G] + lam) * bg + (state[R] + lam) * br) / (state[N] + 2.0 * lam)

        color = 1 if green_f[token] == 1.0 else 0
        if push_stats:
            y = e_des - state[MU_C]
            t = state[MU] + y
            state[MU_C] = (t - state[MU]) - y
            state[MU] = t
            y = (e_des - e_des * e_des) - state[VAR_C]
            t = state[VAR] + y
            state[VAR_C] = (t - state[VAR]) - y
            state[VAR] = t
            state[N] += 1.0
            if color == 1:
                state[G] += 1.0
            else:
                state[R] += 1.0

        closed = False
        n_seg = int(state[N])
        if n_seg > 0:
            if state[VAR] <= 0.0:
                closed = state[MU] - n_seg / 2.0 > 0.0
            else:
                margin = state[MU] - (n_seg // 2 + 0.5)
                threshold = z_alpha * math.sqrt(state[VAR])
                closed = margin <= threshold if literal else margin >= threshold
        return token, p_green, e_des, color, closed

else:

    def sample_plain(logits, u):
        e = np.exp(logits - logits.max())
        c = np.cumsum(e)
        i = int(np.searchsorted(c, u * c[-1], side="right"))
        return min(i, c.shape[0] - 1)

    def wm_step(logits, green_f, delta, bias_green, u, lam, ed, z_alpha,
                literal, push_stats, state):
        d_g, d_r = (delta, 0.0) if bias_green else (0.0, delta)
        b = logits + d_g * green_f + d_r * (1.0 - green_f)
        e = np.exp(b - b.max())
        c = np.cumsum(e)
        total = c[-1]
        token = min(int(np.searchsorted(c, u * total, side="right")), len(c) - 1)

        pgb = float(np.dot(e, green_f)) / total
        if delta == 0.0:
            p_green = pgb
        elif bias_green:
            q = pgb / ed
            p_green = q / (q + 1.0 - pgb)
        else:
            q = ed * pgb
            p_green = q / (q + 1.0 - pgb)

        bg = ed * p_green / (ed * p_green + 1.0 - p_green)
        p_red = 1.0 - p_green
        br = ed * p_red / (ed * p_red + 1.0 - p_red)
        e_des = ((state[G] + lam) * bg + (state[R] + lam) * br) / (state[N] + 2.0 * lam)

        color = 1 if green_f[token] == 1.0 else 0
        if push_stats:
            y = e_des - state[MU_C]
            t = state[MU] + y
            state[MU_C] = (t - state[MU]) - y
            state[MU] = t
            y = (e_des - e_des * e_des) - state[VAR_C]
            t = state[VAR] + y
            state[VAR_C] = (t - state[VAR]) - y
            state[VAR] = t
            state[N] += 1.0
            if color == 1:
                state[G] += 1.0
            else:
                state[R] += 1.0

        closed = False
        n_seg = int(state[N])
        if n_seg > 0:
            if state[VAR] <= 0.0:
                closed = state[MU] - n_seg / 2.0 > 0.0
            else:
                margin = state[MU] - (n_seg // 2 + 0.5)
                threshold = z_alpha * math.sqrt(state[VAR])
                closed = margin <= threshold if literal else margin >= threshold
        return token, p_green, e_des, color, closed


def warmup() -> None:
    """Trigger JIT compilation outside any timed region."""
    logits = np.zeros(8)
    green = np.zeros(8)
    green[:4] = 1.0
    state = np.zeros(7)
    sample_plain(logits, 0.5)
    wm_step(logits, green, 1.0, True, 0.5, 1.5, math.e, 1.28, False, True, state)
