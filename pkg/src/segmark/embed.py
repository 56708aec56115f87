"""Watermark embedding.

Generation walks token by token: the previous token keys a green/red split,
the current message bit decides which color's logits receive the bias, a
token is sampled from the renormalized distribution, and the step's
desired-color expectation is pushed into the open segment's running
statistics. The segment closes as soon as the confidence boundary holds, at
which point the next bit takes over. Once every bit has a segment, the
remaining budget is padded with the inverse of the last bit so extraction
can find the message end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._kernels import sample_biased, sample_plain
from .coloring import SecretKey, START_TOKEN, green_mask, protocol_manifest
from .sources import LogitsSource, TokenSequence, apply_repetition_penalty
from .stats import (GREEN, RED, ORIENT_LITERAL, ORIENT_MAJORITY, StepStat,
                    boundary_core, default_lambda, normal_quantile)

MANIFEST_FORMAT = "segmark.manifest/1"


@dataclass(frozen=True)
class WatermarkMessage:
    """The payload: an ordered tuple of bits."""

    bits: tuple[int, ...]

    def __post_init__(self):
        if len(self.bits) < 1:
            raise ValueError("message must contain at least one bit")
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("message bits must be 0 or 1")

    def __len__(self) -> int:
        return len(self.bits)

    @classmethod
    def from_string(cls, text: str) -> "WatermarkMessage":
        text = text.strip()
        if not text or set(text) - {"0", "1"}:
            raise ValueError(f"not a bit string: {text!r}")
        return cls(tuple(int(c) for c in text))

    @classmethod
    def from_hex(cls, text: str, length: int) -> "WatermarkMessage":
        """Hex payload with an explicit bit length (big-endian bit order)."""
        value = int(text, 16)
        if length < 1 or value >= 1 << length:
            raise ValueError(f"hex value does not fit in {length} bits")
        return cls(tuple((value >> (length - 1 - i)) & 1 for i in range(length)))

    def to_string(self) -> str:
        return "".join(str(b) for b in self.bits)


@dataclass
class EmbedConfig:
    delta: float = 2.0
    alpha: float = 0.9
    lam: float | None = None
    max_tokens: int = 200
    sampling_seed: int = 0
    repetition_penalty: float = 1.0
    inequality_orientation: str = ORIENT_MAJORITY

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if not 0.5 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0.5, 1), got {self.alpha}")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.repetition_penalty < 1.0:
            raise ValueError("repetition_penalty must be >= 1")
        if self.lam is None:
            self.lam = default_lambda(self.alpha)
        if self.inequality_orientation not in (ORIENT_MAJORITY, ORIENT_LITERAL):
            raise ValueError(f"unknown inequality orientation "
                             f"{self.inequality_orientation!r}")


@dataclass(frozen=True)
class EmbedOutput:
    """Result of one embedding run.

    boundaries are exclusive end indices into the generated tokens, one per
    embedded bit; padding_start equals the last boundary when surplus tokens
    were padded, and is None when generation ended exactly on the last
    segment (or the message did not fit).
    """

    text: TokenSequence
    message: WatermarkMessage
    boundaries: tuple[int, ...]
    bits_embedded: int
    padding_start: int | None
    trace: tuple[StepStat, ...]
    manifest: dict

    def __post_init__(self):
        if list(self.boundaries) != sorted(set(self.boundaries)):
            raise ValueError("boundaries must be strictly increasing")
        if self.bits_embedded != len(self.boundaries):
            raise ValueError("bits_embedded must equal the boundary count")
        if self.padding_start is not None:
            if not self.boundaries or self.padding_start != self.boundaries[-1]:
                raise ValueError("padding_start must equal the final boundary")
            if self.padding_start >= len(self.text.generated):
                raise ValueError("padding_start beyond generated text")

    @property
    def complete(self) -> bool:
        return self.bits_embedded == len(self.message)


def build_manifest(key: SecretKey, vocab_size: int, cfg: EmbedConfig) -> dict:
    """Everything extraction needs to check compatibility and mirror config."""
    return {
        "format": MANIFEST_FORMAT,
        "protocol": protocol_manifest(),
        "key_fingerprint": key.fingerprint(),
        "vocab_size": int(vocab_size),
        "alpha": cfg.alpha,
        "delta": cfg.delta,
        "lambda": cfg.lam,
        "inequality_orientation": cfg.inequality_orientation,
        "repetition_penalty": cfg.repetition_penalty,
        "sampling_seed": cfg.sampling_seed,
    }


def generate_plain(prompt, source: LogitsSource, max_tokens: int,
                   sampling_seed: int = 0,
                   repetition_penalty: float = 1.0) -> TokenSequence:
    """Unwatermarked reference generation.

    Uses the exact sampling pipeline of embed() minus the watermark ops, so
    an embed run with delta=0 and the same seed reproduces it token for
    token.
    """
    prompt = [int(t) for t in prompt]
    context = list(prompt)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(sampling_seed)))
    for _ in range(max_tokens):
        logits = source.next_logits(context if context else [START_TOKEN])
        if repetition_penalty != 1.0 and context:
            logits = apply_repetition_penalty(logits, context, repetition_penalty)
        token = int(sample_plain(logits, rng.random()))
        context.append(token)
    return TokenSequence(ids=tuple(context), prompt_len=len(prompt))


def embed(prompt, message: WatermarkMessage, cfg: EmbedConfig,
          source: LogitsSource, key: SecretKey,
          _fixed_segment_len: int | None = None) -> EmbedOutput:
    """Generate max_tokens watermarked tokens carrying `message`.

    Deterministic given (cfg.sampling_seed, key, source state). If the token
    budget runs out before every bit has a segment the output is returned
    with bits_embedded < len(message); it is never silently truncated.

    _fixed_segment_len switches the boundary rule from the confidence test to
    fixed-size blocks; it exists for the comparison baseline, not for normal
    use.
    """
    vocab_size = source.vocab_size
    prompt = [int(t) for t in prompt]
    for t in prompt:
        if not 0 <= t < vocab_size:
            raise ValueError(f"prompt id {t} out of range")
    bits = message.bits
    n_bits = len(bits)
    delta = cfg.delta
    lam = cfg.lam
    penalty = cfg.repetition_penalty
    z_alpha = normal_quantile(cfg.alpha)
    literal = cfg.inequality_orientation == ORIENT_LITERAL
    ed = math.exp(delta)
    ed_inv = math.exp(-delta)

    rng = np.random.Generator(np.random.Philox(key=np.uint64(cfg.sampling_seed)))
    context = list(prompt)
    generated: list[int] = []
    raw_trace: list[tuple[float, float, int]] = []
    boundaries: list[int] = []
    padding_start: int | None = None

    # open-segment accumulators (Kahan-compensated sums, as in SegmentStats)
    mu = var = mu_c = var_c = 0.0
    n_seg = g_cnt = r_cnt = 0
    bit_idx = 0
    prev = prompt[-1] if prompt else START_TOKEN
    # per-run cache: prev token -> (bool green mask, float mask)
    masks: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    rand = rng.random

    for step in range(cfg.max_tokens):
        cached = masks.get(prev)
        if cached is None:
            gmask = green_mask(key, prev, vocab_size)
            cached = (gmask, gmask.astype(np.float64))
            masks[prev] = cached
        gmask, gmask_f = cached

        logits = source.next_logits(context if context else [START_TOKEN])
        if penalty != 1.0 and context:
            logits = apply_repetition_penalty(logits, context, penalty)

        bit = bits[bit_idx] if bit_idx < n_bits else 1 - bits[-1]
        if bit == GREEN:
            token, pg_biased = sample_biased(logits, gmask_f, delta, 0.0, rand())
        else:
            token, pg_biased = sample_biased(logits, gmask_f, 0.0, delta, rand())
        token = int(token)

        # undo the bias analytically to recover the unbiased green mass
        if delta == 0.0:
            p_green = pg_biased
        elif bit == GREEN:
            p_green = ed_inv * pg_biased / (ed_inv * pg_biased + 1.0 - pg_biased)
        else:
            p_green = ed * pg_biased / (ed * pg_biased + 1.0 - pg_biased)

        # priors over the open segment's observed colors, then the
        # pre-sampling expectation of drawing the desired color
        denom = n_seg + 2.0 * lam
        bg = ed * p_green / (ed * p_green + 1.0 - p_green)
        p_red = 1.0 - p_green
        br = ed * p_red / (ed * p_red + 1.0 - p_red)
        e_desired = ((g_cnt + lam) * bg + (r_cnt + lam) * br) / denom

        color = GREEN if gmask[token] else RED
        raw_trace.append((p_green, e_desired, color))

        # The first generated token has no in-text predecessor, so extraction
        # can never color it; keeping it out of the boundary statistics makes
        # the embedder and extractor measure segment 1 over identical tokens.
        if step > 0:
            y = e_desired - mu_c
            t = mu + y
            mu_c = (t - mu) - y
            mu = t
            y = (e_desired - e_desired * e_desired) - var_c
            t = var + y
            var_c = (t - var) - y
            var = t
            n_seg += 1
            if color == GREEN:
                g_cnt += 1
            else:
                r_cnt += 1

        generated.append(token)
        context.append(token)
        prev = token

        if bit_idx < n_bits:
            if _fixed_segment_len is None:
                closed = n_seg > 0 and boundary_core(mu, var, n_seg, z_alpha, literal)
            else:
                seg_start = boundaries[-1] if boundaries else 0
                closed = step + 1 - seg_start >= _fixed_segment_len
            if closed:
                boundaries.append(step + 1)
                bit_idx += 1
                mu = var = mu_c = var_c = 0.0
                n_seg = g_cnt = r_cnt = 0

    if bit_idx >= n_bits and boundaries and boundaries[-1] < len(generated):
        padding_start = boundaries[-1]

    text = TokenSequence(ids=tuple(prompt) + tuple(generated), prompt_len=len(prompt))
    return EmbedOutput(
        text=text, message=message, boundaries=tuple(boundaries),
        bits_embedded=len(boundaries), padding_start=padding_start,
        trace=tuple(StepStat(p_green=p, expected_desired=e, color=c)
                    for p, e, c in raw_trace),
        manifest=build_manifest(key, vocab_size, cfg))


def capacity_probe(prompt, cfg: EmbedConfig, source: LogitsSource,
                   key: SecretKey, horizon: int) -> int:
    """Bits embeddable within `horizon` tokens, via an all-ones probe message."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    probe = WatermarkMessage(bits=(1,) * horizon)
    out = embed(prompt, probe, replace(cfg, max_tokens=horizon), source, key)
    return out.bits_embedded
