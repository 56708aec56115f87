"""Edit attacks, the fixed-length baseline, and the experiment harness.

Everything here is seeded: a trial's prompts, messages, and attack positions
all derive deterministically from a base seed and the trial index, so any
A-vs-B comparison (dynamic vs fixed-length, clean vs attacked) runs on
identical inputs per pair.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .coloring import SecretKey, green_mask
from .embed import EmbedConfig, EmbedOutput, WatermarkMessage, embed, generate_plain
from .extract import ExtractConfig, extract, naive_extract
from .sources import LogitsSource, TokenSequence
from .stats import GREEN, RED


@dataclass(frozen=True)
class AttackSpec:
    """Token-level edit: kind is "insert" or "delete", rate a fraction in [0, 1)."""

    kind: str
    rate: float
    rng_seed: int = 0
    mode: str = "uniform"  # insertion token choice: "uniform" or "plausible"

    def __post_init__(self):
        if self.kind not in ("insert", "delete"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"rate must be in [0, 1), got {self.rate}")
        if self.mode not in ("uniform", "plausible"):
            raise ValueError(f"unknown insertion mode {self.mode!r}")


def _attack_rng(spec: AttackSpec) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(spec.rng_seed)))


def insert_attack(ids, spec: AttackSpec, vocab_size: int,
                  source: LogitsSource | None = None) -> tuple[int, ...]:
    """Insert round(rate * len) tokens at seeded uniform positions.

    Uniform mode draws token ids uniformly from the vocabulary; plausible
    mode samples each insertion from the source's distribution at its
    insertion point, which is much harder to spot by color statistics.
    """
    ids = [int(t) for t in ids]
    n_insert = round(spec.rate * len(ids))
    if n_insert == 0:
        return tuple(ids)
    if spec.mode == "plausible" and source is None:
        raise ValueError("plausible insertion mode needs a source")
    rng = _attack_rng(spec)
    out = list(ids)
    for _ in range(n_insert):
        pos = int(rng.integers(0, len(out) + 1))
        if spec.mode == "uniform" or pos == 0:
            token = int(rng.integers(0, vocab_size))
        else:
            logits = source.next_logits(out[:pos])
            e = np.exp(logits - logits.max())
            c = np.cumsum(e)
            token = min(int(np.searchsorted(c, rng.random() * c[-1], side="right")),
                        vocab_size - 1)
        out.insert(pos, token)
    return tuple(out)


def delete_attack(ids, spec: AttackSpec) -> tuple[int, ...]:
    """Remove round(rate * len) tokens at seeded uniform positions."""
    ids = [int(t) for t in ids]
    n_delete = round(spec.rate * len(ids))
    if n_delete >= len(ids):
        raise ValueError("attack would delete the entire text")
    if n_delete == 0:
        return tuple(ids)
    rng = _attack_rng(spec)
    drop = set(rng.choice(len(ids), size=n_delete, replace=False).tolist())
    return tuple(t for i, t in enumerate(ids) if i not in drop)


def apply_attack(ids, spec: AttackSpec, vocab_size: int,
                 source: LogitsSource | None = None) -> tuple[int, ...]:
    if spec.kind == "insert":
        return insert_attack(ids, spec, vocab_size, source)
    return delete_attack(ids, spec)


def fixed_length_embed(prompt, message: WatermarkMessage, seg_len: int,
                       cfg: EmbedConfig, source: LogitsSource,
                       key: SecretKey) -> EmbedOutput:
    """Baseline embedding: same biasing machinery, segments of exactly seg_len.

    Embedding fails (bits_embedded < K, flagged on the output) whenever the
    budget is shorter than K * seg_len, which is precisely the failure mode
    the adaptive rule exists to avoid.
    """
    if seg_len < 1:
        raise ValueError("seg_len must be >= 1")
    return embed(prompt, message, cfg, source, key, _fixed_segment_len=seg_len)


def fixed_length_extract(ids, k: int, seg_len: int, key: SecretKey,
                         vocab_size: int) -> tuple[int, ...]:
    """Baseline extraction: majority color of each fixed-size block.

    Position 0 has no in-text predecessor and is skipped; blocks beyond the
    text read as 0.
    """
    ids = [int(t) for t in ids]
    bits = []
    for i in range(k):
        start, end = i * seg_len, (i + 1) * seg_len
        g = r = 0
        for t in range(max(start, 1), min(end, len(ids))):
            mask = green_mask(key, ids[t - 1], vocab_size)
            if mask[ids[t]]:
                g += 1
            else:
                r += 1
        bits.append(GREEN if g > r else RED)
    return tuple(bits)


@dataclass
class EvalReport:
    """Per-trial records plus aggregates; aggregates always recomputable."""

    records: list[dict] = field(default_factory=list)
    aggregates: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    GROUP_KEY = "group"

    @staticmethod
    def aggregate(records: list[dict]) -> list[dict]:
        """Group records by their `group` field and average the numeric metrics."""
        groups: dict = {}
        for rec in records:
            groups.setdefault(rec[EvalReport.GROUP_KEY], []).append(rec)
        out = []
        for name in groups:
            rows = groups[name]
            agg = {"group": name, "trials": len(rows)}
            numeric = [k for k, v in rows[0].items()
                       if isinstance(v, (int, float)) and not isinstance(v, bool)]
            for k in numeric:
                agg[f"mean_{k}"] = float(np.mean([r[k] for r in rows]))
            out.append(agg)
        return out

    def finalize(self) -> "EvalReport":
        self.aggregates = self.aggregate(self.records)
        return self

    def write_csv(self, records_path, aggregates_path) -> None:
        for path, rows in ((records_path, self.records),
                           (aggregates_path, self.aggregates)):
            if not rows:
                continue
            with open(path, "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
                writer.writeheader()
                writer.writerows(rows)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"format": "segmark.report/1", "meta": self.meta,
                       "aggregates": self.aggregates, "records": self.records},
                      fh, indent=2)


def derive_seed(base: int, *parts: int) -> int:
    """Stable per-trial seed from a base seed and index parts."""
    h = np.uint64(base & (2**64 - 1))
    for p in parts:
        h = np.uint64((int(h) * 0x9E3779B97F4A7C15 + p + 1) & (2**64 - 1))
    return int(h)


def _random_prompt(rng: np.random.Generator, vocab_size: int, length: int = 8):
    return [int(t) for t in rng.integers(0, vocab_size, size=length)]


def _random_message(rng: np.random.Generator, k: int) -> WatermarkMessage:
    return WatermarkMessage(tuple(int(b) for b in rng.integers(0, 2, size=k)))


def bit_accuracy(sent, recovered) -> float:
    sent, recovered = list(sent), list(recovered)
    if len(sent) != len(recovered):
        raise ValueError("bit vectors differ in length")
    return sum(int(a == b) for a, b in zip(sent, recovered)) / len(sent)


def run_trial(alpha: float, trial_seed: int, message_bits: int, max_tokens: int,
              make_source, key: SecretKey, embed_template: EmbedConfig,
              extract_template: ExtractConfig, group,
              attack: AttackSpec | None = None) -> dict:
    """One embed/extract round trip (optionally through an attack)."""
    rng = np.random.Generator(np.random.Philox(key=np.uint64(trial_seed)))
    source = make_source()
    prompt = _random_prompt(rng, source.vocab_size)
    message = _random_message(rng, message_bits)
    ecfg = replace(embed_template, alpha=alpha, lam=None,
                   sampling_seed=derive_seed(trial_seed, 1))

    t0 = time.perf_counter()
    out = embed(prompt, message, ecfg, source, key)
    embed_time = time.perf_counter() - t0

    text = list(out.text.generated)
    if attack is not None:
        text = list(apply_attack(text, replace(attack, rng_seed=derive_seed(trial_seed, 2)),
                                 source.vocab_size, source))

    xcfg = replace(extract_template, k=message_bits, alpha=alpha, lam=None,
                   delta=ecfg.delta)
    t0 = time.perf_counter()
    result = extract(text, xcfg, source, key)
    extract_time = time.perf_counter() - t0

    acc = bit_accuracy(message.bits, result.bits)
    tokens_used = out.boundaries[-1] if out.complete else len(out.text.generated)
    record = {
        "group": group,
        "alpha": alpha,
        "trial_seed": trial_seed,
        "bits_sent": message_bits,
        "bits_embedded": out.bits_embedded,
        "complete": bool(out.complete),
        "bit_accuracy": acc,
        "exact_match": float(tuple(message.bits) == tuple(result.bits)),
        "tokens_used": int(tokens_used),
        "tokens_per_bit": tokens_used / max(out.bits_embedded, 1),
        "embed_seconds": embed_time,
        "extract_seconds": extract_time,
    }
    source.close()
    return record


def capacity_sweep(alphas, trials: int, make_source, key: SecretKey,
                   embed_template: EmbedConfig, extract_template: ExtractConfig,
                   message_bits: int = 8, max_tokens: int = 200,
                   base_seed: int = 0) -> EvalReport:
    """Detection rate and tokens/bit across a confidence grid, paired seeds."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    report = EvalReport(meta={"alphas": list(alphas), "trials": trials,
                              "message_bits": message_bits,
                              "max_tokens": max_tokens, "base_seed": base_seed})
    for ai, alpha in enumerate(alphas):
        for trial in range(trials):
            # same trial -> same prompt/message/seeds across every alpha
            seed = derive_seed(base_seed, trial)
            rec = run_trial(alpha, seed, message_bits, max_tokens, make_source,
                            key, replace(embed_template, max_tokens=max_tokens),
                            extract_template, group=alpha)
            rec["alpha_index"] = ai
            report.records.append(rec)
    return report.finalize()


def attack_eval(attacks, trials: int, make_source, key: SecretKey,
                embed_template: EmbedConfig, extract_template: ExtractConfig,
                message_bits: int = 8, max_tokens: int = 200,
                base_seed: int = 0) -> EvalReport:
    """Paired DP-vs-naive extraction accuracy under each attack spec."""
    report = EvalReport(meta={"attacks": [f"{a.kind}:{a.rate}" for a in attacks],
                              "trials": trials, "message_bits": message_bits,
                              "max_tokens": max_tokens, "base_seed": base_seed})
    for attack in attacks:
        group = f"{attack.kind}:{attack.rate}"
        for trial in range(trials):
            seed = derive_seed(base_seed, trial)
            rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
            source = make_source()
            prompt = _random_prompt(rng, source.vocab_size)
            message = _random_message(rng, message_bits)
            ecfg = replace(embed_template, max_tokens=max_tokens,
                           sampling_seed=derive_seed(seed, 1))
            out = embed(prompt, message, ecfg, source, key)
            attacked = apply_attack(out.text.generated,
                                    replace(attack, rng_seed=derive_seed(seed, 2)),
                                    source.vocab_size, source)
            xcfg = replace(extract_template, k=message_bits, alpha=ecfg.alpha,
                           delta=ecfg.delta)
            dp_bits = extract(attacked, xcfg, source, key).bits
            nv_bits = naive_extract(attacked, xcfg, source, key)
            report.records.append({
                "group": group,
                "kind": attack.kind,
                "rate": attack.rate,
                "trial_seed": seed,
                "complete": bool(out.complete),
                "dp_accuracy": bit_accuracy(message.bits, dp_bits),
                "naive_accuracy": bit_accuracy(message.bits, nv_bits),
                "attacked_len": len(attacked),
            })
            source.close()
    return report.finalize()


def perplexity(text: TokenSequence, eval_source: LogitsSource) -> float:
    """exp(mean negative log-likelihood) of the generated tokens.

    Each position is scored under teacher forcing with the full preceding
    context (prompt included). Zero-probability tokens surface as an error;
    smoothed sources never produce them.
    """
    ids = list(text.ids)
    if len(ids) < 2:
        raise ValueError("perplexity needs at least two tokens")
    start = max(text.prompt_len, 1)
    nll = 0.0
    count = 0
    for t in range(start, len(ids)):
        logits = eval_source.next_logits(ids[:t])
        e = np.exp(logits - logits.max())
        p = float(e[ids[t]] / e.sum())
        if p <= 0.0:
            raise ValueError(f"token at position {t} has zero probability")
        nll -= math.log(p)
        count += 1
    return math.exp(nll / count)


@dataclass(frozen=True)
class TimingSpec:
    n_tokens: int = 200
    trials: int = 9
    warmup: int = 2
    message_bits: int = 8
    extract_lengths: tuple[int, ...] = ()


def timing_harness(spec: TimingSpec, make_source, key: SecretKey,
                   embed_template: EmbedConfig,
                   extract_template: ExtractConfig, base_seed: int = 0) -> dict:
    """Median wall times for raw generation, watermarked generation, extraction.

    Warm-up iterations run the same workloads but are excluded from the
    medians (they also populate the partition caches, mirroring steady-state
    service behavior).
    """
    if spec.trials < 1:
        return {"raw_generate": [], "watermarked_generate": [], "extract": {}}
    source = make_source()
    raw_times, wm_times = [], []
    extract_times: dict[int, list[float]] = {n: [] for n in spec.extract_lengths}
    rng = np.random.Generator(np.random.Philox(key=np.uint64(base_seed)))

    for i in range(spec.warmup + spec.trials):
        seed = derive_seed(base_seed, i)
        prompt = _random_prompt(rng, source.vocab_size)
        message = _random_message(rng, spec.message_bits)
        ecfg = replace(embed_template, max_tokens=spec.n_tokens, sampling_seed=seed)

        t0 = time.perf_counter()
        generate_plain(prompt, source, spec.n_tokens, sampling_seed=seed,
                       repetition_penalty=ecfg.repetition_penalty)
        raw = time.perf_counter() - t0

        t0 = time.perf_counter()
        out = embed(prompt, message, ecfg, source, key)
        wm = time.perf_counter() - t0

        if i >= spec.warmup:
            raw_times.append(raw)
            wm_times.append(wm)

        for n in spec.extract_lengths:
            ecfg_n = replace(ecfg, max_tokens=n)
            text = embed(prompt, message, ecfg_n, source, key).text.generated
            xcfg = replace(extract_template, k=spec.message_bits,
                           alpha=ecfg.alpha, delta=ecfg.delta)
            t0 = time.perf_counter()
            extract(text, xcfg, source, key)
            dt = time.perf_counter() - t0
            if i >= spec.warmup:
                extract_times[n].append(dt)

    source.close()
    result = {
        "raw_generate_median": float(np.median(raw_times)),
        "watermarked_generate_median": float(np.median(wm_times)),
        "raw_generate": raw_times,
        "watermarked_generate": wm_times,
        "extract_medians": {n: float(np.median(v)) for n, v in extract_times.items()},
        "extract": {n: v for n, v in extract_times.items()},
    }
    result["overhead_ratio"] = (result["watermarked_generate_median"]
                                / result["raw_generate_median"])
    return result


def loglog_slope(ns, times) -> float:
    """Least-squares slope of log(time) against log(n)."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(times, dtype=float))
    x = x - x.mean()
    return float(np.dot(x, y - y.mean()) / np.dot(x, x))
