"""Pluggable logits sources.

Embedding and extraction only ever see a `next_logits(context) -> vector`
surface, so the same watermark machinery runs against a synthetic
distribution, an n-gram model, a recorded trace, or a live model behind a
subprocess bridge. All sources are deterministic given their seed/state,
which the whole test and replay story depends on.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import shlex
import subprocess
from dataclasses import dataclass, field

import numpy as np


class SourceError(Exception):
    """Base class for logits-source failures."""


class TraceExhausted(SourceError):
    """A trace source was asked for a step it has no record for."""


class BridgeError(SourceError):
    """The bridge subprocess failed or broke protocol."""


@dataclass(frozen=True)
class Vocabulary:
    """Token id space; surface forms are optional and purely cosmetic."""

    size: int
    tokens: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.size < 4 or self.size % 2 != 0:
            raise ValueError(f"vocabulary size must be even and >= 4, got {self.size}")
        if self.tokens is not None and len(self.tokens) != self.size:
            raise ValueError("token list length does not match size")


@dataclass(frozen=True)
class TokenSequence:
    """Token ids with an optional prompt prefix marked by prompt_len."""

    ids: tuple[int, ...]
    prompt_len: int = 0

    def __post_init__(self):
        if not 0 <= self.prompt_len <= len(self.ids):
            raise ValueError("prompt_len out of range")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def prompt(self) -> tuple[int, ...]:
        return self.ids[: self.prompt_len]

    @property
    def generated(self) -> tuple[int, ...]:
        return self.ids[self.prompt_len:]


@dataclass(frozen=True)
class LogitsSourceDescriptor:
    """Declarative source spec, the form configs and CLIs pass around."""

    kind: str
    parameters: dict = field(default_factory=dict)

    KINDS = ("synthetic", "ngram", "trace", "bridge")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}")


def _check_context(context, vocab_size: int) -> list[int]:
    ids = [int(t) for t in context]
    if not ids:
        raise ValueError("context must be non-empty")
    for t in ids:
        if not 0 <= t < vocab_size:
            raise ValueError(f"context id {t} out of range for |V|={vocab_size}")
    return ids


class LogitsSource:
    """Base source: subclasses implement next_logits over a full context."""

    vocab_size: int

    def next_logits(self, context) -> np.ndarray:
        raise NotImplementedError

    def teacher_force(self, ids) -> list[np.ndarray]:
        """Logits for every position t >= 1, conditioned on ids[:t]."""
        ids = [int(t) for t in ids]
        return [self.next_logits(ids[:t]) for t in range(1, len(ids))]

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def next_logits(source: LogitsSource, context) -> np.ndarray:
    """Validated one-step logits for `context` (full prompt + generated ids)."""
    ids = _check_context(context, source.vocab_size)
    out = source.next_logits(ids)
    if out.shape != (source.vocab_size,):
        raise SourceError(f"source returned shape {out.shape}, "
                          f"expected ({source.vocab_size},)")
    return out


def teacher_force(source: LogitsSource, ids) -> list[np.ndarray]:
    """One logits vector per position t >= 1 of `ids`."""
    seq = [int(t) for t in ids]
    if not seq:
        raise ValueError("text must be non-empty")
    return source.teacher_force(seq)


class SyntheticSource(LogitsSource):
    """Context-hashed categorical distributions with an entropy knob.

    Each context deterministically seeds a Philox stream that draws a
    symmetric-Dirichlet probability vector: small `concentration` piles mass
    onto few tokens (low entropy, watermark-hostile), large values approach
    uniform. concentration=inf short-circuits to exactly uniform logits, and
    a (low, high) pair draws a per-step concentration log-uniformly from
    that range, mimicking text whose predictability varies token to token.
    """

    def __init__(self, vocab_size: int, concentration=8.0, seed: int = 0):
        if vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if isinstance(concentration, (tuple, list)):
            low, high = float(concentration[0]), float(concentration[1])
            if not 0 < low <= high or math.isinf(high):
                raise ValueError(f"bad concentration range {concentration}")
            self.concentration = (low, high)
        else:
            if not (float(concentration) > 0):
                raise ValueError("concentration must be positive")
            self.concentration = float(concentration)
        self.vocab_size = int(vocab_size)
        self.seed = int(seed)
        self._seed_bytes = self.seed.to_bytes(8, "little", signed=True)

    def next_logits(self, context) -> np.ndarray:
        conc = self.concentration
        if isinstance(conc, float) and math.isinf(conc):
            return np.zeros(self.vocab_size)
        data = self._seed_bytes + np.asarray(context, dtype=np.int64).tobytes()
        digest = hashlib.blake2b(data, digest_size=16).digest()
        rng = np.random.Generator(np.random.Philox(key=np.frombuffer(digest, np.uint64)))
        if isinstance(conc, tuple):
            low, high = conc
            conc = math.exp(rng.uniform(math.log(low), math.log(high)))
        g = rng.standard_gamma(conc, self.vocab_size)
        p = g / g.sum()
        # floor keeps logits finite even when a gamma draw underflows to 0
        return np.log(np.maximum(p, 1e-300))


class NgramSource(LogitsSource):
    """Additively smoothed n-gram model over token ids."""

    def __init__(self, vocab_size: int, order: int, smoothing: float,
                 counts: dict[tuple[int, ...], np.ndarray]):
        if order < 1:
            raise ValueError("order must be >= 1")
        if smoothing <= 0:
            raise ValueError("smoothing must be positive")
        self.vocab_size = int(vocab_size)
        self.order = int(order)
        self.smoothing = float(smoothing)
        self.counts = counts
        self._uniform = np.full(vocab_size, -math.log(vocab_size))

    def next_logits(self, context) -> np.ndarray:
        hist = tuple(int(t) for t in context[-(self.order - 1):]) if self.order > 1 else ()
        row = self.counts.get(hist)
        if row is None:
            return self._uniform.copy()
        p = (row + self.smoothing) / (row.sum() + self.smoothing * self.vocab_size)
        return np.log(p)


def train_ngram(corpus, order: int, smoothing: float, vocab_size: int) -> NgramSource:
    """Count n-grams of `corpus` (a token id stream) into an NgramSource."""
    ids = [int(t) for t in corpus]
    if not ids:
        raise ValueError("corpus is empty")
    if order < 1:
        raise ValueError("order must be >= 1")
    if len(ids) <= order:
        raise ValueError(f"corpus length {len(ids)} must exceed order {order}")
    for t in ids:
        if not 0 <= t < vocab_size:
            raise ValueError(f"corpus id {t} out of range for |V|={vocab_size}")
    counts: dict[tuple[int, ...], np.ndarray] = {}
    h = order - 1
    for i in range(h, len(ids)):
        hist = tuple(ids[i - h:i])
        row = counts.get(hist)
        if row is None:
            row = np.zeros(vocab_size)
            counts[hist] = row
        row[ids[i]] += 1
    return NgramSource(vocab_size, order, smoothing, counts)


def save_ngram(source: NgramSource, path) -> None:
    doc = {
        "format": "segmark.ngram/1",
        "vocab_size": source.vocab_size,
        "order": source.order,
        "smoothing": source.smoothing,
        "counts": {
            ",".join(map(str, hist)): {str(i): int(c) for i, c in enumerate(row) if c}
            for hist, row in source.counts.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_ngram(path) -> NgramSource:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "segmark.ngram/1":
        raise ValueError(f"not an ngram source file: {path}")
    vocab_size = int(doc["vocab_size"])
    counts: dict[tuple[int, ...], np.ndarray] = {}
    for hist_text, sparse in doc["counts"].items():
        hist = tuple(int(x) for x in hist_text.split(",")) if hist_text else ()
        row = np.zeros(vocab_size)
        for tok, c in sparse.items():
            row[int(tok)] = float(c)
        counts[hist] = row
    return NgramSource(vocab_size, int(doc["order"]), float(doc["smoothing"]), counts)


TRACE_FORMAT = "segmark.trace/1"


def write_trace(path, vocab_size: int, arrays, start_context_len: int = 1) -> None:
    """Record per-step logits, one line per step, keyed by context length.

    Floats are rendered with 17 significant digits so the replay is
    bit-exact.
    """
    arrays = list(arrays)
    with open(path, "w") as fh:
        header = {"format": TRACE_FORMAT, "vocab_size": int(vocab_size),
                  "count": len(arrays)}
        fh.write(json.dumps(header) + "\n")
        for i, arr in enumerate(arrays):
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != (vocab_size,):
                raise ValueError(f"trace record {i} has shape {arr.shape}")
            vals = " ".join(format(v, ".17g") for v in arr)
            fh.write(f"{start_context_len + i} {vals}\n")


def read_trace(path) -> tuple[int, dict[int, np.ndarray]]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != TRACE_FORMAT:
            raise ValueError(f"not a trace file: {path}")
        vocab_size = int(header["vocab_size"])
        records: dict[int, np.ndarray] = {}
        for line in fh:
            if not line.strip():
                continue
            parts = line.split()
            ctx_len = int(parts[0])
            arr = np.array([float(v) for v in parts[1:]])
            if arr.shape != (vocab_size,):
                raise ValueError(f"trace record for context {ctx_len} has "
                                 f"length {arr.shape[0]}, expected {vocab_size}")
            records[ctx_len] = arr
    return vocab_size, records


class TraceSource(LogitsSource):
    """Replays recorded logits, keyed by context length."""

    def __init__(self, vocab_size: int, records: dict[int, np.ndarray]):
        self.vocab_size = int(vocab_size)
        self.records = records

    @classmethod
    def from_file(cls, path) -> "TraceSource":
        vocab_size, records = read_trace(path)
        return cls(vocab_size, records)

    def next_logits(self, context) -> np.ndarray:
        rec = self.records.get(len(context))
        if rec is None:
            raise TraceExhausted(f"no trace record for context length {len(context)}")
        return rec


def encode_f32(arr) -> str:
    """Little-endian float32 array as base64 text (bridge wire format)."""
    return base64.b64encode(np.asarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_f32(text: str, n: int) -> np.ndarray:
    raw = base64.b64decode(text)
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.shape != (n,):
        raise BridgeError(f"decoded array length {arr.shape[0]}, expected {n}")
    return arr.astype(np.float64)


BRIDGE_PROTOCOL = "bridge/1"


class BridgeSource(LogitsSource):
    """Client for a line-delimited stdio logits server.

    One JSON request per line, one JSON response per line. Logits arrive as
    base64 float32, which bounds line length for large vocabularies. The
    subprocess is started lazily and shut down via close() or the context
    manager.
    """

    def __init__(self, command):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self._proc: subprocess.Popen | None = None
        self.vocab_size = 0
        self.model = ""

    def _ensure_started(self) -> None:
        if self._proc is not None:
            return
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                stderr=subprocess.PIPE, text=True, bufsize=1)
        except OSError as exc:
            raise BridgeError(f"cannot start bridge {self.command}: {exc}") from exc
        hello = self._request({"op": "hello"})
        self.vocab_size = int(hello["vocab_size"])
        self.model = str(hello.get("model", ""))
        if hello.get("protocol") != BRIDGE_PROTOCOL:
            raise BridgeError(f"bridge speaks {hello.get('protocol')!r}, "
                              f"client expects {BRIDGE_PROTOCOL!r}")

    def _request(self, obj: dict) -> dict:
        proc = self._proc
        try:
            proc.stdin.write(json.dumps(obj) + "\n")
            proc.stdin.flush()
            line = proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise BridgeError(f"bridge I/O failed: {exc}") from exc
        if not line:
            err = proc.stderr.read() if proc.stderr else ""
            raise BridgeError(f"bridge closed its output; stderr: {err[-500:]}")
        try:
            resp = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BridgeError(f"bridge sent non-JSON line: {line[:200]!r}") from exc
        if not resp.get("ok"):
            raise BridgeError(f"bridge error {resp.get('code')}: {resp.get('message')}")
        return resp

    def next_logits(self, context) -> np.ndarray:
        self._ensure_started()
        resp = self._request({"op": "next_logits", "ids": [int(t) for t in context]})
        return decode_f32(resp["arrays"][0], self.vocab_size)

    def teacher_force(self, ids) -> list[np.ndarray]:
        self._ensure_started()
        ids = [int(t) for t in ids]
        if len(ids) < 2:
            return []
        resp = self._request({"op": "teacher_force", "ids": ids})
        arrays = [decode_f32(a, self.vocab_size) for a in resp["arrays"]]
        if len(arrays) != len(ids) - 1:
            raise BridgeError(f"teacher_force returned {len(arrays)} arrays "
                              f"for {len(ids)} ids")
        return arrays

    def close(self) -> None:
        if self._proc is None:
            return
        proc, self._proc = self._proc, None
        try:
            proc.stdin.write(json.dumps({"op": "shutdown"}) + "\n")
            proc.stdin.flush()
        except (BrokenPipeError, OSError):
            pass
        try:
            proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            proc.kill()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def apply_repetition_penalty(logits: np.ndarray, context, penalty: float) -> np.ndarray:
    """Damp logits of tokens already present in the context.

    Positive logits are divided by the penalty, negative ones multiplied, so
    repeated tokens always lose probability. penalty=1 is the identity.
    """
    if penalty < 1.0:
        raise ValueError(f"penalty must be >= 1, got {penalty}")
    out = np.array(logits, dtype=np.float64, copy=True)
    if penalty == 1.0:
        return out
    seen = np.unique(np.asarray(context, dtype=np.int64))
    vals = out[seen]
    out[seen] = np.where(vals > 0, vals / penalty, vals * penalty)
    return out


def make_source(descriptor) -> LogitsSource:
    """Build a source from a LogitsSourceDescriptor or equivalent dict."""
    if isinstance(descriptor, dict):
        descriptor = LogitsSourceDescriptor(descriptor["kind"],
                                            {k: v for k, v in descriptor.items()
                                             if k != "kind"})
    p = descriptor.parameters
    if descriptor.kind == "synthetic":
        conc = p.get("concentration", 8.0)
        conc = math.inf if conc in ("inf", "uniform") else float(conc)
        return SyntheticSource(int(p["vocab_size"]), conc, int(p.get("seed", 0)))
    if descriptor.kind == "ngram":
        return load_ngram(p["path"])
    if descriptor.kind == "trace":
        return TraceSource.from_file(p["path"])
    if descriptor.kind == "bridge":
        return BridgeSource(p["command"])
    raise ValueError(f"unknown source kind {descriptor.kind!r}")
