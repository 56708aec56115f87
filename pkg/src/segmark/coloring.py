"""Keyed green/red vocabulary partitioning.

Each step's partition is a pseudo-random function of (secret key, previous
token): the key and previous token are fed through keyed BLAKE2b, the 128-bit
digest keys a Philox generator, and its permutation of the vocabulary is
split in half. The construction is balanced by definition and recomputable
by anyone holding the key, which is what lets extraction re-color a text
without any embedding-time state.

The PRF and shuffle identifiers below are protocol constants. They are
written into every embed manifest so an extractor can refuse to run against
output produced under an incompatible scheme.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

PRF_NAME = "blake2b128"
SHUFFLE_NAME = "philox4x64-permutation"
PROTOCOL_VERSION = 1

# Previous-token stand-in for the very first generated token when there is
# no prompt. Must match between embedding and any party reproducing colors.
START_TOKEN = 0

GREEN = 1
RED = 0


@dataclass(frozen=True)
class SecretKey:
    """Opaque partitioning key; 16+ bytes recommended."""

    key: bytes

    def __post_init__(self):
        if not self.key:
            raise ValueError("secret key must be non-empty")

    @classmethod
    def from_hex(cls, text: str) -> "SecretKey":
        return cls(bytes.fromhex(text.strip()))

    def fingerprint(self) -> str:
        """Short stable digest, safe to publish in manifests."""
        return hashlib.blake2b(self.key, digest_size=8).hexdigest()


@dataclass(frozen=True)
class ColorPartition:
    green: frozenset
    red: frozenset

    def __post_init__(self):
        if self.green & self.red:
            raise ValueError("green and red lists overlap")
        if len(self.green) != len(self.red):
            raise ValueError("green and red lists must have equal size")

    @property
    def vocab_size(self) -> int:
        return len(self.green) + len(self.red)

    def as_mask(self, vocab_size: int) -> np.ndarray:
        if vocab_size != self.vocab_size:
            raise ValueError("mask size does not match partition")
        mask = np.zeros(vocab_size, dtype=bool)
        mask[list(self.green)] = True
        return mask


def protocol_manifest() -> dict:
    """Constants an extractor must match before trusting recomputed colors."""
    return {"prf": PRF_NAME, "shuffle": SHUFFLE_NAME, "version": PROTOCOL_VERSION}


def _check_args(prev_token: int, vocab_size: int) -> None:
    if vocab_size < 4 or vocab_size % 2 != 0:
        raise ValueError(f"vocab_size must be even and >= 4, got {vocab_size}")
    if not 0 <= prev_token < vocab_size:
        raise ValueError(f"prev_token {prev_token} out of range for |V|={vocab_size}")


@lru_cache(maxsize=1024)
def _green_mask_cached(key: bytes, prev_token: int, vocab_size: int) -> np.ndarray:
    # BLAKE2b keys are capped at 64 bytes; longer keys are pre-digested.
    k = key if len(key) <= 64 else hashlib.blake2b(key).digest()
    data = prev_token.to_bytes(8, "little") + vocab_size.to_bytes(8, "little")
    digest = hashlib.blake2b(data, key=k, digest_size=16).digest()
    words = np.frombuffer(digest, dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=words))
    perm = rng.permutation(vocab_size)
    mask = np.zeros(vocab_size, dtype=bool)
    mask[perm[: vocab_size // 2]] = True
    mask.flags.writeable = False
    return mask


def green_mask(key: SecretKey, prev_token: int, vocab_size: int) -> np.ndarray:
    """Read-only boolean mask of the green tokens for this step. Cached."""
    _check_args(prev_token, vocab_size)
    return _green_mask_cached(key.key, int(prev_token), int(vocab_size))


def partition_for(key: SecretKey, prev_token: int, vocab_size: int) -> ColorPartition:
    """Balanced green/red split of the vocabulary for one step."""
    mask = green_mask(key, prev_token, vocab_size)
    ids = np.arange(vocab_size)
    return ColorPartition(green=frozenset(ids[mask].tolist()),
                          red=frozenset(ids[~mask].tolist()))


def color_of(key: SecretKey, prev_token: int, token: int, vocab_size: int) -> int:
    """Color of `token` when generated after `prev_token` (GREEN=1, RED=0)."""
    if not 0 <= token < vocab_size:
        raise ValueError(f"token {token} out of range for |V|={vocab_size}")
    mask = green_mask(key, prev_token, vocab_size)
    return GREEN if mask[token] else RED
