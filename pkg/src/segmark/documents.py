"""Versioned JSON documents for embed outputs, texts, and extraction results.

The embed document carries the manifest (protocol constants, key
fingerprint, config echo) so that extraction can verify it is looking at
output produced under a compatible scheme before recomputing any colors.
"""

from __future__ import annotations

import json

from .coloring import SecretKey, protocol_manifest
from .embed import EmbedOutput, WatermarkMessage
from .extract import ExtractionResult
from .sources import TokenSequence
from .stats import StepStat

EMBED_FORMAT = "segmark.embed/1"
TEXT_FORMAT = "segmark.text/1"
RESULT_FORMAT = "segmark.extract/1"


class ManifestMismatch(ValueError):
    """The document was produced under an incompatible protocol or key."""


def embed_output_to_doc(out: EmbedOutput, include_trace: bool = True) -> dict:
    doc = {
        "format": EMBED_FORMAT,
        "vocab_size": out.manifest["vocab_size"],
        "prompt_ids": list(out.text.prompt),
        "generated_ids": list(out.text.generated),
        "boundaries": list(out.boundaries),
        "padding_start": out.padding_start,
        "bits_embedded": out.bits_embedded,
        "message_bits": out.message.to_string(),
        "complete": out.complete,
        "manifest": out.manifest,
    }
    if include_trace:
        doc["trace"] = [[s.p_green, s.expected_desired, s.color] for s in out.trace]
    return doc


def embed_output_from_doc(doc: dict) -> EmbedOutput:
    if doc.get("format") != EMBED_FORMAT:
        raise ValueError(f"not an embed document (format={doc.get('format')!r})")
    prompt = [int(t) for t in doc["prompt_ids"]]
    generated = [int(t) for t in doc["generated_ids"]]
    trace = tuple(StepStat(p_green=row[0], expected_desired=row[1], color=int(row[2]))
                  for row in doc.get("trace", []))
    return EmbedOutput(
        text=TokenSequence(ids=tuple(prompt + generated), prompt_len=len(prompt)),
        message=WatermarkMessage.from_string(doc["message_bits"]),
        boundaries=tuple(int(b) for b in doc["boundaries"]),
        bits_embedded=int(doc["bits_embedded"]),
        padding_start=doc["padding_start"],
        trace=trace,
        manifest=doc["manifest"])


def text_doc(ids, vocab_size: int, manifest: dict | None,
             attack: dict | None = None) -> dict:
    doc = {"format": TEXT_FORMAT, "vocab_size": int(vocab_size),
           "ids": [int(t) for t in ids]}
    if manifest is not None:
        doc["manifest"] = manifest
    if attack is not None:
        doc["attack"] = attack
    return doc


def result_to_doc(result: ExtractionResult) -> dict:
    return {
        "format": RESULT_FORMAT,
        "bits": "".join(str(b) for b in result.bits),
        "segmentation": list(result.segmentation),
        "padding_start": result.padding_start,
        "total_loss": result.total_loss,
        "eps_s": result.eps_s,
        "eps_d": result.eps_d,
        "iterations": result.iterations,
        "loss_history": list(result.loss_history),
        "per_segment": [{
            "start": s.start, "end": s.end,
            "green_count": s.green_count, "red_count": s.red_count,
            "f": None if s.f != s.f or s.f == float("inf") else s.f,
            "minority_fraction": s.minority_fraction,
            "seg_loss": s.seg_loss, "color_loss": s.color_loss,
        } for s in result.per_segment],
    }


def verify_manifest(manifest: dict, key: SecretKey | None = None,
                    vocab_size: int | None = None) -> None:
    """Refuse to extract under an incompatible protocol, key, or vocabulary."""
    ours = protocol_manifest()
    theirs = manifest.get("protocol", {})
    for field in ("prf", "shuffle", "version"):
        if theirs.get(field) != ours[field]:
            raise ManifestMismatch(
                f"protocol {field} mismatch: document has {theirs.get(field)!r}, "
                f"this build implements {ours[field]!r}")
    if key is not None and manifest.get("key_fingerprint") not in (None, key.fingerprint()):
        raise ManifestMismatch(
            "key fingerprint mismatch: the supplied key is not the one this "
            "document was embedded with")
    if vocab_size is not None and manifest.get("vocab_size") not in (None, vocab_size):
        raise ManifestMismatch(
            f"vocabulary size mismatch: document says {manifest.get('vocab_size')}, "
            f"source provides {vocab_size}")


def load_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def dump_json(doc: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
