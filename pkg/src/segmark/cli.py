"""Command-line interface.

Subcommands: embed, extract, attack, sweep, train-ngram, probe, timing.
Settings come from an INI config file (sections [source], [embed],
[extract], [attack], [sweep], [timing]) with flags overriding individual
keys; every key is listed in --help of the matching subcommand. Unknown
config keys are rejected outright.

Exit codes (stable, scriptable):
  0  success
  1  unexpected error / IO failure
  2  validation error (bad config, bad flags, malformed input)
  3  capacity shortfall: the message did not fit in max_tokens
  4  protocol/key/vocabulary mismatch between document and configuration
  5  text infeasible for the requested number of segments
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

from .attacks import (AttackSpec, EvalReport, TimingSpec, apply_attack,
                      attack_eval, bit_accuracy, capacity_sweep, timing_harness)
from .coloring import SecretKey
from .documents import (EMBED_FORMAT, TEXT_FORMAT, ManifestMismatch, dump_json,
                        embed_output_to_doc, load_json, result_to_doc, text_doc,
                        verify_manifest)
from .embed import EmbedConfig, WatermarkMessage, capacity_probe, embed
from .extract import ExtractConfig, InfeasibleSegmentation, extract
from .sources import SourceError, make_source, save_ngram, train_ngram

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VALIDATION = 2
EXIT_CAPACITY = 3
EXIT_PROTOCOL = 4
EXIT_INFEASIBLE = 5

KNOWN_KEYS = {
    "source": {"kind", "vocab_size", "concentration", "seed", "path", "command"},
    "embed": {"delta", "alpha", "lambda", "max_tokens", "sampling_seed",
              "repetition_penalty", "inequality_orientation"},
    "extract": {"k", "alpha", "delta", "lambda", "beta", "max_epsilon_iters",
                "epsilon_tol", "min_segment_len", "padding_penalty",
                "repetition_penalty", "inequality_orientation"},
    "attack": {"kind", "rate", "seed", "mode"},
    "sweep": {"alphas", "trials", "message_bits", "max_tokens", "base_seed",
              "attacks"},
    "timing": {"tokens", "trials", "warmup", "message_bits", "extract_lengths",
               "base_seed"},
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


def load_config(path: str | None) -> dict[str, dict[str, str]]:
    """INI file -> nested dict, rejecting unknown sections or keys."""
    if path is None:
        return {}
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise CliError(f"config file not found: {path}")
    out: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section not in KNOWN_KEYS:
            raise CliError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in KNOWN_KEYS[section]:
                raise CliError(f"unknown config key [{section}] {key}")
        out[section] = dict(parser[section])
    return out


def cfg_get(cfg: dict, section: str, key: str, cast, default, flag_value=None):
    """Precedence: explicit flag > config file > default."""
    if flag_value is not None:
        return flag_value
    raw = cfg.get(section, {}).get(key)
    if raw is None or raw == "":
        return default
    try:
        return cast(raw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad config value [{section}] {key} = {raw!r}: {exc}")


def load_key(args) -> SecretKey:
    if getattr(args, "key_hex", None):
        return SecretKey.from_hex(args.key_hex)
    path = getattr(args, "key_file", None)
    if not path:
        raise CliError("a key is required: pass --key-hex or --key-file")
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read key file {path}: {exc}")
    text = raw.decode("ascii", errors="ignore").strip()
    if text and len(text) % 2 == 0 and all(c in "0123456789abcdefABCDEF" for c in text):
        return SecretKey.from_hex(text)
    return SecretKey(raw)


def build_source(cfg: dict, args):
    kind = cfg_get(cfg, "source", "kind", str, None, getattr(args, "source_kind", None))
    if kind is None:
        raise CliError("source kind is required ([source] kind or --source-kind)")
    params: dict = {}
    if kind == "synthetic":
        params["vocab_size"] = cfg_get(cfg, "source", "vocab_size", int, None,
                                       getattr(args, "vocab_size", None))
        if params["vocab_size"] is None:
            raise CliError("synthetic source needs [source] vocab_size")
        conc = cfg_get(cfg, "source", "concentration", str, "8.0",
                       getattr(args, "concentration", None))
        params["concentration"] = conc
        params["seed"] = cfg_get(cfg, "source", "seed", int, 0,
                                 getattr(args, "source_seed", None))
    elif kind in ("ngram", "trace"):
        params["path"] = cfg_get(cfg, "source", "path", str, None,
                                 getattr(args, "source_path", None))
        if params["path"] is None:
            raise CliError(f"{kind} source needs [source] path")
    elif kind == "bridge":
        params["command"] = cfg_get(cfg, "source", "command", str, None,
                                    getattr(args, "bridge_command", None))
        if params["command"] is None:
            raise CliError("bridge source needs [source] command")
    else:
        raise CliError(f"unknown source kind {kind!r}")
    try:
        return make_source({"kind": kind, **params})
    except (OSError, ValueError, SourceError) as exc:
        raise CliError(f"cannot build source: {exc}")


def build_embed_config(cfg: dict, args) -> EmbedConfig:
    lam = cfg_get(cfg, "embed", "lambda", float, None, getattr(args, "lam", None))
    try:
        return EmbedConfig(
            delta=cfg_get(cfg, "embed", "delta", float, 2.0, getattr(args, "delta", None)),
            alpha=cfg_get(cfg, "embed", "alpha", float, 0.9, getattr(args, "alpha", None)),
            lam=lam,
            max_tokens=cfg_get(cfg, "embed", "max_tokens", int, 200,
                               getattr(args, "max_tokens", None)),
            sampling_seed=cfg_get(cfg, "embed", "sampling_seed", int, 0,
                                  getattr(args, "sampling_seed", None)),
            repetition_penalty=cfg_get(cfg, "embed", "repetition_penalty", float, 1.0,
                                       getattr(args, "repetition_penalty", None)),
            inequality_orientation=cfg_get(cfg, "embed", "inequality_orientation",
                                           str, "majority",
                                           getattr(args, "orientation", None)))
    except ValueError as exc:
        raise CliError(str(exc))


def build_extract_config(cfg: dict, args, k: int, manifest: dict | None) -> ExtractConfig:
    """Extraction defaults follow the document manifest when flags are unset."""
    man = manifest or {}

    def from_manifest(key, fallback):
        return man.get(key, fallback)

    try:
        return ExtractConfig(
            k=k,
            alpha=cfg_get(cfg, "extract", "alpha", float,
                          from_manifest("alpha", 0.9), getattr(args, "alpha", None)),
            delta=cfg_get(cfg, "extract", "delta", float,
                          from_manifest("delta", 2.0), getattr(args, "delta", None)),
            lam=cfg_get(cfg, "extract", "lambda", float,
                        from_manifest("lambda", None), getattr(args, "lam", None)),
            beta=cfg_get(cfg, "extract", "beta", float, 3.0,
                         getattr(args, "beta", None)),
            max_epsilon_iters=cfg_get(cfg, "extract", "max_epsilon_iters", int, 10,
                                      getattr(args, "max_epsilon_iters", None)),
            epsilon_tol=cfg_get(cfg, "extract", "epsilon_tol", float, 1e-3,
                                getattr(args, "epsilon_tol", None)),
            min_segment_len=cfg_get(cfg, "extract", "min_segment_len", int, 1,
                                    getattr(args, "min_segment_len", None)),
            padding_penalty=cfg_get(cfg, "extract", "padding_penalty", float, 14.0,
                                    getattr(args, "padding_penalty", None)),
            repetition_penalty=cfg_get(cfg, "extract", "repetition_penalty", float,
                                       from_manifest("repetition_penalty", 1.0),
                                       getattr(args, "repetition_penalty", None)),
            inequality_orientation=cfg_get(cfg, "extract", "inequality_orientation",
                                           str,
                                           from_manifest("inequality_orientation",
                                                         "majority"),
                                           getattr(args, "orientation", None)))
    except ValueError as exc:
        raise CliError(str(exc))


def parse_message(args) -> WatermarkMessage:
    if getattr(args, "message", None):
        try:
            return WatermarkMessage.from_string(args.message)
        except ValueError as exc:
            raise CliError(str(exc))
    if getattr(args, "message_hex", None):
        bits = getattr(args, "message_bits", None)
        if bits is None:
            raise CliError("--message-hex needs --message-bits for the exact length")
        try:
            return WatermarkMessage.from_hex(args.message_hex, bits)
        except ValueError as exc:
            raise CliError(str(exc))
    raise CliError("a message is required: --message or --message-hex")


def read_text_input(path, key: SecretKey, vocab_size: int) -> tuple[list[int], dict | None]:
    """Token ids plus manifest (when present) from any supported input doc."""
    try:
        doc = load_json(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read text input {path}: {exc}")
    if isinstance(doc, list):
        return [int(t) for t in doc], None
    fmt = doc.get("format")
    if fmt == EMBED_FORMAT:
        ids = [int(t) for t in doc["generated_ids"]]
        manifest = doc.get("manifest")
    elif fmt == TEXT_FORMAT:
        ids = [int(t) for t in doc["ids"]]
        manifest = doc.get("manifest")
    else:
        raise CliError(f"unrecognized text input format {fmt!r}")
    if manifest is not None:
        try:
            verify_manifest(manifest, key=key, vocab_size=vocab_size)
        except ManifestMismatch as exc:
            raise CliError(str(exc), code=EXIT_PROTOCOL)
    return ids, manifest


def parse_prompt(args) -> list[int]:
    raw = getattr(args, "prompt", None)
    if not raw:
        return []
    try:
        return [int(t) for t in raw.replace(",", " ").split()]
    except ValueError:
        raise CliError(f"prompt must be whitespace/comma separated ids: {raw!r}")


def cmd_embed(args) -> int:
    cfg = load_config(args.config)
    key = load_key(args)
    message = parse_message(args)
    ecfg = build_embed_config(cfg, args)
    with build_source(cfg, args) as source:
        out = embed(parse_prompt(args), message, ecfg, source, key)
    dump_json(embed_output_to_doc(out, include_trace=not args.no_trace), args.out)
    print(f"embedded {out.bits_embedded}/{len(message)} bits in "
          f"{len(out.text.generated)} tokens -> {args.out}")
    if not out.complete:
        print("capacity shortfall: message did not fit", file=sys.stderr)
        return EXIT_CAPACITY
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = load_config(args.config)
    key = load_key(args)
    with build_source(cfg, args) as source:
        ids, manifest = read_text_input(args.input, key, source.vocab_size)
        k = cfg_get(cfg, "extract", "k", int, None, args.bits)
        if k is None:
            raise CliError("message length is required: --bits or [extract] k")
        xcfg = build_extract_config(cfg, args, k, manifest)
        try:
            result = extract(ids, xcfg, source, key)
        except InfeasibleSegmentation as exc:
            raise CliError(str(exc), code=EXIT_INFEASIBLE)
    dump_json(result_to_doc(result), args.out)
    print(f"bits: {''.join(str(b) for b in result.bits)}  "
          f"(loss {result.total_loss:.4f}, {result.iterations} iterations) "
          f"-> {args.out}")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = load_config(args.config)
    key = load_key(args)
    try:
        doc = load_json(args.input)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read embed document {args.input}: {exc}")
    if doc.get("format") != EMBED_FORMAT:
        raise CliError("attack input must be an embed document")
    spec = AttackSpec(
        kind=cfg_get(cfg, "attack", "kind", str, "delete", args.kind),
        rate=cfg_get(cfg, "attack", "rate", float, 0.05, args.rate),
        rng_seed=cfg_get(cfg, "attack", "seed", int, 0, args.seed),
        mode=cfg_get(cfg, "attack", "mode", str, "uniform", args.mode))
    with build_source(cfg, args) as source:
        manifest = doc.get("manifest")
        if manifest is not None:
            try:
                verify_manifest(manifest, key=key, vocab_size=source.vocab_size)
            except ManifestMismatch as exc:
                raise CliError(str(exc), code=EXIT_PROTOCOL)
        ids = [int(t) for t in doc["generated_ids"]]
        attacked = list(apply_attack(ids, spec, source.vocab_size, source))
        dump_json(text_doc(attacked, source.vocab_size, manifest,
                           attack={"kind": spec.kind, "rate": spec.rate,
                                   "seed": spec.rng_seed, "mode": spec.mode}),
                  args.out)
        message = WatermarkMessage.from_string(doc["message_bits"])
        xcfg = build_extract_config(cfg, args, len(message), manifest)
        try:
            result = extract(attacked, xcfg, source, key)
        except InfeasibleSegmentation as exc:
            raise CliError(str(exc), code=EXIT_INFEASIBLE)
    dump_json(result_to_doc(result), args.result)
    acc = bit_accuracy(message.bits, result.bits)
    print(f"{spec.kind} rate={spec.rate}: {len(ids)} -> {len(attacked)} tokens, "
          f"bit accuracy {acc:.3f} -> {args.out}, {args.result}")
    return EXIT_OK


def _parse_attack_list(text: str) -> list[AttackSpec]:
    specs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        kind, _, rate = part.partition(":")
        specs.append(AttackSpec(kind=kind.strip(), rate=float(rate)))
    return specs


def cmd_sweep(args) -> int:
    from .report import save_attack_figure, save_capacity_figure

    cfg = load_config(args.config)
    key = load_key(args)
    alphas_text = cfg_get(cfg, "sweep", "alphas", str, "0.8,0.85,0.9,0.95,0.99",
                          args.alphas)
    alphas = [float(a) for a in alphas_text.split(",") if a.strip()]
    trials = cfg_get(cfg, "sweep", "trials", int, 20, args.trials)
    message_bits = cfg_get(cfg, "sweep", "message_bits", int, 8, args.message_bits)
    max_tokens = cfg_get(cfg, "sweep", "max_tokens", int, 200, args.max_tokens)
    base_seed = cfg_get(cfg, "sweep", "base_seed", int, 0, args.base_seed)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    ecfg = build_embed_config(cfg, args)
    xcfg = build_extract_config(cfg, args, message_bits, None)
    source = build_source(cfg, args)
    try:
        report = capacity_sweep(alphas, trials, lambda: source, key, ecfg, xcfg,
                                message_bits=message_bits, max_tokens=max_tokens,
                                base_seed=base_seed)
        report.write_csv(outdir / "sweep_records.csv", outdir / "sweep_aggregates.csv")
        report.write_json(outdir / "sweep_report.json")
        save_capacity_figure(report, outdir / "capacity.png")
        print(f"sweep over alphas {alphas}: {len(report.records)} trials "
              f"-> {outdir}/sweep_*.csv, capacity.png")

        attacks_text = cfg_get(cfg, "sweep", "attacks", str, "", args.attacks)
        if attacks_text:
            specs = _parse_attack_list(attacks_text)
            areport = attack_eval(specs, trials, lambda: source, key, ecfg, xcfg,
                                  message_bits=message_bits, max_tokens=max_tokens,
                                  base_seed=base_seed)
            areport.write_csv(outdir / "attack_records.csv",
                              outdir / "attack_aggregates.csv")
            areport.write_json(outdir / "attack_report.json")
            save_attack_figure(areport, outdir / "attacks.png")
            print(f"attack sweep {attacks_text}: -> {outdir}/attack_*.csv, attacks.png")
    finally:
        source.close()
    return EXIT_OK


def cmd_train_ngram(args) -> int:
    try:
        raw = Path(args.corpus).read_text()
    except OSError as exc:
        raise CliError(f"cannot read corpus {args.corpus}: {exc}")
    try:
        ids = [int(t) for t in raw.replace(",", " ").split()]
    except ValueError:
        raise CliError("corpus must contain whitespace/comma separated token ids")
    try:
        source = train_ngram(ids, args.order, args.smoothing, args.vocab_size)
    except ValueError as exc:
        raise CliError(str(exc))
    save_ngram(source, args.out)
    print(f"trained order-{args.order} model on {len(ids)} tokens "
          f"({len(source.counts)} contexts) -> {args.out}")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = load_config(args.config)
    key = load_key(args)
    ecfg = build_embed_config(cfg, args)
    with build_source(cfg, args) as source:
        bits = capacity_probe(parse_prompt(args), ecfg, source, key, args.horizon)
    print(f"estimated capacity within {args.horizon} tokens: {bits} bits")
    return EXIT_OK


def cmd_timing(args) -> int:
    from .report import save_timing_figure

    cfg = load_config(args.config)
    key = load_key(args)
    lengths_text = cfg_get(cfg, "timing", "extract_lengths", str, "", args.extract_lengths)
    lengths = tuple(int(n) for n in lengths_text.split(",") if n.strip())
    spec = TimingSpec(
        n_tokens=cfg_get(cfg, "timing", "tokens", int, 200, args.tokens),
        trials=cfg_get(cfg, "timing", "trials", int, 9, args.trials),
        warmup=cfg_get(cfg, "timing", "warmup", int, 2, args.warmup),
        message_bits=cfg_get(cfg, "timing", "message_bits", int, 8, None),
        extract_lengths=lengths)
    ecfg = build_embed_config(cfg, args)
    xcfg = build_extract_config(cfg, args, spec.message_bits, None)
    source = build_source(cfg, args)
    try:
        timing = timing_harness(spec, lambda: source, key, ecfg, xcfg,
                                base_seed=cfg_get(cfg, "timing", "base_seed", int, 0,
                                                  args.base_seed))
    finally:
        source.close()
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    dump_json({"format": "segmark.timing/1", **{k: v for k, v in timing.items()
                                                if k != "extract"}},
              outdir / "timing.json")
    save_timing_figure(timing, outdir / "timing.png")
    print(f"overhead ratio {timing['overhead_ratio']:.3f} -> {outdir}/timing.json")
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser, extract_opts: bool = False) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--key-hex", help="secret key as hex text")
    p.add_argument("--key-file", help="secret key file (raw bytes or hex text)")
    p.add_argument("--source-kind", choices=["synthetic", "ngram", "trace", "bridge"],
                   help="overrides [source] kind")
    p.add_argument("--vocab-size", type=int, help="overrides [source] vocab_size")
    p.add_argument("--concentration", help="overrides [source] concentration "
                                           "(float or 'inf')")
    p.add_argument("--source-seed", type=int, help="overrides [source] seed")
    p.add_argument("--source-path", help="overrides [source] path (ngram/trace)")
    p.add_argument("--bridge-command", help="overrides [source] command")
    p.add_argument("--alpha", type=float, help="confidence level in (0.5, 1)")
    p.add_argument("--delta", type=float, help="logit bias >= 0")
    p.add_argument("--lam", type=float, help="prior smoothing lambda")
    p.add_argument("--repetition-penalty", type=float)
    p.add_argument("--orientation", choices=["majority", "literal"],
                   help="boundary inequality orientation")
    if extract_opts:
        p.add_argument("--beta", type=float, help="segmentation loss weight")
        p.add_argument("--max-epsilon-iters", type=int)
        p.add_argument("--epsilon-tol", type=float)
        p.add_argument("--min-segment-len", type=int)
        p.add_argument("--padding-penalty", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segmark",
        description="Multi-bit text watermarking with capacity-adaptive "
                    "segmentation and edit-robust extraction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("embed", help="embed a message into generated tokens")
    _add_common(p)
    p.add_argument("--message", help="payload as an ASCII bit string, e.g. 1011")
    p.add_argument("--message-hex", help="payload as hex (needs --message-bits)")
    p.add_argument("--message-bits", type=int, help="payload bit length for hex form")
    p.add_argument("--prompt", help="prompt token ids, whitespace or comma separated")
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--sampling-seed", type=int)
    p.add_argument("--no-trace", action="store_true",
                   help="omit the per-step trace from the output document")
    p.add_argument("--out", required=True, help="embed document path (JSON)")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="recover a message from a token document")
    _add_common(p, extract_opts=True)
    p.add_argument("--input", required=True,
                   help="embed document, text document, or JSON id list")
    p.add_argument("--bits", type=int, help="message length K")
    p.add_argument("--out", required=True, help="extraction result path (JSON)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("attack", help="edit an embed output and re-extract")
    _add_common(p, extract_opts=True)
    p.add_argument("--input", required=True, help="embed document")
    p.add_argument("--kind", choices=["insert", "delete"])
    p.add_argument("--rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["uniform", "plausible"])
    p.add_argument("--out", required=True, help="attacked text document path")
    p.add_argument("--result", required=True, help="extraction result path")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="capacity/accuracy sweep over alpha grid")
    _add_common(p, extract_opts=True)
    p.add_argument("--alphas", help="comma separated alpha grid")
    p.add_argument("--trials", type=int)
    p.add_argument("--message-bits", type=int)
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--base-seed", type=int)
    p.add_argument("--attacks", help="optional attack list, e.g. delete:0.05,insert:0.05")
    p.add_argument("--outdir", required=True, help="report directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train-ngram", help="train an n-gram source from a corpus")
    p.add_argument("--corpus", required=True, help="token id corpus file")
    p.add_argument("--order", type=int, required=True)
    p.add_argument("--smoothing", type=float, default=0.1)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--out", required=True, help="model file path (JSON)")
    p.set_defaults(func=cmd_train_ngram)

    p = sub.add_parser("probe", help="estimate capacity within a token horizon")
    _add_common(p)
    p.add_argument("--prompt", help="prompt token ids")
    p.add_argument("--horizon", type=int, required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("timing", help="measure generation overhead and extraction cost")
    _add_common(p, extract_opts=True)
    p.add_argument("--tokens", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--extract-lengths", help="comma separated text lengths")
    p.add_argument("--base-seed", type=int)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_timing)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (SourceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
