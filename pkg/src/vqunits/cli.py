"""Command-line entry point wiring corpus, training, encoding, and evaluation.

Configuration comes from an optional plain-text key=value file plus repeated
``--set key=value`` overrides; explicit flags win over both.  Every JSON
artifact embeds the effective config hash, the seed, and the package
version, and all writes are atomic, so interrupted runs never leave partial
corpora, checkpoints, or reports behind.

Exit codes: 0 ok, 1 usage/argument errors, 2 I/O or format errors,
3 numeric failures (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields

from . import VERSION_STRING
from . import eval as evalmod
from . import models as modelsmod
from .autograd import NumericError
from .corpus import GeneratorSpec, generate_corpus, load_corpus, write_corpus
from .io import (FormatError, config_fingerprint, write_features, write_json,
                 read_json)

ENV_OUT_DIR = "VQUNITS_OUT_DIR"


class UsageError(Exception):
    pass


def default_out_dir() -> str:
    return os.environ.get(ENV_OUT_DIR, ".")


# ---------------------------------------------------------------------------
# key=value configuration
# ---------------------------------------------------------------------------

def parse_config_file(path) -> dict[str, str]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def collect_config(args) -> dict[str, str]:
    cfg = {}
    if getattr(args, "config", None):
        cfg.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = str(args.seed)
    return cfg


def _coerce(text: str, like):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(int(v) for v in text.split(",") if v)
    return text


def apply_namespace(obj, cfg: dict[str, str], namespace: str):
    """Overwrite dataclass fields from `namespace.field` config keys."""
    for f in fields(obj):
        key = f"{namespace}.{f.name}"
        if key in cfg:
            current = getattr(obj, f.name)
            try:
                setattr(obj, f.name, _coerce(cfg[key], current))
            except ValueError as e:
                raise UsageError(f"bad value for {key}: {e}") from None
    return obj


def build_generator_spec(cfg: dict[str, str]) -> GeneratorSpec:
    spec = GeneratorSpec()
    apply_namespace(spec.features, cfg, "features")
    apply_namespace(spec, cfg, "corpus")
    if "seed" in cfg:
        spec.seed = int(cfg["seed"])
    spec.validate()
    return spec


@dataclass
class RunConfig:
    """Resolved invocation: paths checked up front, config hash recorded."""

    subcommand: str
    options: dict
    seed: int
    config_hash: str

    @classmethod
    def resolve(cls, args, cfg: dict[str, str], input_paths=()) -> "RunConfig":
        for path in input_paths:
            if path and not os.path.exists(path):
                raise FileNotFoundError(f"input path does not exist: {path}")
        seed = int(cfg.get("seed", "0"))
        stamp = dict(cfg)
        stamp["subcommand"] = args.command
        return cls(subcommand=args.command, options=dict(cfg), seed=seed,
                   config_hash=config_fingerprint(stamp))

    def artifact_meta(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed,
                "version": VERSION_STRING}


def write_report(path, run: RunConfig, metric: str, value, **extra) -> None:
    payload = {"metric": metric, "value": value, **run.artifact_meta(), **extra}
    write_json(path, payload)
    print(f"{metric}: {value}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = collect_config(args)
    run = RunConfig.resolve(args, cfg)
    spec = build_generator_spec(cfg)
    os.makedirs(args.out, exist_ok=True)
    for split, count in (("train", args.n_train), ("test", args.n_test)):
        if count <= 0:
            continue
        utts, manifest = generate_corpus(spec, count, split)
        write_corpus(args.out, split, utts, manifest)
        print(f"wrote {count} {split} utterances")
    meta = {"generator_spec": spec.to_dict(), **run.artifact_meta()}
    write_json(os.path.join(args.out, "meta.json"), meta)
    return 0


_MODEL_CHOICES = ("vq-cpc", "vq-vae", "cpc")


def cmd_train(args) -> int:
    cfg = collect_config(args)
    run = RunConfig.resolve(args, cfg, input_paths=[args.corpus])
    utts = load_corpus(args.corpus, "train")
    tcfg = modelsmod.TrainConfig(seed=run.seed)
    sampling = f"{args.sampling}_speaker"

    if args.model in ("vq-cpc", "cpc"):
        mcfg = modelsmod.VqCpcConfig(quantize_enabled=args.model == "vq-cpc",
                                     sampling_mode=sampling, init_seed=run.seed)
        apply_namespace(mcfg, cfg, "model")
        tcfg.schedule = "warmup"
        apply_namespace(tcfg, cfg, "train")
        model = modelsmod.VqCpcModel(mcfg)
        trainer = modelsmod.train_vq_cpc
    else:
        speakers = sorted({u.speaker for u in utts})
        mcfg = modelsmod.VqVaeConfig(speakers=speakers, init_seed=run.seed)
        apply_namespace(mcfg, cfg, "model")
        tcfg.schedule = "halving"
        tcfg.batch_size = 32
        tcfg.segment_frames = 32
        apply_namespace(tcfg, cfg, "train")
        model = modelsmod.VqVaeModel(mcfg)
        trainer = modelsmod.train_vq_vae

    tcfg.checkpoint_path = args.out
    tcfg.metrics_path = args.metrics or (args.out + ".metrics.jsonl")
    model, log = trainer(utts, model, tcfg)
    summary = {"metric": "final_loss", "value": log[-1]["loss"],
               "model": args.model, "sampling": args.sampling,
               "steps": tcfg.steps, **run.artifact_meta()}
    write_json(args.out + ".train.json", summary)
    print(f"trained {args.model} for {tcfg.steps} steps; "
          f"final loss {log[-1]['loss']:.4f}")
    return 0


def cmd_encode(args) -> int:
    cfg = collect_config(args)
    run = RunConfig.resolve(args, cfg, input_paths=[args.ckpt, args.corpus])
    model, _ = modelsmod.load_checkpoint(args.ckpt)
    utts = load_corpus(args.corpus, args.split)
    os.makedirs(args.out, exist_ok=True)
    n_codes = 0
    for utt in utts:
        enc = modelsmod.encode(model, utt.features)
        if enc.codes is None:
            raise UsageError("this checkpoint has no quantizer (cpc ablation); "
                             "no code sequences to write")
        write_features(os.path.join(args.out, f"{utt.utterance_id}.codes.vqau"),
                       enc.codes)
        n_codes += enc.codes.n_frames
    write_json(os.path.join(args.out, "encode.json"),
               {"metric": "encoded_codes", "value": n_codes,
                "n_utterances": len(utts), **run.artifact_meta()})
    print(f"encoded {len(utts)} utterances ({n_codes} codes)")
    return 0


def _default_report(name: str) -> str:
    return os.path.join(default_out_dir(), name)


def cmd_eval_abx(args) -> int:
    cfg = collect_config(args)
    paths = [args.corpus] + ([args.ckpt] if args.rep != "features" else [])
    run = RunConfig.resolve(args, cfg, input_paths=paths)
    utts = load_corpus(args.corpus, args.split)
    if args.rep == "features":
        reps, divisor = evalmod.encode_representations(None, utts, "features")
    else:
        model, _ = modelsmod.load_checkpoint(args.ckpt)
        reps, divisor = evalmod.encode_representations(model, utts, args.rep)
    report = evalmod.abx_error(utts, reps, divisor, rep_tag=args.rep,
                               max_triples=args.cap, seed=run.seed)
    out = args.out or _default_report(f"abx_{args.rep}.json")
    write_report(out, run, "abx_error_percent", report.error_rate,
                 representation=args.rep, n_samples=report.n_triples,
                 split=args.split)
    return 0


def cmd_eval_bitrate(args) -> int:
    cfg = collect_config(args)
    run = RunConfig.resolve(args, cfg, input_paths=[args.ckpt, args.corpus])
    model, _ = modelsmod.load_checkpoint(args.ckpt)
    utts = load_corpus(args.corpus, args.split)
    seqs, duration = [], 0.0
    for utt in utts:
        enc = modelsmod.encode(model, utt.features)
        if enc.codes is None:
            raise UsageError("cpc ablation checkpoints have no discrete codes")
        seqs.append(enc.codes)
        duration += utt.features.n_frames / utt.features.frame_rate_hz
    value = evalmod.bitrate(seqs, duration)
    out = args.out or _default_report("bitrate.json")
    write_report(out, run, "bitrate_bits_per_s", value,
                 n_samples=len(seqs), split=args.split)
    return 0


def cmd_probe_speaker(args) -> int:
    cfg = collect_config(args)
    paths = [args.corpus] + ([args.ckpt] if args.point != "features" else [])
    run = RunConfig.resolve(args, cfg, input_paths=paths)
    utts = load_corpus(args.corpus, args.split)
    model = None
    if args.point != "features":
        model, _ = modelsmod.load_checkpoint(args.ckpt)
    reps, _ = evalmod.encode_representations(model, utts, args.point)
    acc = evalmod.speaker_probe([reps[u.utterance_id] for u in utts],
                                [u.speaker for u in utts],
                                hidden=args.hidden, seed=run.seed)
    out = args.out or _default_report(f"probe_{args.point}.json")
    write_report(out, run, "speaker_probe_accuracy_percent", acc,
                 probe_point=args.point, n_samples=len(utts), split=args.split)
    return 0


def cmd_convert(args) -> int:
    cfg = collect_config(args)
    run = RunConfig.resolve(args, cfg, input_paths=[args.ckpt, args.corpus])
    model, _ = modelsmod.load_checkpoint(args.ckpt)
    if not isinstance(model, modelsmod.VqVaeModel):
        raise UsageError("convert requires a vq-vae checkpoint")
    utts = {u.utterance_id: u for u in load_corpus(args.corpus, args.split)}
    if args.utterance not in utts:
        raise UsageError(f"utterance {args.utterance!r} not in the {args.split} split")
    converted = modelsmod.convert_speaker(model, utts[args.utterance].features,
                                          args.target_speaker)
    write_features(args.out, converted)
    sidecar = {"metric": "converted_frames", "value": converted.n_frames,
               "utterance": args.utterance, "target_speaker": args.target_speaker,
               **run.artifact_meta()}
    write_json(args.out + ".json", sidecar)
    print(f"converted {args.utterance} -> speaker {args.target_speaker}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for name in sorted(os.listdir(args.dir)):
        if not name.endswith(".json"):
            continue
        try:
            payload = read_json(os.path.join(args.dir, name))
        except (OSError, json.JSONDecodeError):
            continue
        if isinstance(payload, dict) and "metric" in payload:
            rows.append({"file": name, "metric": payload["metric"],
                         "value": payload.get("value"),
                         "seed": payload.get("seed"),
                         "config_hash": payload.get("config_hash")})
    if not rows:
        print("no metric files found")
        return 0
    header = ("file", "metric", "value", "seed", "config_hash")
    widths = [max(len(h), max(len(str(r[h])) for r in rows)) for h in header]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        print("  ".join(str(r[h]).ljust(w) for h, w in zip(header, widths)))
    if args.out:
        write_json(args.out, {"rows": rows, "version": VERSION_STRING})
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p, *, seed=True):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    if seed:
        p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vqunits",
        description="Vector-quantized acoustic unit discovery toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=360)
    p.add_argument("--n-test", type=int, default=72)
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--model", choices=_MODEL_CHOICES, required=True)
    p.add_argument("--sampling", choices=("within", "across"), default="within")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="metrics JSONL path")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="emit code sequences for a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("eval-abx", help="ABX phone discrimination")
    p.add_argument("--rep", choices=("code", "pre-quant", "aux", "features"),
                   default="code")
    p.add_argument("--ckpt")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--cap", type=int, default=5000)
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_eval_abx)

    p = sub.add_parser("eval-bitrate", help="bitrate of the discovered codes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_eval_bitrate)

    p = sub.add_parser("probe-speaker", help="speaker probe at a probe point")
    p.add_argument("--point", choices=("code", "pre-quant", "features"),
                   default="code")
    p.add_argument("--ckpt")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_probe_speaker)

    p = sub.add_parser("convert", help="speaker-swap an utterance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--utterance", required=True)
    p.add_argument("--target-speaker", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("report", help="collate JSON metrics into one table")
    p.add_argument("--dir", default=default_out_dir())
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (FormatError, OSError, json.JSONDecodeError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
