"""``eventransact`` command line.

Failures print a single JSON line to stderr, e.g.
``{"error": "config", "message": "...", "path": "$.train.base_lr"}``,
and exit nonzero (2 for usage/config errors, 1 for runtime failures).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .. import _serde
from .._serde import ConfigError
from ..events_io import SynthParams, synth_stream
from ..frames import EncoderConfig, encode_frames, save_frames_dir
from ..gradcheck import finite_difference_check
from ..pipeline import (
    benchmark,
    evaluate,
    load_checkpoint,
    train,
)
from .config import load_run_config, save_run_config
from .manifest import DatasetManifest, ManifestSample, SynthCorpusSpec, build_dvs_manifest, build_synth_manifest

GRADCHECK_TOLERANCE = 1e-4


class CliError(Exception):
    def __init__(self, kind, message, code=1, path=None):
        super().__init__(message)
        self.kind, self.code, self.path = kind, code, path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, code=2)


def worker_count() -> int:
    value = os.environ.get("EVENTRANSACT_THREADS")
    if value is None:
        return os.cpu_count() or 1
    try:
        return max(1, int(value))
    except ValueError:
        raise CliError("usage", f"EVENTRANSACT_THREADS must be an integer, got {value!r}", 2) from None


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2))


def cmd_synth(args) -> int:
    spec = SynthCorpusSpec(
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        params=SynthParams(args.size, args.size, args.duration_usec, args.rate),
    )
    train_m, test_m = build_synth_manifest(spec, args.seed, args.out)
    _write_json(Path(args.out) / "resolved_config.json", {"seed": args.seed, "spec": _serde.to_dict(spec)})
    print(json.dumps({"train": len(train_m.samples), "test": len(test_m.samples), "out": str(args.out)}))
    return 0


def cmd_prepare(args) -> int:
    train_m, test_m = build_dvs_manifest(args.root, args.protocol)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.cache_frames:
        encoder = _serde.from_dict(EncoderConfig, json.loads(Path(args.encoder).read_text())) if args.encoder else EncoderConfig()

        def encode(sample: ManifestSample) -> ManifestSample:
            target = out / "frames" / sample.source_id.replace("#", "_")
            video = encode_frames(sample.load(), encoder, source_id=sample.source_id, label=sample.label)
            save_frames_dir(video, target, encoder)
            return ManifestSample(sample.source_id, str(target), sample.label, "frames", sample.segment, sample.subject_id)

        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            train_m.samples = list(pool.map(encode, train_m.samples))
            test_m.samples = list(pool.map(encode, test_m.samples))
    train_m.save(out / "train.json")
    test_m.save(out / "test.json")
    resolved = {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items() if k not in ("func", "command")}
    _write_json(out / "resolved_config.json", resolved | {"root": str(args.root), "out": str(out)})
    print(json.dumps({"train": len(train_m.samples), "test": len(test_m.samples), "out": str(out)}))
    return 0


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    if config.train_manifest is None:
        raise CliError("config", "train_manifest is required", 2, "$.train_manifest")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_run_config(config, out / "resolved_config.json")
    manifest = DatasetManifest.load(config.train_manifest)
    result = train(manifest, config.model, config.train, out_dir=out, resume=args.resume)
    summary = {"epochs": result.checkpoint.epoch, "checkpoint": str(out / "checkpoint.ckpt")}
    if config.test_manifest:
        report = evaluate(
            result.checkpoint.model,
            DatasetManifest.load(config.test_manifest),
            encoder=config.train.encoder,
            k=config.train.eval_clips,
        )
        (out / "eval.json").write_text(report.to_json())
        summary["top1_accuracy"] = report.top1_accuracy
    print(json.dumps(summary))
    return 0


def _checkpoint(path):
    if not Path(path).exists():
        raise CliError("io", f"checkpoint not found: {path}", 1)
    return load_checkpoint(path)


def cmd_eval(args) -> int:
    ckpt = _checkpoint(args.checkpoint)
    if not Path(args.manifest).exists():
        raise CliError("io", f"manifest not found: {args.manifest}", 1)
    tc = ckpt.train_config
    k = args.clips or tc.eval_clips
    report = evaluate(ckpt.model, DatasetManifest.load(args.manifest), encoder=tc.encoder, k=k)
    text = report.to_json()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _write_json(out.with_name(out.stem + ".config.json"), {
            "checkpoint": str(args.checkpoint),
            "manifest": str(args.manifest),
            "clips": k,
            "train_config": _serde.to_dict(tc),
        })
    print(text)
    return 0


def cmd_bench(args) -> int:
    ckpt = _checkpoint(args.checkpoint)
    tc = ckpt.train_config
    if args.manifest:
        sample = DatasetManifest.load(args.manifest).samples[0].load()
    else:
        sample, _ = synth_stream("translating_bar", SynthParams(), seed=0)
    report = benchmark(ckpt.model, sample, args.trials, encoder=tc.encoder)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_json())
        _write_json(out.with_name(out.stem + ".config.json"), {
            "checkpoint": str(args.checkpoint), "trials": args.trials, "train_config": _serde.to_dict(tc)
        })
    print(report.to_json())
    return 0


def cmd_gradcheck(args) -> int:
    report = finite_difference_check(seed=args.seed, max_coords_per_block=args.max_coords)
    print(f"max_rel_error={report.max_rel_error:.3e} coords={report.coords_checked} seconds={report.seconds:.1f}")
    return 0 if report.max_rel_error <= GRADCHECK_TOLERANCE else 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eventransact", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="build a synthetic corpus")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-per-class", type=int, default=8)
    p.add_argument("--test-per-class", type=int, default=4)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--duration-usec", type=int, default=500_000)
    p.add_argument("--rate", type=float, default=0.02)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="build DVS Gesture manifests")
    p.add_argument("--root", required=True, type=Path)
    p.add_argument("--protocol", choices=["10class", "11class"], default="11class")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--cache-frames", action="store_true")
    p.add_argument("--encoder", help="JSON file with an encoder config for --cache-frames")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--clips", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time preprocessing and forward of one clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-coords", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _report(kind, message, path=None):
    payload = {"error": kind, "message": " ".join(str(message).split())}
    if path is not None:
        payload["path"] = path
    print(json.dumps(payload), file=sys.stderr)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        import torch

        torch.set_num_threads(worker_count())
        return args.func(args)
    except CliError as exc:
        _report(exc.kind, exc, exc.path)
        return exc.code
    except ConfigError as exc:
        _report("config", exc, exc.path)
        return 2
    except FileNotFoundError as exc:
        _report("io", f"file not found: {exc.filename or exc}")
        return 1
    except (ValueError, RuntimeError, OSError) as exc:
        _report(type(exc).__name__, exc)
        return 1


cli = main

if __name__ == "__main__":
    sys.exit(main())
