"""Command-line interface.

Exit codes::

    0  success
    1  generic error (bad arguments, unreadable input, ...)
    2  missing prerequisite (no checkpoint, stage-1 checkpoint absent, untrained model)
    3  payload exceeds capacity
    4  external codec unavailable (MP3)
    5  checkpoint does not match the requested STFT configuration
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_ERROR, EXIT_PREREQ, EXIT_CAPACITY, EXIT_CODEC, EXIT_MISMATCH = range(6)

log = logging.getLogger("tokenmark")


class CliError(Exception):
    def __init__(self, message, code=EXIT_ERROR):
        super().__init__(message)
        self.code = code


def _emit(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


def _load_model(args):
    from . import checkpoint
    from .audio import StftConfig

    path = Path(args.checkpoint)
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}", EXIT_PREREQ)
    stft_overrides = {k: getattr(args, k) for k in ("n_fft", "hop", "win_length")
                      if getattr(args, k, None) is not None}
    if stft_overrides:
        requested = StftConfig(**{**checkpoint.read_config(path)["stft"], **stft_overrides})
        checkpoint.check_stft(path, requested)
    return checkpoint.load(path)


def _corpus(args):
    from .corpus import load_corpus, synthetic_corpus

    if args.corpus:
        return load_corpus(args.corpus)
    return synthetic_corpus(args.synthetic_clips, args.clip_seconds, seed=args.corpus_seed)


# commands ---------------------------------------------------------------------

def cmd_train(args):
    from .training import TrainConfig, train_stage1, train_stage2

    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)
    log_path = args.log or out.with_suffix(".jsonl")
    if args.stage == 1:
        model = train_stage1(_corpus(args), cfg, out_path=out, log_path=log_path)
    else:
        if not args.stage1 or not Path(args.stage1).exists():
            raise CliError("stage-1 checkpoint required", EXIT_PREREQ)
        model = train_stage2(_corpus(args), args.stage1, cfg, out_path=out, log_path=log_path)
    final = model.train_log[-1] if model.train_log else {}
    _emit({"checkpoint": str(out), "log": str(log_path), "stage": args.stage,
           "final": final, "calibration": model.calibration.to_dict() if model.calibration else None})


def cmd_embed(args):
    from .audio import load_wav, save_wav
    from .codec import embed, parse_bits

    model = _load_model(args)
    wave = load_wav(args.input)
    bits = parse_bits(args.bits)
    positions = [int(p) for p in args.positions.split(",")] if args.positions else None
    res = embed(wave, bits, model, positions=positions, ratio=args.ratio, seed=args.seed,
                selector=args.selector)
    save_wav(args.output, res.wave)
    plan_path = args.plan or str(Path(args.output).with_suffix(".plan.json"))
    Path(plan_path).write_text(json.dumps(res.plan.to_dict(), indent=2) + "\n")
    _emit({"output": args.output, "plan": plan_path, "n_bits": int(bits.size),
           "n_frames": res.plan.n_frames, "positions": res.plan.positions.tolist()})


def cmd_detect(args):
    from .audio import load_wav
    from .codec import detect
    from .stats import verdict

    model = _load_model(args)
    res = detect(load_wav(args.input), model, expected_length=args.expected_length,
                 threshold=args.threshold)
    out = res.to_dict()
    if model.calibration is not None:
        out["verdict"] = verdict(res.count, res.n_frames, model.calibration, args.z_threshold).to_dict()
    _emit(out, args.json)


def cmd_ztest(args):
    from .audio import load_wav
    from .codec import detect
    from .stats import DetectorCalibration, verdict

    if args.count is not None:
        if args.frames is None or args.beta is None:
            raise CliError("--count needs --frames and --beta")
        v = verdict(args.count, args.frames, DetectorCalibration(1.0, args.beta, "command line"),
                    args.z_threshold)
    else:
        if not args.input:
            raise CliError("give an input WAV or --count/--frames/--beta")
        model = _load_model(args)
        cal = model.calibration
        if args.beta is not None:
            cal = DetectorCalibration(cal.alpha if cal else 1.0, args.beta, "command line")
        if cal is None:
            raise CliError("checkpoint carries no detector calibration; pass --beta", EXIT_PREREQ)
        res = detect(load_wav(args.input), model, threshold=args.threshold)
        v = verdict(res.count, res.n_frames, cal, args.z_threshold)
    _emit(v.to_dict(), args.json)


def cmd_attack(args):
    from .attacks import DistortionSpec, apply
    from .audio import load_wav, save_wav

    params = {}
    for item in args.param or []:
        key, _, value = item.partition("=")
        if not value:
            raise CliError(f"--param expects key=value, got {item!r}")
        params[key] = float(value)
    spec = DistortionSpec(args.kind, params, args.seed).resolved()
    wave = load_wav(args.input)
    save_wav(args.output, apply(wave, spec))
    spec_path = args.spec or str(Path(args.output).with_suffix(".attack.json"))
    Path(spec_path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    _emit({"output": args.output, "spec": spec.to_dict()})


def cmd_evaluate(args):
    from .attacks import EVAL_KINDS
    from .metrics import run_ai_detection_eval, run_information_hiding_eval

    model = _load_model(args)
    corpus = _corpus(args)
    catalog = tuple(args.catalog.split(",")) if args.catalog else None
    if args.mode == "hiding":
        report = run_information_hiding_eval(corpus, model, bps=args.bps,
                                             catalog=catalog or EVAL_KINDS, seed=args.seed,
                                             oracle=args.oracle)
    else:
        report = run_ai_detection_eval(corpus, model, m=args.ratio, threshold=args.z_threshold,
                                       catalog=catalog or ("NONE",), seed=args.seed)
    paths = report.write(args.out)
    _emit({"report": report.to_dict(), "files": paths})


# parser -----------------------------------------------------------------------

def _model_args(p):
    p.add_argument("--checkpoint", "-c", required=True)
    p.add_argument("--n-fft", type=int, help="expected STFT size; must match the checkpoint")
    p.add_argument("--hop", type=int)
    p.add_argument("--win-length", type=int)


def _corpus_args(p):
    p.add_argument("--corpus", help="folder of WAV files (default: bundled synthetic speech)")
    p.add_argument("--synthetic-clips", type=int, default=64)
    p.add_argument("--clip-seconds", type=float, default=1.0)
    p.add_argument("--corpus-seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="tokenmark", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run stage-1 or stage-2 training")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--config", help="JSON file of TrainConfig fields")
    p.add_argument("--stage1", help="stage-1 checkpoint (stage 2 only)")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--log", help="line-delimited JSON training log")
    p.add_argument("--seed", type=int)
    _corpus_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="hide bits in a WAV file")
    _model_args(p)
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--bits", required=True, help="0/1 string or 0x-prefixed hex")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--ratio", type=float, help="watermark ratio; payload is tiled")
    group.add_argument("--positions", help="comma-separated frame indices")
    p.add_argument("--selector", choices=("manipulator", "random"), default="manipulator")
    p.add_argument("--plan", help="where to write the plan JSON")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("detect", help="localize watermarked frames and read their bits")
    _model_args(p)
    p.add_argument("input")
    p.add_argument("--expected-length", type=int)
    p.add_argument("--threshold", type=float, default=0.5, help="localizer score threshold")
    p.add_argument("--z-threshold", type=float, default=4.0)
    p.add_argument("--json", help="also write the result here")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("ztest", help="utterance-level watermark decision")
    p.add_argument("input", nargs="?")
    p.add_argument("--checkpoint", "-c")
    p.add_argument("--n-fft", type=int)
    p.add_argument("--hop", type=int)
    p.add_argument("--win-length", type=int)
    p.add_argument("--count", type=int, help="skip audio: number of detected frames")
    p.add_argument("--frames", type=int, help="skip audio: total frames")
    p.add_argument("--beta", type=float, help="frame false-alarm rate (overrides calibration)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--z-threshold", type=float, default=4.0)
    p.add_argument("--json")
    p.set_defaults(func=cmd_ztest)

    p = sub.add_parser("attack", help="apply one distortion to a WAV file")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--kind", required=True)
    p.add_argument("--param", action="append", help="key=value override, repeatable")
    p.add_argument("--spec", help="where to write the spec JSON")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="information-hiding or AI-detection evaluation")
    _model_args(p)
    _corpus_args(p)
    p.add_argument("--mode", choices=("hiding", "detection"), required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--catalog", help="comma-separated distortion kinds")
    p.add_argument("--bps", type=float, default=32)
    p.add_argument("--ratio", type=float, default=0.1)
    p.add_argument("--z-threshold", type=float, default=4.0)
    p.add_argument("--oracle", action="store_true", help="read parities from tokens (hiding mode)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    from .attacks import CodecUnavailable
    from .checkpoint import CheckpointError
    from .codec import CapacityExceeded

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except CapacityExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except CodecUnavailable as exc:
        print(f"error: codec unavailable: {exc}", file=sys.stderr)
        return EXIT_CODEC
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (FileNotFoundError, RuntimeError) as exc:
        if "checkpoint required" in str(exc) or "untrained" in str(exc):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_PREREQ
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
