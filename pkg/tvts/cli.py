#!/usr/bin/env python3
"""
TVTS CLI - generate corpora, pre-train, evaluate, check gradients, plot, sweep and ablate
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel

from tvts.corpus import generate_corpus
from tvts.errors import CheckpointError, ConfigError, DataError, NonFiniteLossError, TVTSError
from tvts.evalkit import run_evaluation
from tvts.gradcheck import TOLERANCE, run_grad_check
from tvts.plots import plot_metrics
from tvts.schemas import PROXIES, EncoderConfig, EvalConfig, GenConfig, ProbeConfig, TrainConfig, build_config
from tvts.sweeps import ABLATION_ARMS, SWEEP_KEYS, ablation_summary, run_ablation, run_sweep
from tvts.trainer import pretrain

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NON_FINITE = 4
EXIT_CHECKPOINT = 5
EXIT_GRAD_CHECK = 6

CONFIG_ENV = "TVTS_CONFIG"
ENCODER_KEYS = frozenset(EncoderConfig.model_fields)
EVAL_TASKS = ("zeroshot", "probe", "t2v", "sort")


# -----------------------------------------------------------------------------
# Configuration
# -----------------------------------------------------------------------------

def load_config_file(path: Optional[Path]) -> Dict[str, Any]:
    """Flat key: value YAML; a missing path means no file"""
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path} is not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold key: value pairs, got {type(data).__name__}")
    return data


def parse_assignments(pairs: Sequence[str]) -> Dict[str, Any]:
    """KEY=VALUE strings; values are read as YAML scalars (3 -> int, 0.5 -> float, true -> bool)"""
    out: Dict[str, Any] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"expected KEY=VALUE, got {pair!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out


def nest_encoder_keys(flat: Dict[str, Any]) -> Dict[str, Any]:
    """Move the flat encoder fields (hidden_dim, depth, ...) under `encoder`"""
    data = {k: v for k, v in flat.items() if k not in ENCODER_KEYS}
    encoder = dict(data.pop("encoder", None) or {})
    encoder.update({k: v for k, v in flat.items() if k in ENCODER_KEYS})
    if encoder:
        data["encoder"] = encoder
    return data


def config_path(args: argparse.Namespace) -> Optional[Path]:
    if getattr(args, "config", None):
        return Path(args.config)
    env = os.environ.get(CONFIG_ENV)
    return Path(env) if env else None


def resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    """model defaults < config file < flags"""
    values = load_config_file(config_path(args))
    flags = {
        "corpus": args.corpus,
        "run_dir": getattr(args, "run_dir", None),
        "steps": getattr(args, "steps", None),
        "proxy": getattr(args, "proxy", None),
        "seed": args.seed,
        "resume_from": getattr(args, "resume", None),
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    values.update(parse_assignments(args.set or []))
    return build_config(TrainConfig, nest_encoder_keys(values))


def echo_config(config: BaseModel) -> None:
    print(f"# resolved {type(config).__name__}")
    print(yaml.safe_dump(config.model_dump(mode="json"), sort_keys=True, default_flow_style=False).rstrip())


def parse_resolution(text: str) -> Dict[str, int]:
    height, sep, width = text.lower().partition("x")
    try:
        if not sep:
            raise ValueError(text)
        return {"height": int(height), "width": int(width)}
    except ValueError as exc:
        raise ConfigError(f"--res must look like HxW (e.g. 32x32), got {text!r}") from exc


# -----------------------------------------------------------------------------
# Commands
# -----------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    values = {"count": args.count, "fps": args.fps, "duration": args.duration, "workers": args.workers}
    if args.res:
        values.update(parse_resolution(args.res))
    config = build_config(GenConfig, {k: v for k, v in values.items() if v is not None})
    echo_config(config)
    print(f"🎬 Generating {config.count} videos into {args.out}...")
    manifest_hash = generate_corpus(config, args.seed, args.out)
    print(f"✅ Corpus written to {args.out}")
    print(f"manifest sha256: {manifest_hash}")
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = resolve_train_config(args)
    echo_config(config)
    print(f"🚀 Pre-training ({config.proxy}) for {config.steps} steps...")
    result = pretrain(config)
    if result.history:
        last = result.history[-1]
        acc = "-" if last.sort_acc is None else f"{last.sort_acc:.3f}"
        print(f"📊 step {last.step}: L_total {last.L_total:.4f}  L_align {last.L_align:.4f}  "
              f"L_sort {last.L_sort:.4f}  sort_acc {acc}")
    print(f"✅ Final checkpoint: {result.checkpoint_path}")
    print(f"📁 Metrics log: {result.metrics_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    probe = build_config(ProbeConfig, {k: v for k, v in {
        "lr": args.probe_lr, "epochs": args.probe_epochs, "seed": args.seed}.items() if v is not None})
    config = build_config(EvalConfig, {
        "checkpoint": args.checkpoint,
        "corpus": args.corpus,
        "tasks": args.task or ["zeroshot"],
        "out": args.out,
        "probe": probe,
        "index": args.index,
    })
    echo_config(config)
    report = run_evaluation(config)
    for task in ("zeroshot", "t2v"):
        result = getattr(report, task)
        if result is not None:
            print(f"📊 {task}: R@1 {result.r_at_1:.3f}  R@5 {result.r_at_5:.3f}  R@10 {result.r_at_10:.3f}  "
                  f"MedR {result.median_rank:g}  ({result.queries} queries)")
    if report.probe is not None:
        print(f"📊 probe: top-1 {report.probe.top1:.3f} (train {report.probe.train_top1:.3f}, "
              f"{report.probe.num_classes} classes)")
        status = "unchanged" if report.probe.encoder_unchanged else "CHANGED"
        print(f"✅ encoder hash {status}: {report.probe.encoder_hash_before}")
    if report.sort_accuracy is not None:
        print(f"📊 sort: held-out accuracy {report.sort_accuracy:.3f}")
    print(f"✅ Report written to {config.out}")
    return EXIT_OK


def cmd_grad_check(args: argparse.Namespace) -> int:
    print("🔍 Checking gradients against central differences...")
    report = run_grad_check(seeds=args.seeds, model_seeds=args.model_seeds, tolerance=args.tolerance,
                            progress=args.progress)
    for result in report.results:
        glyph = "✅" if result.passed(report.tolerance) else "❌"
        print(f"  {glyph} {result.name:<28} max rel. error {result.max_rel_error:.3e}  ({result.checks} checks)")
    if not report.passed:
        print(f"❌ Gradient check failed: {', '.join(report.failures)}")
        return EXIT_GRAD_CHECK
    print(f"✅ All {len(report.results)} gradient checks below {report.tolerance:g}")
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    out = Path(args.out) if args.out else Path(args.metrics).parent / "plots"
    written = plot_metrics(args.metrics, out)
    for path in written:
        print(f"  - {path}")
    print(f"✅ {len(written)} plots written to {out}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = resolve_train_config(args)
    echo_config(config)
    values = [yaml.safe_load(v) for v in args.values.split(",") if v.strip()]
    print(f"🔁 Sweeping {args.key} over {values}...")
    frame = run_sweep(config, args.key, values, args.out)
    print(frame.to_string(index=False))
    print(f"✅ Sweep results in {args.out}")
    return EXIT_OK


def parse_int_list(text: str, flag: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"{flag} must be comma-separated integers, got {text!r}") from exc


def cmd_ablate(args: argparse.Namespace) -> int:
    config = resolve_train_config(args)
    echo_config(config)
    seeds = parse_int_list(args.seeds, "--seeds")
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    print(f"🔁 Ablating {', '.join(arms)} over seeds {seeds}...")
    frame = run_ablation(config, seeds, args.out, arms=arms)
    print(ablation_summary(frame).to_string(float_format=lambda v: f"{v:.3f}"))
    print(f"✅ Ablation results in {args.out}")
    return EXIT_OK


# -----------------------------------------------------------------------------
# Parser
# -----------------------------------------------------------------------------

def _add_train_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help=f"Flat YAML config file (default: ${CONFIG_ENV})")
    sub.add_argument("--corpus", help="Corpus directory written by gen-data")
    sub.add_argument("--seed", type=int, help="Run seed")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tvts",
        description="TVTS - video representation learning by sorting shuffled transcripts",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  tvts gen-data --out data/synth --count 2000 --seed 7
  tvts pretrain --config config.yaml --corpus data/synth --run-dir runs/kway
  tvts eval --checkpoint runs/kway/final.tvts --task probe --task zeroshot
  tvts grad-check
  tvts plot --metrics runs/kway/metrics.jsonl
  tvts ablate --config config.yaml --corpus data/synth --out runs/ablation
        """,
    )
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("gen-data", help="Generate a synthetic narrated-video corpus")
    gen.add_argument("--out", required=True, help="Output directory")
    gen.add_argument("--count", type=int, help="Number of videos")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--fps", type=float)
    gen.add_argument("--res", help="Frame resolution HxW, each divisible by the patch size")
    gen.add_argument("--duration", type=float, help="Seconds per video")
    gen.add_argument("--workers", type=int)
    gen.set_defaults(handler=cmd_gen_data)

    train = subs.add_parser("pretrain", help="Pre-train with the alignment and sort objectives")
    _add_train_flags(train)
    train.add_argument("--run-dir", help="Where metrics and checkpoints go")
    train.add_argument("--steps", type=int)
    train.add_argument("--proxy", choices=PROXIES, help="Sort proxy; 'none' trains alignment only")
    train.add_argument("--resume", help="Checkpoint to resume from")
    train.set_defaults(handler=cmd_pretrain)

    ev = subs.add_parser("eval", help="Evaluate a checkpoint")
    ev.add_argument("--checkpoint")
    ev.add_argument("--corpus")
    ev.add_argument("--task", action="append", choices=EVAL_TASKS, help="Repeat to run several tasks")
    ev.add_argument("--out", default="eval_report.json")
    ev.add_argument("--index", help="Precomputed embedding index (.npz) for zeroshot")
    ev.add_argument("--probe-lr", type=float)
    ev.add_argument("--probe-epochs", type=int)
    ev.add_argument("--seed", type=int)
    ev.set_defaults(handler=cmd_eval)

    gc = subs.add_parser("grad-check", help="Compare every gradient rule with finite differences")
    gc.add_argument("--seeds", type=int, default=10)
    gc.add_argument("--model-seeds", type=int)
    gc.add_argument("--tolerance", type=float, default=TOLERANCE)
    gc.add_argument("--progress", action="store_true")
    gc.set_defaults(handler=cmd_grad_check)

    plot = subs.add_parser("plot", help="Plot curves from a metrics log")
    plot.add_argument("--metrics", required=True, help="metrics.jsonl written by pretrain")
    plot.add_argument("--out", help="Output directory (default: plots/ next to the log)")
    plot.set_defaults(handler=cmd_plot)

    sweep = subs.add_parser("sweep", help="Pre-train and probe once per value of one setting")
    _add_train_flags(sweep)
    sweep.add_argument("--key", required=True, choices=SWEEP_KEYS)
    sweep.add_argument("--values", required=True, help="Comma-separated values")
    sweep.add_argument("--out", required=True, help="Sweep directory")
    sweep.set_defaults(handler=cmd_sweep)

    ablate = subs.add_parser("ablate", help="Compare sort proxies and a random-init encoder by linear probe")
    _add_train_flags(ablate)
    ablate.add_argument("--arms", default=",".join(ABLATION_ARMS),
                        help=f"Comma-separated arms from {', '.join(ABLATION_ARMS)}")
    ablate.add_argument("--seeds", default="0,1,2", help="Comma-separated run seeds")
    ablate.add_argument("--out", required=True, help="Ablation directory")
    ablate.set_defaults(handler=cmd_ablate)
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, CheckpointError):
        return EXIT_CHECKPOINT
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NonFiniteLossError):
        return EXIT_NON_FINITE
    if isinstance(exc, (DataError, OSError)):
        return EXIT_IO
    return EXIT_ERROR


def main(argv: Optional[List[str]] = None) -> int:
    """TVTS CLI main function; returns the process exit code"""
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        return args.handler(args)
    except (TVTSError, OSError) as exc:
        if args.log_level == "DEBUG":
            logger.exception("command failed")
        print(f"❌ {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
