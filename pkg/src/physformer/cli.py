"""Command-line surface: synth | train | eval | gradcheck | attn-dump."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import formats, synth
from .config import CONFIG_KEYS, RunConfig, apply_overrides, finalize, parse_config_file
from .gradcheck import run_suite
from .model import PhysFormer, export_attention
from .tensor import Tensor, no_grad
from .train import evaluate_model, iter_samples, load_checkpoint, train


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides")
    for key in CONFIG_KEYS:
        group.add_argument(f"--{key}", dest=key, default=None, metavar="V")


def _build_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> RunConfig:
    values = vars(args)
    cfg = parse_config_file(args.config) if values.get("config") else RunConfig()
    overrides = {key: values[key] for key in CONFIG_KEYS if values.get(key) is not None}
    try:
        cfg = apply_overrides(cfg, overrides)
    except (KeyError, ValueError) as exc:
        parser.error(str(exc))
    return finalize(cfg)


def _cmd_synth(args, parser) -> int:
    if args.count < 1:
        parser.error(f"--count must be positive, got {args.count}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    entries = []
    for i in range(args.count):
        cfg = synth.random_config(
            rng, fs=args.fs, frames=args.frames, size=(args.height, args.width),
            noise_sigma=args.noise_sigma, amplitude=args.amplitude)
        sample = synth.generate(cfg)
        name = f"sample_{i:05d}.phyd"
        formats.write_sample(out / name, sample)
        entries.append((name, sample.gt_hr))
    formats.write_manifest(out / args.manifest_name, entries)
    print(f"wrote {args.count} samples and {args.manifest_name} under {out}")
    return 0


def _cmd_train(args, parser) -> int:
    cfg = _build_config(args, parser)
    if not cfg.train_manifest:
        parser.error("train needs --train_manifest (or a config file that sets it)")
    if not Path(cfg.train_manifest).exists():
        parser.error(f"manifest not found: {cfg.train_manifest}")
    result = train(cfg, out_dir=args.out)
    print(f"trained {cfg.epochs} epochs, {len(result.history)} steps")
    print(f"loss log: {result.log_path}")
    print(f"final checkpoint: {result.final_checkpoint}")
    if cfg.eval_manifest:
        metrics, _ = evaluate_model(result.model, iter_samples(cfg.eval_manifest), cfg,
                                    report_path=Path(args.out) / "eval_report.csv")
        r_text = "undefined" if metrics.r is None else f"{metrics.r:.3f}"
        print(f"eval: sd={metrics.sd:.3f} mae={metrics.mae:.3f} "
              f"rmse={metrics.rmse:.3f} r={r_text}")
    return 0


def _cmd_eval(args, parser) -> int:
    cfg = _build_config(args, parser)
    manifest = args.manifest or cfg.eval_manifest
    if not manifest:
        parser.error("eval needs --manifest (or eval_manifest in the config)")
    if not Path(args.ckpt).exists():
        parser.error(f"checkpoint not found: {args.ckpt}")
    if not Path(manifest).exists():
        parser.error(f"manifest not found: {manifest}")
    model = PhysFormer(cfg.arch, np.random.default_rng(cfg.seed))
    load_checkpoint(args.ckpt, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics, rows = evaluate_model(model, iter_samples(manifest), cfg,
                                   report_path=out / "eval_report.csv")
    r_text = "undefined" if metrics.r is None else f"{metrics.r:.3f}"
    print(f"{len(rows)} recordings: sd={metrics.sd:.3f} mae={metrics.mae:.3f} "
          f"rmse={metrics.rmse:.3f} r={r_text}")
    print(f"report: {out / 'eval_report.csv'}")
    return 0


def _cmd_gradcheck(args, parser) -> int:
    results = run_suite(tol=args.tol, eps=args.eps, include_model=args.full_model)
    failures = 0
    for item in results:
        status = "ok" if item.passed else "FAIL"
        print(f"{status:4s} {item.name:24s} max_rel_err={item.report.max_rel_err:.3e}")
        if item.report.nonfinite_coords:
            print(f"     non-finite at {item.report.nonfinite_coords[:5]}")
        failures += not item.passed
    print(f"{len(results) - failures}/{len(results)} gradient checks passed at tol {args.tol}")
    return 1 if failures else 0


def _cmd_attn_dump(args, parser) -> int:
    cfg = _build_config(args, parser)
    if not Path(args.ckpt).exists():
        parser.error(f"checkpoint not found: {args.ckpt}")
    if not Path(args.sample).exists():
        parser.error(f"sample not found: {args.sample}")
    model = PhysFormer(cfg.arch, np.random.default_rng(cfg.seed))
    load_checkpoint(args.ckpt, model)
    sample = formats.read_sample(args.sample)
    frames = (sample.video.frames // cfg.arch.tube[0]) * cfg.arch.tube[0]
    clip = Tensor(sample.video.pixels[None, :, :frames])
    try:
        attention = export_attention(model, clip, args.block, args.head)
    except IndexError as exc:
        parser.error(str(exc))
    with no_grad():
        signal, _ = model.forward(clip, training=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "attention.csv", attention, delimiter=",")
    np.savetxt(out / "signal.csv", signal.data[0], delimiter=",")
    print(f"attention {attention.shape} -> {out / 'attention.csv'}")
    print(f"signal ({signal.data.shape[1]} samples) -> {out / 'signal.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="physformer",
        description="Pulse-from-video transformer: synthetic data, training, "
                    "evaluation, gradient verification, attention export.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset + manifest")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--count", type=int, required=True, help="number of recordings")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--fs", type=float, default=30.0)
    p_synth.add_argument("--frames", type=int, default=300)
    p_synth.add_argument("--height", type=int, default=32)
    p_synth.add_argument("--width", type=int, default=32)
    p_synth.add_argument("--noise-sigma", type=float, default=0.5)
    p_synth.add_argument("--amplitude", type=float, default=2.0)
    p_synth.add_argument("--manifest-name", default="manifest.tsv")
    p_synth.set_defaults(func=_cmd_synth)

    p_train = sub.add_parser("train", help="train a model on a synthetic manifest")
    p_train.add_argument("--config", help="key=value config file")
    p_train.add_argument("--out", required=True, help="artifact directory")
    _add_config_flags(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p_eval.add_argument("--config", help="key=value config file")
    p_eval.add_argument("--ckpt", required=True, help="checkpoint file")
    p_eval.add_argument("--manifest", help="evaluation manifest")
    p_eval.add_argument("--out", required=True, help="report directory")
    _add_config_flags(p_eval)
    p_eval.set_defaults(func=_cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_grad.add_argument("--tol", type=float, default=1e-4)
    p_grad.add_argument("--eps", type=float, default=1e-5)
    p_grad.add_argument("--full-model", action="store_true",
                        help="also check a whole toy network (slow)")
    p_grad.set_defaults(func=_cmd_gradcheck)

    p_attn = sub.add_parser("attn-dump", help="export one attention matrix to CSV")
    p_attn.add_argument("--config", help="key=value config file")
    p_attn.add_argument("--ckpt", required=True)
    p_attn.add_argument("--sample", required=True, help="a .phyd sample file")
    p_attn.add_argument("--block", type=int, default=-1,
                        help="block index; negative counts from the end")
    p_attn.add_argument("--head", type=int, default=0)
    p_attn.add_argument("--out", required=True)
    _add_config_flags(p_attn)
    p_attn.set_defaults(func=_cmd_attn_dump)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "block", None) is not None and args.command == "attn-dump" and args.block < 0:
        # resolve negative block indices against the configured depth
        cfg = _build_config(args, parser)
        args.block = cfg.arch.num_blocks + args.block
    return args.func(args, parser)


if __name__ == "__main__":
    sys.exit(main())
