"""Command-line entry point: gen, train, eval, gradcheck, dump."""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import gradcheck
from .evaluation import PckConfig, evaluate_model, occlusion_sweep, pck, sweep_to_csv
from .network import forward_sequence, load_params
from .numeric_core import save_tensor
from .synthdata import (
    OCCLUSION_MODES,
    MotionConfig,
    OcclusionSpec,
    generate_dataset,
    load_dataset,
    read_sequence,
    sequence_dirs,
    write_pgm,
)
from .training import TrainConfig, parse_config_file, train

log = logging.getLogger("kinepose")


class CliError(Exception):
    pass


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    # Keep defaults spelled out in the help text; required flags have none.
    def _get_help_string(self, action):
        if action.required or "(default:" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def _formatter(prog):
    return _HelpFormatter(prog, max_help_position=32)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kinepose", description=__doc__, formatter_class=_formatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset", formatter_class=_formatter)
    p.add_argument("--out", required=True, type=Path, help="dataset directory to create")
    p.add_argument("--num", type=int, default=60, help="number of sequences")
    p.add_argument("--k", type=int, default=5, help="joints per pose")
    p.add_argument("--frames", type=int, default=8, help="frames per sequence")
    p.add_argument("--size", type=int, default=64, help="frame height and width in pixels")
    p.add_argument("--occlusion", choices=OCCLUSION_MODES, default="none", help="occlusion mode")
    p.add_argument("--occlusion-count", type=int, default=2, help="masks / occluded joints per masked frame")
    p.add_argument("--mask-size", type=int, default=10, help="occlusion square side in pixels")
    p.add_argument("--static", action="store_true", help="zero velocity and no random walk")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--force", action="store_true", help="replace an existing non-empty directory")

    p = sub.add_parser("train", help="train a model", formatter_class=_formatter)
    p.add_argument("--data", required=True, type=Path, help="dataset directory")
    p.add_argument("--config", type=Path, default=None,
                   help="'key = value' config file (default: none, built-in values only)")
    p.add_argument("--out", required=True, type=Path, help="checkpoint path (.kim)")
    p.add_argument("--metrics", type=Path, default=None, help="metrics CSV (default: <out>.csv)")
    builtin = TrainConfig()
    for key, kind in (("epochs", int), ("lr", float), ("seed", int), ("batch-size", int),
                      ("holdout", int), ("variant", str), ("T", int)):
        name = key.replace("-", "_")
        p.add_argument(f"--{key}", type=kind, default=None,
                       help=f"override config key {name} (default: {getattr(builtin, name)})")

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=_formatter)
    p.add_argument("--data", required=True, type=Path, help="dataset directory")
    p.add_argument("--ckpt", type=Path, default=None,
                   help="checkpoint (.kim) (default: none, required unless --predict-gt)")
    p.add_argument("--norm", choices=("person", "torso"), default="person", help="PCK normalization")
    p.add_argument("--alpha", type=float, default=0.2, help="PCK threshold fraction")
    p.add_argument("--holdout", type=int, default=0, help="evaluate only the last N sequences (0 = all)")
    p.add_argument("--sweep", default=None,
                   help="occluded-joint counts, e.g. '1..4' or '0,2,4' (default: none, no sweep)")
    p.add_argument("--baseline", type=Path, default=None,
                   help="no-KMM checkpoint for the sweep (default: none, reuse --ckpt with identity attention)")
    p.add_argument("--mask-size", type=int, default=10, help="occlusion square side for the sweep")
    p.add_argument("--seed", type=int, default=0, help="occlusion seed for the sweep")
    p.add_argument("--out", type=Path, default=Path("."), help="directory for report.csv / sweep.csv")
    p.add_argument("--predict-gt", action="store_true", help="test hook: score ground truth as the prediction")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks", formatter_class=_formatter)
    p.add_argument("--scope", choices=("op", "kmm", "pipeline"), default="op", help="what to check")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--seeds", type=int, default=20, help="number of consecutive seeds")
    p.add_argument("--tol", type=float, default=None,
                   help="max relative error (default: 1e-05 for op/kmm, 0.0001 for pipeline)")

    p = sub.add_parser("dump", help="dump attention / heatmaps for one sequence", formatter_class=_formatter)
    p.add_argument("--ckpt", required=True, type=Path, help="checkpoint (.kim)")
    p.add_argument("--data", required=True, type=Path, help="dataset directory")
    p.add_argument("--seq", type=int, default=0, help="sequence index")
    p.add_argument("--what", choices=("attention", "heatmaps", "initial"), default="attention", help="what to dump")
    p.add_argument("--out", type=Path, default=Path("dump"), help="output directory")
    return parser


def _parse_counts(text: str) -> list[int]:
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",") if v.strip()]


def _stage_dir(final: Path) -> Path:
    final.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=final.parent))


def _publish_dir(staged: Path, final: Path) -> None:
    if final.exists():
        shutil.rmtree(final)
    staged.rename(final)


def _publish_files(staged: Path, final: Path) -> None:
    final.mkdir(parents=True, exist_ok=True)
    for f in sorted(staged.iterdir()):
        f.replace(final / f.name)


def cmd_gen(args) -> None:
    out: Path = args.out
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"{out} exists and is not empty (use --force to replace it)")
    occlusion = None
    if args.occlusion != "none":
        occlusion = OcclusionSpec(args.occlusion, args.mask_size, args.occlusion_count, args.seed)
    motion = MotionConfig(body_speed=0.0, joint_speed=0.0, noise=0.0) if args.static else None
    staged = _stage_dir(out)
    try:
        generate_dataset(staged, args.num, args.k, args.frames, args.size, args.seed, occlusion, motion)
        _publish_dir(staged, out)
    finally:
        if staged.exists():
            shutil.rmtree(staged)
    print(f"wrote {args.num} sequences (K={args.k}, T={args.frames}, {args.size}x{args.size}, "
          f"occlusion={args.occlusion}, seed={args.seed}) to {out}")


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config is not None:
        if not args.config.is_file():
            raise CliError(f"config file {args.config} not found")
        cfg = TrainConfig.from_mapping(parse_config_file(args.config), cfg)
    overrides = {"epochs": args.epochs, "lr": args.lr, "seed": args.seed, "batch_size": args.batch_size,
                 "holdout": args.holdout, "variant": args.variant, "T": args.T}
    overrides = {k: str(v) for k, v in overrides.items() if v is not None}
    return TrainConfig.from_mapping(overrides, cfg)


def cmd_train(args) -> None:
    sequence_dirs(args.data)
    cfg = _train_config(args)
    metrics = args.metrics or args.out.with_suffix(".csv")
    params = train(args.data, cfg, args.out, metrics)
    print(f"trained {cfg.epochs} epochs ({params.variant}); checkpoint {args.out}, metrics {metrics}")


def cmd_eval(args) -> None:
    seqs = load_dataset(args.data)
    if args.holdout:
        seqs = seqs[-args.holdout:]
    cfg = PckConfig(args.alpha, args.norm)
    if args.predict_gt:
        report = None
        for s in seqs:
            r = pck(s.joints, s, cfg)
            report = r if report is None else report.merge(r)
        params = None
    else:
        if args.ckpt is None:
            raise CliError("--ckpt is required unless --predict-gt is given")
        params = load_params(args.ckpt)
        report = evaluate_model(params, seqs, cfg)
    counts = _parse_counts(args.sweep) if args.sweep else []
    if counts and params is None:
        raise CliError("--sweep needs a checkpoint")
    if counts and max(counts) > seqs[0].num_joints:
        raise CliError(f"sweep count {max(counts)} exceeds K={seqs[0].num_joints}")
    staged = _stage_dir(args.out / ".report")
    try:
        (staged / "report.csv").write_text(report.to_csv())
        if counts:
            baseline = load_params(args.baseline) if args.baseline else None
            rows = occlusion_sweep(params, seqs, counts, cfg, seed=args.seed, mask_size=args.mask_size,
                                   baseline=baseline)
            (staged / "sweep.csv").write_text(sweep_to_csv(rows))
        _publish_files(staged, args.out)
    finally:
        shutil.rmtree(staged, ignore_errors=True)
    print(f"mPCK@{args.alpha} ({args.norm}) = {report.mpck:.4f} over {int(report.counts.sum())} joints"
          + (f"; sweep of {len(counts)} counts in {args.out / 'sweep.csv'}" if counts else ""))


def cmd_gradcheck(args) -> int:
    seeds = list(range(args.seed, args.seed + args.seeds))
    worst, tol, per_check = gradcheck.run(args.scope, seeds)
    tol = tol if args.tol is None else args.tol
    for name, err in per_check.items():
        print(f"{name}: max rel error {err:.3e} {'ok' if err < tol else 'FAIL'}")
    ok = worst < tol
    print(f"{'PASS' if ok else 'FAIL'} scope={args.scope} seeds={len(seeds)} max={worst:.3e} tol={tol:.1e}")
    return 0 if ok else 1


def _to_pgm(channel: np.ndarray) -> np.ndarray:
    lo, hi = channel.min(), channel.max()
    if hi <= lo:
        return np.zeros(channel.shape, dtype=np.uint8)
    return np.round((channel - lo) / (hi - lo) * 255.0).astype(np.uint8)


def cmd_dump(args) -> None:
    dirs = sequence_dirs(args.data)
    if not 0 <= args.seq < len(dirs):
        raise CliError(f"--seq {args.seq} out of range (dataset has {len(dirs)} sequences)")
    params = load_params(args.ckpt)
    seq = read_sequence(dirs[args.seq])
    out = forward_sequence(seq.frame_tensors(), params)
    staged = _stage_dir(args.out)
    try:
        if args.what == "attention":
            for t, attn in enumerate(out.attentions, start=1):
                save_tensor(staged / f"attention_{t}.ten", attn)
                rows = [",".join(repr(float(v)) for v in row) for row in attn.data]
                (staged / f"attention_{t}.csv").write_text("\n".join(rows) + "\n")
        else:
            maps = out.heatmaps if args.what == "heatmaps" else out.initial_heatmaps
            first = 0 if args.what == "heatmaps" else 1
            for t, m in enumerate(maps, start=first):
                save_tensor(staged / f"{args.what}_{t}.ten", m)
                for k, channel in enumerate(m.data):
                    write_pgm(staged / f"{args.what}_{t}_joint{k}.pgm", _to_pgm(channel))
        _publish_files(staged, args.out)
    finally:
        shutil.rmtree(staged, ignore_errors=True)
    print(f"dumped {args.what} for sequence {args.seq} to {args.out}")


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    commands = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "dump": cmd_dump}
    try:
        code = commands[args.command](args)
    except (CliError, OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"kinepose {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
