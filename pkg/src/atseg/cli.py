"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
Diagnostics go to stderr; results are written to files.  Flag values override
run-config file values, which override built-in defaults.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as G
from . import model as M
from .checkpoint import load_checkpoint, save_checkpoint
from .data_io import (DEFAULT_RATIOS, Volume, read_manifest, read_volume,
                      write_synthetic_dataset, write_volume)
from .errors import ConfigError, DataError, NumericError, UsageError
from .harness import (run_ablations, run_low_label_protocol, tiny_ablation_grid)
from .inference import aggregate_attention, segment_volume
from .metrics import SegmentationMask, dsc, surface_distance_stats
from .model import Hyperparams
from .stats import paired_t_test  # noqa: F401  (re-exported for scripting)
from .training import (TrainConfig, apply_config, load_split,
                       read_run_config, swap_to_segmentation_head, train,
                       write_run_config)

log = logging.getLogger("atseg")

TINY_DEFAULT = Hyperparams(W=12, n=3, c=1, K=2, D=32, D_h=8, n_h=4, n_class=2)

_HP_FLAGS = {
    "W": int, "n": int, "c": int, "K": int, "D": int, "D_h": int, "n_h": int,
    "n_class": int, "d_ff": int, "pos_mode": str, "head_mode": str, "norm_mode": str,
}
_TRAIN_FLAGS = {
    "batch_size": int, "lr": float, "max_epochs": int, "blocks_per_epoch": int,
    "val_blocks": int, "seed": int, "snr_db": float, "pretrain_task": str,
    "fg_fraction": float,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run-config file (key = value lines)")
    for name, typ in _HP_FLAGS.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=f"hp_{name}", type=typ, default=None)
    for name, typ in _TRAIN_FLAGS.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=f"tr_{name}", type=typ, default=None)


def _resolve_config(args, base_hp: Hyperparams) -> tuple[Hyperparams, TrainConfig]:
    hp, cfg = base_hp, TrainConfig()
    if getattr(args, "config", None):
        hp, cfg = apply_config(hp, cfg, read_run_config(args.config))
    hp_over = {k: getattr(args, f"hp_{k}") for k in _HP_FLAGS if getattr(args, f"hp_{k}", None) is not None}
    tr_over = {k: getattr(args, f"tr_{k}") for k in _TRAIN_FLAGS if getattr(args, f"tr_{k}", None) is not None}
    return hp.with_overrides(**hp_over), cfg.with_overrides(**tr_over)


def _parse_triple(text: str, typ=int) -> tuple:
    parts = [typ(t) for t in text.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise UsageError(f"expected 1 or 3 comma-separated values, got {text!r}")
    return tuple(parts)


def build_parser() -> _Parser:
    parser = _Parser(prog="atseg", description="Patch-attention 3D segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--shape", required=True, help="cube side or X,Y,Z")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--spacing", default="1.0", help="mm per voxel, one value or SX,SY,SZ")

    p = sub.add_parser("train", help="train a segmentation model from scratch")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("pretrain", help="self-supervised reconstruction pre-training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=("denoising", "inpainting"), default="denoising")
    _add_config_flags(p)

    p = sub.add_parser("finetune", help="fine-tune a pre-trained checkpoint on labels")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("segment", help="sliding-window segmentation of one volume")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--attention", action="store_true", help="also write attention maps")
    p.add_argument("--pad", choices=("mirror", "zero"), default="mirror")

    p = sub.add_parser("attention", help="write per-stage/head attention maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pad", choices=("mirror", "zero"), default="mirror")

    p = sub.add_parser("eval", help="score a predicted mask against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--class-id", type=int, default=1)

    p = sub.add_parser("ablate", help="run the hyperparameter ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0", help="comma-separated repetition seeds")
    _add_config_flags(p)

    p = sub.add_parser("lowlabel", help="scratch vs pre-trained with few labels")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", required=True, help="comma-separated labeled-set sizes")
    p.add_argument("--options", default="scratch,denoising,inpainting")
    p.add_argument("--seeds", default="0")
    p.add_argument("--pre-epochs", type=int, default=None)
    _add_config_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of model gradients")
    p.add_argument("--tiny", action="store_true", help="use the built-in tiny configuration")
    p.add_argument("--objective", choices=("dice", "l2"), default="dice")
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=G.DEFAULT_SEED)
    _add_config_flags(p)
    return parser


# ---------------------------------------------------------------------------
# command bodies


def _cmd_gen_data(args) -> int:
    shape = _parse_triple(args.shape, int)
    spacing = _parse_triple(args.spacing, float)
    manifest = write_synthetic_dataset(args.count, shape, args.seed, args.out,
                                       DEFAULT_RATIOS, spacing)
    log.info("wrote dataset manifest %s", manifest)
    return 0


def _finish_training(result, hp, cfg, out_dir: Path) -> int:
    save_checkpoint(out_dir / "best.atsg", result.best)
    save_checkpoint(out_dir / "final.atsg", result.final)
    write_run_config(out_dir / "config.txt", hp, cfg)
    if result.diverged:
        log.error("training diverged; last good checkpoint kept at %s", out_dir / "best.atsg")
        return 3
    return 0


def _cmd_train(args) -> int:
    hp, cfg = _resolve_config(args, Hyperparams())
    manifest = read_manifest(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_vols = load_split(manifest.paths("train"), hp)
    val_vols = load_split(manifest.paths("val"), hp)
    weights = M.init_weights(hp, cfg.seed)
    result = train(weights, train_vols, val_vols, cfg, stats_path=out_dir / "stats.csv")
    return _finish_training(result, hp, cfg, out_dir)


def _cmd_pretrain(args) -> int:
    hp, cfg = _resolve_config(args, Hyperparams())
    cfg = cfg.with_overrides(pretrain_task=args.task)
    manifest = read_manifest(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_vols = load_split(manifest.paths("train"), hp, require_mask=False)
    val_vols = load_split(manifest.paths("val"), hp, require_mask=False)
    weights = M.init_weights(hp, cfg.seed, pretrain_head=True, seg_head=False)
    result = train(weights, train_vols, val_vols, cfg, objective=args.task,
                   stats_path=out_dir / "stats.csv")
    save_checkpoint(out_dir / "pretrained.atsg", result.best)
    write_run_config(out_dir / "config.txt", hp, cfg)
    return 3 if result.diverged else 0


def _cmd_finetune(args) -> int:
    pretrained = load_checkpoint(args.ckpt)
    hp, cfg = _resolve_config(args, pretrained.hp)
    if hp != pretrained.hp:
        raise ConfigError("hyperparameter overrides cannot change a checkpointed architecture")
    manifest = read_manifest(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = swap_to_segmentation_head(pretrained, cfg.seed)
    train_vols = load_split(manifest.paths("train"), hp)
    val_vols = load_split(manifest.paths("val"), hp)
    result = train(weights, train_vols, val_vols, cfg, stats_path=out_dir / "stats.csv")
    return _finish_training(result, hp, cfg, out_dir)


def _cmd_segment(args, attention_only: bool = False) -> int:
    weights = load_checkpoint(args.ckpt)
    hp = weights.hp
    volume = read_volume(args.input)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not attention_only:
        labels, probs = segment_volume(volume, weights, hp, args.pad)
        write_volume(out_dir / "prob.avol",
                     Volume(probs.astype(np.float32), volume.spacing))
        write_volume(out_dir / "labels.avol",
                     Volume(labels[..., None].astype(np.uint8), volume.spacing))
    if attention_only or args.attention:
        maps = aggregate_attention(volume, weights, hp, args.pad)
        for name, grid in maps.items():
            write_volume(out_dir / f"{name}.avol",
                         Volume(grid[..., None].astype(np.float32), volume.spacing))
    return 0


def _cmd_eval(args) -> int:
    pred = read_volume(args.pred)
    truth = read_volume(args.truth)
    pred_mask = SegmentationMask(pred.data[..., 0].astype(np.int64), pred.spacing)
    true_mask = SegmentationMask(truth.data[..., 0].astype(np.int64), truth.spacing)
    score = dsc(pred_mask, true_mask, args.class_id)
    hd95, assd = surface_distance_stats(pred_mask, true_mask, args.class_id)
    Path(args.out).write_text(
        "dsc,hd95_mm,assd_mm\n" + f"{score:.6g},{hd95:.6g},{assd:.6g}\n")
    return 0


def _cmd_ablate(args) -> int:
    hp, cfg = _resolve_config(args, TINY_DEFAULT)
    seeds = [int(s) for s in args.seeds.split(",")]
    grid = tiny_ablation_grid(hp, cfg, seeds)
    manifest = read_manifest(args.data)
    run_ablations(grid, manifest, args.out)
    return 0


def _cmd_lowlabel(args) -> int:
    hp, cfg = _resolve_config(args, TINY_DEFAULT)
    seeds = [int(s) for s in args.seeds.split(",")]
    n_train = [int(s) for s in args.n_train.split(",")]
    options = args.options.split(",")
    pre_cfg = cfg.with_overrides(pretrain_task="denoising")
    if args.pre_epochs is not None:
        pre_cfg = pre_cfg.with_overrides(max_epochs=args.pre_epochs)
    manifest = read_manifest(args.data)
    run_low_label_protocol(manifest, n_train, options, hp, pre_cfg, cfg, seeds, args.out)
    return 0


def _cmd_gradcheck(args) -> int:
    hp = G.TINY if args.tiny else _resolve_config(args, G.TINY)[0]
    report = G.full_model_grad_check(hp, seed=args.seed, objective=args.objective, h=args.h)
    print(report.summary())
    return 0 if report.passed(args.tol) else 3


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "segment": _cmd_segment,
    "attention": lambda args: _cmd_segment(args, attention_only=True),
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "lowlabel": _cmd_lowlabel,
    "gradcheck": _cmd_gradcheck,
}


def dispatch(argv: list[str]) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:                # includes ConfigError
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
