"""Experiment orchestration: ablation grids, the low-label protocol, and
aggregate metric reporting.

Each grid config trains from scratch on the manifest's train/val splits and
is scored on the test split.  Per-config results are persisted as JSON next
to the final CSV, so an interrupted grid resumes by skipping completed
configs and regenerating identical CSV content.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .data_io import DatasetManifest, read_volume
from .errors import ConfigError, DataError
from .inference import segment_volume
from .metrics import SegmentationMask, dsc, surface_distance_stats
from .model import Hyperparams
from .training import (TrainConfig, TrainingVolume, load_split,
                       pretrain_then_finetune, train, write_run_config)

log = logging.getLogger("atseg")

RESULT_COLUMNS = ("config", "dsc_mean", "dsc_std", "hd95_mean", "hd95_std",
                  "assd_mean", "assd_std")


@dataclass(frozen=True)
class GridConfig:
    name: str
    hp_overrides: dict = field(default_factory=dict)
    train_overrides: dict = field(default_factory=dict)


@dataclass
class ExperimentGrid:
    base_hp: Hyperparams
    base_train: TrainConfig
    configs: list[GridConfig]
    seeds: list[int] = field(default_factory=lambda: [0])

    def __post_init__(self):
        names = [c.name for c in self.configs]
        if len(names) != len(set(names)):
            raise ConfigError("duplicate config names in experiment grid")
        for c in self.configs:
            self.base_hp.with_overrides(**c.hp_overrides)       # validate eagerly
            self.base_train.with_overrides(**c.train_overrides)


def tiny_ablation_grid(base_hp: Hyperparams, base_train: TrainConfig,
                       seeds: list[int] | None = None) -> ExperimentGrid:
    """Eight desk-scale configs probing block size, positional encoding,
    depth, and head count around a small baseline."""
    deeper = base_hp.K * 2
    configs = [
        GridConfig("baseline"),
        GridConfig("larger_blocks_n5", {"n": 5, "W": 5 * base_hp.w}),
        GridConfig("no_positional_encoding", {"pos_mode": "none"}),
        GridConfig("fixed_positional_encoding", {"pos_mode": "fixed"}),
        GridConfig("deeper_network", {"K": deeper}),
        GridConfig("shallower_network", {"K": max(1, base_hp.K // 2)}),
        GridConfig("more_heads", {"n_h": base_hp.n_h * 2,
                                  "D_h": max(1, base_hp.D_h // 2)}),
        GridConfig("single_head", {"n_h": 1, "D_h": base_hp.D_h * base_hp.n_h}),
    ]
    return ExperimentGrid(base_hp, base_train, configs, seeds or [0])


def evaluate_on_entries(weights, hp: Hyperparams, entries, class_id: int = 1) -> list[dict]:
    """Sliding-window segmentation metrics per test volume."""
    rows = []
    for entry in entries:
        vol = read_volume(entry.image)
        truth = read_volume(entry.mask)
        labels, _ = segment_volume(vol, weights, hp)
        pred_mask = SegmentationMask(labels, vol.spacing)
        true_mask = SegmentationMask(truth.data[..., 0].astype(np.int64), truth.spacing)
        row = {"dsc": dsc(pred_mask, true_mask, class_id)}
        try:
            hd95, assd = surface_distance_stats(pred_mask, true_mask, class_id)
        except Exception:
            hd95 = assd = float("nan")
        row["hd95"] = hd95
        row["assd"] = assd
        rows.append(row)
    return rows


def _aggregate(rows: list[dict]) -> dict:
    out = {}
    for key in ("dsc", "hd95", "assd"):
        vals = np.asarray([r[key] for r in rows], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            out[f"{key}_mean"], out[f"{key}_std"] = float("nan"), float("nan")
        else:
            out[f"{key}_mean"] = float(vals.mean())
            out[f"{key}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return out


def run_ablations(grid: ExperimentGrid, manifest: DatasetManifest,
                  out_dir: str | Path) -> list[dict]:
    """Train and score every grid config; emit results.csv mirroring the grid.

    Per-config failures are logged to failures.csv and do not stop the grid.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    test_entries = manifest.paths("test")
    results: list[dict] = []
    failures: list[tuple[str, str]] = []
    for config in grid.configs:
        result_path = out_dir / f"{config.name}.json"
        if result_path.exists():
            results.append(json.loads(result_path.read_text()))
            continue
        try:
            hp = grid.base_hp.with_overrides(**config.hp_overrides)
            rows = []
            for seed in grid.seeds:
                cfg = grid.base_train.with_overrides(seed=seed, **config.train_overrides)
                train_vols = load_split(manifest.paths("train"), hp)
                val_vols = load_split(manifest.paths("val"), hp)
                weights = M.init_weights(hp, seed)
                result = train(weights, train_vols, val_vols, cfg)
                write_run_config(out_dir / f"{config.name}_seed{seed}.cfg", hp, cfg)
                rows.extend(evaluate_on_entries(result.best, hp, test_entries))
            record = {"config": config.name, **_aggregate(rows)}
            result_path.write_text(json.dumps(record, sort_keys=True))
            results.append(record)
        except Exception as exc:  # noqa: BLE001 - per-config isolation is the contract
            log.error("config %s failed: %s", config.name, exc)
            failures.append((config.name, str(exc)))
    _write_results_csv(out_dir / "results.csv", results)
    if failures:
        lines = ["config,error"] + [f"{name},{msg}" for name, msg in failures]
        (out_dir / "failures.csv").write_text("\n".join(lines) + "\n")
    return results


def _write_results_csv(path: Path, results: list[dict]) -> None:
    lines = [",".join(RESULT_COLUMNS)]
    for r in results:
        lines.append(",".join([r["config"]] + [f"{r[c]:.6g}" for c in RESULT_COLUMNS[1:]]))
    path.write_text("\n".join(lines) + "\n")


def run_low_label_protocol(manifest: DatasetManifest, n_train_list: list[int],
                           options: list[str], hp: Hyperparams,
                           pre_cfg: TrainConfig, fine_cfg: TrainConfig,
                           seeds: list[int], out_dir: str | Path) -> list[dict]:
    """Scratch vs pre-trained segmentation accuracy with few labeled volumes.

    For each n_train, the first n_train pool volumes are the labeled set and
    the remaining pool volumes are the unlabeled pre-training corpus.
    Returns one row per (n_train, option, seed) with the mean test DSC.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pool = manifest.paths("train")
    val_entries = manifest.paths("val")
    test_entries = manifest.paths("test")
    bad = [o for o in options if o not in ("scratch", "denoising", "inpainting")]
    if bad:
        raise ConfigError(f"unknown low-label options: {bad}")
    needed = max(n_train_list)
    if needed >= len(pool) or not val_entries or not test_entries:
        raise DataError(
            f"dataset too small: pool={len(pool)}, need > {needed} plus val/test splits")

    val_vols_cache: dict[int, list[TrainingVolume]] = {}
    rows: list[dict] = []
    for n_train in n_train_list:
        labeled_entries = pool[:n_train]
        unlabeled_entries = pool[n_train:]
        for option in options:
            for seed in seeds:
                hp_run = hp
                labeled = load_split(labeled_entries, hp_run)
                val_vols = load_split(val_entries, hp_run)
                if option == "scratch":
                    cfg = fine_cfg.with_overrides(seed=seed)
                    weights = M.init_weights(hp_run, seed)
                    result = train(weights, labeled, val_vols, cfg)
                else:
                    n_pre_val = max(1, len(unlabeled_entries) // 5)
                    pre_train = load_split(unlabeled_entries[:-n_pre_val], hp_run,
                                           require_mask=False)
                    pre_val = load_split(unlabeled_entries[-n_pre_val:], hp_run,
                                         require_mask=False)
                    p_cfg = pre_cfg.with_overrides(seed=seed, pretrain_task=option)
                    f_cfg = fine_cfg.with_overrides(seed=seed)
                    _, result = pretrain_then_finetune(
                        hp_run, pre_train, pre_val, labeled, val_vols, p_cfg, f_cfg)
                scores = [r["dsc"] for r in evaluate_on_entries(result.best, hp_run, test_entries)]
                rows.append({"n_train": n_train, "option": option, "seed": seed,
                             "dsc": float(np.mean(scores))})
    _write_lowlabel_csv(out_dir / "lowlabel.csv", rows)
    return rows


def _write_lowlabel_csv(path: Path, rows: list[dict]) -> None:
    lines = ["n_train,option,seed,dsc"]
    for r in rows:
        lines.append(f"{r['n_train']},{r['option']},{r['seed']},{r['dsc']:.6g}")
    cells: dict[tuple[int, str], list[float]] = {}
    for r in rows:
        cells.setdefault((r["n_train"], r["option"]), []).append(r["dsc"])
    lines.append("")
    lines.append("n_train,option,dsc_mean,dsc_min,dsc_max")
    for (n_train, option), vals in sorted(cells.items()):
        arr = np.asarray(vals)
        lines.append(f"{n_train},{option},{arr.mean():.6g},{arr.min():.6g},{arr.max():.6g}")
    path.write_text("\n".join(lines) + "\n")
