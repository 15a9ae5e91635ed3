"""Optimization: Adam on soft Dice, plateau LR halving, block sampling,
denoising/inpainting pre-training, and head-swap fine-tuning.

Conventions fixed here: volumes are z-scored per volume before any block is
sampled; an epoch is a fixed number of sampled blocks; half of the sampled
blocks (configurable) are forced to contain foreground in the center patch;
noise power for denoising is referenced to the variance of the current
block's intensities.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as M
from . import tensor as T
from .data_io import ManifestEntry, Volume, pad_volume, read_volume, zscore
from .errors import ConfigError, DataError, NumericError
from .losses import l2_loss, one_hot, soft_dice_loss
from .model import Hyperparams, ModelWeights
from .tensor import Tape, Tensor, backward

log = logging.getLogger("atseg")

PRETRAIN_TASKS = ("denoising", "inpainting", "none")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    lr: float = 1e-4
    max_epochs: int = 20
    blocks_per_epoch: int = 100
    val_blocks: int = 20
    seed: int = 0
    snr_db: float = 10.0
    pretrain_task: str = "none"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    fg_fraction: float = 0.5

    def __post_init__(self):
        # lr 0 is allowed: it makes training a parameter-preserving no-op,
        # which the smoke tests rely on.
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not math.isfinite(self.snr_db):
            raise ConfigError("snr_db must be finite")
        if self.pretrain_task not in PRETRAIN_TASKS:
            raise ConfigError(f"pretrain_task must be one of {PRETRAIN_TASKS}")
        if not 0.0 <= self.fg_fraction <= 1.0:
            raise ConfigError(f"fg_fraction must lie in [0,1], got {self.fg_fraction}")

    def with_overrides(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    best: ModelWeights
    final: ModelWeights
    stats: list[EpochStats]
    diverged: bool = False

    @property
    def best_val_loss(self) -> float:
        return min((s.val_loss for s in self.stats), default=math.inf)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update; missing gradients count as zero."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for tensor '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def plateau_multiplier(val_losses: list[float]) -> float:
    """Cumulative LR multiplier implied by a validation-loss history.

    After each epoch the rate is halved when the loss failed to strictly
    improve on the best seen so far (ties count as no improvement).
    """
    best = math.inf
    mult = 1.0
    for loss in val_losses:
        if loss < best:
            best = loss
        else:
            mult *= 0.5
    return mult


# ---------------------------------------------------------------------------
# data access


@dataclass
class TrainingVolume:
    """A z-scored image (padded to at least W per axis) and its padded mask."""

    image: np.ndarray                 # (X, Y, Z, C) float64
    mask: np.ndarray | None           # (X, Y, Z) int, or None for unlabeled data
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


def prepare_volume(image: Volume, mask: Volume | None, hp: Hyperparams,
                   n_class: int | None = None) -> TrainingVolume:
    data = zscore(image.data.astype(np.float64))
    if data.shape[3] != hp.c:
        raise DataError(f"volume has {data.shape[3]} channels, model expects {hp.c}")
    labels = None
    if mask is not None:
        labels = mask.data[..., 0].astype(np.int64)
        if labels.shape != data.shape[:3]:
            raise DataError(f"mask shape {labels.shape} does not match image {data.shape[:3]}")
        limit = n_class if n_class is not None else hp.n_class
        if labels.max() >= limit or labels.min() < 0:
            raise DataError(f"mask labels outside [0, {limit}): found {labels.min()}..{labels.max()}")
    pads = [max(0, hp.W - s) for s in data.shape[:3]]
    if any(pads):
        lows = tuple(p // 2 for p in pads)
        highs = tuple(p - p // 2 for p in pads)
        if any(s == 0 for s in data.shape[:3]):
            raise DataError("volume has a zero-sized axis")
        data = pad_volume(data, lows, highs, "mirror")
        if labels is not None:
            labels = pad_volume(labels[..., None], lows, highs, "mirror")[..., 0]
    return TrainingVolume(data, labels, image.spacing)


def load_split(entries: list[ManifestEntry], hp: Hyperparams,
               require_mask: bool = True) -> list[TrainingVolume]:
    if not entries:
        raise DataError("manifest split is empty")
    out = []
    for e in entries:
        if require_mask and e.mask is None:
            raise DataError(f"{e.image}: no mask listed but one is required")
        vol = read_volume(e.image)
        msk = read_volume(e.mask) if e.mask is not None else None
        out.append(prepare_volume(vol, msk, hp))
    return out


# ---------------------------------------------------------------------------
# block sampling and self-supervised examples


def _center_slice(hp: Hyperparams, origin: tuple[int, int, int]):
    m = (hp.W - hp.w) // 2
    return tuple(slice(o + m, o + m + hp.w) for o in origin)


def sample_training_block(volume: TrainingVolume, hp: Hyperparams, rng: np.random.Generator,
                          fg_fraction: float = 0.5,
                          ) -> tuple[np.ndarray, np.ndarray | None]:
    """Draw one W-block and the center-patch ground truth (None if unlabeled).

    A `fg_fraction` share of draws rejection-samples origins until the center
    patch contains foreground; if 50 tries fail (e.g. an all-background mask)
    it falls back to the last uniform draw with a warning.
    """
    img, labels = volume.image, volume.mask
    spans = [img.shape[i] - hp.W for i in range(3)]
    if any(s < 0 for s in spans):
        raise DataError(f"volume {img.shape[:3]} is smaller than W={hp.W} after padding")

    def draw():
        return tuple(int(rng.integers(0, s + 1)) for s in spans)

    origin = draw()
    if labels is not None and fg_fraction > 0 and rng.random() < fg_fraction:
        for attempt in range(50):
            if labels[_center_slice(hp, origin)].any():
                break
            origin = draw()
        else:
            log.warning("foreground-forced sampling found no foreground; using uniform draw")
    block = img[tuple(slice(o, o + hp.W) for o in origin) + (slice(None),)]
    target = None if labels is None else labels[_center_slice(hp, origin)]
    return np.ascontiguousarray(block), (None if target is None else np.ascontiguousarray(target))


def make_denoising_example(block: np.ndarray, hp: Hyperparams, rng: np.random.Generator,
                           snr_db: float = 10.0) -> tuple[np.ndarray, np.ndarray]:
    """Additive white Gaussian noise at the requested SNR vs block variance.

    noise variance = Var(block) / 10^(snr_db/10); the target is the clean
    center patch.  A zero-variance block passes through unchanged.
    """
    signal_power = float(block.var())
    target = block[_center_slice(hp, (0, 0, 0)) + (slice(None),)].copy()
    if signal_power == 0.0:
        log.warning("denoising example on a zero-variance block; passing through noise-free")
        return block.copy(), target
    sigma = math.sqrt(signal_power / (10.0 ** (snr_db / 10.0)))
    return block + rng.normal(0.0, sigma, block.shape), target


def make_inpainting_example(block: np.ndarray, hp: Hyperparams) -> tuple[np.ndarray, np.ndarray]:
    """Zero out the center patch; the target is the original center patch."""
    sl = _center_slice(hp, (0, 0, 0)) + (slice(None),)
    target = block[sl].copy()
    masked = block.copy()
    masked[sl] = 0.0
    return masked, target


# ---------------------------------------------------------------------------
# training loops


def _sample_batch(volumes: list[TrainingVolume], hp: Hyperparams, cfg: TrainConfig,
                  rng: np.random.Generator, count: int, labeled: bool):
    batch = []
    for _ in range(count):
        vol = volumes[int(rng.integers(0, len(volumes)))]
        fg = cfg.fg_fraction if labeled else 0.0
        block, target = sample_training_block(vol, hp, rng, fg)
        if labeled and target is None:
            raise DataError("segmentation training needs masks for every volume")
        batch.append((block, target))
    return batch


def _materialize(batch, hp: Hyperparams, cfg: TrainConfig, objective: str,
                 rng: np.random.Generator):
    """Turn sampled (block, center labels) pairs into (input, loss target) pairs."""
    out = []
    for block, target in batch:
        if objective == "dice":
            out.append((block, one_hot(target, hp.n_class)))
        elif objective == "denoising":
            noisy, clean = make_denoising_example(block, hp, rng, cfg.snr_db)
            out.append((noisy, clean.ravel()))
        elif objective == "inpainting":
            masked, clean = make_inpainting_example(block, hp)
            out.append((masked, clean.ravel()))
        else:
            raise ConfigError(f"unknown objective {objective!r}")
    return out


def _example_loss(inp: np.ndarray, target: np.ndarray, weights: ModelWeights,
                  hp: Hyperparams, objective: str) -> Tensor:
    if objective == "dice":
        return soft_dice_loss(M.forward_probs(inp, weights, hp), target)
    return l2_loss(M.forward_pretrain(inp, weights, hp), target)


def _mean_loss(examples, weights, hp, objective) -> Tensor:
    total = None
    for inp, target in examples:
        loss = _example_loss(inp, target, weights, hp, objective)
        total = loss if total is None else T.add(total, loss)
    return T.scale(total, 1.0 / len(examples))


def train(weights: ModelWeights, train_volumes: list[TrainingVolume],
          val_volumes: list[TrainingVolume], cfg: TrainConfig,
          objective: str = "dice", stats_path: str | Path | None = None) -> TrainResult:
    """Adam training with plateau LR halving and best-validation tracking.

    Deterministic for a fixed (seed, config, data): the sampling stream, the
    validation set, and the update order are all derived from cfg.seed.
    """
    hp = weights.hp
    if objective == "dice" and hp.head_mode != "voxel":
        raise ConfigError("segmentation training requires head_mode=voxel")
    if not train_volumes or not val_volumes:
        raise DataError("need at least one training and one validation volume")
    labeled = objective == "dice"
    sample_rng = np.random.default_rng([cfg.seed, 11])
    noise_rng = np.random.default_rng([cfg.seed, 13])
    val_rng = np.random.default_rng([cfg.seed, 17])
    # The validation set (including any noise) is fixed once so the plateau
    # rule compares like with like across epochs.
    val_examples = _materialize(
        _sample_batch(val_volumes, hp, cfg, val_rng, cfg.val_blocks, labeled),
        hp, cfg, objective, val_rng)

    params = weights.named()
    state = AdamState()
    lr = cfg.lr
    best_val = math.inf
    best = weights.copy()
    stats: list[EpochStats] = []
    steps = max(1, cfg.blocks_per_epoch // cfg.batch_size)

    for epoch in range(1, cfg.max_epochs + 1):
        epoch_losses = []
        for _ in range(steps):
            batch = _sample_batch(train_volumes, hp, cfg, sample_rng, cfg.batch_size, labeled)
            examples = _materialize(batch, hp, cfg, objective, noise_rng)
            weights.zero_grad()
            try:
                with Tape() as tape:
                    loss = _mean_loss(examples, weights, hp, objective)
                loss_value = float(loss.data)
                if not math.isfinite(loss_value):
                    raise NumericError(f"training loss diverged at epoch {epoch}")
                backward(loss, tape)
                adam_step(params, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            except NumericError as exc:
                log.error("aborting training: %s", exc)
                _append_stats(stats_path, stats)
                return TrainResult(best, weights, stats, diverged=True)
            epoch_losses.append(loss_value)

        val_loss = _eval_loss(val_examples, weights, hp, objective)
        stats.append(EpochStats(epoch, float(np.mean(epoch_losses)), val_loss, lr))
        if val_loss < best_val:
            best_val = val_loss
            best = weights.copy()
        else:
            lr *= 0.5
    _append_stats(stats_path, stats)
    return TrainResult(best, weights, stats)


def _eval_loss(examples, weights, hp, objective) -> float:
    total = 0.0
    for inp, target in examples:
        total += float(_example_loss(inp, target, weights, hp, objective).data)
    return total / len(examples)


def _append_stats(path: str | Path | None, stats: list[EpochStats]) -> None:
    if path is None:
        return
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for s in stats:
            writer.writerow([s.epoch, f"{s.train_loss:.10g}", f"{s.val_loss:.10g}", f"{s.lr:.10g}"])


def pretrain_then_finetune(hp: Hyperparams, unlabeled_train: list[TrainingVolume],
                           unlabeled_val: list[TrainingVolume],
                           labeled_train: list[TrainingVolume],
                           labeled_val: list[TrainingVolume],
                           pre_cfg: TrainConfig, fine_cfg: TrainConfig,
                           ) -> tuple[TrainResult, TrainResult]:
    """Reconstruction pre-training, then full fine-tuning with a fresh head.

    Phase 1 optimizes the MSE objective named by pre_cfg.pretrain_task with a
    reconstruction output layer.  Phase 2 drops that layer, attaches a fresh
    softmax segmentation head, and trains every parameter on soft Dice.
    """
    if pre_cfg.pretrain_task == "none":
        raise ConfigError("pretrain_then_finetune requires pretrain_task != none")
    weights = M.init_weights(hp, pre_cfg.seed, pretrain_head=True, seg_head=False)
    pre_result = train(weights, unlabeled_train, unlabeled_val, pre_cfg,
                       objective=pre_cfg.pretrain_task)
    fine_weights = swap_to_segmentation_head(pre_result.best, fine_cfg.seed)
    fine_result = train(fine_weights, labeled_train, labeled_val, fine_cfg, objective="dice")
    return pre_result, fine_result


def swap_to_segmentation_head(weights: ModelWeights, seed: int) -> ModelWeights:
    """Drop the reconstruction head and attach a freshly initialized softmax head."""
    out = weights.copy()
    out.pre_head = None
    rng = np.random.default_rng([seed, 29])
    rows, cols = M.head_dims(weights.hp, "seg")
    out.seg_head = M.AffineHead(
        Tensor(M._glorot(rng, rows, cols), requires_grad=True),
        Tensor(np.zeros(rows), requires_grad=True),
    )
    return out


# ---------------------------------------------------------------------------
# run-config files


_HP_KEYS = ("W", "n", "c", "K", "D", "D_h", "n_h", "n_class", "d_ff",
            "pos_mode", "head_mode", "norm_mode")
_TRAIN_KEYS = ("batch_size", "lr", "max_epochs", "blocks_per_epoch", "val_blocks",
               "seed", "snr_db", "pretrain_task", "beta1", "beta2", "adam_eps",
               "fg_fraction")


def read_run_config(path: str | Path) -> dict[str, str]:
    """Parse `key = value` lines; unknown keys are a config error."""
    values: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"malformed run-config line: {raw!r}")
        key, _, value = (t.strip() for t in line.partition("="))
        if key not in _HP_KEYS and key not in _TRAIN_KEYS:
            raise ConfigError(f"unknown run-config key {key!r}")
        values[key] = value
    return values


def apply_config(hp: Hyperparams, cfg: TrainConfig,
                 values: dict[str, str]) -> tuple[Hyperparams, TrainConfig]:
    hp_over, cfg_over = {}, {}
    for key, value in values.items():
        if key in _HP_KEYS:
            current = getattr(hp, key)
            hp_over[key] = value if isinstance(current, str) else int(value)
        else:
            current = getattr(cfg, key)
            if isinstance(current, bool):
                cfg_over[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                cfg_over[key] = int(value)
            elif isinstance(current, float):
                cfg_over[key] = float(value)
            else:
                cfg_over[key] = value
    return hp.with_overrides(**hp_over), cfg.with_overrides(**cfg_over)


def write_run_config(path: str | Path, hp: Hyperparams, cfg: TrainConfig) -> None:
    lines = ["# run configuration snapshot"]
    for key in _HP_KEYS:
        lines.append(f"{key} = {getattr(hp, key)}")
    for key in _TRAIN_KEYS:
        lines.append(f"{key} = {getattr(cfg, key)}")
    Path(path).write_text("\n".join(lines) + "\n")
