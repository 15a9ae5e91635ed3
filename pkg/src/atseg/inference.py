"""Whole-volume segmentation by sliding-window application of the model.

Each axis is padded by the block/center-patch margin (W-w)/2 plus whatever
remainder makes the core a multiple of w (low side gets floor(r/2)).  Windows
then slide with stride w, so every original voxel is predicted by exactly one
window's center patch.  Attention maps aggregate the per-window column sums
of every stage/head attention matrix, spread uniformly over each patch and
averaged voxel-wise across the overlapping windows.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import model as M
from .data_io import Volume, pad_volume, zscore
from .errors import NumericError
from .model import Hyperparams, ModelWeights


def worker_count() -> int:
    """Worker cap from ATSG_THREADS (0 or unset = auto)."""
    raw = os.environ.get("ATSG_THREADS", "0")
    try:
        value = int(raw)
    except ValueError:
        value = 0
    if value > 0:
        return value
    return min(4, os.cpu_count() or 1)


@dataclass(frozen=True)
class WindowPlan:
    volume_shape: tuple[int, int, int]
    padded_shape: tuple[int, int, int]
    pad_low: tuple[int, int, int]
    pad_high: tuple[int, int, int]
    origins: list[tuple[int, int, int]]     # window origins in padded coordinates
    margin: int                              # (W - w) / 2


def plan_windows(volume_shape: tuple[int, int, int], hp: Hyperparams) -> WindowPlan:
    """Window origins and padding so center patches tile the volume exactly once."""
    w, W = hp.w, hp.W
    margin = (W - w) // 2
    lows, highs, counts = [], [], []
    for extent in volume_shape:
        r = (-extent) % w
        lows.append(margin + r // 2)
        highs.append(margin + r - r // 2)
        counts.append((extent + r) // w)
    padded = tuple(volume_shape[i] + lows[i] + highs[i] for i in range(3))
    origins = [(ix * w, iy * w, iz * w)
               for ix in range(counts[0]) for iy in range(counts[1]) for iz in range(counts[2])]
    return WindowPlan(tuple(volume_shape), padded, tuple(lows), tuple(highs), origins, margin)


def _forward_windows(padded: np.ndarray, plan: WindowPlan, weights: ModelWeights,
                     hp: Hyperparams, capture: bool):
    """Forward every window; results returned in plan order."""
    W = hp.W

    def run(origin):
        block = padded[origin[0]:origin[0] + W, origin[1]:origin[1] + W,
                       origin[2]:origin[2] + W, :]
        probs, record = M.forward(block, weights, hp, capture_attention=capture)
        if not np.all(np.isfinite(probs)):
            raise NumericError(f"non-finite prediction at window origin {origin}")
        return probs, record

    workers = worker_count()
    if workers <= 1 or len(plan.origins) < 4:
        return [run(o) for o in plan.origins]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, plan.origins))


def segment_volume(volume: Volume, weights: ModelWeights, hp: Hyperparams,
                   pad_mode: str = "mirror") -> tuple[np.ndarray, np.ndarray]:
    """Segment a whole volume.

    Returns (labels, probabilities): labels is (X, Y, Z) argmax classes,
    probabilities is (X, Y, Z, n_class).  Voxels are normalized per volume
    before windowing, matching training.
    """
    data = zscore(volume.data.astype(np.float64))
    plan = plan_windows(data.shape[:3], hp)
    padded = pad_volume(data, plan.pad_low, plan.pad_high, pad_mode)
    out = np.zeros(plan.padded_shape + (hp.n_class,))
    w, m = hp.w, plan.margin
    results = _forward_windows(padded, plan, weights, hp, capture=False)
    for origin, (probs, _) in zip(plan.origins, results):
        ox, oy, oz = (origin[0] + m, origin[1] + m, origin[2] + m)
        out[ox:ox + w, oy:oy + w, oz:oz + w, :] = probs
    lo = plan.pad_low
    sx, sy, sz = plan.volume_shape
    probs = out[lo[0]:lo[0] + sx, lo[1]:lo[1] + sy, lo[2]:lo[2] + sz, :]
    return probs.argmax(axis=3).astype(np.uint8), probs


def aggregate_attention(volume: Volume, weights: ModelWeights, hp: Hyperparams,
                        pad_mode: str = "mirror") -> dict[str, np.ndarray]:
    """Volume-shaped total-attention maps, one per (stage, head).

    Per window, each attention matrix is summed along its columns to get the
    total attention received by each of the N patches; that total is spread
    uniformly over the patch's w^3 voxels, and overlapping window
    contributions are averaged voxel-wise.
    """
    data = zscore(volume.data.astype(np.float64))
    plan = plan_windows(data.shape[:3], hp)
    padded = pad_volume(data, plan.pad_low, plan.pad_high, pad_mode)
    w = hp.w
    sums = np.zeros((hp.K, hp.n_h) + plan.padded_shape)
    counts = np.zeros(plan.padded_shape)
    results = _forward_windows(padded, plan, weights, hp, capture=True)
    patch_origins = [M.patch_voxel_origin(j, hp) for j in range(hp.N)]
    for origin, (_, record) in zip(plan.origins, results):
        counts[origin[0]:origin[0] + hp.W, origin[1]:origin[1] + hp.W,
               origin[2]:origin[2] + hp.W] += 1.0
        for k, i, a in record.matrices():
            totals = a.sum(axis=0) / float(w ** 3)
            for j, (px, py, pz) in enumerate(patch_origins):
                sums[k, i,
                     origin[0] + px:origin[0] + px + w,
                     origin[1] + py:origin[1] + py + w,
                     origin[2] + pz:origin[2] + pz + w] += totals[j]
    counts[counts == 0.0] = 1.0
    lo = plan.pad_low
    sx, sy, sz = plan.volume_shape
    maps = {}
    for k in range(hp.K):
        for i in range(hp.n_h):
            full = sums[k, i] / counts
            maps[f"attn_k{k}_h{i}"] = full[lo[0]:lo[0] + sx, lo[1]:lo[1] + sy, lo[2]:lo[2] + sz]
    return maps
