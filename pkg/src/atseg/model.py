"""Patch-attention segmentation network.

A W x W x W x c block is split into N = n^3 non-overlapping patches, each
flattened and linearly embedded into R^D.  K encoder stages of multi-head
self-attention plus a position-wise FFN transform the token matrix (D x N,
one token per column), and an output head predicts the segmentation of the
block's center patch.

Patch raster order is z-major, then y, then x: patch j has grid coordinates
(gz, gy, gx) = (j // n^2, (j // n) % n, j % n).  Blocks and volumes are
indexed (x, y, z, channel) with the last index fastest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

POS_MODES = ("learned", "fixed", "none")
HEAD_MODES = ("voxel", "patch")
NORM_MODES = ("post", "pre", "off")

LN_EPS = 1e-5


@dataclass(frozen=True)
class Hyperparams:
    """Architecture knobs.  Defaults are the full-scale reference setting."""

    W: int = 24          # block side, voxels
    n: int = 3           # patches per axis (odd)
    c: int = 1           # input channels
    K: int = 7           # encoder stages
    D: int = 1024        # embedding width
    D_h: int = 256       # per-head width
    n_h: int = 4         # attention heads
    n_class: int = 2     # output classes
    d_ff: int = 0        # FFN hidden width; 0 means "same as D"
    pos_mode: str = "learned"
    head_mode: str = "voxel"
    norm_mode: str = "post"

    def __post_init__(self):
        for name in ("W", "n", "c", "K", "D", "D_h", "n_h", "n_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n % 2 == 0:
            raise ConfigError(f"n must be odd, got {self.n}")
        if self.W % self.n != 0:
            raise ConfigError(f"W={self.W} is not divisible by n={self.n}")
        if self.pos_mode not in POS_MODES:
            raise ConfigError(f"pos_mode must be one of {POS_MODES}, got {self.pos_mode!r}")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")

    @property
    def w(self) -> int:
        return self.W // self.n

    @property
    def N(self) -> int:
        return self.n ** 3

    @property
    def ffn_width(self) -> int:
        return self.d_ff if self.d_ff > 0 else self.D

    @property
    def center_index(self) -> int:
        return (self.N - 1) // 2

    @property
    def patch_len(self) -> int:
        return self.w ** 3 * self.c

    def with_overrides(self, **kwargs) -> "Hyperparams":
        return replace(self, **kwargs)


def patch_grid_coords(j: int, n: int) -> tuple[int, int, int]:
    """Raster index -> (gz, gy, gx) patch grid coordinates."""
    return j // (n * n), (j // n) % n, j % n


def patch_voxel_origin(j: int, hp: Hyperparams) -> tuple[int, int, int]:
    """Raster index -> (ox, oy, oz) voxel offset of the patch within its block."""
    gz, gy, gx = patch_grid_coords(j, hp.n)
    return gx * hp.w, gy * hp.w, gz * hp.w


# ---------------------------------------------------------------------------
# weights


@dataclass
class AttnHead:
    q: Tensor
    k: Tensor
    v: Tensor


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class AffineHead:
    w: Tensor
    b: Tensor


@dataclass
class StageWeights:
    heads: list[AttnHead]
    reproj: Tensor
    msa_norm: NormParams | None
    ffn: FfnParams
    ffn_norm: NormParams | None


@dataclass
class ModelWeights:
    hp: Hyperparams
    embed: Tensor
    pos: Tensor | None          # learned table; fixed tables are derived, not stored
    stages: list[StageWeights]
    seg_head: AffineHead | None
    pre_head: AffineHead | None = None

    def named(self) -> dict[str, Tensor]:
        """Flat name -> tensor map in a fixed, documented order."""
        out: dict[str, Tensor] = {"embed": self.embed}
        if self.pos is not None:
            out["pos"] = self.pos
        for k, st in enumerate(self.stages):
            for i, h in enumerate(st.heads):
                out[f"stage{k}.head{i}.q"] = h.q
                out[f"stage{k}.head{i}.k"] = h.k
                out[f"stage{k}.head{i}.v"] = h.v
            out[f"stage{k}.reproj"] = st.reproj
            if st.msa_norm is not None:
                out[f"stage{k}.msa_norm.gamma"] = st.msa_norm.gamma
                out[f"stage{k}.msa_norm.beta"] = st.msa_norm.beta
            out[f"stage{k}.ffn.w1"] = st.ffn.w1
            out[f"stage{k}.ffn.b1"] = st.ffn.b1
            out[f"stage{k}.ffn.w2"] = st.ffn.w2
            out[f"stage{k}.ffn.b2"] = st.ffn.b2
            if st.ffn_norm is not None:
                out[f"stage{k}.ffn_norm.gamma"] = st.ffn_norm.gamma
                out[f"stage{k}.ffn_norm.beta"] = st.ffn_norm.beta
        if self.seg_head is not None:
            out["seg_head.w"] = self.seg_head.w
            out["seg_head.b"] = self.seg_head.b
        if self.pre_head is not None:
            out["pre_head.w"] = self.pre_head.w
            out["pre_head.b"] = self.pre_head.b
        return out

    def zero_grad(self) -> None:
        for t in self.named().values():
            t.zero_grad()

    def copy(self) -> "ModelWeights":
        """Deep copy of all tensors (grads not carried over)."""
        def ct(t: Tensor | None) -> Tensor | None:
            return None if t is None else Tensor(t.data.copy(), requires_grad=t.requires_grad)

        stages = [StageWeights(
            heads=[AttnHead(ct(h.q), ct(h.k), ct(h.v)) for h in st.heads],
            reproj=ct(st.reproj),
            msa_norm=None if st.msa_norm is None else NormParams(ct(st.msa_norm.gamma), ct(st.msa_norm.beta)),
            ffn=FfnParams(ct(st.ffn.w1), ct(st.ffn.b1), ct(st.ffn.w2), ct(st.ffn.b2)),
            ffn_norm=None if st.ffn_norm is None else NormParams(ct(st.ffn_norm.gamma), ct(st.ffn_norm.beta)),
        ) for st in self.stages]
        seg = None if self.seg_head is None else AffineHead(ct(self.seg_head.w), ct(self.seg_head.b))
        pre = None if self.pre_head is None else AffineHead(ct(self.pre_head.w), ct(self.pre_head.b))
        return ModelWeights(self.hp, ct(self.embed), ct(self.pos), stages, seg, pre)


@dataclass
class AttentionRecord:
    """Per-stage, per-head attention matrices captured during a forward pass."""

    a: list[list[np.ndarray]] = field(default_factory=list)  # a[k][i]: N x N

    @property
    def count(self) -> int:
        return sum(len(stage) for stage in self.a)

    def matrices(self):
        for k, stage in enumerate(self.a):
            for i, m in enumerate(stage):
                yield k, i, m


# ---------------------------------------------------------------------------
# initialization


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def head_dims(hp: Hyperparams, kind: str) -> tuple[int, int]:
    """(rows, cols) of the output head's weight matrix."""
    if kind == "pre":
        return hp.patch_len, hp.D * hp.N
    if hp.head_mode == "voxel":
        return hp.w ** 3 * hp.n_class, hp.D * hp.N
    return hp.n_class, hp.D


def init_weights(hp: Hyperparams, seed: int, pretrain_head: bool = False,
                 seg_head: bool = True) -> ModelWeights:
    """Deterministic Glorot-uniform weights; biases and the positional table zero.

    Tensors are drawn in the same order `ModelWeights.named` lists them, so a
    seed fully determines every value.
    """
    rng = np.random.default_rng(seed)

    def p(rows, cols=None):
        if cols is None:
            return Tensor(np.zeros(rows), requires_grad=True)
        return Tensor(_glorot(rng, rows, cols), requires_grad=True)

    embed = p(hp.D, hp.patch_len)
    pos = Tensor(np.zeros((hp.D, hp.N)), requires_grad=True) if hp.pos_mode == "learned" else None
    with_norm = hp.norm_mode != "off"
    stages = []
    for _ in range(hp.K):
        heads = [AttnHead(p(hp.D_h, hp.D), p(hp.D_h, hp.D), p(hp.D_h, hp.D)) for _ in range(hp.n_h)]
        reproj = p(hp.D, hp.D_h * hp.n_h)
        msa_norm = NormParams(Tensor(np.ones(hp.D), True), p(hp.D)) if with_norm else None
        ffn = FfnParams(p(hp.ffn_width, hp.D), p(hp.ffn_width), p(hp.D, hp.ffn_width), p(hp.D))
        ffn_norm = NormParams(Tensor(np.ones(hp.D), True), p(hp.D)) if with_norm else None
        stages.append(StageWeights(heads, reproj, msa_norm, ffn, ffn_norm))
    seg = None
    if seg_head:
        r, c = head_dims(hp, "seg")
        seg = AffineHead(p(r, c), p(r))
    pre = None
    if pretrain_head:
        r, c = head_dims(hp, "pre")
        pre = AffineHead(p(r, c), p(r))
    return ModelWeights(hp, embed, pos, stages, seg, pre)


def parameter_count(hp: Hyperparams, pretrain_head: bool = False, seg_head: bool = True) -> int:
    """Closed-form trainable parameter count for a given configuration."""
    d, dh, nh, dff, n_tok = hp.D, hp.D_h, hp.n_h, hp.ffn_width, hp.N
    total = d * hp.patch_len
    if hp.pos_mode == "learned":
        total += d * n_tok
    per_stage = nh * 3 * dh * d + d * dh * nh + dff * d + dff + d * dff + d
    if hp.norm_mode != "off":
        per_stage += 4 * d
    total += hp.K * per_stage
    if seg_head:
        r, c = head_dims(hp, "seg")
        total += r * c + r
    if pretrain_head:
        r, c = head_dims(hp, "pre")
        total += r * c + r
    return total


def sinusoidal_table(d: int, n_tok: int) -> np.ndarray:
    """Fixed 1-D sinusoidal positional table over the patch raster index."""
    table = np.zeros((d, n_tok))
    pos = np.arange(n_tok, dtype=np.float64)
    for i in range(0, d, 2):
        freq = 1.0 / (10000.0 ** (i / d))
        table[i] = np.sin(pos * freq)
        if i + 1 < d:
            table[i + 1] = np.cos(pos * freq)
    return table


# ---------------------------------------------------------------------------
# forward pieces


def partition_block(block: np.ndarray, hp: Hyperparams) -> np.ndarray:
    """Split a W x W x W x c block into its N flattened patches, raster order.

    Returns an (N, w^3*c) array; row j is patch j.
    """
    block = np.asarray(block, dtype=np.float64)
    expected = (hp.W, hp.W, hp.W, hp.c)
    if block.shape != expected:
        raise ShapeError(f"block shape {block.shape} != {expected}")
    w = hp.w
    out = np.empty((hp.N, hp.patch_len))
    for j in range(hp.N):
        ox, oy, oz = patch_voxel_origin(j, hp)
        out[j] = block[ox:ox + w, oy:oy + w, oz:oz + w, :].ravel()
    return out


def assemble_block(patches: np.ndarray, hp: Hyperparams) -> np.ndarray:
    """Inverse of partition_block."""
    w = hp.w
    block = np.empty((hp.W, hp.W, hp.W, hp.c))
    for j in range(hp.N):
        ox, oy, oz = patch_voxel_origin(j, hp)
        block[ox:ox + w, oy:oy + w, oz:oz + w, :] = patches[j].reshape(w, w, w, hp.c)
    return block


def embed_sequence(patches: np.ndarray, weights: ModelWeights, hp: Hyperparams) -> Tensor:
    """Embed flattened patches into the initial D x N token matrix."""
    if patches.shape != (hp.N, hp.patch_len):
        raise ConfigError(f"patch array shape {patches.shape} != {(hp.N, hp.patch_len)}")
    if weights.embed.shape != (hp.D, hp.patch_len):
        raise ConfigError(f"embedding shape {weights.embed.shape} != {(hp.D, hp.patch_len)}")
    x = T.matmul(weights.embed, Tensor(patches.T))
    if hp.pos_mode == "learned":
        x = T.add(x, weights.pos)
    elif hp.pos_mode == "fixed":
        x = T.add(x, Tensor(sinusoidal_table(hp.D, hp.N)))
    return x


def _sublayer_norm(x: Tensor, norm: NormParams | None) -> Tensor:
    return x if norm is None else T.layer_norm(x, norm.gamma, norm.beta, LN_EPS)


def msa(x: Tensor, stage: StageWeights, hp: Hyperparams) -> tuple[Tensor, list[np.ndarray]]:
    """Multi-head self-attention sublayer with residual and configured norm.

    Returns the sublayer output and the per-head N x N attention matrices.
    """
    xin = _sublayer_norm(x, stage.msa_norm) if hp.norm_mode == "pre" else x
    inv_sqrt = 1.0 / math.sqrt(hp.D_h)
    outs, attns = [], []
    for head in stage.heads:
        q = T.matmul(head.q, xin)
        k = T.matmul(head.k, xin)
        v = T.matmul(head.v, xin)
        a = T.softmax_rows(T.scale(T.matmul(T.transpose(q), k), inv_sqrt))
        attns.append(a.data.copy())
        outs.append(T.matmul(v, T.transpose(a)))  # token j <- sum_m A[j,m] V[:,m]
    stacked = outs[0] if len(outs) == 1 else T.concat_rows(outs)
    y = T.add(x, T.matmul(stage.reproj, stacked))
    if hp.norm_mode == "post":
        y = _sublayer_norm(y, stage.msa_norm)
    return y, attns


def ffn(x: Tensor, stage: StageWeights, hp: Hyperparams) -> Tensor:
    """Two-layer position-wise FFN sublayer with residual and configured norm."""
    xin = _sublayer_norm(x, stage.ffn_norm) if hp.norm_mode == "pre" else x
    h = T.relu(T.add_bias(T.matmul(stage.ffn.w1, xin), stage.ffn.b1))
    y = T.add(x, T.add_bias(T.matmul(stage.ffn.w2, h), stage.ffn.b2))
    if hp.norm_mode == "post":
        y = _sublayer_norm(y, stage.ffn_norm)
    return y


def encode(x: Tensor, weights: ModelWeights, hp: Hyperparams,
           record: AttentionRecord | None = None) -> Tensor:
    """Run the K encoder stages on a D x N token matrix."""
    for stage in weights.stages:
        x, attns = msa(x, stage, hp)
        if record is not None:
            record.a.append(attns)
        x = ffn(x, stage, hp)
    return x


def segmentation_head(x: Tensor, weights: ModelWeights, hp: Hyperparams) -> Tensor:
    """Class probabilities from the final token matrix.

    voxel mode: the flattened token matrix maps to (w^3, n_class), softmax per
    voxel.  patch mode: each token maps to n_class logits, giving (N, n_class)
    with softmax per patch.
    """
    head = weights.seg_head
    if head is None:
        raise ConfigError("model has no segmentation head")
    if hp.head_mode == "voxel":
        flat = T.reshape(x, (hp.D * hp.N, 1))
        logits = T.add_bias(T.matmul(head.w, flat), head.b)
        return T.softmax_rows(T.reshape(logits, (hp.w ** 3, hp.n_class)))
    logits = T.add_bias(T.matmul(head.w, x), head.b)       # n_class x N
    return T.softmax_rows(T.transpose(logits))             # N x n_class


def pretraining_head(x: Tensor, weights: ModelWeights, hp: Hyperparams) -> Tensor:
    """Raw center-patch reconstruction (length w^3*c vector, no softmax)."""
    head = weights.pre_head
    if head is None:
        raise ConfigError("model has no pre-training head")
    flat = T.reshape(x, (hp.D * hp.N, 1))
    out = T.add_bias(T.matmul(head.w, flat), head.b)
    return T.reshape(out, (hp.patch_len,))


def forward_probs(block: np.ndarray, weights: ModelWeights, hp: Hyperparams,
                  record: AttentionRecord | None = None) -> Tensor:
    """Differentiable pipeline: block -> per-voxel (or per-patch) probabilities."""
    x = embed_sequence(partition_block(block, hp), weights, hp)
    x = encode(x, weights, hp, record)
    return segmentation_head(x, weights, hp)


def forward_pretrain(block: np.ndarray, weights: ModelWeights, hp: Hyperparams) -> Tensor:
    """Differentiable pipeline for the reconstruction objective."""
    x = embed_sequence(partition_block(block, hp), weights, hp)
    x = encode(x, weights, hp)
    return pretraining_head(x, weights, hp)


def probs_to_grid(probs: np.ndarray, hp: Hyperparams) -> np.ndarray:
    """Reshape head output rows into a spatial grid, axes (x, y, z, class)."""
    if hp.head_mode == "voxel":
        return probs.reshape(hp.w, hp.w, hp.w, hp.n_class)
    # patch raster order is (gz, gy, gx); reorder axes to (x, y, z)
    return probs.reshape(hp.n, hp.n, hp.n, hp.n_class).transpose(2, 1, 0, 3)


def forward(block: np.ndarray, weights: ModelWeights, hp: Hyperparams,
            capture_attention: bool = False) -> tuple[np.ndarray, AttentionRecord | None]:
    """Plain-array forward pass for inference.

    Returns the predicted probability grid, (w,w,w,n_class) in voxel mode or
    (n,n,n,n_class) in patch mode, and the attention record if requested.
    Deterministic for fixed weights and input.
    """
    record = AttentionRecord() if capture_attention else None
    probs = forward_probs(block, weights, hp, record)
    return probs_to_grid(probs.data, hp), record
