"""End-to-end gradient verification for whole model configurations."""

from __future__ import annotations

import numpy as np

from . import model as M
from .errors import ConfigError
from .losses import l2_loss, one_hot, soft_dice_loss
from .model import Hyperparams
from .tensor import GradCheckReport, grad_check

# Small enough to finite-difference every coordinate in seconds.  Norm off
# keeps the loss surface low-curvature so h=1e-3 central differences resolve
# every coordinate; layer-norm backward is covered by its own tests at
# smaller step sizes.
TINY = Hyperparams(W=6, n=3, c=1, K=2, D=8, D_h=4, n_h=2, n_class=2, norm_mode="off")

# Default evaluation point: seed 0 keeps every ReLU pre-activation at least
# ~9e-3 from its kink, safely beyond the finite-difference step.
DEFAULT_SEED = 0


def full_model_grad_check(hp: Hyperparams, seed: int = DEFAULT_SEED, objective: str = "dice",
                          h: float = 1e-3, tol: float = 1e-4) -> GradCheckReport:
    """Finite-difference check of every parameter tensor against the tape.

    `objective` is "dice" (segmentation loss) or "l2" (reconstruction loss).
    The input block and targets are drawn once from `seed`; the loss is then
    a deterministic function of the parameters only.
    """
    rng = np.random.default_rng([seed, 3])
    block = rng.normal(0.0, 1.0, (hp.W, hp.W, hp.W, hp.c))
    if objective == "dice":
        weights = M.init_weights(hp, seed)
        labels = rng.integers(0, hp.n_class, hp.w ** 3)
        labels[: hp.n_class] = np.arange(hp.n_class)  # every class present
        target = one_hot(labels, hp.n_class)

        def f():
            return soft_dice_loss(M.forward_probs(block, weights, hp), target)
    elif objective == "l2":
        weights = M.init_weights(hp, seed, pretrain_head=True, seg_head=False)
        target = rng.normal(0.0, 1.0, hp.patch_len)

        def f():
            return l2_loss(M.forward_pretrain(block, weights, hp), target)
    else:
        raise ConfigError(f"unknown grad-check objective {objective!r}")
    return grad_check(f, weights.named(), h=h, tol=tol)
