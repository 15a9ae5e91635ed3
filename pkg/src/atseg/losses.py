"""Training objectives: soft Dice for segmentation, MSE for reconstruction."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

DICE_EPS = 1e-5


def one_hot(labels: np.ndarray, n_class: int) -> np.ndarray:
    """(...,) integer labels -> (V, n_class) one-hot rows."""
    flat = np.asarray(labels).reshape(-1)
    out = np.zeros((flat.size, n_class))
    out[np.arange(flat.size), flat] = 1.0
    return out


def soft_dice_loss(pred: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 minus the mean squared-denominator soft Dice over foreground classes.

    `pred` is (V, n_class) probabilities (rows sum to 1), `target` the
    matching one-hot array.  Foreground classes absent from both the target
    and the prediction argmax are excluded from the mean; if every foreground
    class is excluded the loss is 0.
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    n_class = pred.shape[1]
    pred_argmax = pred.data.argmax(axis=1)
    dice_terms = []
    for cls in range(1, n_class):
        if not target[:, cls].any() and not (pred_argmax == cls).any():
            continue
        mask = np.zeros_like(target)
        mask[:, cls] = 1.0
        p_cls = T.mul(pred, Tensor(mask))
        inter = T.sum_all(T.mul(p_cls, Tensor(target * mask)))
        denom = T.add(T.add(T.sum_all(T.mul(p_cls, p_cls)),
                            float((target[:, cls] ** 2).sum())),
                      eps)
        dice_terms.append(T.div(T.scale(inter, 2.0), denom))
    if not dice_terms:
        return Tensor(0.0)
    mean = dice_terms[0]
    for term in dice_terms[1:]:
        mean = T.add(mean, term)
    return T.sub(1.0, T.scale(mean, 1.0 / len(dice_terms)))


def l2_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error between a prediction vector and its target."""
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = T.sub(pred, Tensor(target))
    return T.scale(T.sum_all(T.mul(diff, diff)), 1.0 / target.size)
