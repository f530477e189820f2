"""Class-balanced edge loss with weak-label ignoring.

Ground truth is an annotator consensus map in [0, 1]. Pixels split three
ways against an ignore threshold th (default 0.25):

  y == 0        confident non-edge, weighted by alpha
  0 < y < th    ambiguous, contributes nothing to counts or loss
  y >= th       edge (boundary inclusive), weighted by beta

with alpha = gamma * Y+ / Y and beta = Y- / Y computed per image over the
countable pixels only (Y = Y+ + Y-). gamma defaults to 1.1, leaning the
balance slightly toward edges. The per-pixel term is standard binary
cross-entropy on the logit, so the value being minimized is non-negative:

  y == 0   ->  alpha * softplus(p)   ==  -alpha * log(1 - sigmoid(p))
  y >= th  ->  beta  * softplus(-p)  ==  -beta  * log(sigmoid(p))

A stage loss sums pixel losses over the map; the training objective sums the
stage losses of every side output plus the fused output. Batches sum image
losses, each image keeping its own alpha/beta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tape, Tensor, _sigmoid, add


@dataclass(frozen=True)
class ClassWeights:
    alpha: float
    beta: float
    gamma: float = 1.1
    th: float = 0.25


def class_weights(gt, gamma: float = 1.1, th: float = 0.25) -> ClassWeights:
    """Per-image alpha/beta from the edge and non-edge pixel counts."""
    arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if arr.size == 0:
        raise ValueError("empty ground truth")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"ground truth must lie in [0, 1], got range "
                         f"[{arr.min():.4g}, {arr.max():.4g}]")
    y_pos = int(np.count_nonzero(arr >= th))
    y_neg = int(np.count_nonzero(arr == 0.0))
    y_total = y_pos + y_neg
    if y_total == 0:
        raise ValueError("no countable pixels: every value is inside (0, th)")
    alpha = gamma * y_pos / y_total
    beta = y_neg / y_total
    return ClassWeights(alpha=alpha, beta=beta, gamma=gamma, th=th)


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) without overflow: max(x, 0) + log1p(e^-|x|).
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def pixel_loss(p: float, y: float, w: ClassWeights) -> float:
    """Loss of a single pixel; scalar reference for the vectorized path."""
    if y == 0.0:
        return float(w.alpha * _softplus(np.float64(p)))
    if y < w.th:
        return 0.0
    return float(w.beta * _softplus(np.float64(-p)))


def _normalize_gt(gt, n: int, h: int, w: int) -> np.ndarray:
    arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    if arr.shape != (n, 1, h, w):
        raise ValueError(f"ground truth shape {arr.shape} does not match logits ({n}, 1, {h}, {w})")
    return arr


def _weight_arrays(weights, n: int, dtype):
    if isinstance(weights, ClassWeights):
        weights = [weights] * n
    if len(weights) != n:
        raise ValueError(f"got {len(weights)} weight sets for a batch of {n}")
    alpha = np.array([w.alpha for w in weights], dtype=dtype).reshape(n, 1, 1, 1)
    beta = np.array([w.beta for w in weights], dtype=dtype).reshape(n, 1, 1, 1)
    th = np.array([w.th for w in weights], dtype=np.float64).reshape(n, 1, 1, 1)
    return alpha, beta, th


def stage_loss(logits: Tensor, gt, weights, tape: Tape | None = None) -> Tensor:
    """Sum of pixel losses over one logit map (or a batch of them).

    ``weights`` is one ClassWeights for the whole batch or a list with one
    entry per image. Recorded on the tape as a single fused node; the
    gradient with respect to the logits is alpha*sigmoid(p) on non-edge
    pixels and -beta*(1 - sigmoid(p)) on edge pixels.
    """
    n, c, h, w = logits.shape
    if c != 1:
        raise ValueError(f"logit map must be single-channel, got {c}")
    gt_arr = _normalize_gt(gt, n, h, w)
    dtype = logits.dtype
    alpha, beta, th = _weight_arrays(weights, n, dtype)
    neg_mask = (gt_arr == 0.0)
    pos_mask = (gt_arr >= th)

    def value() -> np.ndarray:
        p = logits.data
        terms = np.where(neg_mask, alpha * _softplus(p), 0.0)
        terms = np.where(pos_mask, beta * _softplus(-p), terms)
        return terms.sum(dtype=dtype).reshape(1, 1, 1, 1)

    out = Tensor(value().astype(dtype))
    if tape is not None:
        def bwd(g):
            s = _sigmoid(logits.data)
            grad = np.where(neg_mask, alpha * s, 0.0)
            grad = np.where(pos_mask, -beta * (1.0 - s), grad)
            return ((g.reshape(()) * grad).astype(dtype),)

        tape.record("stage_loss", (logits,), out, lambda: value().astype(dtype), bwd)
    return out


def total_loss(outputs, gt, weights, tape: Tape | None = None) -> Tensor:
    """Objective for one batch: every stage loss plus the fused-head loss."""
    if outputs.fused_logits is None:
        raise ValueError("total_loss needs train-mode outputs with a fused head")
    total = None
    for head in outputs.heads:
        term = stage_loss(head, gt, weights, tape)
        total = term if total is None else add(total, term, tape)
    return total
