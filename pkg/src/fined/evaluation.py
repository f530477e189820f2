"""Edge-detection scoring: matching, precision/recall, ODS/OIS, PR curves.

Predicted and ground-truth edge pixels are paired one-to-one under a
distance budget expressed as a fraction of the image diagonal. Matching is
greedy in ascending distance with row-major tie-breaking, which is simple,
deterministic, and equals the optimal assignment on small instances (the
test suite carries an exhaustive oracle for that claim). Dataset scores
pool raw counts across images before forming ratios.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .inference import nms_thin
from .util import atomic_write

DEFAULT_THRESHOLDS = tuple(k / 100.0 for k in range(1, 100))


@dataclass(frozen=True)
class EvalConfig:
    tolerance: float = 0.0075
    thresholds: tuple = DEFAULT_THRESHOLDS
    thin_before_eval: bool = True

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")
        ts = tuple(float(t) for t in self.thresholds)
        if not ts:
            raise ValueError("thresholds must be non-empty")
        if any(not 0.0 < t < 1.0 for t in ts):
            raise ValueError("thresholds must lie strictly inside (0, 1)")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("thresholds must be strictly increasing")
        object.__setattr__(self, "thresholds", ts)

    def max_dist_px(self, dims) -> float:
        h, w = dims
        return self.tolerance * float(np.hypot(h, w))


@dataclass(frozen=True)
class MatchResult:
    """Boolean masks over the input maps; True marks a matched edge pixel."""

    pred_mask: np.ndarray
    gt_mask: np.ndarray

    @property
    def matched_pred(self) -> int:
        return int(self.pred_mask.sum())

    @property
    def matched_gt(self) -> int:
        return int(self.gt_mask.sum())


@dataclass(frozen=True)
class EvalReport:
    thresholds: tuple
    precision: tuple
    recall: tuple
    f: tuple
    ods_threshold: float
    ods_f: float
    ois_f: float
    per_image_best: tuple  # (threshold, f) per image, evaluation order


def _require_binary(name: str, arr: np.ndarray):
    values = np.unique(arr)
    if not np.all(np.isin(values, (0, 1))):
        raise ValueError(f"{name} must be binary (0/1), found values {values[:5]}")


def fuse_annotations(maps) -> np.ndarray:
    """Pixelwise mean of the annotators' binary edge maps."""
    if len(maps) == 0:
        raise ValueError("need at least one annotation")
    first = np.asarray(maps[0], dtype=np.float64)
    fused = np.zeros_like(first)
    for m in maps:
        arr = np.asarray(m, dtype=np.float64)
        if arr.shape != first.shape:
            raise ValueError(
                f"annotation dims differ: {arr.shape} vs {first.shape}")
        _require_binary("annotation", arr)
        fused += arr
    return fused / len(maps)


def match_edges(pred_binary: np.ndarray, gt_binary: np.ndarray,
                max_dist_px: float) -> MatchResult:
    """Greedy one-to-one pairing of edge pixels within a pixel radius.

    Candidate pairs are ranked by squared distance, then by the predicted
    pixel's row-major index, then by the ground-truth pixel's, and accepted
    when both endpoints are still free. A deterministic augmenting pass
    then rematches stranded pixels, so the pair count always equals the
    optimal-assignment cardinality while short pairs keep first claim.
    """
    pred = np.asarray(pred_binary)
    gt = np.asarray(gt_binary)
    if pred.shape != gt.shape:
        raise ValueError(f"dims differ: {pred.shape} vs {gt.shape}")
    if max_dist_px < 0:
        raise ValueError(f"max_dist_px must be >= 0, got {max_dist_px}")
    _require_binary("pred", pred)
    _require_binary("gt", gt)

    pred_mask = np.zeros(pred.shape, dtype=bool)
    gt_mask = np.zeros(gt.shape, dtype=bool)
    py, px = np.nonzero(pred)
    gy, gx = np.nonzero(gt)
    if len(py) == 0 or len(gy) == 0:
        return MatchResult(pred_mask, gt_mask)

    d2 = ((py[:, None] - gy[None, :]).astype(np.float64) ** 2
          + (px[:, None] - gx[None, :]).astype(np.float64) ** 2)
    pi, gi = np.nonzero(d2 <= max_dist_px ** 2)
    order = np.lexsort((gi, pi, d2[pi, gi]))

    pred_to = np.full(len(py), -1, dtype=np.int64)
    gt_to = np.full(len(gy), -1, dtype=np.int64)
    adjacency = [[] for _ in range(len(py))]
    for k in order:
        a, b = pi[k], gi[k]
        adjacency[a].append(b)
        if pred_to[a] == -1 and gt_to[b] == -1:
            pred_to[a] = b
            gt_to[b] = a

    def try_augment(a: int, visited: set) -> bool:
        for b in adjacency[a]:
            if b not in visited:
                visited.add(b)
                if gt_to[b] == -1 or try_augment(gt_to[b], visited):
                    pred_to[a] = b
                    gt_to[b] = a
                    return True
        return False

    for a in range(len(py)):
        if pred_to[a] == -1:
            try_augment(a, set())

    for a, b in enumerate(pred_to):
        if b != -1:
            pred_mask[py[a], px[a]] = True
            gt_mask[gy[b], gx[b]] = True
    return MatchResult(pred_mask, gt_mask)


def pr_at_threshold(pred: np.ndarray, gts, t: float,
                    cfg: EvalConfig) -> tuple[int, int, int, int]:
    """Counts (tp_pred, n_pred, tp_gt, n_gt) for one image at one threshold.

    The prediction is optionally thinned, then binarized at `t` (>= t is an
    edge). A predicted pixel is a true positive when it matches any single
    annotator's map; recall pools matched and total edge pixels over all
    annotators.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if cfg.thin_before_eval:
        pred = nms_thin(pred)
    binary = (pred >= t).astype(np.uint8)
    radius = cfg.max_dist_px(pred.shape)

    n_p = int(binary.sum())
    tp_pred_any = np.zeros(pred.shape, dtype=bool)
    tp_g = 0
    n_g = 0
    for gt in gts:
        gt = np.asarray(gt)
        res = match_edges(binary, gt, radius)
        tp_pred_any |= res.pred_mask
        tp_g += res.matched_gt
        n_g += int(np.asarray(gt, dtype=np.float64).sum())
    return int(tp_pred_any.sum()), n_p, tp_g, n_g


def _prf(tp_p: int, n_p: int, tp_g: int, n_g: int) -> tuple[float, float, float]:
    p = tp_p / n_p if n_p else 0.0
    r = tp_g / n_g if n_g else 0.0
    f = 2.0 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def sweep_image(pred: np.ndarray, gts, cfg: EvalConfig) -> list:
    """Count quadruples for one image across every configured threshold.

    Thinning does not depend on the threshold, so it runs once here and the
    per-threshold calls reuse the thinned map.
    """
    if cfg.thin_before_eval:
        pred = nms_thin(np.asarray(pred, dtype=np.float64))
        cfg = replace(cfg, thin_before_eval=False)
    return [pr_at_threshold(pred, gts, t, cfg) for t in cfg.thresholds]


def ods_ois(per_image_counts, cfg: EvalConfig) -> EvalReport:
    """Dataset report from per-image, per-threshold count quadruples."""
    if len(per_image_counts) == 0:
        raise ValueError("empty dataset")
    n_t = len(cfg.thresholds)
    for counts in per_image_counts:
        if len(counts) != n_t:
            raise ValueError(
                f"expected {n_t} threshold entries per image, got {len(counts)}")

    pooled = [_prf(*[sum(img[k][i] for img in per_image_counts)
                     for i in range(4)]) for k in range(n_t)]
    precision, recall, f = (tuple(v[i] for v in pooled) for i in range(3))
    ods_idx = int(np.argmax(f))

    per_image_best = []
    for counts in per_image_counts:
        fs = [_prf(*c)[2] for c in counts]
        best = int(np.argmax(fs))
        per_image_best.append((cfg.thresholds[best], fs[best]))
    ois_f = sum(b[1] for b in per_image_best) / len(per_image_best)

    return EvalReport(
        thresholds=cfg.thresholds,
        precision=precision,
        recall=recall,
        f=f,
        ods_threshold=cfg.thresholds[ods_idx],
        ods_f=f[ods_idx],
        ois_f=ois_f,
        per_image_best=tuple(per_image_best),
    )


def evaluate_dataset(preds, gts_per_image, cfg: EvalConfig) -> EvalReport:
    """Full sweep + aggregation for aligned prediction / annotation lists."""
    if len(preds) != len(gts_per_image):
        raise ValueError(
            f"{len(preds)} predictions vs {len(gts_per_image)} annotation sets")
    counts = [sweep_image(p, gts, cfg) for p, gts in zip(preds, gts_per_image)]
    return ods_ois(counts, cfg)


def summary_dict(report: EvalReport) -> dict:
    return {
        "ods_f": report.ods_f,
        "ods_threshold": report.ods_threshold,
        "ois_f": report.ois_f,
        "per_image_best": [
            {"threshold": t, "f": f} for t, f in report.per_image_best
        ],
        "curve": [
            {"threshold": t, "precision": p, "recall": r, "f": f}
            for t, p, r, f in zip(report.thresholds, report.precision,
                                  report.recall, report.f)
        ],
    }


def write_summary(report: EvalReport, path) -> None:
    atomic_write(path, (json.dumps(summary_dict(report), indent=2) + "\n")
                 .encode("ascii"))


def pr_curve(report: EvalReport, path) -> None:
    """CSV of the threshold sweep plus an SVG rendering alongside it."""
    if len(report.thresholds) == 0:
        raise ValueError("report has no thresholds")
    import io

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["threshold", "precision", "recall", "f"])
    for row in zip(report.thresholds, report.precision, report.recall,
                   report.f):
        writer.writerow([f"{v:.6f}" for v in row])
    atomic_write(path, buf.getvalue().encode("ascii"))

    from .plots import render_pr_curve

    render_pr_curve(report, os.path.splitext(str(path))[0] + ".svg")
