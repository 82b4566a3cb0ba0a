"""Map-versus-ground-truth metrics.

Predicted labels transfer from map points to ground-truth vertices by nearest
neighbor within a distance cap. Instance quality is measured as average
precision after greedy IoU matching; semantic quality as per-class IoU and
recall; query cost as mean provider calls per featured instance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class EvalReport:
    miou: float = 0.0
    macc: float = 0.0
    ap25: float | None = None
    ap50: float | None = None
    ap75: float | None = None
    ap_all: float | None = None
    aq: float = 0.0
    per_class: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        rnd = lambda v: None if v is None else round(float(v), 6)
        return {
            "miou": rnd(self.miou),
            "macc": rnd(self.macc),
            "ap25": rnd(self.ap25),
            "ap50": rnd(self.ap50),
            "ap75": rnd(self.ap75),
            "ap_all": rnd(self.ap_all),
            "aq": rnd(self.aq),
            "per_class": {k: rnd(v) for k, v in self.per_class.items()},
        }


def project_to_gt(
    map_points: np.ndarray,
    map_labels: np.ndarray,
    gt_vertices: np.ndarray,
    max_dist: float = 0.05,
    fill: int = 0,
) -> np.ndarray:
    """Per-vertex label of the nearest map point within ``max_dist`` (else ``fill``).

    ``map_labels`` may be instance ids (fill 0) or semantic indices (fill -1).
    """
    out = np.full(len(gt_vertices), fill, dtype=np.int64)
    if len(map_points) == 0 or len(gt_vertices) == 0:
        return out
    tree = cKDTree(np.asarray(map_points, np.float64))
    dist, idx = tree.query(np.asarray(gt_vertices, np.float64), k=1)
    ok = dist <= max_dist
    out[ok] = np.asarray(map_labels)[idx[ok]]
    return out


def _greedy_iou_matching(pred: np.ndarray, gt: np.ndarray):
    """One-to-one instance matching by descending vertex-overlap IoU.

    Returns (pred_ids, matched_iou_per_pred, pred_sizes, num_gt).
    """
    pred_ids = np.unique(pred[pred > 0])
    gt_ids = np.unique(gt[gt > 0])
    pairs = []
    for p in pred_ids:
        psel = pred == p
        for g in gt_ids:
            gsel = gt == g
            inter = np.count_nonzero(psel & gsel)
            if inter == 0:
                continue
            union = np.count_nonzero(psel | gsel)
            pairs.append((inter / union, int(p), int(g)))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    matched_iou = {int(p): 0.0 for p in pred_ids}
    used_p, used_g = set(), set()
    for iou, p, g in pairs:
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        matched_iou[p] = iou
    sizes = {int(p): int(np.count_nonzero(pred == p)) for p in pred_ids}
    return list(map(int, pred_ids)), matched_iou, sizes, len(gt_ids)


def _ap_at(matched_iou, order, num_gt, tau) -> float:
    """Area under the precision-recall sweep for one IoU threshold."""
    tp = 0
    ap = 0.0
    prev_recall = 0.0
    for rank, p in enumerate(order, start=1):
        if matched_iou[p] >= tau:
            tp += 1
            recall = tp / num_gt
            ap += (recall - prev_recall) * (tp / rank)
            prev_recall = recall
    return ap


def instance_ap(
    pred: np.ndarray,
    gt: np.ndarray,
    iou_thresholds=(0.25, 0.5, 0.75),
    pred_semantics: np.ndarray | None = None,
    gt_semantics: np.ndarray | None = None,
) -> dict:
    """AP of predicted instances against GT instances over aligned vertex ids.

    Class-agnostic by default; passing per-vertex semantics additionally
    requires matched pairs to agree on the majority semantic label. Returns
    {tau: ap} plus "all" averaging tau in {0.50, 0.55, ..., 0.95}; None when
    the ground truth has no instances.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    order_ids, matched_iou, sizes, num_gt = _greedy_iou_matching(pred, gt)
    if num_gt == 0:
        return {tau: None for tau in iou_thresholds} | {"all": None}
    if pred_semantics is not None and gt_semantics is not None:
        for p in order_ids:
            if matched_iou[p] <= 0:
                continue
            psel = pred == p
            ps = np.bincount(pred_semantics[psel]).argmax() if psel.any() else -1
            both = psel & (gt > 0)
            gs = np.bincount(gt_semantics[both]).argmax() if both.any() else -2
            if ps != gs:
                matched_iou[p] = 0.0
    order = sorted(order_ids, key=lambda p: (-sizes[p], p))
    out = {tau: _ap_at(matched_iou, order, num_gt, tau) for tau in iou_thresholds}
    all_taus = np.arange(0.5, 0.951, 0.05)
    out["all"] = float(np.mean([_ap_at(matched_iou, order, num_gt, t) for t in all_taus]))
    return out


def semantic_miou(
    pred: np.ndarray, gt: np.ndarray, num_classes: int, class_names: list[str] | None = None
) -> tuple[float, float, dict]:
    """(mIoU, mAcc, per-class IoU) over classes present in the ground truth.

    ``pred`` uses -1 (or any id outside [0, num_classes)) for unlabeled
    vertices; those count against recall but are no class's false positive.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    ious, recalls, per_class = [], [], {}
    for c in range(num_classes):
        gt_c = gt == c
        if not gt_c.any():
            continue
        pred_c = pred == c
        tp = np.count_nonzero(gt_c & pred_c)
        fp = np.count_nonzero(pred_c & ~gt_c)
        fn = np.count_nonzero(gt_c & ~pred_c)
        iou = tp / (tp + fp + fn)
        ious.append(iou)
        recalls.append(tp / (tp + fn))
        per_class[class_names[c] if class_names else str(c)] = float(iou)
    if not ious:
        return 0.0, 0.0, {}
    return float(np.mean(ious)), float(np.mean(recalls)), per_class


def query_stats(call_log: list[int]) -> float:
    """Mean provider calls per instance that received at least one call."""
    if not call_log:
        return 0.0
    ids = set(call_log)
    return len(call_log) / len(ids)
