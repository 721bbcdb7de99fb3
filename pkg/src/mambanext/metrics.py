"""Average-precision evaluation with 101-point interpolated PR curves.

Detections are matched greedily in descending score order: each detection
claims the highest-IoU unmatched ground truth of its class in its image, a
true positive when that IoU reaches the threshold. Per-class AP integrates
the interpolated precision envelope over the 101 recall points 0.00, 0.01,
..., 1.00, and the reported numbers are means over the classes present in
the ground truth.
"""

from __future__ import annotations

import numpy as np

from .head import Detection, GroundTruthBox, iou_matrix

COCO_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))


def _ap_101(recall: np.ndarray, precision: np.ndarray) -> float:
    """101-point interpolated AP of a (recall, precision) staircase."""
    points = np.linspace(0.0, 1.0, 101)
    ap = 0.0
    for r in points:
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


def average_precision(dets, gts, iou_thresh: float) -> dict:
    """Per-class AP at one IoU threshold.

    dets: list of (image_id, Detection); gts: list of GroundTruthBox.
    Returns {class_id: ap} over classes present in the ground truth.
    """
    classes = sorted({g.class_id for g in gts})
    gt_by_img_cls: dict = {}
    for g in gts:
        gt_by_img_cls.setdefault((g.image_id, g.class_id), []).append(g)

    result = {}
    for cls in classes:
        n_gt = sum(1 for g in gts if g.class_id == cls)
        cand = [(img_id, d) for img_id, d in dets if d.class_id == cls]
        # Stable descending-score order keeps the metric permutation
        # invariant for distinct scores.
        cand.sort(key=lambda pair: -pair[1].score)
        matched: dict = {}
        tp = np.zeros(len(cand))
        fp = np.zeros(len(cand))
        for idx, (img_id, d) in enumerate(cand):
            pool = gt_by_img_cls.get((img_id, cls), [])
            best_iou, best_gt = 0.0, None
            for g in pool:
                if id(g) in matched:
                    continue
                iou = iou_matrix(np.array(d.box), np.array(g.box))[0, 0]
                if iou > best_iou:
                    best_iou, best_gt = iou, g
            if best_gt is not None and best_iou >= iou_thresh:
                matched[id(best_gt)] = True
                tp[idx] = 1.0
            else:
                fp[idx] = 1.0
        if len(cand) == 0:
            result[cls] = 0.0
            continue
        ctp = np.cumsum(tp)
        cfp = np.cumsum(fp)
        recall = ctp / n_gt
        precision = ctp / np.maximum(ctp + cfp, 1e-12)
        result[cls] = _ap_101(recall, precision)
    return result


def evaluate_map(all_dets, all_gt, iou_thresholds=COCO_THRESHOLDS):
    """(AP at 0.5, mean AP over iou_thresholds), both averaged over classes.

    all_dets: list of (image_id, Detection); all_gt: list of GroundTruthBox.
    Raises ValueError when there is no ground truth at all (the metric is
    undefined). No detections simply score 0.
    """
    if not all_gt:
        raise ValueError("evaluate_map: no ground truth; metric undefined")
    ap50_per_class = average_precision(all_dets, all_gt, 0.5)
    ap50 = float(np.mean(list(ap50_per_class.values())))
    aps = []
    for thr in iou_thresholds:
        per_class = average_precision(all_dets, all_gt, float(thr))
        aps.append(np.mean(list(per_class.values())))
    return ap50, float(np.mean(aps))
