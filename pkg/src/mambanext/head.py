"""Anchor-free detection head, box decoding, NMS, target assignment, loss.

The head is decoupled: per pyramid level, two independent stacks of 3x3
conv+SiLU (depth 2) feed a 1x1 classification map (K logits per cell) and a
1x1 regression map of (left, top, right, bottom) distances from the cell
center, in units of the level stride, made strictly positive with softplus.

Assignment routes each ground-truth box to one level by its larger side
measured in stride-8 cells: < 4 goes to P3, < 8 to P4, everything larger to
P5. At the chosen level, every cell whose center lies inside the box is
positive; a cell inside several boxes takes the smallest-area one.

Loss is binary cross-entropy over all cells and classes plus a complete-IoU
term on positive cells, weighted 1 : 5 and normalized by the positive count
(at least 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module, ModuleList
from .tensor import Tensor

STRIDES = (8, 16, 32)
LEVEL_RANGES = ((0.0, 4.0), (4.0, 8.0), (8.0, float("inf")))  # stride-8 cells
CLS_BIAS_INIT = -4.6  # sigmoid(-4.6) ~ 0.01 initial score everywhere


@dataclass
class Detection:
    """One detected object in input-pixel coordinates."""

    class_id: int
    score: float
    box: tuple  # (x1, y1, x2, y2), x2 > x1 and y2 > y1

    def to_json_dict(self, image_id):
        return {"image_id": image_id, "class_id": int(self.class_id),
                "score": float(self.score),
                "box": [float(v) for v in self.box]}


@dataclass
class GroundTruthBox:
    class_id: int
    box: tuple  # (x1, y1, x2, y2)
    image_id: int = 0

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if x2 <= x1 or y2 <= y1:
            raise ValueError(f"ground-truth box must have positive area, got {self.box}")

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)


class _Branch(Module):
    def __init__(self, c, out, rng, final_zero=False, final_bias=0.0):
        super().__init__()
        self.stack = ModuleList([Conv2d(c, c, 3, rng), Conv2d(c, c, 3, rng)])
        self.pred = Conv2d(c, out, 1, rng)
        if final_zero:
            self.pred.w.data[:] = 0.0
        self.pred.b.data[:] = final_bias

    def forward(self, x):
        for conv in self.stack:
            x = T.silu(conv(x))
        return self.pred(x)


class DetectHead(Module):
    """Per-level decoupled classification / regression head.

    forward returns [(cls_logits [N,K,H,W], box_reg [N,4,H,W]), ...] per
    level; box_reg is already softplus-positive (l, t, r, b) in stride units.
    The final classification conv starts at zero weight with bias -4.6 so
    initial scores sit near 0.01.
    """

    def __init__(self, channels, num_classes, rng):
        super().__init__()
        self.num_classes = num_classes
        self.cls_branches = ModuleList(
            [_Branch(c, num_classes, rng, final_zero=True, final_bias=CLS_BIAS_INIT)
             for c in channels])
        self.reg_branches = ModuleList([_Branch(c, 4, rng) for c in channels])

    def forward(self, pyramid):
        out = []
        for feat, cls_b, reg_b in zip(pyramid, self.cls_branches, self.reg_branches):
            out.append((cls_b(feat), T.softplus(reg_b(feat))))
        return out


# ---------------------------------------------------------------------------
# decode / NMS


def decode_boxes(cls_logits, box_reg, stride: int, conf_thresh: float,
                 image_size=None) -> list:
    """Decode one level of one image into Detections.

    cls_logits: [K, H, W] raw logits; box_reg: [4, H, W] positive (l,t,r,b)
    in stride units. Cell centers are ((j+0.5)*stride, (i+0.5)*stride). Every
    (cell, class) with sigmoid(logit) > conf_thresh becomes a Detection;
    boxes are clipped to the image and degenerate ones dropped.
    """
    if not 0.0 < conf_thresh <= 1.0:
        raise ValueError(f"conf_thresh must be in (0, 1], got {conf_thresh}")
    cls = cls_logits.data if isinstance(cls_logits, Tensor) else np.asarray(cls_logits)
    reg = box_reg.data if isinstance(box_reg, Tensor) else np.asarray(box_reg)
    k, h, w = cls.shape
    if image_size is None:
        image_size = (w * stride, h * stride)
    iw, ih = image_size

    scores = 1.0 / (1.0 + np.exp(-cls.astype(np.float64)))
    kk, ii, jj = np.nonzero(scores > conf_thresh)
    dets = []
    for c, i, j in zip(kk, ii, jj):
        cx = (j + 0.5) * stride
        cy = (i + 0.5) * stride
        l, t, r, b = reg[:, i, j] * stride
        x1 = min(max(cx - l, 0.0), iw)
        y1 = min(max(cy - t, 0.0), ih)
        x2 = min(max(cx + r, 0.0), iw)
        y2 = min(max(cy + b, 0.0), ih)
        if x2 > x1 and y2 > y1:
            dets.append(Detection(int(c), float(scores[c, i, j]), (x1, y1, x2, y2)))
    return dets


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of [N,4] vs [M,4] xyxy boxes."""
    a = np.asarray(boxes_a, np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, np.float64).reshape(-1, 4)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / union, 0.0)


def nms(dets: list, iou_thresh: float = 0.65, class_aware: bool = True) -> list:
    """Greedy non-maximum suppression.

    Candidates are visited in descending score, ties broken by lower
    class_id then original input order; a candidate is dropped when it
    overlaps an already-kept box (of the same class if class_aware) with
    IoU > iou_thresh.
    """
    if not dets:
        return []
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].score, dets[i].class_id, i))
    boxes = np.array([dets[i].box for i in order], np.float64)
    classes = np.array([dets[i].class_id for i in order])
    kept_idx = []
    for i in range(len(order)):
        suppressed = False
        for j in kept_idx:
            if class_aware and classes[i] != classes[j]:
                continue
            if iou_matrix(boxes[i], boxes[j])[0, 0] > iou_thresh:
                suppressed = True
                break
        if not suppressed:
            kept_idx.append(i)
    return [dets[order[i]] for i in kept_idx]


# ---------------------------------------------------------------------------
# target assignment


def level_for_box(box, strides=STRIDES) -> int:
    """Route a box to a pyramid level by its larger side in stride-8 cells."""
    x1, y1, x2, y2 = box
    extent = max(x2 - x1, y2 - y1) / strides[0]
    for lvl, (lo, hi) in enumerate(LEVEL_RANGES):
        if lo <= extent < hi:
            return lvl
    return len(LEVEL_RANGES) - 1


def assign_targets(gts: list, grid_sizes, strides=STRIDES):
    """Build per-level dense targets for one image.

    grid_sizes: [(H, W), ...] per level. Returns a list of dicts per level:
    cls [K? no -- class ids], as arrays:
      pos   [H, W] bool
      cls   [H, W] int  (class id at positive cells, -1 elsewhere)
      ltrb  [4, H, W] float32 stride-unit distances (zero at negatives)
      box   [4, H, W] float32 pixel-space target box (zero at negatives)
    Images without ground truth produce all-negative targets.
    """
    out = []
    for (h, w), stride in zip(grid_sizes, strides):
        out.append({
            "pos": np.zeros((h, w), bool),
            "cls": np.full((h, w), -1, np.int64),
            "ltrb": np.zeros((4, h, w), np.float32),
            "box": np.zeros((4, h, w), np.float32),
            "area": np.full((h, w), np.inf, np.float64),
        })
    for gt in gts:
        lvl = level_for_box(gt.box)
        h, w = grid_sizes[lvl]
        stride = strides[lvl]
        tgt = out[lvl]
        x1, y1, x2, y2 = gt.box
        # Cells whose center falls strictly inside the box.
        j0 = max(int(np.floor(x1 / stride - 0.5)) + 1, 0)
        j1 = min(int(np.ceil(x2 / stride - 0.5)), w)
        i0 = max(int(np.floor(y1 / stride - 0.5)) + 1, 0)
        i1 = min(int(np.ceil(y2 / stride - 0.5)), h)
        for i in range(i0, i1):
            cy = (i + 0.5) * stride
            if not (y1 < cy < y2):
                continue
            for j in range(j0, j1):
                cx = (j + 0.5) * stride
                if not (x1 < cx < x2):
                    continue
                if gt.area >= tgt["area"][i, j]:
                    continue
                tgt["area"][i, j] = gt.area
                tgt["pos"][i, j] = True
                tgt["cls"][i, j] = gt.class_id
                tgt["ltrb"][:, i, j] = [(cx - x1) / stride, (cy - y1) / stride,
                                        (x2 - cx) / stride, (y2 - cy) / stride]
                tgt["box"][:, i, j] = [x1, y1, x2, y2]
    for tgt in out:
        del tgt["area"]
    return out


def encode_box_at_cell(box, i, j, stride):
    """(l,t,r,b) stride-unit target for a box at cell (i, j); decode inverts it."""
    x1, y1, x2, y2 = box
    cx = (j + 0.5) * stride
    cy = (i + 0.5) * stride
    return np.array([(cx - x1) / stride, (cy - y1) / stride,
                     (x2 - cx) / stride, (y2 - cy) / stride], np.float32)


# ---------------------------------------------------------------------------
# loss


def _ciou_terms(pred_box, tgt_box):
    """Complete-IoU loss per cell given [4, ...] pixel-space boxes (Tensors)."""
    px1, py1, px2, py2 = pred_box
    tx1, ty1, tx2, ty2 = tgt_box
    eps = 1e-7

    ix1 = T.maximum(px1, tx1)
    iy1 = T.maximum(py1, ty1)
    ix2 = T.minimum(px2, tx2)
    iy2 = T.minimum(py2, ty2)
    zero = Tensor(np.zeros(ix1.shape, np.float32))
    iw = T.maximum(T.sub(ix2, ix1), zero)
    ih = T.maximum(T.sub(iy2, iy1), zero)
    inter = T.mul(iw, ih)
    area_p = T.mul(T.sub(px2, px1), T.sub(py2, py1))
    area_t = T.mul(T.sub(tx2, tx1), T.sub(ty2, ty1))
    union = T.add(T.sub(T.add(area_p, area_t), inter), eps)
    iou = T.div(inter, union)

    # Squared center distance over squared enclosing-box diagonal.
    pcx = T.mul(T.add(px1, px2), 0.5)
    pcy = T.mul(T.add(py1, py2), 0.5)
    tcx = T.mul(T.add(tx1, tx2), 0.5)
    tcy = T.mul(T.add(ty1, ty2), 0.5)
    dx = T.sub(pcx, tcx)
    dy = T.sub(pcy, tcy)
    rho2 = T.add(T.mul(dx, dx), T.mul(dy, dy))
    ex1 = T.minimum(px1, tx1)
    ey1 = T.minimum(py1, ty1)
    ex2 = T.maximum(px2, tx2)
    ey2 = T.maximum(py2, ty2)
    ew = T.sub(ex2, ex1)
    eh = T.sub(ey2, ey1)
    c2 = T.add(T.add(T.mul(ew, ew), T.mul(eh, eh)), eps)

    # Aspect-ratio consistency; its weight alpha is treated as a constant.
    pw = T.add(T.sub(px2, px1), eps)
    ph = T.add(T.sub(py2, py1), eps)
    tw = tx2.data - tx1.data
    th = ty2.data - ty1.data
    dangle = T.sub(T.atan(T.div(pw, ph)),
                   Tensor(np.arctan(tw / np.maximum(th, eps))))
    v = T.mul(T.mul(dangle, dangle), np.float32(4.0 / np.pi ** 2))
    alpha = v.data / np.maximum(1.0 - iou.data + v.data, eps)

    one = Tensor(np.ones(iou.shape, np.float32))
    return T.add(T.add(T.sub(one, iou), T.div(rho2, c2)),
                 T.mul(v, Tensor(alpha.astype(np.float32))))


def compute_loss(preds, targets, strides=STRIDES, box_weight: float = 5.0):
    """Scalar training loss for a batch.

    preds: head output, per level (cls_logits [N,K,H,W], box_reg [N,4,H,W]).
    targets: per image a list of per-level target dicts from assign_targets.
    BCE runs over every cell and class; complete-IoU runs on positive cells
    (with unit dummy boxes masked out elsewhere); total is
    (bce_sum + box_weight * ciou_sum) / max(1, n_positive).
    """
    n = preds[0][0].shape[0]
    total_pos = 0
    bce_terms = []
    box_terms = []
    for lvl, (cls_logits, box_reg) in enumerate(preds):
        _, k, h, w = cls_logits.shape
        stride = strides[lvl]
        cls_t = np.zeros((n, k, h, w), np.float32)
        pos_t = np.zeros((n, 1, h, w), np.float32)
        box_t = np.zeros((n, 4, h, w), np.float32)
        for img in range(n):
            tgt = targets[img][lvl]
            pos = tgt["pos"]
            ids = tgt["cls"][pos]
            if ids.size:
                ii, jj = np.nonzero(pos)
                cls_t[img, ids, ii, jj] = 1.0
                pos_t[img, 0][pos] = 1.0
                box_t[img][:, pos] = tgt["box"][:, pos]
            total_pos += int(pos.sum())
        # Dummy unit boxes keep the IoU arithmetic finite at negative cells.
        neg = pos_t[:, 0] == 0.0
        box_t[:, 2][neg] = box_t[:, 0][neg] + 1.0
        box_t[:, 3][neg] = box_t[:, 1][neg] + 1.0

        bce_terms.append(T.sum_(T.bce_with_logits(cls_logits, Tensor(cls_t))))

        jj = np.arange(w, dtype=np.float32)
        ii = np.arange(h, dtype=np.float32)
        cx = np.broadcast_to((jj + 0.5) * stride, (h, w)).astype(np.float32)
        cy = np.broadcast_to(((ii + 0.5) * stride)[:, None], (h, w)).astype(np.float32)
        cx_t, cy_t = Tensor(cx.copy()), Tensor(cy.copy())
        ltrb = [T.mul(T.slice_channel(box_reg, c), np.float32(stride))
                for c in range(4)]
        pred_box = (T.sub(cx_t, ltrb[0]), T.sub(cy_t, ltrb[1]),
                    T.add(cx_t, ltrb[2]), T.add(cy_t, ltrb[3]))
        tgt_box = tuple(Tensor(box_t[:, c]) for c in range(4))
        ciou = _ciou_terms(pred_box, tgt_box)
        box_terms.append(T.sum_(T.mul(ciou, Tensor(pos_t[:, 0]))))

    npos = max(total_pos, 1)
    bce = bce_terms[0]
    for t in bce_terms[1:]:
        bce = T.add(bce, t)
    box = box_terms[0]
    for t in box_terms[1:]:
        box = T.add(box, t)
    return T.div(T.add(bce, T.mul(box, np.float32(box_weight))), np.float32(npos))
