"""Desk-scale training loop: SGD with momentum, cosine decay, gradient
clipping; plus batch inference and dataset evaluation helpers.

The loop is deterministic given (seed, config, data) in single-threaded
mode: model init, batch shuffling, and every numeric op are seeded or
order-fixed. Divergence (non-finite loss) aborts with the offending step.
"""

from __future__ import annotations

import csv
import os
import time

import numpy as np

from .config import ModelConfig
from .head import STRIDES, assign_targets, compute_loss, decode_boxes, nms
from .metrics import evaluate_map
from .model import Detector, build_model
from .tensor import GradTape, Tensor, backward
from .weights import WeightStore, save_weights, store_from_model


class TrainingDiverged(RuntimeError):
    def __init__(self, step):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


def _grid_sizes(input_size):
    return [(input_size // s, input_size // s) for s in STRIDES]


def sgd_step(params, velocities, lr, momentum, clip_norm=10.0):
    """Classic momentum SGD with global-norm gradient clipping."""
    sq = 0.0
    grads = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        grads.append(g)
        sq += float((g.astype(np.float64) ** 2).sum())
    norm = np.sqrt(sq)
    scale = np.float32(clip_norm / norm) if norm > clip_norm else np.float32(1.0)
    for p, v, g in zip(params, velocities, grads):
        v *= np.float32(momentum)
        v += g * scale
        p.data -= np.float32(lr) * v


def cosine_lr(step, total_steps, lr, lr_end):
    t = min(step, total_steps) / max(total_steps, 1)
    return lr_end + 0.5 * (lr - lr_end) * (1.0 + np.cos(np.pi * t))


def train(cfg: ModelConfig, dataset, epochs: int, lr: float = 1e-2,
          momentum: float = 0.9, batch_size: int = 8, max_steps=None,
          out_path=None, log_path=None, model: Detector | None = None,
          quiet: bool = True):
    """Train a detector on an in-memory dataset.

    Returns (WeightStore, loss_curve) where loss_curve has one mean loss per
    epoch. lr follows cosine decay from ``lr`` to ``lr/100``; gradients are
    clipped at global norm 10. Checkpoints: final store is saved to
    ``out_path`` when given; per-epoch losses append to ``log_path`` CSV.
    """
    if len(dataset.images) == 0:
        raise ValueError("training needs a non-empty dataset")
    if model is None:
        model = build_model(cfg)
    model.train(True)
    params = list(model.params())
    velocities = [np.zeros_like(p.data) for p in params]

    grids = _grid_sizes(cfg.input_size)
    targets = [assign_targets(gt, grids) for gt in dataset.gts]

    n = len(dataset.images)
    batch_size = min(batch_size, n)
    steps_per_epoch = (n + batch_size - 1) // batch_size
    total_steps = steps_per_epoch * epochs
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    lr_end = lr / 100.0

    rng = np.random.default_rng(cfg.seed + 1)
    curve = []
    log_rows = []
    step = 0
    t0 = time.time()
    done = False
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            if idx.size == 0:
                continue
            batch = Tensor(np.stack([dataset.images[i] for i in idx]))
            batch_targets = [targets[i] for i in idx]
            step_lr = cosine_lr(step, total_steps, lr, lr_end)
            model.zero_grad()
            with GradTape() as tape:
                preds = model(batch)
                loss = compute_loss(preds, batch_targets)
                lval = loss.item()
                if not np.isfinite(lval):
                    raise TrainingDiverged(step)
                backward(tape, loss)
            if lr != 0.0:
                sgd_step(params, velocities, step_lr, momentum)
            losses.append(lval)
            step += 1
            if max_steps is not None and step >= max_steps:
                done = True
                break
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        curve.append(mean_loss)
        log_rows.append((epoch, step, mean_loss, cosine_lr(step, total_steps, lr, lr_end)))
        if not quiet:
            print(f"epoch {epoch:3d} step {step:5d} loss {mean_loss:.4f} "
                  f"({time.time() - t0:.0f}s)")
        if done:
            break

    model.eval()
    store = store_from_model(model, config_json=cfg.to_json())
    if out_path:
        save_weights(store, out_path)
    if log_path:
        new = not os.path.exists(log_path)
        with open(log_path, "a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(["epoch", "step", "loss", "lr"])
            w.writerows(log_rows)
    return store, curve


# ---------------------------------------------------------------------------
# inference / evaluation


def predict(model: Detector, image, conf: float = 0.25, iou: float = 0.65):
    """Single image [3,H,W] (Tensor or array) -> NMS-filtered Detections."""
    model.eval()
    x = image if isinstance(image, Tensor) else Tensor(image)
    preds = model(Tensor(x.data[None]))
    dets = []
    for lvl, (cls_logits, box_reg) in enumerate(preds):
        dets.extend(decode_boxes(cls_logits.data[0], box_reg.data[0],
                                 STRIDES[lvl], conf))
    return nms(dets, iou_thresh=iou)


def evaluate_dataset(model: Detector, dataset, conf: float = 0.05,
                     iou: float = 0.65):
    """(AP at 0.5, AP averaged over 0.50:0.05:0.95) over a dataset."""
    from .head import GroundTruthBox
    all_dets = []
    all_gt = []
    for img_id, (img, gt) in enumerate(zip(dataset.images, dataset.gts)):
        for d in predict(model, img, conf=conf, iou=iou):
            all_dets.append((img_id, d))
        for g in gt:
            if g.image_id != img_id:
                g = GroundTruthBox(class_id=g.class_id, box=g.box, image_id=img_id)
            all_gt.append(g)
    return evaluate_map(all_dets, all_gt)
