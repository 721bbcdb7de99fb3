"""Synthetic shape datasets and the JSON annotation sidecar.

Images are a solid background with 1-4 filled shapes; a class is a
shape/color combination (up to 8). Shape classes are drawn from a shuffled
repeating pool so the long-run class histogram stays near uniform. All
boxes are at least 8 px a side and mostly disjoint (rejection sampling
caps pairwise IoU). Generation is fully determined by the seed.

The sidecar format is
    {"images": [{"file": ..., "id": ..., "boxes":
                 [{"class": ..., "xyxy": [x1, y1, x2, y2]}, ...]}, ...]}
"""

from __future__ import annotations

import json
import os

import numpy as np

from .head import GroundTruthBox
from .imageio import load_ppm, save_ppm

# (shape, color) combos; class id indexes this table.
_SHAPES = ("square", "disc")
_COLORS = ((225, 60, 50), (60, 200, 70), (65, 95, 235), (235, 210, 50))
CLASS_TABLE = [(s, c) for s in _SHAPES for c in _COLORS]
MAX_CLASSES = len(CLASS_TABLE)

_BACKGROUNDS = ((190, 190, 190), (205, 200, 185), (180, 188, 198), (198, 182, 186))


class SynthDataset:
    """In-memory dataset: float images [3,S,S] in [0,1] plus ground truth."""

    def __init__(self, images, gts, size, n_classes):
        self.images = images
        self.gts = gts
        self.size = size
        self.n_classes = n_classes

    def __len__(self):
        return len(self.images)


def _draw_shape(img, shape, color, x1, y1, x2, y2):
    if shape == "square":
        img[y1:y2, x1:x2] = color
    else:  # disc inscribed in the box
        h, w = img.shape[:2]
        cy, cx = (y1 + y2) / 2.0, (x1 + x2) / 2.0
        ry, rx = (y2 - y1) / 2.0, (x2 - x1) / 2.0
        yy, xx = np.ogrid[:h, :w]
        mask = ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0
        img[mask] = color


def _boxes_overlap(box, others, max_iou=0.2):
    x1, y1, x2, y2 = box
    a = (x2 - x1) * (y2 - y1)
    for ox1, oy1, ox2, oy2 in others:
        ix = max(0, min(x2, ox2) - max(x1, ox1))
        iy = max(0, min(y2, oy2) - max(y1, oy1))
        inter = ix * iy
        union = a + (ox2 - ox1) * (oy2 - oy1) - inter
        if union > 0 and inter / union > max_iou:
            return True
    return False


def synth_dataset(n_images: int, n_classes: int, size: int, seed: int,
                  out_dir=None) -> SynthDataset:
    """Generate a deterministic shape dataset; optionally write it to disk.

    n_classes <= 8. When out_dir is given, images land there as P6 PPMs
    (img_00000.ppm, ...) next to an annotations.json sidecar.
    """
    if not 1 <= n_classes <= MAX_CLASSES:
        raise ValueError(f"n_classes must be in [1, {MAX_CLASSES}], got {n_classes}")
    rng = np.random.default_rng(seed)

    # Cycling pool keeps class counts near-exactly uniform.
    pool = []

    def next_class():
        if not pool:
            fresh = list(range(n_classes))
            rng.shuffle(fresh)
            pool.extend(fresh)
        return pool.pop()

    images, gts = [], []
    min_side, max_side = 12, max(16, min(size // 2, 80))
    for _ in range(n_images):
        bg = _BACKGROUNDS[rng.integers(len(_BACKGROUNDS))]
        img = np.empty((size, size, 3), np.uint8)
        img[:] = bg
        boxes = []
        gt = []
        for _ in range(int(rng.integers(1, 5))):
            cls = next_class()
            shape, color = CLASS_TABLE[cls]
            for _attempt in range(20):
                side_w = int(rng.integers(min_side, max_side + 1))
                side_h = int(rng.integers(min_side, max_side + 1))
                x1 = int(rng.integers(0, size - side_w))
                y1 = int(rng.integers(0, size - side_h))
                box = (x1, y1, x1 + side_w, y1 + side_h)
                if not _boxes_overlap(box, boxes):
                    break
            else:
                continue
            boxes.append(box)
            _draw_shape(img, shape, color, *box)
            gt.append(GroundTruthBox(class_id=cls, box=tuple(float(v) for v in box),
                                     image_id=len(images)))
        images.append(img.astype(np.float32).transpose(2, 0, 1) / 255.0)
        gts.append(gt)

    ds = SynthDataset(images, gts, size, n_classes)
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


def write_dataset(ds: SynthDataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, (img, gt) in enumerate(zip(ds.images, ds.gts)):
        fname = f"img_{i:05d}.ppm"
        arr = np.clip(img * 255.0 + 0.5, 0, 255).astype(np.uint8).transpose(1, 2, 0)
        save_ppm(os.path.join(out_dir, fname), arr)
        entries.append({
            "file": fname, "id": i,
            "boxes": [{"class": g.class_id, "xyxy": list(g.box)} for g in gt],
        })
    with open(os.path.join(out_dir, "annotations.json"), "w", encoding="utf-8") as f:
        json.dump({"images": entries}, f, indent=1)


def load_dataset(data_dir) -> SynthDataset:
    """Read a directory of PPM images plus annotations.json."""
    ann_path = os.path.join(data_dir, "annotations.json")
    with open(ann_path, "r", encoding="utf-8") as f:
        ann = json.load(f)
    images, gts = [], []
    max_cls = 0
    size = None
    for entry in ann["images"]:
        arr = load_ppm(os.path.join(data_dir, entry["file"]))
        size = arr.shape[0] if size is None else size
        images.append(arr.astype(np.float32).transpose(2, 0, 1) / 255.0)
        gt = [GroundTruthBox(class_id=int(b["class"]), box=tuple(float(v) for v in b["xyxy"]),
                             image_id=int(entry["id"]))
              for b in entry["boxes"]]
        for g in gt:
            max_cls = max(max_cls, g.class_id)
        gts.append(gt)
    return SynthDataset(images, gts, size, max_cls + 1)
