"""Image I/O (binary PPM, optional PNG) and aspect-preserving letterboxing.

Images travel as float32 RGB in [0, 1], CHW. PPM is the native format (P6,
maxval 255); PNG loads through Pillow when it is installed.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class ImageFormatError(ValueError):
    pass


def _read_ppm_token(blob: bytes, pos: int):
    # Tokens are separated by whitespace; '#' starts a comment to EOL.
    while pos < len(blob):
        ch = blob[pos:pos + 1]
        if ch == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(blob) and not blob[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ImageFormatError("unexpected end of PPM header")
    return blob[start:pos], pos


def load_ppm(path) -> np.ndarray:
    """P6 PPM -> uint8 array [H, W, 3]."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:2] != b"P6":
        raise ImageFormatError(f"{path}: not a binary (P6) PPM")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_ppm_token(blob, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise ImageFormatError(f"{path}: malformed PPM header field {tok!r}") from None
    w, h, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    pos += 1  # single whitespace after maxval
    need = w * h * 3
    raw = blob[pos:pos + need]
    if len(raw) != need:
        raise ImageFormatError(f"{path}: pixel data truncated ({len(raw)}/{need} bytes)")
    return np.frombuffer(raw, np.uint8).reshape(h, w, 3).copy()


def save_ppm(path, img: np.ndarray):
    """uint8 [H, W, 3] -> P6 PPM."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"save_ppm needs uint8 [H,W,3], got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def load_image(path) -> Tensor:
    """Image file -> Tensor [3, H, W], float32 RGB in [0, 1].

    P6 PPM always works; .png needs Pillow.
    """
    p = str(path)
    if p.lower().endswith(".png"):
        try:
            from PIL import Image
        except ImportError:
            raise ImageFormatError("PNG support requires Pillow; use P6 PPM instead") from None
        arr = np.asarray(Image.open(p).convert("RGB"))
    else:
        arr = load_ppm(p)
    return Tensor(arr.astype(np.float32).transpose(2, 0, 1) / 255.0)


def _resize_bilinear(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """[C, H, W] float -> [C, oh, ow] with align-corners=False sampling."""
    c, h, w = img.shape
    if (h, w) == (oh, ow):
        return img.copy()
    ys = (np.arange(oh, dtype=np.float64) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow, dtype=np.float64) + 0.5) * (w / ow) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    p00 = img[:, y0][:, :, x0]
    p01 = img[:, y0][:, :, x1]
    p10 = img[:, y1][:, :, x0]
    p11 = img[:, y1][:, :, x1]
    top = p00 * (1 - wx) + p01 * wx
    bot = p10 * (1 - wx) + p11 * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def letterbox(img, size: int):
    """Aspect-preserving resize onto a size x size canvas padded with 0.5.

    Returns (Tensor [3, size, size], scale, (pad_x, pad_y)). A source pixel
    (x, y) maps to (x*scale + pad_x, y*scale + pad_y).
    """
    arr = img.data if isinstance(img, Tensor) else np.asarray(img, np.float32)
    _, h, w = arr.shape
    scale = size / max(h, w)
    nh, nw = round(h * scale), round(w * scale)
    resized = _resize_bilinear(arr, nh, nw)
    canvas = np.full((3, size, size), 0.5, np.float32)
    pad_y = (size - nh) // 2
    pad_x = (size - nw) // 2
    canvas[:, pad_y:pad_y + nh, pad_x:pad_x + nw] = resized
    return Tensor(canvas), scale, (pad_x, pad_y)


def unletterbox_box(box, scale: float, pad, orig_w: int, orig_h: int):
    """Map a network-space box back to original-image pixels and clip."""
    pad_x, pad_y = pad
    x1, y1, x2, y2 = box
    x1 = (x1 - pad_x) / scale
    x2 = (x2 - pad_x) / scale
    y1 = (y1 - pad_y) / scale
    y2 = (y2 - pad_y) / scale
    x1, x2 = max(0.0, min(x1, orig_w)), max(0.0, min(x2, orig_w))
    y1, y2 = max(0.0, min(y1, orig_h)), max(0.0, min(y2, orig_h))
    return (x1, y1, x2, y2)


_PALETTE = np.array([
    [230, 60, 60], [60, 200, 60], [70, 90, 240], [240, 200, 40],
    [220, 70, 220], [50, 210, 210], [245, 140, 30], [150, 150, 150],
], np.uint8)


def draw_detections(img: np.ndarray, dets, thickness: int = 1) -> np.ndarray:
    """Draw class-colored box outlines onto a uint8 [H, W, 3] image copy."""
    out = img.copy()
    h, w = out.shape[:2]
    for d in dets:
        color = _PALETTE[d.class_id % len(_PALETTE)]
        x1, y1, x2, y2 = (int(round(v)) for v in d.box)
        x1, x2 = max(0, min(x1, w - 1)), max(0, min(x2, w - 1))
        y1, y2 = max(0, min(y1, h - 1)), max(0, min(y2, h - 1))
        for t in range(thickness):
            xa, xb = min(x1 + t, w - 1), max(x2 - t, 0)
            ya, yb = min(y1 + t, h - 1), max(y2 - t, 0)
            out[ya, xa:xb + 1] = color
            out[yb, xa:xb + 1] = color
            out[ya:yb + 1, xa] = color
            out[ya:yb + 1, xb] = color
    return out
