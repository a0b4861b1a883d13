from __future__ import annotations

from typing import NamedTuple, Optional, Sequence

import numpy as np
from PIL import Image

from .types import DataError

MASK_THRESHOLD = 0.5


class CropBox(NamedTuple):
    """Inclusive pixel bounds ``(top, left, bottom, right)``."""

    top: int
    left: int
    bottom: int
    right: int

    def apply(self, array: np.ndarray) -> np.ndarray:
        return array[self.top:self.bottom + 1, self.left:self.right + 1]


def to_grayscale(array: np.ndarray) -> np.ndarray:
    """Average color channels and scale integer input to [0, 1]."""
    arr = np.asarray(array)
    scale = None
    if np.issubdtype(arr.dtype, np.integer):
        scale = float(np.iinfo(arr.dtype).max)
    arr = arr.astype(np.float64)
    if arr.ndim == 3:
        # drop alpha
        if arr.shape[2] in (2, 4):
            arr = arr[..., :-1]
        arr = arr.mean(axis=2)
    if arr.ndim != 2:
        raise DataError(f"cannot convert array of shape {arr.shape} to grayscale")
    if scale is not None:
        arr = arr / scale
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def crop_dark_border(image: np.ndarray, threshold: float = 0.05, margin: int = 0):
    """Tight box around pixels brighter than ``threshold``, grown by ``margin``.

    An image with no such pixel is returned whole.
    """
    image = np.asarray(image)
    if image.size == 0:
        raise DataError("empty image")
    if not 0.0 <= threshold < 1.0:
        raise DataError(f"threshold must lie in [0, 1), got {threshold}")
    h, w = image.shape[:2]
    bright = image > threshold
    if bright.ndim == 3:
        bright = bright.any(axis=2)
    rows = np.flatnonzero(bright.any(axis=1))
    cols = np.flatnonzero(bright.any(axis=0))
    if rows.size == 0:
        box = CropBox(0, 0, h - 1, w - 1)
    else:
        box = CropBox(
            max(int(rows[0]) - margin, 0),
            max(int(cols[0]) - margin, 0),
            min(int(rows[-1]) + margin, h - 1),
            min(int(cols[-1]) + margin, w - 1),
        )
    return box.apply(image), box


def apply_exclusions(image: np.ndarray, rects: Sequence[Sequence[int]]) -> np.ndarray:
    """Blank out inclusive ``(x0, y0, x1, y1)`` rectangles (burned-in text, calipers)."""
    out = np.array(image, copy=True)
    for x0, y0, x1, y1 in rects:
        out[max(y0, 0):y1 + 1, max(x0, 0):x1 + 1] = 0
    return out


def resize_pair(image: np.ndarray, mask: Optional[np.ndarray], target_h: int, target_w: int):
    if target_h <= 0 or target_w <= 0:
        raise DataError("target dimensions must be positive")
    image = np.asarray(image, dtype=np.float32)
    if image.shape == (target_h, target_w):
        out_img = image.copy()
    else:
        pil = Image.fromarray(image, mode="F")
        out_img = np.asarray(pil.resize((target_w, target_h), Image.BILINEAR), dtype=np.float32)
        out_img = np.clip(out_img, 0.0, 1.0)
    if mask is None:
        return out_img, None
    mask = np.asarray(mask)
    if mask.shape == (target_h, target_w):
        return out_img, mask.copy()
    pil = Image.fromarray(mask.astype(np.float32), mode="F")
    out_mask = np.asarray(pil.resize((target_w, target_h), Image.NEAREST), dtype=np.float32)
    return out_img, (out_mask >= MASK_THRESHOLD).astype(np.uint8)
