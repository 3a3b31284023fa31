"""Axial overlay images: ground-truth and predicted tumor boundaries on one slice.

Legend: red marks the ground-truth boundary, green the predicted boundary and
yellow pixels lying on both.  The background is a gray-scale rendering of an
optional scalar slice (e.g. normalized SUV), black otherwise.  Image rows
follow y and columns follow x.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

RED = (255, 0, 0)
GREEN = (0, 255, 0)
YELLOW = (255, 255, 0)
_CROSS = ndimage.generate_binary_structure(2, 1)


def boundary(mask2d: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask (or the image)."""
    m = np.asarray(mask2d, dtype=bool)
    return m & ~ndimage.binary_erosion(m, _CROSS, border_value=0)


def overlay_slice(gt: np.ndarray, pred: np.ndarray, z: int, background: Optional[np.ndarray] = None) -> np.ndarray:
    """RGB uint8 image ``(ny, nx, 3)`` of slice ``z`` of two (nx, ny, nz) masks."""
    gt = np.asarray(gt, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    if gt.shape != pred.shape or gt.ndim != 3:
        raise ValueError("ground truth and prediction must be 3D masks of equal shape")
    if not 0 <= z < gt.shape[2]:
        raise IndexError(f"slice {z} outside [0, {gt.shape[2] - 1}]")
    g = boundary(gt[:, :, z]).T
    p = boundary(pred[:, :, z]).T
    img = np.zeros(g.shape + (3,), dtype=np.uint8)
    if background is not None:
        bg = np.asarray(background, dtype=np.float64)[:, :, z].T
        lo, hi = float(bg.min()), float(bg.max())
        gray = np.zeros_like(bg) if hi <= lo else (bg - lo) / (hi - lo) * 255.0
        img[...] = np.rint(gray).astype(np.uint8)[..., None]
    img[g & ~p] = RED
    img[p & ~g] = GREEN
    img[g & p] = YELLOW
    return img


def write_ppm(path, image: np.ndarray) -> None:
    """Binary portable pixmap."""
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (h, w, 3) image")
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4:
        raise ValueError(f"{path}: not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def tumor_slices(mask: np.ndarray, count: int = 3) -> list:
    """Up to ``count`` evenly spaced z indices through the tumor's axial extent."""
    zs = np.flatnonzero(np.asarray(mask, dtype=bool).any(axis=(0, 1)))
    if zs.size == 0:
        return []
    picks = np.linspace(zs[0], zs[-1], num=min(count, zs.size))
    return sorted(set(int(round(v)) for v in picks))
