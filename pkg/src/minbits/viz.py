"""Small image-grid writer used for run snapshots."""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """(N, C, H, W) floats in [0,1] -> (N, H, W, C) uint8."""
    arr = images.detach().clamp(0, 1).mul(255).round().byte().cpu().numpy()
    return arr.transpose(0, 2, 3, 1)


def save_image_grid(images: torch.Tensor, path, nrow: int = 8, pad: int = 2):
    """Tile a batch into one PNG, row-major, nrow images per row."""
    arr = to_uint8(images)
    n, h, w, c = arr.shape
    ncol = nrow
    nrows = (n + ncol - 1) // ncol
    canvas = np.zeros((nrows * (h + pad) + pad, ncol * (w + pad) + pad, c), dtype=np.uint8)
    for i in range(n):
        r, col = divmod(i, ncol)
        y0, x0 = pad + r * (h + pad), pad + col * (w + pad)
        canvas[y0 : y0 + h, x0 : x0 + w] = arr[i]
    Image.fromarray(canvas.squeeze()).save(path)
