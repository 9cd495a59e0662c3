"""Frame preprocessing: fit an 8-bit RGB frame to the network input.

Frames at least as large as the target in both dimensions are centre-cropped,
which keeps the pixel-level noise untouched. Smaller frames are bilinearly
resized. Values are scaled to [0, 1]; no mean subtraction.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

MIN_SIDE = 16


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Point-sampled bilinear resize of an (H, W, C) array, half-pixel centres, edge clamped.

    Unlike PIL's BILINEAR this does not widen the kernel when downscaling.
    """
    h, w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    src = img.astype(np.float64)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def center_crop(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    top = (h - out_h) // 2
    left = (w - out_w) // 2
    return img[top : top + out_h, left : left + out_w]


def preprocess_frame(image: np.ndarray, size=(480, 800), policy: str = "crop", dtype=np.float32) -> np.ndarray:
    """Return a (3, H, W) tensor in [0, 1] for an (h, w, 3) uint8 frame.

    ``policy="crop"`` crops frames that cover the target and resizes the rest;
    ``policy="resize"`` always resizes.
    """
    if image is None or image.size == 0:
        raise DataError("empty frame")
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected an RGB frame (H, W, 3), got shape {image.shape}")
    h, w = image.shape[:2]
    if h < MIN_SIDE or w < MIN_SIDE:
        raise DataError(f"frame {h}x{w} smaller than the {MIN_SIDE}x{MIN_SIDE} minimum")
    th, tw = size
    if policy not in ("crop", "resize"):
        raise ValueError(f"unknown preprocessing policy {policy!r}")
    if (h, w) == (th, tw):
        out = image.astype(dtype)
    elif policy == "crop" and h >= th and w >= tw:
        out = center_crop(image, th, tw).astype(dtype)
    else:
        out = np.clip(np.rint(bilinear_resize(image, th, tw)), 0, 255).astype(dtype)
    return np.ascontiguousarray(out.transpose(2, 0, 1)) / dtype(255)


def read_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except FileNotFoundError:
        raise DataError(f"frame not found: {path}") from None
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"corrupt frame {path}: {exc}") from None


def load_frame(path: str | Path, size=(480, 800), policy: str = "crop") -> np.ndarray:
    return preprocess_frame(read_rgb(path), size=size, policy=policy)
