"""Synthetic camera dataset with a known per-class noise fingerprint.

Each class (device) owns a fixed zero-mean pattern ``P_c``. A frame is a
smooth random scene plus ``noise * P_c`` (or, with ``multiplicative``, the
scene modulated by ``1 + noise * P_c``), clipped to [0, 1] and stored as an
8-bit PNG. The scene changes from frame to frame, so only the pattern carries
class identity.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .dataset import CATALOG_COLUMNS
from .errors import ConfigError, DataError
from .frames import FRAME_COLUMNS, FRAME_MANIFEST, SCENARIOS, frame_filename

log = logging.getLogger(__name__)

CATALOG_NAME = "catalog.csv"


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    size: int = 64
    noise: float = 0.03
    scene: float = 0.3
    videos_per_class: int = 12
    frames_per_video: int = 9
    seed: int = 7
    scene_smoothing: float = 4.0
    multiplicative: bool = False

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.size < 16:
            raise ConfigError(f"image size must be >= 16, got {self.size}")
        if self.noise < 0 or self.scene <= 0:
            raise ConfigError("noise must be >= 0 and scene amplitude > 0")
        if self.videos_per_class < 1 or self.frames_per_video < 1:
            raise ConfigError("need at least one video per class and one frame per video")


@dataclass
class SyntheticDataset:
    root: Path
    frames: list  # frame manifest rows
    patterns: np.ndarray  # (C, H, W, 3)
    max_pattern_overlap: float
    clip_fraction: float

    @property
    def catalog_path(self) -> Path:
        return self.root / CATALOG_NAME


def device_id(c: int) -> str:
    return f"S{c + 1:02d}"


def make_patterns(spec: SyntheticSpec, max_overlap: float = 0.1) -> tuple[np.ndarray, float]:
    """Zero-mean, unit-variance patterns; redrawn until pairwise |cos| < ``max_overlap``."""
    rng = np.random.default_rng([spec.seed, 0])
    shape = (spec.num_classes, spec.size, spec.size, 3)
    for _ in range(100):
        p = rng.standard_normal(shape)
        p -= p.mean(axis=(1, 2, 3), keepdims=True)
        p /= p.std(axis=(1, 2, 3), keepdims=True)
        flat = p.reshape(spec.num_classes, -1)
        cos = flat @ flat.T / flat.shape[1]
        overlap = float(np.abs(cos - np.eye(spec.num_classes)).max())
        if overlap < max_overlap:
            return p, overlap
    raise ConfigError(f"could not draw near-orthogonal patterns at size {spec.size}")


def scene_field(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    white = rng.standard_normal((spec.size, spec.size, 3))
    smooth = gaussian_filter(white, sigma=(spec.scene_smoothing, spec.scene_smoothing, 0), mode="wrap")
    smooth /= smooth.std()
    return 0.5 + spec.scene * smooth


def render_frame(rng, spec: SyntheticSpec, pattern: np.ndarray) -> tuple[np.ndarray, int]:
    scene = scene_field(rng, spec)
    if spec.multiplicative:
        raw = scene * (1 + spec.noise * pattern)
    else:
        raw = scene + spec.noise * pattern
    clipped = int(np.count_nonzero((raw < 0) | (raw > 1)))
    return np.rint(np.clip(raw, 0, 1) * 255).astype(np.uint8), clipped


def generate(spec: SyntheticSpec, out_dir) -> SyntheticDataset:
    """Write frames, ``frames.csv`` and a ``catalog.csv`` (native videos, cycling scenarios)."""
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {root}: {exc}") from None
    patterns, overlap = make_patterns(spec)
    frames, catalog, clipped, total = [], [], 0, 0
    for c in range(spec.num_classes):
        for v in range(spec.videos_per_class):
            vid = f"{device_id(c)}_V{v + 1:03d}"
            scenario = SCENARIOS[v % len(SCENARIOS)]
            rng = np.random.default_rng([spec.seed, c + 1, v + 1])
            for k in range(1, spec.frames_per_video + 1):
                img, nclip = render_frame(rng, spec, patterns[c])
                clipped += nclip
                total += img.size
                name = frame_filename(vid, k)
                Image.fromarray(img).save(root / name, format="PNG", optimize=False)
                frames.append({"video_id": vid, "device_id": device_id(c), "scenario": scenario,
                               "version": "native", "frame_index": k, "path": name})
            catalog.append({"video_id": vid, "device_id": device_id(c), "brand": "Synthetic", "model": device_id(c),
                            "scenario": scenario, "version": "native", "parent_id": "", "path": "",
                            "frames": spec.frames_per_video})
    with (root / FRAME_MANIFEST).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FRAME_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(frames)
    with (root / CATALOG_NAME).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CATALOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(catalog)
    frac = clipped / total if total else 0.0
    log.info("synthetic dataset: %d frames, max pattern overlap %.4f, clipped %.4f%%", len(frames), overlap, 100 * frac)
    return SyntheticDataset(root, frames, patterns, overlap, frac)
