"""Equally spaced frame sampling and extraction.

Frame indices are 1-based. Decoding is delegated to an external program
(ffmpeg/ffprobe) run as a subprocess; a directory of already extracted,
name-ordered frames is accepted in place of a video file.
"""

from __future__ import annotations

import csv
import logging
import re
import shutil
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image

from .errors import ConfigError, DataError, DecoderError

log = logging.getLogger(__name__)

SCENARIOS = ("flat", "indoor", "outdoor")
VERSIONS = ("native", "whatsapp", "youtube")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm")
FRAME_MANIFEST = "frames.csv"
FRAME_COLUMNS = ("video_id", "device_id", "scenario", "version", "frame_index", "path")
_FRAME_NAME = re.compile(r"^(?P<video>.+)_f(?P<index>\d+)\.png$")


def sample_indices(total_frames: int, count: int, allow_repeats: bool = False) -> list[int]:
    """``floor(i * F / K)`` for ``i = 1..K``, clamped to at least 1.

    >>> sample_indices(1000, 200)[:3], sample_indices(1000, 200)[-1]
    ([5, 10, 15], 1000)
    >>> sample_indices(7, 3)
    [2, 4, 7]
    """
    if total_frames < 1:
        raise ConfigError(f"video must have at least one frame, got {total_frames}")
    if count < 1:
        raise ConfigError(f"must request at least one frame, got {count}")
    if count > total_frames and not allow_repeats:
        raise ConfigError(f"requested {count} frames from a {total_frames}-frame video; pass allow_repeats to permit duplicates")
    return [max(1, i * total_frames // count) for i in range(1, count + 1)]


@dataclass
class VideoDescriptor:
    video_id: str
    path: str
    total_frames: int = 0
    fps: float = 0.0
    duration: float = 0.0
    device_id: str = ""
    scenario: str = "flat"
    version: str = "native"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise DataError(f"{self.video_id}: unknown scenario {self.scenario!r}")
        if self.version not in VERSIONS:
            raise DataError(f"{self.video_id}: unknown version {self.version!r}")


@dataclass
class FrameSet:
    video: VideoDescriptor
    frames: list = field(default_factory=list)  # [(index, path)]
    written: int = 0

    def rows(self, root: Path | None = None):
        for index, path in self.frames:
            p = Path(path)
            if root is not None:
                try:
                    p = p.relative_to(root)
                except ValueError:
                    pass
            yield {
                "video_id": self.video.video_id,
                "device_id": self.video.device_id,
                "scenario": self.video.scenario,
                "version": self.video.version,
                "frame_index": index,
                "path": p.as_posix(),
            }


def frame_filename(video_id: str, index: int) -> str:
    return f"{video_id}_f{index}.png"


class FFmpegDecoder:
    """Frame-accurate extraction with ffmpeg's ``select`` filter (0-based decode order)."""

    def __init__(self, ffmpeg: str = "ffmpeg", ffprobe: str = "ffprobe"):
        self.ffmpeg = ffmpeg
        self.ffprobe = ffprobe

    def _require(self, exe):
        if shutil.which(exe) is None:
            raise DecoderError(f"external decoder {exe!r} not found on PATH")

    def count_frames(self, path) -> int:
        self._require(self.ffprobe)
        cmd = [self.ffprobe, "-v", "error", "-select_streams", "v:0", "-count_frames",
               "-show_entries", "stream=nb_read_frames", "-of", "csv=p=0", str(path)]
        res = subprocess.run(cmd, capture_output=True, text=True)
        if res.returncode != 0:
            raise DecoderError(f"ffprobe failed on {path}: {res.stderr.strip()}")
        try:
            return int(res.stdout.strip().split(",")[0])
        except ValueError:
            raise DecoderError(f"ffprobe returned no frame count for {path}") from None

    def extract(self, path, indices, out_paths):
        self._require(self.ffmpeg)
        unique = sorted(set(indices))
        expr = "+".join(f"eq(n\\,{i - 1})" for i in unique)
        with tempfile.TemporaryDirectory() as tmp:
            cmd = [self.ffmpeg, "-v", "error", "-nostdin", "-i", str(path), "-vf", f"select='{expr}'",
                   "-vsync", "0", "-start_number", "0", str(Path(tmp) / "%06d.png")]
            res = subprocess.run(cmd, capture_output=True, text=True)
            if res.returncode != 0:
                raise DecoderError(f"ffmpeg failed on {path}: {res.stderr.strip()}")
            got = sorted(Path(tmp).glob("*.png"))
            if len(got) != len(unique):
                raise DecoderError(f"ffmpeg returned {len(got)} of {len(unique)} frames for {path}")
            by_index = dict(zip(unique, got))
            for idx, out in zip(indices, out_paths):
                shutil.copyfile(by_index[idx], out)


class DirectoryDecoder:
    """Treats a directory of images, sorted by name, as the frames 1..F of a video."""

    def _files(self, path):
        files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DecoderError(f"no frame images in {path}")
        return files

    def count_frames(self, path) -> int:
        return len(self._files(path))

    def extract(self, path, indices, out_paths):
        files = self._files(path)
        for idx, out in zip(indices, out_paths):
            src = files[idx - 1]
            try:
                with Image.open(src) as im:
                    im.convert("RGB").save(out, format="PNG")
            except OSError as exc:
                raise DecoderError(f"cannot read frame {src}: {exc}") from None


def decoder_for(path, decoder=None):
    if Path(path).is_dir():
        return DirectoryDecoder()
    return decoder if decoder is not None else FFmpegDecoder()


def _is_valid_png(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
            return im.format == "PNG"
    except (OSError, SyntaxError):
        return False


def extract_frames(video: VideoDescriptor, count: int, out_dir, decoder=None, allow_repeats: bool = False) -> FrameSet:
    """Write ``count`` equally spaced frames of ``video`` as ``<video-id>_f<index>.png``.

    Files that already exist and decode as PNG are left alone.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dec = decoder_for(video.path, decoder)
    if video.total_frames < 1:
        video.total_frames = dec.count_frames(video.path)
    indices = sample_indices(video.total_frames, count, allow_repeats=allow_repeats)
    paths = [out_dir / frame_filename(video.video_id, i) for i in indices]
    todo = [(i, p) for i, p in zip(indices, paths) if not _is_valid_png(p)]
    if todo:
        # duplicates (allow_repeats) share one file
        seen = {}
        for i, p in todo:
            seen.setdefault(i, p)
        dec.extract(video.path, list(seen), list(seen.values()))
    return FrameSet(video=video, frames=list(zip(indices, [str(p) for p in paths])), written=len(set(i for i, _ in todo)))


@dataclass
class ExtractionResult:
    framesets: list
    failures: dict  # video_id -> message

    @property
    def ok(self) -> bool:
        return not self.failures


def extract_many(videos, count: int, out_dir, decoder=None, allow_repeats: bool = False, jobs: int = 1) -> ExtractionResult:
    """Extract every video in a worker pool; the frame manifest is written once, in input order."""
    out_dir = Path(out_dir)

    def job(v):
        try:
            return extract_frames(v, count, out_dir, decoder=decoder, allow_repeats=allow_repeats), None
        except (DataError, ConfigError) as exc:
            return None, str(exc)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(job, videos))
    framesets, failures = [], {}
    for v, (fs, err) in zip(videos, results):
        if err is not None:
            log.error("extraction failed for %s: %s", v.video_id, err)
            failures[v.video_id] = err
        else:
            framesets.append(fs)
    write_frame_manifest(out_dir / FRAME_MANIFEST, framesets, root=out_dir)
    return ExtractionResult(framesets, failures)


def write_frame_manifest(path, framesets, root=None):
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=FRAME_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for fs in framesets:
            writer.writerows(fs.rows(root))


def read_frame_manifest(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"frame manifest not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        missing = [c for c in FRAME_COLUMNS if c not in r]
        if missing:
            raise DataError(f"{path}: frame manifest lacks columns {missing}")
        r["frame_index"] = int(r["frame_index"])
    return rows


def frame_index(frames_root) -> dict:
    """Map video_id -> sorted [(frame_index, absolute path)] for a frames directory.

    Uses ``frames.csv`` when present, otherwise the ``<video-id>_f<index>.png`` naming.
    """
    root = Path(frames_root)
    if not root.is_dir():
        raise DataError(f"frames directory not found: {root}")
    index = {}
    manifest = root / FRAME_MANIFEST
    if manifest.exists():
        for r in read_frame_manifest(manifest):
            p = Path(r["path"])
            index.setdefault(r["video_id"], []).append((r["frame_index"], p if p.is_absolute() else root / p))
    else:
        for p in root.rglob("*.png"):
            m = _FRAME_NAME.match(p.name)
            if m:
                index.setdefault(m["video"], []).append((int(m["index"]), p))
    return {k: sorted(v) for k, v in index.items()}
