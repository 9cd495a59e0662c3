"""Frame classification, per-video voting and evaluation reports.

Video accuracy is computed the same way for every slice: classify each test
frame, aggregate the frame labels per video, pick the video label by vote, and
divide correct videos by total videos. Slices are the whole test set, each
scenario, each version, and each (scenario, version) pair.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import SplitManifest
from .errors import ConfigError, DataError
from .frames import SCENARIOS, VERSIONS, frame_index
from .network import Model
from .preprocess import load_frame

log = logging.getLogger(__name__)


def predict_frame(model: Model, frame: np.ndarray):
    """Return ``(label, z)`` for one preprocessed (3, H, W) frame; ties go to the lower label."""
    z = model.predict_proba(frame[None])[0]
    return int(np.argmax(z)), z


@dataclass
class VideoVerdict:
    video_id: str
    true_label: int
    frame_predictions: list
    tally: list
    prob_mass: list
    predicted: int
    tie: bool
    scenario: str = ""
    version: str = ""
    voting: str = "majority"

    @property
    def correct(self) -> bool:
        return self.predicted == self.true_label


def parse_voting(voting: str):
    if voting in ("majority", "avgprob"):
        return voting, None
    if voting.startswith("threshold:"):
        try:
            p = float(voting.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad threshold in voting mode {voting!r}") from None
        if not 0 <= p <= 1:
            raise ConfigError(f"voting threshold must lie in [0, 1], got {p}")
        return "threshold", p
    raise ConfigError(f"unknown voting mode {voting!r}; use majority, avgprob or threshold:<p>")


def _pick(counts, mass):
    """Max count; ties by larger probability mass, then lowest label."""
    best = counts.max()
    tied = np.flatnonzero(counts == best)
    if len(tied) == 1:
        return int(tied[0]), False
    m = mass[tied]
    return int(tied[np.flatnonzero(m == m.max())[0]]), True


def majority_vote(frame_predictions, true_label: int = -1, voting: str = "majority", num_classes=None) -> VideoVerdict:
    """Aggregate ``[(label, z), ...]`` for one video into a verdict.

    ``voting`` is ``majority`` (default), ``avgprob`` (argmax of the mean
    probability vector) or ``threshold:<p>`` (only frames whose top probability
    reaches ``p`` vote; if none does, every frame votes).
    """
    if not frame_predictions:
        raise ValueError("cannot vote on a video with no frames")
    mode, thr = parse_voting(voting)
    labels = np.array([int(y) for y, _ in frame_predictions])
    z = np.stack([np.asarray(v, dtype=np.float64) for _, v in frame_predictions])
    c = num_classes or z.shape[1]
    tally = np.bincount(labels, minlength=c)
    mass = z.sum(axis=0)
    if mode == "avgprob":
        mean = mass / len(z)
        tied = np.flatnonzero(mean == mean.max())
        predicted, tie = int(tied[0]), len(tied) > 1
    else:
        counts = tally
        if mode == "threshold":
            confident = z.max(axis=1) >= thr
            if confident.any():
                counts = np.bincount(labels[confident], minlength=c)
        predicted, tie = _pick(counts, mass)
    return VideoVerdict("", int(true_label), labels.tolist(), tally.tolist(), mass.tolist(), predicted, tie,
                        voting=voting)


@dataclass
class SliceResult:
    videos: int
    correct: int
    counts: list  # raw confusion counts, rows = true device
    frames: int = 0
    frames_correct: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.videos if self.videos else float("nan")

    @property
    def confusion(self) -> np.ndarray:
        """Row-normalised confusion matrix; rows without videos stay zero."""
        m = np.asarray(self.counts, dtype=np.float64)
        s = m.sum(axis=1, keepdims=True)
        return np.divide(m, s, out=np.zeros_like(m), where=s > 0)


@dataclass
class EvaluationReport:
    devices: list
    slices: dict
    verdicts: list
    voting: str = "majority"
    metadata: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> dict:
        return {k: s.accuracy for k, s in self.slices.items()}

    @property
    def frame_accuracy(self) -> float:
        s = self.slices["overall"]
        return s.frames_correct / s.frames if s.frames else float("nan")

    @property
    def scenario_accuracy(self) -> dict:
        return {s: self.slices[f"scenario={s}"].accuracy for s in SCENARIOS if f"scenario={s}" in self.slices}

    @property
    def version_accuracy(self) -> dict:
        return {v: self.slices[f"version={v}"].accuracy for v in VERSIONS if f"version={v}" in self.slices}

    def to_dict(self) -> dict:
        return {
            "devices": self.devices,
            "voting": self.voting,
            "metadata": self.metadata,
            "accuracy": self.accuracy,
            "frame_accuracy": self.frame_accuracy,
            "slices": {k: dict(asdict(s), accuracy=s.accuracy, confusion=s.confusion.tolist())
                       for k, s in self.slices.items()},
            "verdicts": [asdict(v) for v in self.verdicts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        slices = {k: SliceResult(s["videos"], s["correct"], s["counts"], s["frames"], s["frames_correct"])
                  for k, s in d["slices"].items()}
        verdicts = [VideoVerdict(**v) for v in d["verdicts"]]
        return cls(d["devices"], slices, verdicts, d["voting"], d["metadata"])


def slice_keys(scenario: str, version: str):
    return ("overall", f"scenario={scenario}", f"version={version}", f"scenario={scenario}/version={version}")


def build_report(verdicts, devices, voting="majority", metadata=None) -> EvaluationReport:
    c = len(devices)
    slices = {}
    for v in verdicts:
        frames_ok = sum(1 for y in v.frame_predictions if y == v.true_label)
        for key in slice_keys(v.scenario, v.version):
            s = slices.get(key)
            if s is None:
                s = slices[key] = SliceResult(0, 0, [[0] * c for _ in range(c)])
            s.videos += 1
            s.correct += int(v.correct)
            s.counts[v.true_label][v.predicted] += 1
            s.frames += len(v.frame_predictions)
            s.frames_correct += frames_ok
    order = {k: i for i, k in enumerate(_slice_order())}
    slices = dict(sorted(slices.items(), key=lambda kv: order.get(kv[0], len(order))))
    return EvaluationReport(list(devices), slices, list(verdicts), voting, dict(metadata or {}))


def _slice_order():
    keys = ["overall"] + [f"scenario={s}" for s in SCENARIOS] + [f"version={v}" for v in VERSIONS]
    return keys + [f"scenario={s}/version={v}" for s in SCENARIOS for v in VERSIONS]


def evaluate_model(model: Model, manifest: SplitManifest, frames_root, voting: str = "majority", split: str = "test",
                   policy: str = "crop", allow_partial: bool = False, batch: int = 16, metadata=None) -> EvaluationReport:
    """Classify every frame of every ``split`` video and vote per video."""
    parse_voting(voting)
    if list(model.catalog) != list(manifest.devices):
        raise ConfigError("model catalog does not match the manifest's device list")
    index = frame_index(frames_root)
    rows = manifest.side(split)
    missing = [r["video_id"] for r in rows if not index.get(r["video_id"])]
    missing += [str(p) for r in rows for _, p in index.get(r["video_id"], []) if not Path(p).exists()]
    if missing and not allow_partial:
        raise DataError(f"{len(missing)} {split} videos/frames missing under {frames_root}: {', '.join(missing[:10])}")
    size = model.spec.input_shape[1:]
    verdicts = []
    for r in rows:
        frames = [p for _, p in index.get(r["video_id"], []) if Path(p).exists()]
        if not frames:
            continue
        probs = []
        for i in range(0, len(frames), batch):
            x = np.stack([load_frame(p, size=size, policy=policy) for p in frames[i : i + batch]])
            probs.append(model.predict_proba(x))
        z = np.concatenate(probs)
        preds = [(int(np.argmax(row)), row) for row in z]
        v = majority_vote(preds, r["label"], voting, num_classes=len(model.catalog))
        v.video_id, v.scenario, v.version = r["video_id"], r["scenario"], r["version"]
        verdicts.append(v)
    return build_report(verdicts, manifest.devices, voting, metadata)


def evaluate(checkpoint, manifest, frames_root, voting: str = "majority", **kw) -> EvaluationReport:
    """Evaluate a checkpoint (path or loaded ``Checkpoint``) on a split manifest (path or object)."""
    from .trainer import Checkpoint, load_checkpoint

    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if not isinstance(manifest, SplitManifest):
        manifest = SplitManifest.read(manifest)
    meta = {"epoch": ckpt.epoch, "config_hash": ckpt.metadata.get("config_hash"), "seed": ckpt.metadata.get("seed")}
    meta.update(kw.pop("metadata", None) or {})
    return evaluate_model(ckpt.model(), manifest, frames_root, voting=voting, metadata=meta, **kw)


def _slug(key: str) -> str:
    return key.replace("scenario=", "").replace("version=", "").replace("/", "-") if key != "overall" else key


def write_pgm(path, matrix: np.ndarray, cell: int = 8):
    """Binary greyscale PGM, one ``cell`` x ``cell`` block per matrix entry, 1.0 -> white."""
    m = np.clip(np.asarray(matrix, dtype=np.float64), 0, 1)
    img = np.rint(m * 255).astype(np.uint8)
    img = np.kron(img, np.ones((cell, cell), dtype=np.uint8))
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise DataError(f"{path} is not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_confusion_csv(path, matrix: np.ndarray, devices):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred", *devices])
        for d, row in zip(devices, matrix):
            w.writerow([d, *(format(float(v), ".17g") for v in row)])


def emit_report(report: EvaluationReport, out_dir, figures: bool = True, cell: int = 8) -> list[Path]:
    """Write summary.json, verdicts.csv and per-slice confusion CSV/PGM (+ PNG figures)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create report directory {out}: {exc}") from None
    written = []
    summary = out / "summary.json"
    summary.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True, allow_nan=True) + "\n")
    written.append(summary)
    verdicts = out / "verdicts.csv"
    with verdicts.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "scenario", "version", "true_device", "predicted_device", "correct", "tie", "tally"])
        for v in report.verdicts:
            w.writerow([v.video_id, v.scenario, v.version, report.devices[v.true_label], report.devices[v.predicted],
                        int(v.correct), int(v.tie), " ".join(map(str, v.tally))])
    written.append(verdicts)
    for key, s in report.slices.items():
        slug = _slug(key)
        cm = s.confusion
        paths = [out / f"confusion_{slug}.csv", out / f"confusion_{slug}.pgm"]
        write_confusion_csv(paths[0], cm, report.devices)
        write_pgm(paths[1], cm, cell=cell)
        written += paths
    if figures:
        from . import plots

        for key, s in report.slices.items():
            p = out / f"confusion_{_slug(key)}.png"
            plots.confusion_figure(s.confusion, report.devices, f"{key}  (acc {s.accuracy:.3f}, n={s.videos})", p)
            written.append(p)
        p = out / "accuracy.png"
        plots.slice_accuracy_figure(report.accuracy, p)
        written.append(p)
    return written


def load_report(path) -> EvaluationReport:
    path = Path(path)
    if path.is_dir():
        path = path / "summary.json"
    return EvaluationReport.from_dict(json.loads(path.read_text()))
