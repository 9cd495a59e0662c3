"""Video catalog, device selection and leakage-free train/test splits.

A catalog CSV has one row per video::

    video_id,device_id,brand,model,scenario,version,parent_id,path,frames

``parent_id`` is empty for native videos and names the native parent for the
WhatsApp/YouTube versions. The split keeps a native video and all of its
social versions on the same side.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .frames import SCENARIOS, VERSIONS, VideoDescriptor

log = logging.getLogger(__name__)

CATALOG_COLUMNS = ("video_id", "device_id", "brand", "model", "scenario", "version", "parent_id", "path", "frames")
SPLIT_COLUMNS = ("video_id", "device_id", "label", "scenario", "version", "parent_id", "split", "path")
MIN_NATIVE_SHARED = 18
DEFAULT_EXCLUDE = ("Asus Zenfone 2 Laser",)


@dataclass
class VideoRecord:
    video_id: str
    device_id: str
    brand: str = ""
    model: str = ""
    scenario: str = "flat"
    version: str = "native"
    parent_id: str = ""
    path: str = ""
    frames: int = 0

    def __post_init__(self):
        self.frames = int(self.frames or 0)
        if self.scenario not in SCENARIOS:
            raise DataError(f"{self.video_id}: unknown scenario {self.scenario!r}")
        if self.version not in VERSIONS:
            raise DataError(f"{self.video_id}: unknown version {self.version!r}")

    @property
    def native(self) -> bool:
        return self.version == "native"

    def descriptor(self) -> VideoDescriptor:
        return VideoDescriptor(self.video_id, self.path, self.frames, device_id=self.device_id,
                               scenario=self.scenario, version=self.version)


class VideoCatalog:
    """Videos grouped by device with native <-> social linkage."""

    def __init__(self, videos):
        self.videos = {}
        for v in videos:
            if v.video_id in self.videos:
                raise DataError(f"duplicate video_id {v.video_id}")
            self.videos[v.video_id] = v
        self.children = defaultdict(list)
        for v in self.videos.values():
            if v.native:
                if v.parent_id:
                    raise DataError(f"native video {v.video_id} must not have a parent")
                continue
            parent = self.videos.get(v.parent_id)
            if parent is None or not parent.native:
                raise DataError(f"{v.version} video {v.video_id} has no native parent ({v.parent_id!r})")
            if parent.device_id != v.device_id:
                raise DataError(f"{v.video_id} and its parent {parent.video_id} belong to different devices")
            if parent.scenario != v.scenario:
                raise DataError(f"{v.video_id} scenario {v.scenario} differs from parent's {parent.scenario}")
            self.children[parent.video_id].append(v.video_id)

    def __len__(self):
        return len(self.videos)

    def devices(self) -> list[str]:
        return sorted({v.device_id for v in self.videos.values()})

    def natives(self, device_id) -> list[VideoRecord]:
        return sorted((v for v in self.videos.values() if v.native and v.device_id == device_id), key=lambda v: v.video_id)

    def versions_of(self, native_id) -> list[VideoRecord]:
        return [self.videos[c] for c in sorted(self.children.get(native_id, []))]

    def shared_both(self, native_id) -> bool:
        kinds = {v.version for v in self.versions_of(native_id)}
        return {"whatsapp", "youtube"} <= kinds


def read_catalog(path) -> VideoCatalog:
    path = Path(path)
    if not path.exists():
        raise DataError(f"catalog not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"video_id", "device_id", "scenario", "version"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: catalog lacks columns {sorted(missing)}")
        rows = []
        for r in reader:
            rows.append(VideoRecord(**{k: r.get(k) or "" for k in CATALOG_COLUMNS}))
    return VideoCatalog(rows)


def write_catalog(path, catalog: VideoCatalog):
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CATALOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for v in sorted(catalog.videos.values(), key=lambda v: v.video_id):
            w.writerow(asdict(v))


_VISION_DEVICE = re.compile(r"^(D\d+)_(.+)$")
_VISION_VIDEO = re.compile(r"^(D\d+)_V_(flat|indoor|outdoor)(WA|YT)?_(.+)$")
_SOCIAL = {"WA": "whatsapp", "YT": "youtube", None: "native"}


def catalog_from_vision_tree(root) -> VideoCatalog:
    """Build a catalog from a VISION-style directory tree.

    Expects ``<root>/<Dxx>_<Brand>_<Model>/videos/<scenario>[WA|YT]/<Dxx>_V_<scenario>[WA|YT]_<rest>.mp4``.
    Brand/model come from the device folder name (first underscore splits brand).
    """
    videos = []
    for dev_dir in sorted(p for p in Path(root).iterdir() if p.is_dir()):
        m = _VISION_DEVICE.match(dev_dir.name)
        if not m:
            continue
        device_id, name = m.groups()
        brand, _, model = name.partition("_")
        for f in sorted((dev_dir / "videos").rglob("*")):
            vm = _VISION_VIDEO.match(f.stem)
            if not f.is_file() or not vm:
                continue
            _, scenario, social, rest = vm.groups()
            native_id = f"{device_id}_V_{scenario}_{rest}"
            vid = f"{device_id}_V_{scenario}{social or ''}_{rest}"
            videos.append(VideoRecord(vid, device_id, brand, model.replace("_", " "), scenario, _SOCIAL[social],
                                      native_id if social else "", str(f)))
    known = {v.video_id for v in videos}
    orphans = [v.video_id for v in videos if v.parent_id and v.parent_id not in known]
    if orphans:
        log.warning("dropping %d social videos without a native parent", len(orphans))
        videos = [v for v in videos if not (v.parent_id and v.parent_id not in known)]
    return VideoCatalog(videos)


@dataclass
class Device:
    device_id: str
    brand: str
    model: str
    instance: int
    label: int = -1


@dataclass
class DeviceCatalog:
    devices: list
    audit: list = field(default_factory=list)

    def __post_init__(self):
        ids = [d.device_id for d in self.devices]
        if len(ids) != len(set(ids)):
            raise DataError("device ids in catalog are not unique")
        for i, d in enumerate(self.devices):
            d.label = i

    @property
    def ids(self) -> list[str]:
        return [d.device_id for d in self.devices]

    def __len__(self):
        return len(self.devices)


def select_devices(catalog: VideoCatalog, exclude=DEFAULT_EXCLUDE, min_shared: int = MIN_NATIVE_SHARED) -> DeviceCatalog:
    """Keep a device if it has ``min_shared`` native videos shared on both
    platforms, or if another device of the same brand and model exists.

    ``exclude`` matches a device id, a model name or "brand model". The audit
    lists, per device, the counts and which rule decided.
    """
    info = {}
    for d in catalog.devices():
        natives = catalog.natives(d)
        first = natives[0] if natives else next(v for v in catalog.videos.values() if v.device_id == d)
        info[d] = (first.brand, first.model, len(natives), sum(catalog.shared_both(n.video_id) for n in natives))
    siblings = Counter((b.lower(), m.lower()) for b, m, _, _ in info.values())
    excluded = {e.lower() for e in exclude}
    kept, audit, instance = [], [], Counter()
    for d, (brand, model, n_native, n_shared) in info.items():
        key = (brand.lower(), model.lower())
        instance[key] += 1
        rule1 = n_shared >= min_shared
        rule2 = siblings[key] > 1
        names = {d.lower(), model.lower(), f"{brand} {model}".lower().strip()}
        if names & excluded:
            decision = "excluded"
        elif rule1 or rule2:
            decision = "kept:" + "+".join(r for r, ok in (("videos", rule1), ("siblings", rule2)) if ok)
        else:
            decision = "dropped"
        audit.append({"device_id": d, "brand": brand, "model": model, "native": n_native,
                      "native_shared_both": n_shared, "same_model_devices": siblings[key], "decision": decision})
        if decision.startswith("kept"):
            kept.append(Device(d, brand, model, instance[key]))
    return DeviceCatalog(kept, audit)


@dataclass
class SplitManifest:
    """Which video goes to train or test. ``rows`` follow ``SPLIT_COLUMNS``."""

    rows: list
    devices: list  # device ids, index == label
    metadata: dict = field(default_factory=dict)

    def side(self, split: str) -> list:
        return [r for r in self.rows if r["split"] == split]

    def labels(self) -> dict:
        return {d: i for i, d in enumerate(self.devices)}

    def write(self, path):
        """Write ``<path>`` (CSV) and ``<path>.json`` (metadata with the device catalog)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SPLIT_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows)
        meta = dict(self.metadata, devices=self.devices)
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "SplitManifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"split manifest not found: {path}")
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(SPLIT_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise DataError(f"{path}: split manifest lacks columns {sorted(missing)}")
            rows = [dict(r, label=int(r["label"])) for r in reader]
        meta_path = path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        devices = meta.pop("devices", None)
        if devices is None:
            by_label = {r["label"]: r["device_id"] for r in rows}
            devices = [by_label[i] for i in sorted(by_label)]
        return cls(rows, devices, meta)


def split_counts(m: int, train_fraction: float = 0.55) -> tuple[int, int]:
    """``n_train = round(f * M)`` with halves rounded up, ``n_test = M - n_train``."""
    n_train = int(math.floor(train_fraction * m + 0.5))
    return n_train, m - n_train


def _covers(videos) -> bool:
    return {v.scenario for v in videos} >= set(SCENARIOS)


def _draw_device(natives, n_train, n_test, rng, retries):
    for _ in range(retries):
        order = rng.permutation(len(natives))
        train = [natives[i] for i in order[:n_train]]
        test = [natives[i] for i in order[n_train : n_train + n_test]]
        if _covers(train) and _covers(test):
            return train, test, False
    # fallback: one per scenario on each side, then fill randomly
    by_scenario = {s: [v for v in natives if v.scenario == s] for s in SCENARIOS}
    train, test = [], []
    for s in SCENARIOS:
        pick = rng.permutation(len(by_scenario[s]))[:2]
        train.append(by_scenario[s][pick[0]])
        test.append(by_scenario[s][pick[1]])
    used = {v.video_id for v in train + test}
    rest = [v for v in natives if v.video_id not in used]
    order = rng.permutation(len(rest))
    fill = [rest[i] for i in order]
    train += fill[: n_train - len(train)]
    fill = fill[n_train - 3 :]
    test += fill[: n_test - len(test)]
    return train, test, True


def build_split(devices: DeviceCatalog, catalog: VideoCatalog, fractions=(0.55, 0.45), seed: int = 0,
                retries: int = 100) -> SplitManifest:
    """Balanced per-device split with scenario coverage and native/social pairing.

    Every device contributes ``round(0.55 * M)`` native train and the rest of
    ``M`` native test videos, ``M`` being the smallest native count over the
    selected devices. Social versions follow their native parent.
    """
    if len(devices) < 2:
        raise ConfigError("need at least two devices to build a split")
    if abs(sum(fractions) - 1) > 1e-9 or min(fractions) <= 0:
        raise ConfigError(f"split fractions must be positive and sum to 1, got {fractions}")
    natives = {}
    for d in devices.ids:
        nv = catalog.natives(d)
        have = Counter(v.scenario for v in nv)
        lacking = [s for s in SCENARIOS if have[s] < 2]
        if lacking:
            raise DataError(f"device {d} needs at least two native videos per scenario; short on {lacking}")
        natives[d] = nv
    m = min(len(v) for v in natives.values())
    n_train, n_test = split_counts(m, fractions[0])
    if n_train < 3 or n_test < 3:
        raise DataError(f"minimum native count {m} gives {n_train}/{n_test}; each side needs one video per scenario")
    rows, fallbacks = [], 0
    for label, d in enumerate(devices.ids):
        rng = np.random.default_rng([seed, label])
        train, test, fell_back = _draw_device(natives[d], n_train, n_test, rng, retries)
        fallbacks += fell_back
        for side, chosen in (("train", train), ("test", test)):
            for v in sorted(chosen, key=lambda v: v.video_id):
                for w in [v] + catalog.versions_of(v.video_id):
                    rows.append({"video_id": w.video_id, "device_id": d, "label": label, "scenario": w.scenario,
                                 "version": w.version, "parent_id": w.parent_id, "split": side, "path": w.path})
    counts = {side: Counter(r["version"] for r in rows if r["split"] == side) for side in ("train", "test")}
    meta = {
        "seed": seed,
        "fractions": list(fractions),
        "min_native": m,
        "native_per_device": {"train": n_train, "test": n_test},
        "videos": {side: dict(sorted(c.items())) for side, c in counts.items()},
        "coverage_fallbacks": fallbacks,
    }
    return SplitManifest(rows, devices.ids, meta)


@dataclass
class AuditReport:
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self, limit: int = 10) -> str:
        if self.ok:
            return "manifest audit: clean"
        head = "\n".join(f"  {v}" for v in self.violations[:limit])
        return f"manifest audit: {len(self.violations)} violation(s)\n{head}"


def validate_manifest(manifest: SplitManifest) -> AuditReport:
    """Check pairing, per-device balance, scenario coverage and presence on both sides."""
    problems = []
    rows = {r["video_id"]: r for r in manifest.rows}
    for r in manifest.rows:
        if r["split"] not in ("train", "test"):
            problems.append(f"{r['video_id']}: unknown split {r['split']!r}")
        if r["version"] != "native":
            parent = rows.get(r["parent_id"])
            if parent is None:
                problems.append(f"pairing: {r['video_id']} parent {r['parent_id']!r} missing from manifest")
            elif parent["split"] != r["split"]:
                problems.append(f"pairing: {r['video_id']} in {r['split']} but parent {parent['video_id']} in {parent['split']}")
    per_side = defaultdict(Counter)
    scen = defaultdict(set)
    for r in manifest.rows:
        if r["version"] == "native":
            per_side[r["split"]][r["device_id"]] += 1
            scen[(r["device_id"], r["split"])].add(r["scenario"])
    for side in ("train", "test"):
        counts = {d: per_side[side][d] for d in manifest.devices}
        for d, n in counts.items():
            if n == 0:
                problems.append(f"presence: device {d} has no native {side} videos")
        if len(set(counts.values())) > 1:
            problems.append(f"balance: native {side} counts differ across devices {dict(sorted(counts.items()))}")
        for d in manifest.devices:
            missing = set(SCENARIOS) - scen[(d, side)]
            if missing and counts[d]:
                problems.append(f"coverage: device {d} {side} lacks scenarios {sorted(missing)}")
    return AuditReport(problems)


def manifest_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
