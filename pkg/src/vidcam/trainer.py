"""SGD-with-momentum training loop and the checkpoint file format.

Update rule, per batch ``t`` (0-based)::

    lr_t = lr0 / (1 + decay * t)
    v    = momentum * v - lr_t * grad
    p    = p + v

After every update the constrained filter bank is re-projected.

Checkpoint layout (all integers little-endian)::

    b"VIDCAMCK" | u32 format version | u32 header length | JSON header
    | tensor blobs in header order | SHA-256 of everything before it
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import constrained as cl
from .dataset import SplitManifest
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .frames import frame_index
from .network import BANK, ArchitectureSpec, Model
from .preprocess import load_frame
from .tensor import softmax_cross_entropy

log = logging.getLogger(__name__)

MAGIC = b"VIDCAMCK"
FORMAT_VERSION = 1
_DIGEST = 32


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr0: float = 0.001
    momentum: float = 0.95
    decay: float = 0.0005
    seed: int = 0
    deterministic: bool = False
    checkpoint_dir: str | None = None
    check_every: int = 50  # constraint assertion period in steps; 1 = every step
    cache_frames: bool = False
    jobs: int = 1
    resize_policy: str = "crop"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("lr0", "momentum", "decay"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.check_every < 1:
            raise ConfigError("check_every must be >= 1")

    def hashed_fields(self) -> dict:
        d = asdict(self)
        for k in ("checkpoint_dir", "jobs"):
            d.pop(k)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.hashed_fields(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class OptimizerState:
    velocity: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, 0)


def learning_rate(config: TrainConfig, t: int) -> float:
    return config.lr0 / (1.0 + config.decay * t)


def sgd_momentum_step(params: dict, grads: dict, state: OptimizerState, config: TrainConfig):
    """Apply one momentum step in place; returns ``(params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericError(f"non-finite gradient in layer {name!r} ({bad} entries) at step {state.t}")
        if name not in params:
            raise ConfigError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    lr = learning_rate(config, state.t)
    for name, g in grads.items():
        v = state.velocity[name]
        v *= config.momentum
        v -= lr * g.astype(v.dtype, copy=False)
        params[name] += v
    state.t += 1
    return params, state


@dataclass
class Checkpoint:
    spec: ArchitectureSpec
    params: dict
    catalog: list
    optimizer: OptimizerState
    epoch: int
    metadata: dict = field(default_factory=dict)
    dtype: str = "float32"

    def model(self) -> Model:
        return Model(spec=self.spec, params={k: v.copy() for k, v in self.params.items()},
                     catalog=list(self.catalog), dtype=self.dtype)

    @classmethod
    def from_model(cls, model: Model, state: OptimizerState | None = None, epoch: int = 0, metadata=None):
        state = state or OptimizerState.zeros_like(model.params)
        return cls(model.spec, {k: v.copy() for k, v in model.params.items()}, list(model.catalog),
                   OptimizerState({k: v.copy() for k, v in state.velocity.items()}, state.t),
                   epoch, dict(metadata or {}), model.dtype)


def _tensor_items(ckpt: Checkpoint):
    for k, v in ckpt.params.items():
        yield "param/" + k, v
    for k, v in ckpt.optimizer.velocity.items():
        yield "velocity/" + k, v


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors, blobs = [], []
    for name, arr in _tensor_items(ckpt):
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blobs.append(le.tobytes())
        tensors.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "nbytes": len(blobs[-1])})
    header = {
        "spec": ckpt.spec.to_dict(),
        "catalog": ckpt.catalog,
        "epoch": ckpt.epoch,
        "t": ckpt.optimizer.t,
        "dtype": ckpt.dtype,
        "metadata": ckpt.metadata,
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if len(data) < len(MAGIC) + 8 + _DIGEST or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic or truncated)")
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted or truncated)")
    start = len(MAGIC) + 8
    header = json.loads(body[start : start + hlen])
    offset = start + hlen
    params, velocity = {}, {}
    for t in header["tensors"]:
        end = offset + t["nbytes"]
        if end > len(body):
            raise CheckpointError(f"{path}: tensor {t['name']} runs past end of file")
        arr = np.frombuffer(body[offset:end], dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        arr = arr.astype(arr.dtype.newbyteorder("="))
        kind, _, name = t["name"].partition("/")
        (params if kind == "param" else velocity)[name] = arr
        offset = end
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes after tensors")
    ckpt = Checkpoint(ArchitectureSpec.from_dict(header["spec"]), params, header["catalog"],
                      OptimizerState(velocity, header["t"]), header["epoch"], header["metadata"], header["dtype"])
    if BANK in params and not cl.satisfies_constraints(params[BANK]):
        raise CheckpointError(f"{path}: constrained bank violates the filter constraints")
    return ckpt


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float
    elapsed: float
    path: str | None = None
    video_accuracy: float | None = None
    frame_accuracy: float | None = None

    def log_line(self) -> str:
        line = f"epoch={self.epoch} loss={self.mean_loss:.6f} lr={self.lr:.6g} elapsed={self.elapsed:.1f}s"
        if self.video_accuracy is not None:
            line += f" video_acc={self.video_accuracy:.4f} frame_acc={self.frame_accuracy:.4f}"
        return line


def training_frames(manifest: SplitManifest, frames_root, split: str = "train"):
    """``[(path, label)]`` for every frame of the videos on one side; missing videos raise DataError."""
    index = frame_index(frames_root)
    items, missing = [], []
    for r in manifest.side(split):
        frames = index.get(r["video_id"])
        if not frames:
            missing.append(r["video_id"])
            continue
        absent = [str(p) for _, p in frames if not Path(p).exists()]
        if absent:
            missing.extend(absent)
            continue
        items.extend((Path(p), r["label"]) for _, p in frames)
    if missing:
        head = ", ".join(missing[:10])
        raise DataError(f"{len(missing)} missing {split} videos/frames under {frames_root}: {head}")
    return items


class FrameLoader:
    def __init__(self, size, policy="crop", cache=False, jobs=1):
        self.size = size
        self.policy = policy
        self.cache = {} if cache else None
        self.jobs = jobs

    def _one(self, path):
        if self.cache is not None and path in self.cache:
            return self.cache[path]
        x = load_frame(path, size=self.size, policy=self.policy)
        if self.cache is not None:
            self.cache[path] = x
        return x

    def batch(self, paths) -> np.ndarray:
        if self.jobs > 1:
            with ThreadPoolExecutor(self.jobs) as pool:
                return np.stack(list(pool.map(self._one, paths)))
        return np.stack([self._one(p) for p in paths])


def train(model: Model, manifest: SplitManifest, frames_root, config: TrainConfig, evaluate_each_epoch: bool = False,
          on_step=None) -> list[EpochRecord]:
    """Train ``model`` in place on the manifest's training side.

    Writes ``epoch_NNN.ckpt`` and a ``train.log`` line per epoch when
    ``config.checkpoint_dir`` is set. ``on_step(step, model, loss)`` is called
    after every update and re-projection.
    """
    if list(model.catalog) != list(manifest.devices):
        raise ConfigError("model catalog does not match the manifest's device list")
    items = training_frames(manifest, frames_root)
    if not items:
        raise DataError("manifest has no training videos")
    jobs = 1 if config.deterministic else config.jobs
    loader = FrameLoader(model.spec.input_shape[1:], config.resize_policy, config.cache_frames, jobs)
    state = OptimizerState.zeros_like(model.params)
    proj_rng = np.random.default_rng([config.seed, 7919])
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        (ckpt_dir / "train.log").write_text("")
    meta = {"config": config.hashed_fields(), "config_hash": config.config_hash(), "seed": config.seed}
    records = []
    labels = np.array([y for _, y in items], dtype=np.int64)
    step = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(items))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            x = loader.batch([items[i][0] for i in idx])
            logits, cache = model.forward(x, keep_cache=True)
            loss, grad, _ = softmax_cross_entropy(logits, labels[idx])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            grads = model.backward(cache, grad)
            sgd_momentum_step(model.params, grads, state, config)
            if model.constrained:
                model.params[BANK] = cl.post_update_hook(model.params[BANK], rng=proj_rng)
                if step % config.check_every == 0 and not cl.satisfies_constraints(model.params[BANK]):
                    raise NumericError(f"constraint violation {cl.constraint_violation(model.params[BANK]):.3g} "
                                       f"after step {step}")
            losses.append(loss * len(idx))
            step += 1
            if on_step is not None:
                on_step(step, model, loss)
        rec = EpochRecord(epoch, float(sum(losses) / len(items)), learning_rate(config, state.t),
                          time.perf_counter() - t0)
        if evaluate_each_epoch:
            from .evaluator import evaluate_model

            report = evaluate_model(model, manifest, frames_root, policy=config.resize_policy)
            rec.video_accuracy = report.accuracy["overall"]
            rec.frame_accuracy = report.frame_accuracy
        if ckpt_dir:
            emeta = dict(meta, mean_loss=rec.mean_loss)
            ckpt = Checkpoint.from_model(model, state, epoch, emeta)
            rec.path = str(save_checkpoint(ckpt, ckpt_dir / f"epoch_{epoch:03d}.ckpt"))
            with (ckpt_dir / "train.log").open("a") as fh:
                fh.write(rec.log_line() + "\n")
        log.info(rec.log_line())
        records.append(rec)
    return records
