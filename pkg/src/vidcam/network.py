"""ConstrainedNet / UnconstrainedNet assembly, initialisation and inference.

The architecture is a fixed feed-forward chain described by an
``ArchitectureSpec``:

    constrained (or plain) conv -> [conv + activation + max-pool] * n
    -> dense + activation (per fc_sizes) -> dense(num_classes) -> softmax

Only the first layer differs between the two variants. The constrained bank
is stored in float64 and projected in float64; everything else lives in the
model's compute dtype.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import constrained as cl
from .errors import ConfigError, ShapeError
from .tensor import (
    ACTIVATIONS,
    ConvSpec,
    activation_backward,
    activation_forward,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    maxpool_backward,
    maxpool_forward,
    softmax,
)

log = logging.getLogger(__name__)

SPEC_VERSION = 1
BANK = "constrained.w"


@dataclass
class FirstLayerSpec:
    enabled: bool = True
    filters: int = 3
    kernel_size: int = 5
    stride: int = 1
    padding: int = 0


@dataclass
class BlockSpec:
    filters: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    activation: str = "tanh"
    pool_window: int = 3  # 0 disables pooling
    pool_stride: int = 2


def _default_blocks():
    return [BlockSpec(96, 7, stride=2), BlockSpec(64, 5), BlockSpec(64, 5)]


@dataclass
class ArchitectureSpec:
    input_shape: tuple = (3, 480, 800)
    constrained: FirstLayerSpec = field(default_factory=FirstLayerSpec)
    blocks: list = field(default_factory=_default_blocks)
    fc_sizes: tuple = (1024, 1024)
    fc_activation: str = "tanh"
    num_classes: int = 28
    spec_version: int = SPEC_VERSION

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.fc_sizes = tuple(int(v) for v in self.fc_sizes)
        if isinstance(self.constrained, dict):
            self.constrained = FirstLayerSpec(**self.constrained)
        self.blocks = [BlockSpec(**b) if isinstance(b, dict) else b for b in self.blocks]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["fc_sizes"] = list(self.fc_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        version = d.get("spec_version", SPEC_VERSION)
        if version != SPEC_VERSION:
            raise ConfigError(f"unsupported spec_version {version}; this build reads version {SPEC_VERSION}")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"malformed architecture spec: {exc}") from None

    def replace(self, **changes) -> "ArchitectureSpec":
        d = self.to_dict()
        d.update(changes)
        return ArchitectureSpec.from_dict(d)

    def first_layer_conv(self) -> ConvSpec:
        f = self.constrained
        return ConvSpec(f.kernel_size, f.kernel_size, self.input_shape[0], f.filters, f.stride, f.padding)

    def block_convs(self) -> list:
        specs = []
        cin = self.constrained.filters
        for b in self.blocks:
            specs.append(ConvSpec(b.kernel_size, b.kernel_size, cin, b.filters, b.stride, b.padding))
            cin = b.filters
        return specs

    def shape_audit(self) -> list:
        """Return ``[(layer, shape), ...]`` for one sample, raising ConfigError if the chain breaks."""
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")
        c, h, w = self.input_shape
        f = self.constrained
        if f.enabled:
            if c != 3:
                raise ConfigError(f"constrained layer needs 3 input channels, input_shape has {c}")
            if f.kernel_size % 2 != 1:
                raise ConfigError(f"constrained kernel size must be odd, got {f.kernel_size}")
        for b in self.blocks:
            if b.activation not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {b.activation!r}")
        if self.fc_activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.fc_activation!r}")
        shapes = [("input", (c, h, w))]
        try:
            h, w = self.first_layer_conv().output_hw(h, w)
            shapes.append(("constrained" if f.enabled else "conv0", (f.filters, h, w)))
            for i, (b, spec) in enumerate(zip(self.blocks, self.block_convs()), start=1):
                h, w = spec.output_hw(h, w)
                shapes.append((f"conv{i}", (b.filters, h, w)))
                if b.pool_window:
                    if b.pool_window > min(h, w):
                        raise ShapeError(f"pool window {b.pool_window} larger than {h}x{w} after conv{i}")
                    h = (h - b.pool_window) // b.pool_stride + 1
                    w = (w - b.pool_window) // b.pool_stride + 1
                    shapes.append((f"pool{i}", (b.filters, h, w)))
        except ShapeError as exc:
            raise ConfigError(f"architecture does not shape-check: {exc}") from None
        flat = (self.blocks[-1].filters if self.blocks else f.filters) * h * w
        shapes.append(("flatten", (flat,)))
        for i, n in enumerate(self.fc_sizes, start=1):
            shapes.append((f"fc{i}", (n,)))
        shapes.append(("logits", (self.num_classes,)))
        return shapes

    def flat_features(self) -> int:
        return self.shape_audit()[-2 - len(self.fc_sizes)][1][0]


def reduced_spec(num_classes: int, size: int = 64, constrained: bool = True) -> ArchitectureSpec:
    """Small network for desk-scale experiments on ``size`` x ``size`` frames."""
    return ArchitectureSpec(
        input_shape=(3, size, size),
        constrained=FirstLayerSpec(enabled=constrained, filters=3, kernel_size=5),
        blocks=[BlockSpec(16, 5, pool_window=3, pool_stride=2), BlockSpec(16, 5, pool_window=3, pool_stride=2)],
        fc_sizes=(64, 64),
        num_classes=num_classes,
    )


def load_arch(path) -> ArchitectureSpec:
    data = json.loads(Path(path).read_text())
    if "architecture" in data:
        data = data["architecture"]
    return ArchitectureSpec.from_dict(data)


@dataclass
class Model:
    spec: ArchitectureSpec
    params: dict
    catalog: list
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.catalog) != self.spec.num_classes:
            raise ConfigError(f"catalog has {len(self.catalog)} devices, spec expects {self.spec.num_classes}")

    @property
    def constrained(self) -> bool:
        return self.spec.constrained.enabled

    def param_count(self, prefix_exclude: str | None = None) -> int:
        return sum(v.size for k, v in self.params.items() if not (prefix_exclude and k.startswith(prefix_exclude)))

    # -- forward / backward -------------------------------------------------

    def _check_input(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(f"batch shape {x.shape} does not match model input (N, {self.spec.input_shape})")

    def forward(self, x: np.ndarray, keep_cache: bool = False):
        """Return ``(logits, cache)``; ``cache`` is None unless ``keep_cache``."""
        self._check_input(x)
        dt = np.dtype(self.dtype)
        x = x.astype(dt, copy=False)
        p = self.params
        cache = [] if keep_cache else None
        first = self.spec.first_layer_conv()
        if self.constrained:
            a = conv2d_forward(x, p[BANK].astype(dt), None, first)
        else:
            a = conv2d_forward(x, p["conv0.w"], p["conv0.b"], first)
        if keep_cache:
            cache.append(("first", x))
        for i, (b, spec) in enumerate(zip(self.spec.blocks, self.spec.block_convs()), start=1):
            z = conv2d_forward(a, p[f"conv{i}.w"], p[f"conv{i}.b"], spec)
            h = activation_forward(b.activation, z)
            if keep_cache:
                cache.append(("conv", i, a, z))
            if b.pool_window:
                pooled, idx = maxpool_forward(h, b.pool_window, b.pool_stride)
                if keep_cache:
                    cache.append(("pool", idx, h.shape))
                h = pooled
            a = h
        if keep_cache:
            cache.append(("flatten", a.shape))
        a = a.reshape(a.shape[0], -1)
        for i in range(1, len(self.spec.fc_sizes) + 1):
            z = dense_forward(a, p[f"fc{i}.w"], p[f"fc{i}.b"])
            if keep_cache:
                cache.append(("fc", i, a, z))
            a = activation_forward(self.spec.fc_activation, z)
        logits = dense_forward(a, p["out.w"], p["out.b"])
        if keep_cache:
            cache.append(("out", a))
        return logits, cache

    def backward(self, cache, grad_logits: np.ndarray) -> dict:
        """Gradients of the loss w.r.t. every parameter, given d(loss)/d(logits)."""
        p = self.params
        grads = {}
        stack = list(cache)
        _, a = stack.pop()
        g, grads["out.w"], grads["out.b"] = dense_backward(grad_logits, a, p["out.w"])
        while stack:
            entry = stack.pop()
            kind = entry[0]
            if kind == "fc":
                _, i, a, z = entry
                g = activation_backward(self.spec.fc_activation, z, g)
                g, grads[f"fc{i}.w"], grads[f"fc{i}.b"] = dense_backward(g, a, p[f"fc{i}.w"])
            elif kind == "flatten":
                g = g.reshape(entry[1])
            elif kind == "pool":
                _, idx, shape = entry
                g = maxpool_backward(g, idx, shape)
            elif kind == "conv":
                _, i, a, z = entry
                b = self.spec.blocks[i - 1]
                spec = self.spec.block_convs()[i - 1]
                g = activation_backward(b.activation, z, g)
                g, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv2d_backward(g, a, p[f"conv{i}.w"], spec)
            elif kind == "first":
                x = entry[1]
                first = self.spec.first_layer_conv()
                if self.constrained:
                    w = p[BANK].astype(x.dtype)
                    _, gw, _ = conv2d_backward(g, x, w, first, with_bias=False, need_input_grad=False)
                    grads[BANK] = gw.astype(p[BANK].dtype)
                else:
                    _, grads["conv0.w"], grads["conv0.b"] = conv2d_backward(
                        g, x, p["conv0.w"], first, need_input_grad=False
                    )
        return grads

    def predict_proba(self, x: np.ndarray, chunk: int = 16) -> np.ndarray:
        """Softmax probabilities, computed ``chunk`` frames at a time to bound memory."""
        self._check_input(x)
        rows = [softmax(self.forward(x[i : i + chunk])[0]) for i in range(0, len(x), chunk)]
        return np.concatenate(rows, axis=0) if rows else np.zeros((0, self.spec.num_classes), self.dtype)


def build_model(spec: ArchitectureSpec, seed: int, catalog=None, dtype: str = "float32") -> Model:
    """Deterministically initialise a model: He-uniform weights, zero biases, projected bank."""
    shapes = spec.shape_audit()
    for name, shape in shapes:
        log.debug("layer %-12s %s", name, shape)
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype)
    params = {}
    first = spec.first_layer_conv()
    if spec.constrained.enabled:
        params[BANK] = cl.init_bank(rng, first.out_channels, first.in_channels, first.kernel_h)
    else:
        fan_in = first.in_channels * first.kernel_h * first.kernel_w
        shape = (first.out_channels, first.in_channels, first.kernel_h, first.kernel_w)
        params["conv0.w"] = cl.he_uniform(rng, shape, fan_in, dt)
        params["conv0.b"] = np.zeros(first.out_channels, dt)
    for i, cs in enumerate(spec.block_convs(), start=1):
        fan_in = cs.in_channels * cs.kernel_h * cs.kernel_w
        params[f"conv{i}.w"] = cl.he_uniform(rng, (cs.out_channels, cs.in_channels, cs.kernel_h, cs.kernel_w), fan_in, dt)
        params[f"conv{i}.b"] = np.zeros(cs.out_channels, dt)
    d = spec.flat_features()
    for i, n in enumerate(spec.fc_sizes, start=1):
        params[f"fc{i}.w"] = cl.he_uniform(rng, (d, n), d, dt)
        params[f"fc{i}.b"] = np.zeros(n, dt)
        d = n
    params["out.w"] = cl.he_uniform(rng, (d, spec.num_classes), d, dt)
    params["out.b"] = np.zeros(spec.num_classes, dt)
    if catalog is None:
        catalog = [f"D{i + 1:02d}" for i in range(spec.num_classes)]
    return Model(spec=spec, params=params, catalog=list(catalog), dtype=dt.name)


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Per-frame probability vectors for a batch of preprocessed frames."""
    return model.predict_proba(batch)
