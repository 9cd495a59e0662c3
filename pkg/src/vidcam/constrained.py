"""Constrained first convolutional layer (prediction-error filters).

A filter bank has shape (K, J, k, k) with odd ``k``: K filters, each holding
one kernel per input channel (J=3 for colour, J=1 for the grey-scale
compatibility mode). After projection every kernel has a centre weight of
exactly -1 and off-centre weights summing to 1, so each kernel outputs the
residual between a linear prediction of the centre pixel and the pixel itself.
A constant image therefore maps to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import ConvSpec, conv2d_forward

DEGENERATE_EPS = 1e-8
# kernels already this close to the constraint set are left bit-for-bit alone
FIXED_POINT_TOL = 1e-12


@dataclass
class ProjectionReport:
    offcenter_sums: np.ndarray
    reinitialized: int = 0
    degenerate: list = field(default_factory=list)


def _center(kernel_size: int) -> int:
    if kernel_size % 2 != 1:
        raise ShapeError(f"constrained kernels must have odd size, got {kernel_size}")
    return kernel_size // 2


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def offcenter_sums(weights: np.ndarray) -> np.ndarray:
    c = _center(weights.shape[-1])
    total = weights.sum(axis=(-2, -1), dtype=np.float64)
    return total - weights[..., c, c]


def project_constraints(weights: np.ndarray, epsilon_degenerate: float = DEGENERATE_EPS, rng=None):
    """Project a (K, J, k, k) bank onto the constraint set.

    Returns ``(projected, report)``; the input array is not modified. Kernels
    whose off-centre sum has magnitude below ``epsilon_degenerate`` are redrawn
    from the He-uniform initializer (using ``rng``) before normalisation.
    """
    if weights.ndim != 4 or weights.shape[-1] != weights.shape[-2]:
        raise ShapeError(f"filter bank must be (K, J, k, k), got shape {weights.shape}")
    if not np.all(np.isfinite(weights)):
        raise ValueError("filter bank contains non-finite weights")
    k = weights.shape[-1]
    c = _center(k)
    out = weights.copy()
    sums = offcenter_sums(out)
    report = ProjectionReport(offcenter_sums=sums.copy())

    bad = np.argwhere(np.abs(sums) < epsilon_degenerate)
    if len(bad):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = weights.shape[1] * k * k
        for fi, ki in bad:
            while True:
                fresh = he_uniform(rng, (k, k), fan_in, dtype=out.dtype)
                s = fresh.sum(dtype=np.float64) - fresh[c, c]
                if abs(s) >= epsilon_degenerate:
                    break
            out[fi, ki] = fresh
            sums[fi, ki] = s
            report.degenerate.append((int(fi), int(ki)))
        report.reinitialized = len(bad)

    centre = out[:, :, c, c]
    done = (centre == -1) & (np.abs(sums - 1.0) <= FIXED_POINT_TOL)
    scale = np.where(done, 1.0, 1.0 / sums).astype(out.dtype)
    out *= scale[:, :, None, None]
    out[:, :, c, c] = -1
    return out, report


def satisfies_constraints(weights: np.ndarray, tol: float = 1e-6) -> bool:
    c = _center(weights.shape[-1])
    centre_ok = np.all(np.abs(weights[:, :, c, c] + 1) <= tol)
    return bool(centre_ok and np.all(np.abs(offcenter_sums(weights) - 1) <= tol))


def constraint_violation(weights: np.ndarray) -> float:
    """Largest deviation from either constraint over all kernels."""
    c = _center(weights.shape[-1])
    centre = np.abs(weights[:, :, c, c].astype(np.float64) + 1).max()
    return float(max(centre, np.abs(offcenter_sums(weights) - 1).max()))


def constrained_conv_forward(x: np.ndarray, weights: np.ndarray, stride: int = 1, padding: int = 0,
                             grayscale: bool = False) -> np.ndarray:
    """Apply the bank with zero bias. Input must have 3 channels unless ``grayscale``."""
    expected = 1 if grayscale else 3
    if x.ndim != 4 or x.shape[1] != expected:
        if grayscale:
            raise ShapeError(f"grey-scale constrained layer expects 1 input channel, got shape {x.shape}")
        raise ShapeError(
            f"constrained layer expects 3 colour channels, got shape {x.shape}; "
            "for grey-scale input build the bank with one kernel per filter and pass grayscale=True"
        )
    if weights.shape[1] != expected:
        raise ShapeError(f"bank has {weights.shape[1]} kernels per filter, input has {expected} channels")
    k = weights.shape[-1]
    spec = ConvSpec(k, k, expected, weights.shape[0], stride=stride, padding=padding)
    return conv2d_forward(x, weights.astype(x.dtype, copy=False), None, spec)


def post_update_hook(weights: np.ndarray, rng=None) -> np.ndarray:
    """Re-project the bank after an optimizer step."""
    projected, _ = project_constraints(weights, rng=rng)
    return projected


def init_bank(rng: np.random.Generator, filters: int, kernels: int, kernel_size: int) -> np.ndarray:
    """He-uniform draw followed by projection, so the first forward pass is already constrained."""
    _center(kernel_size)
    raw = he_uniform(rng, (filters, kernels, kernel_size, kernel_size), kernels * kernel_size**2)
    return post_update_hook(raw, rng=rng)
