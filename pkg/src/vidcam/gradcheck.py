"""Central finite-difference checks for every backward pass (float64).

Each op is reduced to the scalar ``sum(out * R)`` for a fixed random ``R`` so
the analytic gradient is simply ``backward(R)``. Relative error per entry is
``|a - n| / max(|a|, |n|, 1e-7)``; the floor keeps entries whose true value
is zero from dividing rounding noise by zero.
"""

from __future__ import annotations

import numpy as np

from .constrained import constrained_conv_forward, init_bank
from .network import ArchitectureSpec, BlockSpec, FirstLayerSpec, build_model
from .tensor import (
    ConvSpec,
    activation_backward,
    activation_forward,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    maxpool_backward,
    maxpool_forward,
    softmax_cross_entropy,
)

STEP = 1e-3
# whole-chain check: O(h^2) truncation through several tanh layers is visible
# on small-gradient entries at 1e-3, so the chain uses a finer step
CHAIN_STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-7


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)).max())


def numeric_grad(f, x: np.ndarray, h: float = STEP, entries=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place, restored after)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def check_conv(rng) -> dict:
    n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = rng.integers(k + 1, 9, size=2)
    spec = ConvSpec(k, k, int(cin), int(cout), stride, pad)
    x = rng.standard_normal((n, cin, h, w))
    f = rng.standard_normal((cout, cin, k, k))
    b = rng.standard_normal(cout)
    r = rng.standard_normal(conv2d_forward(x, f, b, spec).shape)
    gx, gf, gb = conv2d_backward(r, x, f, spec)
    loss = lambda: float((conv2d_forward(x, f, b, spec) * r).sum())  # noqa: E731
    return {
        "conv.input": relative_error(gx, numeric_grad(loss, x)),
        "conv.filters": relative_error(gf, numeric_grad(loss, f)),
        "conv.bias": relative_error(gb, numeric_grad(loss, b)),
    }


def check_constrained(rng) -> dict:
    x = rng.standard_normal((2, 3, 8, 8))
    bank = init_bank(rng, 3, 3, 5)
    r = rng.standard_normal(constrained_conv_forward(x, bank).shape)
    spec = ConvSpec(5, 5, 3, 3)
    _, gw, _ = conv2d_backward(r, x, bank, spec, with_bias=False, need_input_grad=False)
    loss = lambda: float((constrained_conv_forward(x, bank) * r).sum())  # noqa: E731
    return {"constrained.bank": relative_error(gw, numeric_grad(loss, bank))}


def _distinct(rng, shape, gap=0.01):
    # values at least `gap` apart so an h-perturbation never flips a window's max
    return (rng.permutation(int(np.prod(shape))).reshape(shape) * gap).astype(np.float64)


def check_maxpool(rng) -> dict:
    window, stride = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    h, w = rng.integers(window, 9, size=2)
    x = _distinct(rng, (2, 2, h, w))
    out, idx = maxpool_forward(x, window, stride)
    r = rng.standard_normal(out.shape)
    g = maxpool_backward(r, idx, x.shape)
    loss = lambda: float((maxpool_forward(x, window, stride)[0] * r).sum())  # noqa: E731
    return {"maxpool.input": relative_error(g, numeric_grad(loss, x))}


def check_dense(rng) -> dict:
    n, d, m = rng.integers(1, 5), rng.integers(1, 8), rng.integers(1, 8)
    x, w, b = rng.standard_normal((n, d)), rng.standard_normal((d, m)), rng.standard_normal(m)
    r = rng.standard_normal((n, m))
    gx, gw, gb = dense_backward(r, x, w)
    loss = lambda: float((dense_forward(x, w, b) * r).sum())  # noqa: E731
    return {
        "dense.input": relative_error(gx, numeric_grad(loss, x)),
        "dense.weights": relative_error(gw, numeric_grad(loss, w)),
        "dense.bias": relative_error(gb, numeric_grad(loss, b)),
    }


def check_activations(rng) -> dict:
    out = {}
    for kind in ("tanh", "relu"):
        x = rng.standard_normal((3, 7))
        if kind == "relu":
            x = np.where(np.abs(x) < 0.05, 0.5, x)  # keep away from the kink
        r = rng.standard_normal(x.shape)
        g = activation_backward(kind, x, r)
        loss = lambda: float((activation_forward(kind, x) * r).sum())  # noqa: E731
        out[f"{kind}.input"] = relative_error(g, numeric_grad(loss, x))
    return out


def check_softmax_ce(rng) -> dict:
    n, c = int(rng.integers(1, 6)), int(rng.integers(2, 8))
    logits = rng.standard_normal((n, c)) * 2
    labels = rng.integers(0, c, size=n)
    _, g, _ = softmax_cross_entropy(logits, labels)
    loss = lambda: softmax_cross_entropy(logits, labels)[0]  # noqa: E731
    return {"softmax_ce.logits": relative_error(g, numeric_grad(loss, logits))}


def tiny_spec(constrained: bool = True, classes: int = 3) -> ArchitectureSpec:
    return ArchitectureSpec(
        input_shape=(3, 12, 12),
        constrained=FirstLayerSpec(enabled=constrained, filters=2, kernel_size=3),
        blocks=[BlockSpec(3, 3, activation="tanh", pool_window=2, pool_stride=2), BlockSpec(2, 2, pool_window=0)],
        fc_sizes=(5,),
        num_classes=classes,
    )


def _pool_indices(cache):
    return [e[1].copy() for e in cache if e[0] == "pool"]


def check_network(rng, constrained: bool = True, samples: int = 12) -> dict:
    """Whole-chain check; FD entries whose perturbation flips a max-pool winner are skipped."""
    spec = tiny_spec(constrained)
    model = build_model(spec, int(rng.integers(1 << 30)), dtype="float64")
    x = rng.random((2, *spec.input_shape))
    y = rng.integers(0, spec.num_classes, size=2)
    logits, cache = model.forward(x, keep_cache=True)
    _, g, _ = softmax_cross_entropy(logits, y)
    grads = model.backward(cache, g)
    base = _pool_indices(cache)

    def loss():
        lg, c = model.forward(x, keep_cache=True)
        if any((a != b).any() for a, b in zip(_pool_indices(c), base)):
            raise _Kink
        return softmax_cross_entropy(lg, y)[0]

    out = {}
    prefix = "constrained_net" if constrained else "unconstrained_net"
    for name, p in model.params.items():
        entries = rng.choice(p.size, size=min(samples, p.size), replace=False)
        a, n = [], []
        flat = p.reshape(-1)
        for i in entries:
            old = flat[i]
            try:
                n.append(numeric_grad(loss, flat, h=CHAIN_STEP, entries=[i])[i])
            except _Kink:
                flat[i] = old
                continue
            a.append(grads[name].reshape(-1)[i])
        out[f"{prefix}.{name}"] = relative_error(a, n)
    return out


class _Kink(Exception):
    pass


def run_gradcheck(seed: int = 0, repeats: int = 3) -> dict:
    """Max relative error per checked gradient over ``repeats`` random instances."""
    rng = np.random.default_rng(seed)
    results = {}
    checks = (check_conv, check_constrained, check_maxpool, check_dense, check_activations, check_softmax_ce)
    for _ in range(repeats):
        for fn in checks:
            for k, v in fn(rng).items():
                results[k] = max(results.get(k, 0.0), v)
    for constrained in (True, False):
        for k, v in check_network(rng, constrained).items():
            results[k] = max(results.get(k, 0.0), v)
    return results
