"""Central finite-difference oracle for the autodiff primitives (float64)."""

from __future__ import annotations

import numpy as np

from blockdrop import tensor as T
from blockdrop.tensor import Tensor

STEP = 1e-3
TOL = 1e-4


def _away_from(x: np.ndarray, points, margin: float) -> np.ndarray:
    """Push entries out of ``margin`` around kinks so finite differences stay on one side."""
    x = x.copy()
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + np.where(x[near] >= p, margin, -margin) * 2
    return x


def make_case(op: str, rng: np.random.Generator):
    """Return ``(fn, inputs)``; ``fn`` maps Tensors to a Tensor."""
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    B = int(rng.integers(1, 4))
    n = int(rng.integers(2, 5))
    m = int(rng.integers(2, 5))
    if op == "add":
        return T.add, [r(B, n), r(1, n)]
    if op == "mul":
        return T.mul, [r(B, n), r(n)]
    if op == "sub":
        return (lambda a, b: a - b), [r(B, n), r(B, n)]
    if op == "neg":
        return T.neg, [r(B, n)]
    if op == "log":
        return T.log, [rng.uniform(0.5, 2.0, (B, n))]
    if op == "exp":
        return T.exp, [r(B, n)]
    if op == "clamp_min":
        return (lambda a: T.clamp_min(a, 0.1)), [_away_from(r(B, n), [0.1], 0.01)]
    if op == "relu":
        return T.relu, [_away_from(r(B, n, m), [0.0], 0.01)]
    if op == "sigmoid":
        return T.sigmoid, [3 * r(B, n)]
    if op == "sum":
        return T.tsum, [r(B, n)]
    if op == "mean":
        return T.tmean, [r(B, n, m)]
    if op == "sum_axis":
        ax = int(rng.integers(0, 3))
        return (lambda a: T.sum_axis(a, ax)), [r(B, n, m)]
    if op == "reshape":
        return (lambda a: T.reshape(a, (B * n, m))), [r(B, n, m)]
    if op == "take_rows":
        idx = rng.integers(0, B + 1, size=4)
        return (lambda a: T.take_rows(a, idx)), [r(B + 1, n)]
    if op == "index_add":
        idx = rng.permutation(B + 2)[:B]
        return (lambda a, v: T.index_add(a, idx, v)), [r(B + 2, n), r(B, n)]
    if op == "columns":
        cols = rng.permutation(n)[: max(1, n - 1)]
        return (lambda a: T.columns(a, cols)), [r(B, n)]
    if op == "matmul":
        return T.matmul, [r(B, n), r(n, m)]
    if op == "linear":
        return T.linear, [r(B, n), r(n, m), r(m)]
    if op == "linear_nobias":
        return T.linear, [r(B, n), r(n, m)]
    if op == "conv2d":
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        k = 3 if pad else int(rng.choice([1, 3]))
        H, W = int(rng.integers(3, 7)), int(rng.integers(3, 7))
        c, o = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        return (lambda x, w: T.conv2d(x, w, stride, pad)), [r(B, c, H, W), r(o, c, k, k)]
    if op == "channel_affine":
        if rng.random() < 0.5:
            return T.channel_affine, [r(B, n, 3, 2), r(n), r(n)]
        return T.channel_affine, [r(B, n), r(n), r(n)]
    if op == "global_avg_pool":
        return T.global_avg_pool, [r(B, n, 3, 4)]
    if op == "avg_pool":
        return (lambda x: T.avg_pool(x, 2)), [r(B, n, 4, 6)]
    if op == "flatten":
        return T.flatten, [r(B, n, 2, 3)]
    if op == "softmax":
        return T.softmax, [r(B, n)]
    if op == "log_softmax":
        return T.log_softmax, [r(B, n)]
    if op == "cross_entropy":
        labels = rng.integers(0, n, size=B)
        return (lambda z: T.softmax_cross_entropy(z, labels)), [r(B, n)]
    raise KeyError(op)


OPS = [
    "add", "mul", "sub", "neg", "log", "exp", "clamp_min", "relu", "sigmoid", "sum", "mean",
    "sum_axis", "reshape", "take_rows", "index_add", "columns", "matmul", "linear", "linear_nobias",
    "conv2d", "channel_affine", "global_avg_pool", "avg_pool", "flatten", "softmax", "log_softmax",
    "cross_entropy",
]


def check_gradients(fn, arrays, rng: np.random.Generator, step: float = STEP) -> float:
    """Max over inputs of ``|analytic - numeric|_inf / max(|analytic|_inf, |numeric|_inf)``.

    The scalar probed is ``sum(fn(inputs) * R)`` for a fixed random ``R`` so
    every output element contributes.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    out = fn(*ts)
    R = rng.standard_normal(out.shape)
    T.tsum(T.mul(out, Tensor(R, dtype=np.float64))).backward()

    def f(vals):
        with T.no_grad():
            o = fn(*[Tensor(v, dtype=np.float64) for v in vals])
        return float((o.data * R).sum())

    worst = 0.0
    for i, a in enumerate(arrays):
        num = np.zeros_like(a)
        for j in np.ndindex(a.shape):
            plus = [v.copy() for v in arrays]
            minus = [v.copy() for v in arrays]
            plus[i][j] += step
            minus[i][j] -= step
            num[j] = (f(plus) - f(minus)) / (2 * step)
        ana = ts[i].grad if ts[i].grad is not None else np.zeros_like(a)
        scale = max(np.abs(ana).max(), np.abs(num).max(), 1e-12)
        worst = max(worst, float(np.abs(ana - num).max() / scale))
    return worst
