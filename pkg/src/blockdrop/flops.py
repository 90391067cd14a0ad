"""Floating-point operation counts.

One multiply-accumulate counts as two operations and only convolution and
linear layers are tallied. Bias adds, activations, pooling and the affine
rescalings are free under this convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def flops_linear(m: int, n: int, batch: int = 1) -> int:
    if m < 1 or n < 1:
        raise ValueError("linear extents must be positive")
    return 2 * m * n * batch


def flops_conv(c_in: int, c_out: int, kh: int, kw: int, h_out: int, w_out: int) -> int:
    if min(c_in, c_out, kh, kw, h_out, w_out) < 1:
        raise ValueError("conv extents must be positive")
    return 2 * c_in * c_out * kh * kw * h_out * w_out


def flops_pool(c: int, h: int, w: int) -> int:
    """Additions of a global average pool (one per input element).

    Not part of the model FLOPs tally; used only where pooling is an
    unavoidable per-decision overhead, as in sequential gating.
    """
    return c * h * w


@dataclass
class FlopsReport:
    """Static per-part tallies of a gated network plus optional policy cost."""

    stem: int
    blocks: list[int]
    transitions: list[int]
    head: int
    policy: int = 0
    layers: dict[str, int] = field(default_factory=dict)

    @property
    def fixed(self) -> int:
        return self.stem + sum(self.transitions) + self.head

    @property
    def full(self) -> int:
        return self.fixed + sum(self.blocks)

    def dynamic(self, u, with_policy: bool = False) -> np.ndarray | int:
        """FLOPs of executing the kept blocks of ``u`` (shape (K,) or (B, K))."""
        u = np.asarray(u)
        if u.shape[-1] != len(self.blocks):
            raise ValueError(f"action length {u.shape[-1]} != {len(self.blocks)} blocks")
        cost = np.asarray(self.blocks, dtype=np.int64)
        total = self.fixed + (u.astype(np.int64) * cost).sum(axis=-1)
        if with_policy:
            total = total + self.policy
        return int(total) if np.ndim(total) == 0 else total
