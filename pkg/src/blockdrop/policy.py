"""Policy network and the K-dimensional Bernoulli distribution over block actions."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Architecture, GatedBackbone, forward_full
from .nn import Module
from .tensor import Tensor

EPS = float(np.finfo(np.float32).eps)


class PolicyNetwork(Module):
    """A small residual classifier whose ``K`` outputs are squashed by a sigmoid."""

    def __init__(self, arch: Architecture, rng: np.random.Generator, alpha: float = 0.8, dtype=np.float32):
        if not 0.5 < alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0.5, 1], got {alpha}")
        self.arch = arch
        self.alpha = alpha
        self.net = GatedBackbone(arch, rng, dtype)

    @property
    def K(self) -> int:
        return self.arch.outputs

    def __call__(self, x: Tensor) -> "PolicyOutput":
        return policy_forward(self, x)

    def flops(self) -> int:
        return self.net.flops_report().full


@dataclass
class PolicyOutput:
    s: Tensor  # keep probabilities, (B, K)
    s_bounded: Tensor  # alpha * s + (1 - alpha) * (1 - s)
    alpha: float

    @property
    def probs(self) -> np.ndarray:
        return self.s.data

    @property
    def bounded(self) -> np.ndarray:
        return self.s_bounded.data


def bound(s: Tensor, alpha: float) -> Tensor:
    """Map probabilities into ``[1 - alpha, alpha]``."""
    if alpha == 1.0:
        return s
    return s * alpha + (1.0 - s) * (1.0 - alpha)


def make_output(s: Tensor, alpha: float) -> PolicyOutput:
    return PolicyOutput(s, bound(s, alpha), alpha)


def policy_forward(pn: PolicyNetwork, x: Tensor) -> PolicyOutput:
    s = T.sigmoid(forward_full(pn.net, x))
    return make_output(s, pn.alpha)


def sample_action(po: PolicyOutput, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli draws: ``u_k = 1`` with probability ``s'_k``."""
    p = po.bounded
    return (rng.random(p.shape) < p).astype(np.int8)


def map_action(po: PolicyOutput) -> np.ndarray:
    """Most probable configuration under the unbounded ``s`` (ties drop the block)."""
    return (po.probs > 0.5).astype(np.int8)


def log_likelihood(po: PolicyOutput, u, free: slice | np.ndarray | None = None) -> Tensor:
    """Per-row ``sum_k log(s'_k u_k + (1 - s'_k)(1 - u_k))`` over the ``free`` positions.

    Returns a differentiable (B,) tensor. With ``alpha == 1`` the probabilities
    can saturate; they are clamped at float32 epsilon and a RuntimeWarning is
    issued when that happens.
    """
    sb = po.s_bounded
    u = np.asarray(u)
    if u.ndim == 1:
        u = np.broadcast_to(u, sb.shape)
    if u.shape != sb.shape:
        raise ValueError(f"action shape {u.shape} != policy shape {sb.shape}")
    dt = sb.dtype
    sign = (2 * u - 1).astype(dt)
    p = sb * sign + (1 - u).astype(dt)
    if p.data.min() < EPS:
        if po.alpha < 1.0:
            raise FloatingPointError("bounded probability underflowed despite alpha < 1")
        warnings.warn("saturated policy probabilities clamped at machine epsilon", RuntimeWarning)
        p = T.clamp_min(p, EPS)
    logp = T.log(p)
    if free is not None:
        cols = np.arange(sb.shape[1])[free]
        if len(cols) == 0:
            return Tensor(np.zeros(sb.shape[0], dtype=dt))
        if len(cols) != sb.shape[1]:
            logp = T.columns(logp, cols)
    return T.sum_axis(logp, 1)


def action_probability(s_bounded: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Plain-numpy ``pi(u)`` for rows of ``u`` (used by enumeration oracles)."""
    return np.prod(np.where(u == 1, s_bounded, 1.0 - s_bounded), axis=-1)


def all_actions(K: int) -> np.ndarray:
    """Every binary vector of length ``K`` as rows of a (2**K, K) array."""
    if K > 20:
        raise ValueError("refusing to enumerate more than 2**20 actions")
    idx = np.arange(2**K)[:, None]
    return ((idx >> np.arange(K)[::-1]) & 1).astype(np.int8)
