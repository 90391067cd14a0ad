"""Sequential gating: one keep/skip decision per block, made from the activations
that reach that block.

Each gate pools the incoming activation globally and maps it to a two-way
softmax over (skip, keep). Unlike the single-step policy, the gate runs even
when it decides to skip, and the decisions cannot be made ahead of the blocks.
"""

from __future__ import annotations

import logging

import numpy as np

from . import tensor as T
from .backbone import GatedBackbone, TrainingError, apply_block
from .data import Dataset
from .flops import flops_linear, flops_pool
from .nn import Linear, Module
from .optim import Adam
from .tensor import Tensor, no_grad
from .trainer import RewardConfig, StepRecord, advantage, compute_reward

log = logging.getLogger(__name__)

SKIP, KEEP = 0, 1


class GateHead(Module):
    def __init__(self, channels: int, index: int, rng, dtype=np.float32):
        self.fc = Linear(channels, 2, rng, dtype)
        self.fc.weight.data *= 0.1
        self.channels = channels
        self.index = index

    def __call__(self, pooled: Tensor) -> Tensor:
        return self.fc(pooled)


class SequentialGates(Module):
    def __init__(self, backbone: GatedBackbone, rng: np.random.Generator, keep_bias: float = 0.0):
        self.gates = [
            GateHead(shape[0], i, rng) for i, shape in enumerate(backbone.block_shapes())
        ]
        for g in self.gates:
            g.fc.bias.data[KEEP] = keep_bias
        self.name_parameters()

    def __len__(self) -> int:
        return len(self.gates)

    def __getitem__(self, i: int) -> GateHead:
        return self.gates[i]


def _pool(y: Tensor) -> Tensor:
    return T.global_avg_pool(y) if y.ndim == 4 else y


def skipping_score(gate: GateHead, y_prev: Tensor) -> Tensor:
    """(B, 2) softmax over (skip, keep) from the pooled incoming activation."""
    pooled = _pool(y_prev)
    if pooled.shape[1] != gate.channels:
        raise ValueError(f"gate {gate.index} expects {gate.channels} channels, got {pooled.shape[1]}")
    return T.softmax(gate(pooled))


def forward_sequential(
    backbone: GatedBackbone,
    gates: SequentialGates,
    x,
    rng: np.random.Generator | None = None,
    mode: str = "argmax",
):
    """Run the blocks in order, deciding each one from the current activation.

    Returns ``(logits, actions, gate_invocations, log_prob)``. The backbone
    runs without gradient tracking; ``log_prob`` (B,) is differentiable with
    respect to the gate parameters only. ``argmax`` keeps a block iff its keep
    probability exceeds 0.5.
    """
    if len(gates) != backbone.K:
        raise ValueError(f"{len(gates)} gates for {backbone.K} blocks")
    if mode not in ("argmax", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sampling needs an rng")
    xt = x if isinstance(x, Tensor) else Tensor(x)
    B = xt.shape[0]
    actions = np.zeros((B, backbone.K), dtype=np.int8)
    logps = []
    invocations = 0
    with no_grad():
        y = backbone.stem(xt)
    k = 0
    for s, seg in enumerate(backbone.segments):
        if s > 0:
            with no_grad():
                y = backbone.transitions[s - 1](y)
        for blk in seg:
            with no_grad():
                pooled = Tensor(_pool(y).data)
            ls = T.log_softmax(gates[k](pooled))
            invocations += 1
            if mode == "sample":
                keep = rng.random(B) < np.exp(ls.data[:, KEEP])
            else:
                keep = np.exp(ls.data[:, KEEP]) > 0.5
            onehot = np.stack([~keep, keep], axis=1).astype(ls.dtype)
            logps.append(T.sum_axis(ls * onehot, 1))
            actions[:, k] = keep
            with no_grad():
                y = apply_block(blk, y, keep)
            k += 1
    with no_grad():
        logits = backbone.head(y)
    log_prob = logps[0]
    for lp in logps[1:]:
        log_prob = log_prob + lp
    return logits, actions, invocations, log_prob


def gating_overhead_flops(backbone: GatedBackbone, gates: SequentialGates, counted_only: bool = False) -> int:
    """Per-input cost of all gate decisions.

    Every gate pools its input (one add per element) and applies a linear map
    to two scores. ``counted_only`` keeps just the linear part, matching the
    conv/linear-only FLOPs tally used for model costs.
    """
    total = 0
    for shape, gate in zip(backbone.block_shapes(), gates.gates):
        total += flops_linear(gate.channels, 2)
        if not counted_only and len(shape) == 3:
            total += flops_pool(*shape)
    return total


def policy_overhead_flops(policy) -> int:
    """Per-input cost of the single-step policy, pooling included (for comparison with gates)."""
    arch = policy.arch
    total = policy.flops()
    if arch.family == "conv":
        total += flops_pool(*policy.net.block_shapes()[-1])
    if arch.family == "mlp" and arch.stem_stride > 1:
        total += flops_pool(*arch.in_shape)
    return total


def sequential_loss(backbone, gates, x, y, cfg: RewardConfig, rng, baseline: bool = True):
    """Self-critical REINFORCE loss over the K per-block decisions."""
    logits, acts, _, logp = forward_sequential(backbone, gates, x, rng, mode="sample")
    ok = logits.data.argmax(axis=1) == y
    r = compute_reward(acts, ok, cfg)
    if baseline:
        with no_grad():
            logits_g, acts_g, _, _ = forward_sequential(backbone, gates, x, mode="argmax")
        r_g = compute_reward(acts_g, logits_g.data.argmax(axis=1) == y, cfg)
        a = advantage(r, r_g)
    else:
        a = r
    loss = -(logp * np.asarray(a, dtype=logp.dtype)).mean()
    return loss, acts, ok, r, a


def train_sequential(
    backbone: GatedBackbone,
    gates: SequentialGates,
    data: Dataset,
    cfg: RewardConfig,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> list[StepRecord]:
    """REINFORCE on the gates with the greedy rollout as baseline; backbone frozen, no curriculum."""
    history: list[StepRecord] = []
    if epochs <= 0:
        return history
    opt = Adam(gates.parameters(), lr=lr)
    for t in range(1, epochs + 1):
        rows = []
        for xb, yb, _ in data.batches(batch_size, rng):
            loss, acts, ok, r, a = sequential_loss(backbone, gates, xb, yb, cfg, rng)
            if not np.isfinite(loss.data):
                raise TrainingError(f"sequential loss diverged at epoch {t}")
            loss.backward()
            opt.step()
            rows.append((len(yb), r.mean(), acts.mean(), ok.mean(), a.mean(), a.std(), float(loss.data)))
        w = np.array([r[0] for r in rows], float)
        m = (w[:, None] * np.array([r[1:] for r in rows])).sum(0) / w.sum()
        history.append(StepRecord("seq", t, m[0], m[1], m[2], m[3], m[4], 0, m[5]))
        log.info("seq epoch %d reward %.3f usage %.3f acc %.3f", t, m[0], m[1], m[2])
    return history


def select_matched(
    seq_points: list[tuple[int, float, float]],
    single_points: list[tuple[int, float, float]],
    acc_tol: float = 0.005,
    blocks_tol: float = 0.5,
):
    """Pick a (seq, single-step) pair of checkpoints with matching accuracy and usage.

    Points are ``(epoch, accuracy, mean_blocks)`` from evaluated checkpoints.
    Among pairs within both tolerances the one with the smallest combined
    normalised gap wins, earliest epochs breaking ties. Returns ``None``
    when no pair qualifies.
    """
    best = None
    for se, sa, sb in seq_points:
        for pe, pa, pb in single_points:
            da, db = abs(sa - pa), abs(sb - pb)
            if da <= acc_tol and db <= blocks_tol:
                key = (da / acc_tol + db / blocks_tol, se, pe)
                if best is None or key < best[0]:
                    best = (key, (se, pe))
    return None if best is None else best[1]
