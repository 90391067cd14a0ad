"""Heuristic dropping baselines and the accuracy / block-usage / FLOPs harness."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .backbone import GatedBackbone, forward_gated
from .data import Dataset
from .policy import PolicyNetwork, map_action, policy_forward, sample_action
from .tensor import Tensor, no_grad

STRATEGIES = ("full", "policy", "firstk", "randomk", "distributek", "seq")
HEURISTICS = ("firstk", "randomk", "distributek")


def distribute_quotas(segments: Sequence[int], k_keep: int) -> list[int]:
    """Split ``k_keep`` blocks over segments as evenly as capacity allows.

    Largest-remainder apportionment of equal shares; ties go to earlier
    segments, and any share a full segment cannot take moves on to the next
    segment with room.
    """
    segments = list(segments)
    total = sum(segments)
    if not 0 <= k_keep <= total:
        raise ValueError(f"k_keep={k_keep} outside [0, {total}]")
    n = len(segments)
    quotas = [0] * n
    left = k_keep
    open_ = [i for i in range(n) if segments[i] > 0]
    while left > 0:
        share, rem = divmod(left, len(open_))
        for rank, i in enumerate(open_):
            quotas[i] += share + (1 if rank < rem else 0)
        left = 0
        for i in open_:
            if quotas[i] > segments[i]:
                left += quotas[i] - segments[i]
                quotas[i] = segments[i]
        open_ = [i for i in open_ if quotas[i] < segments[i]]
    return quotas


def heuristic_mask(
    kind: str,
    K_total: int,
    K_keep: int,
    rng: np.random.Generator | None = None,
    segments: Sequence[int] | None = None,
) -> np.ndarray:
    """Static keep-mask of length ``K_total`` with exactly ``K_keep`` ones."""
    if not 0 <= K_keep <= K_total:
        raise ValueError(f"K_keep={K_keep} outside [0, {K_total}]")
    u = np.zeros(K_total, dtype=np.int8)
    kind = kind.lower()
    if kind == "firstk":
        u[:K_keep] = 1
    elif kind == "randomk":
        if rng is None:
            raise ValueError("RandomK needs an rng")
        u[rng.choice(K_total, size=K_keep, replace=False)] = 1
    elif kind == "distributek":
        segments = list(segments) if segments is not None else [K_total]
        if sum(segments) != K_total:
            raise ValueError("segment sizes must sum to K_total")
        start = 0
        for size, q in zip(segments, distribute_quotas(segments, K_keep)):
            u[start : start + q] = 1
            start += size
    else:
        raise ValueError(f"unknown heuristic {kind!r}")
    return u


@dataclass
class EvalSummary:
    strategy: str
    accuracy: float
    blocks_mean: float
    blocks_std: float
    flops_mean: float
    flops_std: float
    histogram: list[int]  # histogram[k] = number of inputs that ran k blocks
    n: int
    k_keep: int | None = None
    inference: str = "map"  # how policy actions are chosen at test time
    correct: np.ndarray = field(default=None, repr=False)
    actions: np.ndarray = field(default=None, repr=False)
    flops: np.ndarray = field(default=None, repr=False)

    @property
    def usage(self) -> np.ndarray:
        return self.actions.sum(axis=1)

    def row(self) -> dict:
        return {
            "strategy": self.strategy,
            "accuracy": self.accuracy,
            "blocks_mean": self.blocks_mean,
            "blocks_std": self.blocks_std,
            "flops_mean": self.flops_mean,
            "flops_std": self.flops_std,
        }


def summarize(strategy: str, correct, actions, flops, k_keep=None, inference="map") -> EvalSummary:
    actions = np.asarray(actions)
    correct = np.asarray(correct, dtype=bool)
    flops = np.asarray(flops, dtype=np.int64)
    used = actions.sum(axis=1)
    K = actions.shape[1]
    return EvalSummary(
        strategy=strategy,
        accuracy=float(correct.mean()) if len(correct) else float("nan"),
        blocks_mean=float(used.mean()),
        blocks_std=float(used.std()),
        flops_mean=float(flops.mean()),
        flops_std=float(flops.std()),
        histogram=np.bincount(used, minlength=K + 1).tolist(),
        n=len(correct),
        k_keep=k_keep,
        inference=inference,
        correct=correct,
        actions=actions,
        flops=flops,
    )


def _shard_eval(backbone, strategy, x, y, actions, policy, sample, rng, gates):
    """Returns (correct, actions) for one shard."""
    with no_grad():
        xt = Tensor(x)
        if strategy == "policy":
            po = policy_forward(policy, xt)
            actions = sample_action(po, rng) if sample else map_action(po)
        elif strategy == "seq":
            from .sequential import forward_sequential

            logits, actions, _, _ = forward_sequential(
                backbone, gates, x, rng=rng, mode="sample" if sample else "argmax"
            )
            return logits.data.argmax(axis=1) == y, actions
        logits = forward_gated(backbone, xt, actions)
    return logits.data.argmax(axis=1) == y, actions


def evaluate(
    backbone: GatedBackbone,
    strategy: str,
    data: Dataset,
    policy: PolicyNetwork | None = None,
    k_keep: int | None = None,
    match: EvalSummary | None = None,
    rng: np.random.Generator | None = None,
    sample: bool = False,
    gates=None,
    batch_size: int = 256,
    workers: int = 1,
) -> EvalSummary:
    """Run every input of ``data`` under ``strategy`` and tally the results.

    Heuristics take ``k_keep`` directly or, via ``match``, the ceiling of the
    mean block usage of another summary. Policy FLOPs (or sequential gate
    FLOPs) are added to the dynamic FLOPs of the strategies that incur them.
    """
    strategy = strategy.lower()
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    K = backbone.K
    report = backbone.flops_report()
    n = len(data)
    rng = rng if rng is not None else np.random.default_rng(0)
    overhead = 0
    actions = None
    if strategy == "full":
        actions = np.ones((n, K), dtype=np.int8)
    elif strategy in HEURISTICS:
        if match is not None:
            k_keep = matched_k(match)
        if k_keep is None:
            raise ValueError(f"{strategy} needs k_keep or a summary to match")
        if strategy == "randomk":
            actions = np.stack([heuristic_mask("randomk", K, k_keep, rng) for _ in range(n)])
        else:
            u = heuristic_mask(strategy, K, k_keep, segments=backbone.segment_sizes)
            actions = np.tile(u, (n, 1))
    elif strategy == "policy":
        if policy is None:
            raise ValueError("policy strategy needs a policy network")
        if policy.K != K:
            raise ValueError(f"policy controls {policy.K} blocks, backbone has {K}")
        overhead = policy.flops()
    else:
        if gates is None:
            raise ValueError("seq strategy needs gate heads")
        from .sequential import gating_overhead_flops

        overhead = gating_overhead_flops(backbone, gates, counted_only=True)

    starts = list(range(0, n, batch_size))
    # one child stream per shard keeps results independent of the worker count
    seeds = rng.integers(0, 2**63 - 1, size=len(starts))

    def job(i):
        s = starts[i]
        a = None if actions is None else actions[s : s + batch_size]
        return _shard_eval(
            backbone, strategy, data.images[s : s + batch_size], data.labels[s : s + batch_size],
            a, policy, sample, np.random.default_rng(seeds[i]), gates,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, range(len(starts))))
    else:
        parts = [job(i) for i in range(len(starts))]
    correct = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, bool)
    acts = np.concatenate([p[1] for p in parts]) if parts else np.zeros((0, K), np.int8)
    flops = report.dynamic(acts) + overhead
    inference = ("sample" if sample else "map") if strategy in ("policy", "seq") else "static"
    return summarize(strategy, correct, acts, flops, k_keep, inference)


def matched_k(summary: EvalSummary) -> int:
    """Heuristic budget matched to a learned strategy: ceil of its mean usage."""
    return int(math.ceil(summary.blocks_mean - 1e-9))


@dataclass
class OperatingPoint:
    gamma: float
    summary: EvalSummary


class SweepError(RuntimeError):
    def __init__(self, msg: str, partial: list[OperatingPoint]):
        super().__init__(msg)
        self.partial = partial


def sweep_gamma(
    gammas: Sequence[float],
    run: Callable[[float], EvalSummary],
    on_point: Callable[[OperatingPoint], None] | None = None,
) -> list[OperatingPoint]:
    """Train and evaluate one model per ``gamma`` via ``run``; sorted by mean FLOPs.

    ``on_point`` sees each point as soon as it exists, so a failing run
    leaves the earlier points recorded; the failure surfaces as
    :class:`SweepError` carrying them.
    """
    if len(gammas) < 2:
        raise ValueError("a sweep needs at least two gamma values")
    points: list[OperatingPoint] = []
    for g in gammas:
        try:
            point = OperatingPoint(float(g), run(float(g)))
        except Exception as exc:
            raise SweepError(f"run at gamma={g} failed: {exc}", points) from exc
        points.append(point)
        if on_point is not None:
            on_point(point)
    return sorted(points, key=lambda p: p.summary.flops_mean)


def count_inversions(values: Sequence[float]) -> int:
    """Adjacent decreases in a sequence that should be non-decreasing."""
    return sum(1 for a, b in zip(values, values[1:]) if b < a)
