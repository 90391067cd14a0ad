"""Reward, self-critical policy gradient, curriculum schedule and joint finetuning."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .backbone import GatedBackbone, TrainingError, forward_gated
from .data import Dataset
from .optim import Adam
from .policy import (
    PolicyNetwork,
    PolicyOutput,
    action_probability,
    all_actions,
    log_likelihood,
    map_action,
    policy_forward,
    sample_action,
)
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RewardConfig:
    gamma: float = 5.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


@dataclass
class TrainingSchedule:
    curriculum_epochs: int = 200
    finetune_epochs: int = 100
    alpha: float = 0.8
    lr_curriculum: float = 1e-4
    lr_finetune: float = 1e-5
    batch_curriculum: int = 256
    batch_finetune: int = 256
    finetune_lambda: float = 1.0

    def __post_init__(self):
        for name in ("curriculum_epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("lr_curriculum", "lr_finetune", "batch_curriculum", "batch_finetune"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.5 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0.5, 1]")
        if self.finetune_lambda < 0:
            raise ValueError("finetune_lambda must be non-negative")


@dataclass
class StepRecord:
    phase: str
    epoch: int
    reward: float
    usage: float  # mean |u|_0 / K of the sampled actions
    accuracy: float  # accuracy of the sampled configurations
    adv_mean: float
    adv_std: float
    forced: int = 0  # length of the forced-on prefix
    loss: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def compute_reward(u, correct, cfg: RewardConfig):
    """``1 - (|u|_0 / K)^2`` when correct, ``-gamma`` otherwise (vectorised over rows)."""
    u = np.asarray(u)
    n = u.sum(axis=-1).astype(np.int64)
    K = u.shape[-1]
    # integer numerator and denominator: one rounding, so the result is the nearest double
    r = np.where(np.asarray(correct, dtype=bool), (K * K - n * n) / (K * K), -cfg.gamma)
    return float(r) if r.ndim == 0 else r


def advantage(r_sampled, r_baseline):
    return np.asarray(r_sampled) - np.asarray(r_baseline)


def curriculum_mask(t: int, K: int) -> int:
    """Number of leading blocks forced on during curriculum epoch ``t`` (1-based)."""
    if t < 1:
        raise ValueError("curriculum epochs start at 1")
    return K - t if t < K else 0


def _correct(backbone: GatedBackbone, x: np.ndarray, y: np.ndarray, u: np.ndarray) -> np.ndarray:
    with no_grad():
        return forward_gated(backbone, Tensor(x), u).data.argmax(axis=1) == y


@dataclass
class Rollout:
    po: PolicyOutput
    u: np.ndarray
    u_map: np.ndarray
    reward: np.ndarray
    reward_map: np.ndarray
    correct: np.ndarray
    forced: int

    @property
    def adv(self) -> np.ndarray:
        return advantage(self.reward, self.reward_map)


def rollout(
    pn: PolicyNetwork,
    backbone: GatedBackbone,
    x: np.ndarray,
    y: np.ndarray,
    cfg: RewardConfig,
    rng: np.random.Generator,
    forced: int = 0,
) -> Rollout:
    """Sample ``u``, take the greedy ``u~`` and score both on the frozen backbone."""
    po = policy_forward(pn, Tensor(x))
    u = sample_action(po, rng)
    u_map = map_action(po)
    if forced:
        u[:, :forced] = 1
        u_map[:, :forced] = 1
    ok = _correct(backbone, x, y, u)
    ok_map = _correct(backbone, x, y, u_map)
    return Rollout(po, u, u_map, compute_reward(u, ok, cfg), compute_reward(u_map, ok_map, cfg), ok, forced)


def policy_loss(ro: Rollout, baseline: bool = True) -> Tensor:
    """``-mean(A * log pi(u))`` over the batch, excluding forced positions."""
    K = ro.u.shape[1]
    weight = ro.adv if baseline else ro.reward
    ll = log_likelihood(ro.po, ro.u, slice(ro.forced, K))
    return -(ll * weight.astype(ll.dtype)).mean()


def policy_gradient_step(
    pn: PolicyNetwork,
    backbone: GatedBackbone,
    batch: tuple[np.ndarray, np.ndarray],
    cfg: RewardConfig,
    opt: Adam,
    rng: np.random.Generator,
    forced: int = 0,
    epoch: int = 0,
) -> StepRecord:
    """One self-critical REINFORCE update of the policy; the backbone is not touched."""
    x, y = batch
    ro = rollout(pn, backbone, x, y, cfg, rng, forced)
    loss = policy_loss(ro)
    if not np.isfinite(loss.data):
        raise TrainingError(
            f"policy loss is {float(loss.data)} at epoch {epoch}: "
            f"s range [{ro.po.probs.min():.3g}, {ro.po.probs.max():.3g}], "
            f"advantage range [{ro.adv.min():.3g}, {ro.adv.max():.3g}]"
        )
    loss.backward()
    opt.step()
    a = ro.adv
    return StepRecord(
        phase="curriculum",
        epoch=epoch,
        reward=float(ro.reward.mean()),
        usage=float(ro.u.mean()),
        accuracy=float(ro.correct.mean()),
        adv_mean=float(a.mean()),
        adv_std=float(a.std()),
        forced=forced,
        loss=float(loss.data),
    )


def _merge(records: list[StepRecord], sizes: list[int], phase: str, epoch: int, forced: int) -> StepRecord:
    w = np.asarray(sizes, dtype=float) / sum(sizes)

    def avg(key):
        return float(sum(wi * getattr(r, key) for wi, r in zip(w, records)))

    return StepRecord(
        phase=phase,
        epoch=epoch,
        reward=avg("reward"),
        usage=avg("usage"),
        accuracy=avg("accuracy"),
        adv_mean=avg("adv_mean"),
        adv_std=avg("adv_std"),
        forced=forced,
        loss=avg("loss"),
    )


def curriculum_train(
    pn: PolicyNetwork,
    backbone: GatedBackbone,
    data: Dataset,
    cfg: RewardConfig,
    schedule: TrainingSchedule,
    rng: np.random.Generator,
    on_epoch=None,
) -> list[StepRecord]:
    """Train the policy for ``curriculum_epochs`` with the backbone frozen.

    During epoch ``t < K`` the first ``K - t`` blocks are forced on and only
    the remaining ``t`` decisions enter the log-likelihood.
    """
    history: list[StepRecord] = []
    if schedule.curriculum_epochs == 0:
        return history
    opt = Adam(pn.parameters(), lr=schedule.lr_curriculum)
    K = backbone.K
    for t in range(1, schedule.curriculum_epochs + 1):
        forced = curriculum_mask(t, K)
        recs, sizes = [], []
        for xb, yb, _ in data.batches(schedule.batch_curriculum, rng):
            recs.append(policy_gradient_step(pn, backbone, (xb, yb), cfg, opt, rng, forced, t))
            sizes.append(len(yb))
        rec = _merge(recs, sizes, "curriculum", t, forced)
        history.append(rec)
        log.info(
            "curriculum epoch %d forced %d reward %.3f usage %.3f acc %.3f",
            t, forced, rec.reward, rec.usage, rec.accuracy,
        )
        if on_epoch is not None:
            on_epoch(rec)
    return history


def joint_finetune(
    pn: PolicyNetwork,
    backbone: GatedBackbone,
    data: Dataset,
    cfg: RewardConfig,
    schedule: TrainingSchedule,
    rng: np.random.Generator,
    on_epoch=None,
) -> list[StepRecord]:
    """Update backbone and policy together under sampled configurations.

    Loss per batch: cross-entropy of the gated backbone under the sampled
    ``u`` plus ``finetune_lambda`` times the self-critical policy loss.
    """
    history: list[StepRecord] = []
    if schedule.finetune_epochs == 0:
        return history
    lam = schedule.finetune_lambda
    opt_b = Adam(backbone.parameters(), lr=schedule.lr_finetune)
    opt_p = Adam(pn.parameters(), lr=schedule.lr_finetune) if lam > 0 else None
    for t in range(1, schedule.finetune_epochs + 1):
        recs, sizes = [], []
        for xb, yb, _ in data.batches(schedule.batch_finetune, rng):
            if lam > 0:
                po = policy_forward(pn, Tensor(xb))
            else:
                with no_grad():
                    po = policy_forward(pn, Tensor(xb))
            u = sample_action(po, rng)
            u_map = map_action(po)
            logits = forward_gated(backbone, Tensor(xb), u)
            ce = T.softmax_cross_entropy(logits, yb)
            ok = logits.data.argmax(axis=1) == yb
            ok_map = _correct(backbone, xb, yb, u_map)
            r = compute_reward(u, ok, cfg)
            a = advantage(r, compute_reward(u_map, ok_map, cfg))
            loss = ce
            if lam > 0:
                ll = log_likelihood(po, u)
                loss = ce + (-(ll * a.astype(ll.dtype)).mean()) * lam
            if not np.isfinite(loss.data):
                raise TrainingError(f"finetune loss is {float(loss.data)} at epoch {t}")
            loss.backward()
            opt_b.step()
            if opt_p is not None:
                opt_p.step()
            recs.append(
                StepRecord("finetune", t, float(r.mean()), float(u.mean()), float(ok.mean()),
                           float(a.mean()), float(a.std()), 0, float(loss.data))
            )
            sizes.append(len(yb))
        rec = _merge(recs, sizes, "finetune", t, 0)
        history.append(rec)
        log.info("finetune epoch %d reward %.3f usage %.3f acc %.3f", t, rec.reward, rec.usage, rec.accuracy)
        if on_epoch is not None:
            on_epoch(rec)
    return history


def brute_force_expected_reward(
    pn: PolicyNetwork,
    backbone: GatedBackbone,
    x: np.ndarray,
    label: int,
    cfg: RewardConfig,
    max_k: int = 12,
) -> float:
    """Exact ``E_{u ~ pi}[R(u)]`` for one input by enumerating all ``2**K`` actions."""
    K = backbone.K
    if K > max_k:
        raise ValueError(
            f"K={K} needs 2**{K} gated forwards; enumeration is limited to K <= {max_k}. "
            "Use the Monte-Carlo estimator for larger networks."
        )
    x = np.asarray(x)[None] if np.asarray(x).ndim == len(backbone.arch.in_shape) else np.asarray(x)
    with no_grad():
        sb = policy_forward(pn, Tensor(x)).bounded[0].astype(np.float64)
    acts = all_actions(K)
    ok = _correct(backbone, np.repeat(x, len(acts), axis=0), np.full(len(acts), label), acts)
    return float((action_probability(sb, acts) * compute_reward(acts, ok, cfg)).sum())
