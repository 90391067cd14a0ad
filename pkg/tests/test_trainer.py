import numpy as np
import pytest

from blockdrop.backbone import Architecture, GatedBackbone
from blockdrop.data import generate_synthetic
from blockdrop.optim import Adam
from blockdrop.policy import PolicyNetwork, action_probability, all_actions
from blockdrop.trainer import (
    RewardConfig,
    TrainingSchedule,
    brute_force_expected_reward,
    compute_reward,
    curriculum_mask,
    curriculum_train,
    joint_finetune,
    policy_gradient_step,
    policy_loss,
    rollout,
)
from blockdrop.tensor import no_grad, Tensor
from blockdrop.backbone import forward_gated


def tiny(K=3, seed=0):
    data = generate_synthetic(32, seed=seed)
    net = GatedBackbone(Architecture("mlp", data.shape, (K,), 8, 4), np.random.default_rng(seed))
    pn = PolicyNetwork(Architecture("mlp", data.shape, (1,), 8, K, stem_stride=2), np.random.default_rng(seed + 1))
    return data, net, pn


def test_reward_examples():
    cfg = RewardConfig(gamma=5.0)
    u = np.array([[1, 0, 0, 0], [1, 1, 1, 1], [0, 0, 0, 0]])
    r = compute_reward(u, [True, True, False], cfg)
    np.testing.assert_allclose(r, [1 - 0.25**2, 0.0, -5.0])
    assert compute_reward(np.zeros(4), True, cfg) == 1.0


def test_reward_rejects_nonpositive_gamma():
    with pytest.raises(ValueError):
        RewardConfig(gamma=0.0)


def test_curriculum_mask_schedule():
    K = 15
    assert [curriculum_mask(t, K) for t in (1, 2, 14, 15, 16, 200)] == [14, 13, 1, 0, 0, 0]
    with pytest.raises(ValueError):
        curriculum_mask(0, K)


def test_schedule_validation():
    with pytest.raises(ValueError):
        TrainingSchedule(alpha=0.4)
    with pytest.raises(ValueError):
        TrainingSchedule(lr_curriculum=0)


def test_rollout_forces_prefix_on_both_actions():
    data, net, pn = tiny(K=3)
    ro = rollout(pn, net, data.images[:8], data.labels[:8], RewardConfig(), np.random.default_rng(0), forced=2)
    assert ro.u[:, :2].all() and ro.u_map[:, :2].all()


def test_forced_positions_carry_no_gradient():
    data, net, pn = tiny(K=3)
    ro = rollout(pn, net, data.images[:8], data.labels[:8], RewardConfig(), np.random.default_rng(0), forced=3)
    loss = policy_loss(ro)
    assert loss.data == 0.0


def test_policy_step_leaves_backbone_untouched():
    data, net, pn = tiny(K=3)
    before = net.state_dict()
    opt = Adam(pn.parameters(), lr=1e-2)
    rec = policy_gradient_step(pn, net, (data.images, data.labels), RewardConfig(), opt, np.random.default_rng(0))
    after = net.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert 0.0 <= rec.usage <= 1.0


def test_brute_force_expectation_matches_manual_sum():
    data, net, pn = tiny(K=3)
    cfg = RewardConfig(gamma=2.0)
    x, label = data.images[0], int(data.labels[0])
    got = brute_force_expected_reward(pn, net, x, label, cfg)
    with no_grad():
        sb = pn(Tensor(x[None])).bounded[0].astype(np.float64)
    total = 0.0
    for u in all_actions(3):
        ok = forward_gated(net, Tensor(x[None]), u[None]).data.argmax() == label
        total += action_probability(sb, u[None])[0] * compute_reward(u[None], [ok], cfg)[0]
    assert got == pytest.approx(total, abs=1e-12)


def test_brute_force_refuses_large_K():
    data, net, pn = tiny(K=3)
    with pytest.raises(ValueError, match="Monte-Carlo"):
        brute_force_expected_reward(pn, net, data.images[0], 0, RewardConfig(), max_k=2)


def test_curriculum_logs_forced_prefix_per_epoch():
    data, net, pn = tiny(K=3)
    sched = TrainingSchedule(curriculum_epochs=4, lr_curriculum=1e-3, batch_curriculum=16)
    hist = curriculum_train(pn, net, data, RewardConfig(), sched, np.random.default_rng(0))
    assert [h.forced for h in hist] == [2, 1, 0, 0]
    assert [h.epoch for h in hist] == [1, 2, 3, 4]


def test_finetune_with_zero_lambda_freezes_policy():
    data, net, pn = tiny(K=3)
    before = pn.state_dict()
    sched = TrainingSchedule(finetune_epochs=1, lr_finetune=1e-3, batch_finetune=16, finetune_lambda=0.0)
    joint_finetune(pn, net, data, RewardConfig(), sched, np.random.default_rng(0))
    after = pn.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_finetune_updates_both_networks():
    data, net, pn = tiny(K=3)
    b0, p0 = net.state_dict(), pn.state_dict()
    sched = TrainingSchedule(finetune_epochs=1, lr_finetune=1e-3, batch_finetune=16)
    hist = joint_finetune(pn, net, data, RewardConfig(), sched, np.random.default_rng(0))
    assert len(hist) == 1
    assert any(not np.array_equal(b0[k], v) for k, v in net.state_dict().items())
    assert any(not np.array_equal(p0[k], v) for k, v in pn.state_dict().items())
