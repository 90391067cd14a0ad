import numpy as np
import pytest

from blockdrop import tensor as T
from blockdrop.backbone import (
    Architecture,
    GatedBackbone,
    block_count,
    forward_full,
    forward_gated,
    train_backbone,
)
from blockdrop.data import generate_synthetic
from blockdrop.tensor import Tensor


def small(family="conv", segments=(2, 2), width=4, seed=0):
    shape = (1, 8, 8)
    return GatedBackbone(Architecture(family, shape, segments, width, 3), np.random.default_rng(seed))


@pytest.mark.parametrize("family", ["conv", "mlp"])
def test_all_ones_equals_full_forward(family):
    net = small(family)
    x = Tensor(np.random.default_rng(1).random((3, 1, 8, 8)).astype(np.float32))
    a = forward_gated(net, x, np.ones((3, net.K), dtype=np.int8)).data
    b = forward_full(net, x).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("family", ["conv", "mlp"])
def test_all_zeros_skips_every_block(family):
    net = small(family)
    x = np.random.default_rng(2).random((2, 1, 8, 8)).astype(np.float32)
    a = forward_gated(net, Tensor(x), np.zeros(net.K, dtype=np.int8)).data
    b = forward_full(net.with_identity(range(net.K)), Tensor(x)).data
    assert a.tobytes() == b.tobytes()


def test_dropped_block_gets_no_gradient():
    net = small("conv")
    x = Tensor(np.random.default_rng(3).random((2, 1, 8, 8)).astype(np.float32))
    u = np.array([1, 0, 1, 1], dtype=np.int8)
    T.softmax_cross_entropy(forward_gated(net, x, u), [0, 1]).backward()
    assert all(p.grad is None for p in net.blocks[1].parameters())
    assert all(p.grad is not None for p in net.blocks[0].parameters())


def test_per_sample_actions_match_single_sample_runs():
    net = small("conv")
    rng = np.random.default_rng(4)
    x = rng.random((4, 1, 8, 8)).astype(np.float32)
    u = rng.integers(0, 2, size=(4, net.K)).astype(np.int8)
    batched = forward_gated(net, Tensor(x), u).data
    for i in range(4):
        single = forward_gated(net, Tensor(x[i : i + 1]), u[i : i + 1]).data
        np.testing.assert_allclose(batched[i], single[0], rtol=1e-5, atol=1e-6)


def test_action_validation():
    net = small("mlp")
    x = Tensor(np.zeros((2, 1, 8, 8), dtype=np.float32))
    with pytest.raises(ValueError):
        forward_gated(net, x, np.ones((2, net.K + 1)))
    with pytest.raises(ValueError):
        forward_gated(net, x, np.full((2, net.K), 2))
    with pytest.raises(ValueError):
        forward_full(net, Tensor(np.zeros((2, 1, 9, 9), dtype=np.float32)))


def test_block_count_and_segments():
    net = small("conv", segments=(3, 0, 2))
    assert block_count(net) == net.K == 5
    assert net.segment_sizes == [3, 0, 2]
    shapes = net.block_shapes()
    assert shapes[0] == (4, 8, 8) and shapes[-1] == (16, 2, 2)


def test_empty_network_rejected():
    with pytest.raises(ValueError):
        small("conv", segments=(0, 0))


def test_mlp_stem_pooling():
    arch = Architecture("mlp", (1, 8, 8), (1,), 4, 2, stem_stride=2)
    net = GatedBackbone(arch, np.random.default_rng(0))
    assert net.stem.fc.weight.shape == (16, 4)
    assert forward_full(net, Tensor(np.zeros((2, 1, 8, 8), dtype=np.float32))).shape == (2, 2)


def test_training_reduces_loss():
    data = generate_synthetic(64, seed=0)
    net = GatedBackbone(Architecture("mlp", data.shape, (2,), 16, 4), np.random.default_rng(0))
    hist = train_backbone(net, data, epochs=8, lr=3e-3, batch_size=16, rng=np.random.default_rng(1))
    assert hist[-1]["loss"] < hist[0]["loss"]
    assert hist[-1]["train_acc"] > 0.5
