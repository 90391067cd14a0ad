import numpy as np
import pytest

from blockdrop import tensor as T
from blockdrop.optim import Adam
from blockdrop.tensor import AutogradError, DimensionError, NonFiniteError, Parameter, Tensor

from gradcheck import OPS, TOL, check_gradients, make_case


@pytest.mark.parametrize("op", OPS)
def test_gradient_matches_finite_differences(op):
    for seed in range(4):
        rng = np.random.default_rng([seed, OPS.index(op)])
        fn, arrays = make_case(op, rng)
        assert check_gradients(fn, arrays, rng) < TOL


def test_matmul_example():
    a = Tensor([[1.0, 2.0]], requires_grad=True, dtype=np.float64)
    b = Tensor([[3.0], [4.0]], requires_grad=True, dtype=np.float64)
    out = T.matmul(a, b)
    assert out.data.item() == 11.0
    out.backward()
    np.testing.assert_array_equal(a.grad, [[3.0, 4.0]])
    np.testing.assert_array_equal(b.grad, [[1.0], [2.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_relu_gradient_at_zero_is_zero():
    x = Tensor([0.0, -1.0, 2.0], requires_grad=True)
    T.tsum(T.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_sigmoid_saturates_without_overflow():
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        s = T.sigmoid(Tensor([-1000.0, 0.0, 1000.0], dtype=np.float64)).data
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


def test_conv_output_extent():
    x = Tensor(np.zeros((1, 1, 16, 16)))
    w = Tensor(np.zeros((2, 1, 3, 3)))
    assert T.conv2d(x, w, stride=2, pad=1).shape == (1, 2, 8, 8)
    assert T.conv2d(x, w, stride=1, pad=1).shape == (1, 2, 16, 16)
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 1, 1, 1))), w, stride=1, pad=0)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    got = T.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), 2, 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros_like(got)
    for b in range(2):
        for o in range(4):
            for i in range(got.shape[2]):
                for j in range(got.shape[3]):
                    want[b, o, i, j] = (xp[b, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum()
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_second_backward_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(T.mul(x, x))
    loss.backward()
    with pytest.raises(AutogradError):
        loss.backward()


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(AutogradError):
        T.mul(x, 2.0).backward()


def test_shared_subexpression_accumulates():
    x = Tensor([3.0], requires_grad=True, dtype=np.float64)
    y = T.mul(x, x)
    T.tsum(T.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 3.0)
    assert not y.requires_grad


def test_debug_mode_flags_nonfinite():
    T.set_debug(True)
    try:
        with pytest.raises(NonFiniteError):
            T.log(Tensor([0.0]))
    finally:
        T.set_debug(False)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_adam_descends_quadratic():
    p = Parameter(np.array([5.0, -3.0]))
    opt = Adam([p], lr=0.1)
    for _ in range(300):
        T.tsum(T.mul(p, p)).backward()
        opt.step()
    assert np.abs(p.data).max() < 0.05


def test_adam_without_gradients_raises():
    p = Parameter(np.zeros(2))
    with pytest.raises(AutogradError):
        Adam([p]).step()
