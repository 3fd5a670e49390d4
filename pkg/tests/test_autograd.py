import numpy as np
import pytest

from core import functional as F
from core.errors import InputValidationError, NumericalError, ShapeMismatchError
from core.gradcheck import grad_check
from core.tensor import Tensor, corrupt_backward, detect_anomaly, no_grad
from services.verification_service import GRADIENT_EXTENTS, OP_TOLERANCE, _op_cases


@pytest.mark.parametrize("extent", GRADIENT_EXTENTS)
@pytest.mark.parametrize("name", sorted(_op_cases(np.random.default_rng(5))))
def test_op_gradients(name, extent):
    fn, inputs = _op_cases(np.random.default_rng(5 + extent), extent)[name]
    assert grad_check(fn, inputs) < OP_TOLERANCE


def test_op_cases_grow_with_extent():
    small = _op_cases(np.random.default_rng(0), 0)
    large = _op_cases(np.random.default_rng(0), 2)
    for name in small:
        assert [a.shape for a in small[name][1]] != [a.shape for a in large[name][1]], name


def test_grad_check_on_linear_function():
    x = np.random.default_rng(3).standard_normal((3, 4))
    assert grad_check(lambda t: F.sum(F.mul(t, 3.0)), [x]) < 1e-9


def test_grad_check_on_sigmoid_composition():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
    assert grad_check(lambda s, t: F.sigmoid(F.add(F.mul(s, t), s)), [a, b]) < 1e-6


def test_corrupted_backward_is_detected():
    fn, inputs = _op_cases(np.random.default_rng(5))["conv2d"]
    with corrupt_backward("conv2d"):
        assert grad_check(fn, inputs) > 0.1


def test_diamond_graph_accumulates():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    y = F.mul(x, 2.0)
    z = F.add(F.mul(y, y), y)
    F.sum(z).backward()
    # d/dx (4x^2 + 2x) = 8x + 2
    np.testing.assert_allclose(x.grad, 8 * x.data + 2)


def test_shared_leaf_used_twice():
    x = Tensor(np.array(3.0), requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_gradients_accumulate_across_backward_calls():
    x = Tensor(np.ones(2), requires_grad=True)
    F.sum(x).backward()
    F.sum(x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert x.grad is None


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = F.sum(F.mul(x, x))
    assert not y.requires_grad
    assert y.is_leaf
    with pytest.raises(InputValidationError):
        y.backward()


def test_backward_needs_scalar_or_gradient():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = F.mul(x, 3.0)
    with pytest.raises(InputValidationError):
        y.backward()
    y.backward(np.ones((2, 2)))
    np.testing.assert_array_equal(x.grad, np.full((2, 2), 3.0))


def test_detect_anomaly_raises_on_nan():
    x = Tensor(np.array([1.0, np.nan]), requires_grad=True)
    with detect_anomaly():
        with pytest.raises(NumericalError):
            F.mul(x, 2.0)
    assert F.mul(x, 2.0).has_nonfinite()


def test_cross_entropy_every_pixel_ignored():
    logits = Tensor(np.random.default_rng(0).standard_normal((1, 3, 2, 2)), requires_grad=True)
    loss = F.softmax_cross_entropy(logits, np.full((1, 2, 2), 255), ignore_ids=[255])
    assert loss.item() == 0.0
    loss.backward()
    assert np.all(logits.grad == 0)


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((1, 4, 2, 2)))
    loss = F.softmax_cross_entropy(logits, np.zeros((1, 2, 2), dtype=np.int64))
    assert loss.item() == pytest.approx(np.log(4))


def test_cross_entropy_rejects_bad_labels():
    logits = Tensor(np.zeros((1, 3, 2, 2)))
    with pytest.raises(InputValidationError):
        F.softmax_cross_entropy(logits, np.full((1, 2, 2), 3))
    with pytest.raises(ShapeMismatchError):
        F.softmax_cross_entropy(logits, np.zeros((1, 3, 3), dtype=np.int64))


def test_batchnorm_eval_with_unit_stats_is_identity():
    x = Tensor(np.random.default_rng(1).standard_normal((1, 2, 3, 3)))
    out = F.batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), mode="eval", eps=0.0)
    np.testing.assert_allclose(out.data, x.data)


def test_batchnorm_train_updates_running_stats():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((4, 2, 3, 3)) * 2.0 + 1.0)
    running_mean, running_var = np.zeros(2), np.ones(2)
    out = F.batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), running_mean, running_var)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(running_mean, 0.1 * x.data.mean(axis=(0, 2, 3)))


def test_batchnorm_train_needs_two_samples():
    x = Tensor(np.ones((1, 2, 3, 3)))
    with pytest.raises(InputValidationError):
        F.batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2))


def test_max_pool_ties_route_to_first_element():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    F.sum(F.max_pool2d(x, 2)).backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_conv1d_channels_padding():
    v = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
    # even kernel: one zero on the left, two on the right
    out = F.conv1d_channels(v, Tensor(np.array([1.0, 0.0, 0.0, 0.0])))
    np.testing.assert_array_equal(out.data, [0.0, 1.0, 2.0, 3.0])
    out = F.conv1d_channels(v, Tensor(np.array([0.0, 1.0, 0.0])))
    np.testing.assert_array_equal(out.data, v.data)


def test_sigmoid_at_zero_is_half():
    assert F.sigmoid(Tensor(np.zeros(3))).data.tolist() == [0.5, 0.5, 0.5]
    assert np.all(np.isfinite(F.sigmoid(Tensor(np.array([-1e4, 1e4]))).data))


def test_shape_errors():
    with pytest.raises(ShapeMismatchError):
        F.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeMismatchError):
        F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 1, 3, 3))))
    with pytest.raises(ShapeMismatchError):
        F.max_pool2d(Tensor(np.ones((1, 1, 1, 1))))


def test_relu_propagates_nan():
    out = F.relu(Tensor(np.array([np.nan, 1.0, -2.0])))
    assert np.isnan(out.data[0])
    np.testing.assert_array_equal(out.data[1:], [1.0, 0.0])


def test_conv1d_channels_even_kernel_sums_right_neighbour():
    out = F.conv1d_channels(Tensor(np.array([1.0, 2.0, 3.0, 4.0])), Tensor(np.array([1.0, 1.0])))
    np.testing.assert_array_equal(out.data, [3.0, 5.0, 7.0, 4.0])


def test_global_avg_pool_of_ramp():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
    assert F.global_avg_pool(x).data.ravel().tolist() == [2.5]


def test_conv2d_with_identity_kernel():
    x = Tensor(np.random.default_rng(5).standard_normal((2, 3, 4, 5)))
    w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
    np.testing.assert_allclose(F.conv2d(x, w).data, x.data, atol=1e-12)


def test_bilinear_upsample_keeps_constant_plane():
    out = F.bilinear_upsample(Tensor(np.full((1, 2, 3, 4), 0.7)))
    assert out.shape == (1, 2, 6, 8)
    np.testing.assert_allclose(out.data, 0.7, atol=1e-12)


def test_batchnorm_beta_shifts_channel_means():
    x = Tensor(np.random.default_rng(6).standard_normal((4, 2, 3, 3)) * 3.0 - 2.0)
    beta = np.array([0.5, -1.5])
    out = F.batchnorm2d(x, Tensor(np.ones(2)), Tensor(beta), np.zeros(2), np.ones(2))
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), beta, atol=1e-12)


def test_batchnorm_affine_mode_skips_normalization():
    x = Tensor(np.random.default_rng(7).standard_normal((1, 2, 3, 3)))
    running_mean, running_var = np.zeros(2), np.ones(2)
    out = F.batchnorm2d(x, Tensor(np.array([2.0, 0.5])), Tensor(np.array([1.0, -1.0])),
                        running_mean, running_var, mode="affine")
    np.testing.assert_allclose(out.data[0, 0], 2.0 * x.data[0, 0] + 1.0)
    np.testing.assert_allclose(out.data[0, 1], 0.5 * x.data[0, 1] - 1.0)
    np.testing.assert_array_equal(running_mean, [0.0, 0.0])
    np.testing.assert_array_equal(running_var, [1.0, 1.0])


def test_batchnorm_rejects_unknown_mode():
    with pytest.raises(InputValidationError):
        F.batchnorm2d(Tensor(np.ones((2, 2, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                      np.zeros(2), np.ones(2), mode="instance")
