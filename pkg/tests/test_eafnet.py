import numpy as np
import pytest

from core import functional as F
from core.errors import CheckpointError, InputValidationError, ShapeMismatchError
from core.tensor import Tensor
from nn.eafnet import EacModule, STAGE_NAMES, adaptive_kernel_size, build_model, fuse_stage
from nn.layers import BatchNorm2d
from services.verification_service import check_gradients_eac, check_gradients_model
from tests.conftest import AOLP, DOLP, RGB, tiny_config


@pytest.mark.parametrize("channels, expected", [(16, 2), (32, 4), (64, 4), (128, 4), (256, 4), (512, 6)])
def test_kernel_size_table(channels, expected):
    assert adaptive_kernel_size(channels) == expected


def test_default_parity_is_even():
    assert all(adaptive_kernel_size(c) % 2 == 0 for c in range(2, 2048))


def test_odd_parity():
    assert adaptive_kernel_size(16, parity="odd") == 3
    assert adaptive_kernel_size(512, parity="odd") == 5
    assert all(adaptive_kernel_size(c, parity="odd") % 2 == 1 for c in range(1, 2048))


def test_kernel_size_needs_channels():
    with pytest.raises(InputValidationError):
        adaptive_kernel_size(0)
    assert adaptive_kernel_size(1, b=0.0) >= 1


def test_zero_kernel_gives_half_weights(rng):
    module = EacModule(8, rng, init="zeros")
    x = Tensor(rng.standard_normal((2, 8, 4, 4)))
    weights, out = module(x)
    assert np.all(weights.data == 0.5)
    np.testing.assert_allclose(out.data, 0.5 * x.data)


def test_eac_matches_direct_computation(rng):
    module = EacModule(16, rng)
    x = rng.standard_normal((1, 16, 3, 3))
    weights, out = module(Tensor(x))
    k = module.kernel.data
    pooled = np.pad(x.mean(axis=(2, 3))[0], ((len(k) - 1) // 2, len(k) // 2))
    expected = 1.0 / (1.0 + np.exp(-np.array([pooled[i:i + len(k)] @ k for i in range(16)])))
    np.testing.assert_allclose(weights.data[0], expected, rtol=1e-10)
    np.testing.assert_allclose(out.data, x * expected[None, :, None, None], rtol=1e-10)


def test_eac_weights_grow_with_channel_mean(rng):
    module = EacModule(8, rng)
    module.kernel.data = np.abs(module.kernel.data) + 0.1
    x = rng.standard_normal((1, 8, 2, 2))
    brighter = x.copy()
    brighter[0, 3] += 1.0
    low = module(Tensor(x))[0].data
    high = module(Tensor(brighter))[0].data
    assert np.all(high >= low)
    assert high[0, 3] > low[0, 3]


def test_eac_rejects_wrong_channels(rng):
    with pytest.raises(ShapeMismatchError):
        EacModule(8, rng)(Tensor(np.zeros((1, 4, 2, 2))))


def test_fuse_zero_features(rng):
    modules = [EacModule(4, rng), EacModule(4, rng)]
    zeros = [Tensor(np.zeros((1, 4, 2, 2))) for _ in modules]
    assert np.all(fuse_stage(zeros, modules).data == 0)


def test_fuse_saturated_attention_sums_features(rng):
    modules = [EacModule(4, rng), EacModule(4, rng)]
    for m in modules:
        m.kernel.data = np.full(m.kernel_size, 50.0)
    a = Tensor(np.full((1, 4, 2, 2), 2.0))
    b = Tensor(np.full((1, 4, 2, 2), 3.0))
    np.testing.assert_allclose(fuse_stage([a, b], modules).data, 5.0, rtol=1e-9)


def test_fuse_is_branch_order_free(rng):
    modules = [EacModule(4, rng), EacModule(4, rng)]
    a = Tensor(rng.standard_normal((2, 4, 3, 3)))
    b = Tensor(rng.standard_normal((2, 4, 3, 3)))
    m = Tensor(rng.standard_normal((2, 4, 3, 3)))
    forward = fuse_stage([a, b], modules, m)
    swapped = fuse_stage([b, a], modules[::-1], m)
    np.testing.assert_allclose(forward.data, swapped.data, rtol=1e-12)


def test_fuse_adds_previous_stage(rng):
    modules = [EacModule(4, rng, init="zeros")]
    y = Tensor(np.ones((1, 4, 2, 2)))
    m = Tensor(np.full((1, 4, 2, 2), 10.0))
    weights = []
    out = fuse_stage([y], modules, m, weights)
    np.testing.assert_allclose(out.data, 10.5)
    assert len(weights) == 1 and weights[0].shape == (1, 4)


def test_fuse_shape_mismatch(rng):
    modules = [EacModule(4, rng), EacModule(4, rng)]
    with pytest.raises(ShapeMismatchError):
        fuse_stage([Tensor(np.zeros((1, 4, 2, 2))), Tensor(np.zeros((1, 4, 4, 4)))], modules)
    with pytest.raises(ShapeMismatchError):
        fuse_stage([Tensor(np.zeros((1, 4, 2, 2)))], modules)


def test_eac_gradients():
    passed, detail = check_gradients_eac()
    assert passed, detail


@pytest.mark.parametrize("branches", [(RGB,), (RGB, AOLP), (RGB, AOLP, DOLP)])
def test_logit_shape(rng, branches):
    model = build_model(tiny_config(branches=branches)).eval()
    inputs = [rng.random((1, b.channels, 64, 32)).astype(np.float32) for b in branches]
    logits = model(inputs)
    assert logits.shape == (1, 3, 64, 32)
    assert logits.dtype == np.float32


def test_baseline_has_no_attention(rng):
    model = build_model(tiny_config(branches=(RGB,))).eval()
    model([rng.random((1, 3, 32, 32))], record_attention=True)
    assert model.eac is None
    assert model.last_attention == {}
    assert not any(name.startswith("eac.") for name, _ in model.named_parameters())


def test_fused_model_records_every_stage(rng):
    model = build_model(tiny_config()).eval()
    model([rng.random((2, 3, 32, 32)), rng.random((2, 1, 32, 32))], record_attention=True)
    assert set(model.last_attention) == {(s, b) for s in STAGE_NAMES for b in ("rgb", "aolp")}
    weights = np.concatenate([w.ravel() for w in model.last_attention.values()])
    assert np.all((weights > 0) & (weights < 1))


def test_input_checks(rng):
    model = build_model(tiny_config()).eval()
    with pytest.raises(InputValidationError):
        model([rng.random((1, 3, 48, 48)), rng.random((1, 1, 48, 48))])
    with pytest.raises(InputValidationError):
        model([rng.random((1, 3, 32, 32))])
    with pytest.raises(ShapeMismatchError):
        model([rng.random((1, 3, 32, 32)), rng.random((1, 2, 32, 32))])


def test_same_seed_same_weights():
    a = build_model(tiny_config(seed=4)).state_dict()
    b = build_model(tiny_config(seed=4)).state_dict()
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_every_parameter_gets_a_finite_gradient(rng):
    model = build_model(tiny_config(), dtype=np.float64).train()
    logits = model([rng.random((2, 3, 32, 32)), rng.random((2, 1, 32, 32))])
    F.softmax_cross_entropy(logits, rng.integers(0, 3, (2, 32, 32))).backward()
    for name, p in model.named_parameters():
        assert p.grad is not None, name
        assert np.all(np.isfinite(p.grad)), name


def test_batch_norm_batch_of_one_applies_affine_only(rng):
    bn = BatchNorm2d(2).train()
    bn.gamma.data[:] = [2.0, 0.5]
    bn.beta.data[:] = [1.0, -1.0]
    x = Tensor(rng.standard_normal((1, 2, 3, 3)))
    out = bn(x)
    expected = x.data * np.array([2.0, 0.5])[None, :, None, None] + np.array([1.0, -1.0])[None, :, None, None]
    np.testing.assert_allclose(out.data, expected)
    np.testing.assert_array_equal(bn.running_mean, [0.0, 0.0])
    np.testing.assert_array_equal(bn.running_var, [1.0, 1.0])


def test_model_trains_on_a_single_sample(rng):
    model = build_model(tiny_config(), dtype=np.float64).train()
    logits = model([rng.random((1, 3, 32, 32)), rng.random((1, 1, 32, 32))])
    F.softmax_cross_entropy(logits, rng.integers(0, 3, (1, 32, 32))).backward()
    assert all(np.all(np.isfinite(p.grad)) for p in model.parameters() if p.grad is not None)


def test_decay_names_cover_weights_only():
    model = build_model(tiny_config())
    names = set(model.decay_names())
    assert any(n.endswith("kernel") for n in names)
    assert not any(n.endswith(("gamma", "beta", "bias")) for n in names)


def test_load_state_dict_checks_names_and_shapes():
    model = build_model(tiny_config())
    state = model.state_dict()
    with pytest.raises(CheckpointError):
        build_model(tiny_config(num_classes=4)).load_state_dict(state)
    state.pop(next(iter(state)))
    with pytest.raises(CheckpointError):
        model.load_state_dict(state)


def test_end_to_end_gradients():
    passed, detail = check_gradients_model()
    assert passed, detail
