import numpy as np
import pytest

from api.models import AugmentationConfig, ChannelKind, ModalityMode, PlaneKind, Sample
from core import functional as F
from core.errors import DatasetLoadError, InputValidationError
from core.tensor import Tensor
from services.dataset_service import (
    augment,
    branch_inputs,
    derive_seed,
    hflip,
    histogram,
    list_sample_ids,
    load_sample,
)
from utils.resample import resize_bilinear_hw
from tests.conftest import AOLP, RGB, write_sample


def make_sample(rng, size=16, aolp=None):
    aolp = rng.random((size, size)) if aolp is None else aolp
    return Sample(id="s", rgb=rng.random((size, size, 3)), modality=np.stack([aolp, rng.random((size, size))]),
                  kinds=[PlaneKind.AOLP, PlaneKind.DOLP], label=rng.integers(0, 9, (size, size)))


def test_unpolarized_sample(constant_dataset):
    sample = load_sample(constant_dataset, "val", "a", ModalityMode.AOLP_DOLP)
    np.testing.assert_allclose(sample.rgb, 128 / 255)
    assert np.all(sample.plane(PlaneKind.DOLP) == 0)
    assert np.all(sample.plane(PlaneKind.AOLP) == 0)


def test_aolp_dolp_stack_order(constant_dataset):
    sample = load_sample(constant_dataset, "val", "a", ModalityMode.AOLP_DOLP)
    assert sample.modality.shape == (2, 32, 32)
    assert sample.kinds == [PlaneKind.AOLP, PlaneKind.DOLP]


def test_polarized_quad_derivation(tmp_path):
    # fully polarized at 0 degrees: I0 = S0, I90 = 0, I45 = I135 = S0 / 2
    s0 = 0.8
    planes = {"i0": np.full((32, 32), s0), "i45": np.full((32, 32), s0 / 2),
              "i90": np.zeros((32, 32)), "i135": np.full((32, 32), s0 / 2)}
    write_sample(tmp_path, "train", "p", planes, np.zeros((32, 32), dtype=np.uint8))
    sample = load_sample(tmp_path, "train", "p", ModalityMode.AOLP_DOLP)
    assert sample.plane(PlaneKind.DOLP).min() > 0.98
    assert sample.rgb.shape == (32, 32, 3)


def test_explicit_rgb_wins(tmp_path):
    planes = {n: np.full((32, 32), 0.5) for n in ("i0", "i45", "i90", "i135")}
    planes["rgb"] = np.full((32, 32, 3), 0.2)
    write_sample(tmp_path, "val", "r", planes, np.zeros((32, 32), dtype=np.uint8))
    sample = load_sample(tmp_path, "val", "r", ModalityMode.DOLP)
    np.testing.assert_allclose(sample.rgb, 51 / 255)


def test_label_out_of_range(tmp_path):
    planes = {n: np.full((32, 32), 0.5) for n in ("i0", "i45", "i90", "i135")}
    label = np.zeros((32, 32), dtype=np.uint8)
    label[0, 0] = 9
    write_sample(tmp_path, "val", "x", planes, label)
    with pytest.raises(DatasetLoadError) as err:
        load_sample(tmp_path, "val", "x", ModalityMode.AOLP, num_classes=9)
    assert err.value.details["path"].endswith("label.png")


def test_missing_file_is_named(tmp_path):
    planes = {n: np.full((32, 32), 0.5) for n in ("i0", "i45", "i90", "i135")}
    write_sample(tmp_path, "val", "m", planes, np.zeros((32, 32), dtype=np.uint8), skip="i135")
    with pytest.raises(DatasetLoadError) as err:
        load_sample(tmp_path, "val", "m", ModalityMode.AOLP)
    assert "i135.png" in err.value.message


def test_dimension_mismatch(tmp_path):
    planes = {n: np.full((32, 32), 0.5) for n in ("i0", "i45", "i90")}
    planes["i135"] = np.full((16, 32), 0.5)
    write_sample(tmp_path, "val", "d", planes, np.zeros((32, 32), dtype=np.uint8))
    with pytest.raises(DatasetLoadError) as err:
        load_sample(tmp_path, "val", "d", ModalityMode.AOLP)
    assert "i135.png" in err.value.details["path"]


def test_list_ids(constant_dataset):
    assert list_sample_ids(constant_dataset, "val") == ["a", "b"]
    with pytest.raises(DatasetLoadError):
        list_sample_ids(constant_dataset, "train")


def test_identity_augmentation(rng):
    sample = make_sample(rng)
    cfg = AugmentationConfig(scale_min=1.0, scale_max=1.0, crop=16, hflip_prob=0.0)
    out = augment(sample, cfg, rng)
    assert out.rgb.tobytes() == sample.rgb.tobytes()
    assert out.modality.tobytes() == sample.modality.tobytes()
    assert np.array_equal(out.label, sample.label)


def test_flip_remaps_constant_aolp(rng):
    sample = make_sample(rng, aolp=np.full((16, 16), 30 / 180))
    cfg = AugmentationConfig(scale_min=1.0, scale_max=1.0, crop=16, hflip_prob=1.0)
    out = augment(sample, cfg, rng)
    np.testing.assert_allclose(out.plane(PlaneKind.AOLP), 150 / 180, atol=1e-12)


def test_flip_leaves_dolp_values(rng):
    sample = make_sample(rng)
    flipped = hflip(sample)
    np.testing.assert_array_equal(flipped.plane(PlaneKind.DOLP), sample.plane(PlaneKind.DOLP)[:, ::-1])


def test_double_flip_restores_aolp(rng):
    sample = make_sample(rng)
    twice = hflip(hflip(sample))
    assert np.max(np.abs(twice.plane(PlaneKind.AOLP) - sample.plane(PlaneKind.AOLP))) < 1e-6
    np.testing.assert_array_equal(twice.label, sample.label)


def test_augmentation_is_deterministic(rng):
    sample = make_sample(rng, size=40)
    cfg = AugmentationConfig(crop=32, seed=5)
    a = augment(sample, cfg, derive_seed(5, 0, sample.id))
    b = augment(sample, cfg, derive_seed(5, 0, sample.id))
    assert a.rgb.tobytes() == b.rgb.tobytes()
    assert a.modality.tobytes() == b.modality.tobytes()
    assert np.array_equal(a.label, b.label)


def test_marker_pixel_stays_aligned(rng):
    size = 48
    rgb = np.zeros((size, size, 3))
    aolp = np.zeros((size, size))
    label = np.zeros((size, size), dtype=np.int64)
    rgb[20:28, 20:28] = 1.0
    aolp[20:28, 20:28] = 0.25
    label[20:28, 20:28] = 3
    sample = Sample(id="marker", rgb=rgb, modality=aolp[None], kinds=[PlaneKind.AOLP], label=label)
    cfg = AugmentationConfig(scale_min=1.0, scale_max=1.0, crop=32, hflip_prob=0.5)
    for epoch in range(5):
        out = augment(sample, cfg, derive_seed(1, epoch, "marker"))
        marked = out.label == 3
        assert marked.any()
        assert np.all(out.rgb[marked] == 1.0)
        assert np.all(out.rgb[~marked] == 0.0)
        assert np.all(out.modality[0][~marked] == 0.0)
        assert np.all(out.modality[0][marked] > 0.0)


def test_small_images_are_padded_to_crop(rng):
    sample = make_sample(rng, size=20)
    out = augment(sample, AugmentationConfig(scale_min=1.0, scale_max=1.0, crop=32), rng)
    assert out.rgb.shape == (32, 32, 3)
    assert out.modality.shape == (2, 32, 32)
    assert out.label.shape == (32, 32)
    assert 0.0 <= out.rgb.min() and out.rgb.max() <= 1.0


def test_scaled_outputs_stay_normalized(rng):
    sample = make_sample(rng, size=40)
    out = augment(sample, AugmentationConfig(crop=32), rng)
    assert out.modality.min() >= 0 and out.modality.max() <= 1
    assert set(np.unique(out.label)) <= set(np.unique(sample.label))


def test_histogram_hand_binning():
    sample = Sample(id="h", rgb=np.zeros((2, 2, 3)), modality=np.array([[[0.0, 0.3], [0.5, 1.0]]]),
                    kinds=[PlaneKind.DOLP], label=np.zeros((2, 2), dtype=np.int64))
    stats = histogram([sample], ChannelKind.DOLP, 2)
    assert stats.counts == [2, 2]
    assert stats.total == 4


def test_histogram_constant_plane():
    sample = Sample(id="c", rgb=np.zeros((8, 8, 3)), modality=np.full((1, 8, 8), 0.37),
                    kinds=[PlaneKind.DOLP], label=np.zeros((8, 8), dtype=np.int64))
    stats = histogram([sample], ChannelKind.DOLP, 10)
    assert sorted(stats.counts)[-1] == 64
    assert sum(1 for c in stats.counts if c) == 1


def test_histogram_merge_is_order_free(rng):
    samples = [make_sample(rng) for _ in range(3)]
    forward = histogram(samples, ChannelKind.AOLP, 7)
    backward = histogram(samples[::-1], ChannelKind.AOLP, 7)
    assert forward.counts == backward.counts
    assert sum(forward.counts) == 3 * 16 * 16


def test_histogram_rejects_empty_and_single_bin(rng):
    with pytest.raises(InputValidationError):
        histogram([], ChannelKind.DOLP, 10)
    with pytest.raises(InputValidationError):
        histogram([make_sample(rng)], ChannelKind.DOLP, 1)


def test_branch_inputs_layout(rng):
    samples = [make_sample(rng), make_sample(rng)]
    rgb, aolp = branch_inputs(samples, [RGB, AOLP])
    assert rgb.shape == (2, 3, 16, 16)
    assert aolp.shape == (2, 1, 16, 16)
    np.testing.assert_array_equal(rgb[1, 2], samples[1].rgb[:, :, 2])


def test_augmentation_resize_matches_network_resize(rng):
    rgb = rng.random((10, 12, 3))
    resized = resize_bilinear_hw(rgb, (15, 7))
    network = F.resize_bilinear(Tensor(rgb.transpose(2, 0, 1)[None]), 15, 7).data[0].transpose(1, 2, 0)
    assert resized.shape == (15, 7, 3)
    np.testing.assert_allclose(resized, network, atol=1e-12)
