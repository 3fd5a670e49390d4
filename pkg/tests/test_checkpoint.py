import struct

import numpy as np
import pytest

from core.errors import CheckpointError, FormatError
from nn.eafnet import build_model
from services.checkpoint_service import checkpoint_load, checkpoint_save, decode_checkpoint, encode_checkpoint
from tests.conftest import RGB, tiny_config


def test_save_load_save_is_byte_identical(tmp_path):
    model = build_model(tiny_config(seed=3))
    first = checkpoint_save(model, tmp_path / "a.eafc")
    restored = checkpoint_load(first)
    second = checkpoint_save(restored, tmp_path / "b.eafc")
    assert first.read_bytes() == second.read_bytes()


def test_restored_model_predicts_identically(tmp_path, rng):
    model = build_model(tiny_config(seed=3))
    inputs = [rng.random((1, 3, 32, 32)), rng.random((1, 1, 32, 32))]
    expected = model.eval()(inputs).data
    restored = checkpoint_load(checkpoint_save(model, tmp_path / "m.eafc"))
    assert restored.eval()(inputs).data.tobytes() == expected.tobytes()
    assert restored.cfg == model.cfg


def test_running_statistics_are_stored(tmp_path, rng):
    model = build_model(tiny_config()).train()
    model([rng.random((2, 3, 32, 32)), rng.random((2, 1, 32, 32))])
    restored = checkpoint_load(checkpoint_save(model, tmp_path / "m.eafc"))
    buffers = dict(restored.named_buffers())
    for name, value in model.named_buffers():
        assert buffers[name].tobytes() == value.tobytes()


def test_header_layout():
    blob = encode_checkpoint(build_model(tiny_config(branches=(RGB,))))
    assert blob[:4] == b"EAFC"
    version, config_len = struct.unpack("<HI", blob[4:10])
    assert version == 1
    assert b'"num_classes":3' in blob[10:10 + config_len]


def test_expected_config_mismatch(tmp_path):
    path = checkpoint_save(build_model(tiny_config(num_classes=3)), tmp_path / "m.eafc")
    with pytest.raises(CheckpointError) as err:
        checkpoint_load(path, expected=tiny_config(num_classes=4))
    assert "num_classes" in err.value.details["fields"]
    assert checkpoint_load(path, expected=tiny_config(num_classes=3)).cfg.num_classes == 3


def test_bad_magic_and_truncation():
    blob = encode_checkpoint(build_model(tiny_config()))
    with pytest.raises(FormatError):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:-3])
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:8])


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "nope.eafc")


def test_non_finite_weights_are_refused():
    model = build_model(tiny_config())
    model.classifier.weight.data[0, 0, 0, 0] = np.nan
    with pytest.raises(FormatError):
        encode_checkpoint(model)
