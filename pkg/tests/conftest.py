# polarseg/tests/conftest.py
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pytest

from api.models import BranchSpec, ClassSchema, EafnetConfig, SyntheticSceneConfig
from utils.image_io import write_intensity_png, write_label_png

RGB = BranchSpec(name="rgb", sources=["rgb"])
AOLP = BranchSpec(name="aolp", sources=["aolp"])
DOLP = BranchSpec(name="dolp", sources=["dolp"])


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def tiny_config(branches=(RGB, AOLP), num_classes: int = 3, seed: int = 0, **overrides) -> EafnetConfig:
    values = dict(widths=[4, 4, 4, 4, 4], blocks_per_stage=1, spp_levels=[1, 2], decoder_width=4, input_size=32)
    values.update(overrides)
    return EafnetConfig(branches=list(branches), num_classes=num_classes, seed=seed, **values)


@pytest.fixture
def tiny_schema() -> ClassSchema:
    return ClassSchema(name="tiny", class_names=["Background", "Building", "Glass"], evaluated=[1, 2])


@pytest.fixture
def two_material_scene() -> SyntheticSceneConfig:
    return SyntheticSceneConfig.two_material(height=32, width=32, num_classes=3, seed=11)


def write_sample(root: Path, split: str, sample_id: str, planes: Dict[str, np.ndarray], label: np.ndarray,
                 skip: Optional[str] = None) -> Path:
    """Write one sample folder; planes maps i0/i45/i90/i135 (and optional rgb/disparity) to [0, 1] arrays."""
    sample_dir = root / split / sample_id
    sample_dir.mkdir(parents=True, exist_ok=True)
    for name, plane in planes.items():
        if name != skip:
            write_intensity_png(sample_dir / f"{name}.png", plane)
    if skip != "label":
        write_label_png(sample_dir / "label.png", label)
    return sample_dir


@pytest.fixture
def constant_dataset(tmp_path: Path) -> Path:
    """Two unpolarized 32x32 samples: every intensity image is the constant 128/255."""
    plane = np.full((32, 32, 3), 128 / 255)
    label = np.zeros((32, 32), dtype=np.uint8)
    label[8:16, 8:16] = 2
    for sample_id in ("a", "b"):
        write_sample(tmp_path, "val", sample_id, {n: plane for n in ("i0", "i45", "i90", "i135")}, label)
    return tmp_path
