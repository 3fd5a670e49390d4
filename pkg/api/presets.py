# polarseg/api/presets.py
from typing import Dict, List, Optional

from api.models import BranchSpec, ClassSchema, EafnetConfig, ExperimentPreset
from config import settings
from core.errors import InputValidationError

CLASS_SCHEMAS: Dict[str, ClassSchema] = {
    "zju-rgbp": ClassSchema(
        name="zju-rgbp",
        class_names=["Background", "Building", "Glass", "Car", "Road",
                     "Vegetation", "Sky", "Pedestrian", "Bicycle"],
        evaluated=[1, 2, 3, 4, 5, 6, 7, 8],
    ),
    "lost-and-found": ClassSchema(
        name="lost-and-found",
        class_names=["Background", "Road", "Obstacle"],
        evaluated=[1, 2],
    ),
}

_RGB = BranchSpec(name="rgb", sources=["rgb"])

PRESETS: Dict[str, ExperimentPreset] = {p.name: p for p in [
    ExperimentPreset(name="Baseline", description="RGB-only single-path network",
                     branches=[_RGB]),
    ExperimentPreset(name="AoLP-EX", description="RGB + AoLP fusion",
                     branches=[_RGB, BranchSpec(name="aolp", sources=["aolp"])]),
    ExperimentPreset(name="DoLP-EX", description="RGB + DoLP fusion",
                     branches=[_RGB, BranchSpec(name="dolp", sources=["dolp"])]),
    ExperimentPreset(name="A/D-EX", description="RGB + channel-concatenated AoLP/DoLP",
                     branches=[_RGB, BranchSpec(name="aolp_dolp", sources=["aolp", "dolp"])]),
    ExperimentPreset(name="3-Path-EX", description="RGB + separate AoLP and DoLP branches",
                     branches=[_RGB, BranchSpec(name="aolp", sources=["aolp"]),
                               BranchSpec(name="dolp", sources=["dolp"])]),
    ExperimentPreset(name="RGBD", description="RGB + disparity fusion, obstacle schema",
                     branches=[_RGB, BranchSpec(name="disparity", sources=["disparity"])],
                     schema_name="lost-and-found"),
    ExperimentPreset(name="SN-AoLP", description="single-path network on AoLP only",
                     branches=[BranchSpec(name="aolp", sources=["aolp"])]),
    ExperimentPreset(name="SN-RGB/A", description="single-path network on RGB and AoLP concatenated",
                     branches=[BranchSpec(name="rgb_aolp", sources=["rgb", "aolp"])]),
]}


def get_preset(name: str) -> ExperimentPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise InputValidationError(f"Unknown preset '{name}'", details={"available": sorted(PRESETS)})


def get_schema(name: str) -> ClassSchema:
    try:
        return CLASS_SCHEMAS[name]
    except KeyError:
        raise InputValidationError(f"Unknown class schema '{name}'", details={"available": sorted(CLASS_SCHEMAS)})


def build_config(preset: ExperimentPreset, schema: Optional[ClassSchema] = None, **overrides) -> EafnetConfig:
    """EafnetConfig for a preset; overrides are passed to the config (widths, decoder_width, ...)."""
    schema = schema or get_schema(preset.schema_name)
    overrides.setdefault("kernel_parity", settings.KERNEL_PARITY)
    return EafnetConfig(branches=preset.branches, num_classes=schema.num_classes, **overrides)


def preset_names() -> List[str]:
    return list(PRESETS)
