from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# --- Polarimetry models ---

def _as_image_plane(value) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3 or min(array.shape) < 1:
        raise ValueError(f"Expected an H x W x C plane, got shape {array.shape}")
    return array


class IntensityQuad(BaseModel):
    """Four pixel-aligned intensity images behind 0/45/90/135 degree polarizers."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    i0: np.ndarray = Field(..., description="Intensity at 0 degrees (H x W x C).")
    i45: np.ndarray = Field(..., description="Intensity at 45 degrees.")
    i90: np.ndarray = Field(..., description="Intensity at 90 degrees.")
    i135: np.ndarray = Field(..., description="Intensity at 135 degrees.")

    @field_validator("i0", "i45", "i90", "i135", mode="before")
    @classmethod
    def coerce_plane(cls, value):
        return _as_image_plane(value)

    @model_validator(mode="after")
    def check_planes(self):
        shapes = {p.shape for p in (self.i0, self.i45, self.i90, self.i135)}
        if len(shapes) != 1:
            raise ValueError(f"Intensity planes disagree in shape: {sorted(shapes)}")
        for plane in (self.i0, self.i45, self.i90, self.i135):
            if not np.all(np.isfinite(plane)):
                raise ValueError("Intensity planes must be finite.")
            if plane.min() < 0:
                raise ValueError("Intensity planes must be nonnegative.")
        return self

    @property
    def height(self) -> int:
        return self.i0.shape[0]

    @property
    def width(self) -> int:
        return self.i0.shape[1]

    @property
    def channels(self) -> int:
        return self.i0.shape[2]

    def consistency_residual(self) -> np.ndarray:
        """|(I0 + I90) - (I45 + I135)| per pixel; reported, never enforced."""
        return np.abs((self.i0 + self.i90) - (self.i45 + self.i135))


class StokesMap(BaseModel):
    """Linear Stokes components per pixel and channel (S3 is not modelled)."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    s0: np.ndarray = Field(..., description="Total intensity.")
    s1: np.ndarray = Field(..., description="0 vs 90 degree component.")
    s2: np.ndarray = Field(..., description="45 vs 135 degree component.")

    @field_validator("s0", "s1", "s2", mode="before")
    @classmethod
    def coerce_plane(cls, value):
        return _as_image_plane(value)

    @model_validator(mode="after")
    def check_planes(self):
        if not (self.s0.shape == self.s1.shape == self.s2.shape):
            raise ValueError(f"Stokes planes disagree in shape: {self.s0.shape}, {self.s1.shape}, {self.s2.shape}")
        return self

    def polarization_excess(self) -> np.ndarray:
        """s1^2 + s2^2 - s0^2; <= 0 for physically valid light."""
        return self.s1 ** 2 + self.s2 ** 2 - self.s0 ** 2


class PolarDerived(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    dolp: np.ndarray = Field(..., description="Degree of linear polarization in [0, 1].")
    aolp_deg: np.ndarray = Field(..., description="Angle of linear polarization in [0, 180).")


class FresnelResult(BaseModel):
    """Fresnel amplitude coefficients for one interface and incidence angle."""
    r_s: float
    r_p: float
    t_s: float
    t_p: float
    theta_t_deg: float = Field(..., description="Refraction angle from Snell's law.")


# --- Dataset models ---

class PlaneKind(str, Enum):
    AOLP = "aolp"
    DOLP = "dolp"
    DISPARITY = "disparity"


class ModalityMode(str, Enum):
    AOLP = "aolp"
    DOLP = "dolp"
    AOLP_DOLP = "aolp_dolp"
    DISPARITY = "disparity"
    ALL = "all"

    @property
    def kinds(self) -> List[PlaneKind]:
        return {
            ModalityMode.AOLP: [PlaneKind.AOLP],
            ModalityMode.DOLP: [PlaneKind.DOLP],
            ModalityMode.AOLP_DOLP: [PlaneKind.AOLP, PlaneKind.DOLP],
            ModalityMode.DISPARITY: [PlaneKind.DISPARITY],
            ModalityMode.ALL: [PlaneKind.AOLP, PlaneKind.DOLP, PlaneKind.DISPARITY],
        }[self]


class Sample(BaseModel):
    """One aligned training/evaluation example. All planes are normalized to [0, 1]."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    id: str
    rgb: np.ndarray = Field(..., description="H x W x 3 color image.")
    modality: np.ndarray = Field(..., description="P x H x W stack of 1-3 polarization/disparity planes.")
    kinds: List[PlaneKind] = Field(..., description="Kind of each modality plane, in stack order.")
    label: np.ndarray = Field(..., description="H x W class-id map.")
    num_classes: int = Field(9, ge=2)

    @model_validator(mode="after")
    def check_alignment(self):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be H x W x 3, got {self.rgb.shape}")
        hw = self.rgb.shape[:2]
        if self.modality.ndim != 3 or self.modality.shape[1:] != hw:
            raise ValueError(f"modality stack {self.modality.shape} does not match rgb {hw}")
        if not 1 <= self.modality.shape[0] <= 3 or len(self.kinds) != self.modality.shape[0]:
            raise ValueError("modality stack must hold 1-3 planes, one kind per plane")
        if self.label.shape != hw:
            raise ValueError(f"label {self.label.shape} does not match rgb {hw}")
        if self.label.size and (self.label.min() < 0 or self.label.max() >= self.num_classes):
            raise ValueError(f"label ids must lie in [0, {self.num_classes})")
        return self

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def plane(self, kind: PlaneKind) -> np.ndarray:
        return self.modality[self.kinds.index(PlaneKind(kind))]


class AugmentationConfig(BaseModel):
    """Scale -> crop -> horizontal flip recipe."""
    model_config = ConfigDict(extra="forbid")

    scale_min: float = Field(0.75, gt=0)
    scale_max: float = Field(1.25, gt=0)
    crop: int = Field(768, gt=0, description="Square crop size in pixels.")
    hflip_prob: float = Field(0.5, ge=0, le=1)
    seed: int = Field(0, ge=0, lt=2 ** 64)

    @model_validator(mode="after")
    def check_scale_range(self):
        if self.scale_min > self.scale_max:
            raise ValueError("scale_min must not exceed scale_max")
        return self


class ChannelKind(str, Enum):
    AOLP = "aolp"
    DOLP = "dolp"
    DISPARITY = "disparity"
    S0 = "s0"


class DatasetStats(BaseModel):
    """Histogram of one normalized channel; the final bin is right-closed."""
    kind: ChannelKind
    edges: List[float]
    counts: List[int]
    total: int = Field(..., ge=0)

    @model_validator(mode="after")
    def check_counts(self):
        if len(self.counts) < 2 or len(self.edges) != len(self.counts) + 1:
            raise ValueError("histogram needs >= 2 bins and len(edges) == bins + 1")
        if sum(self.counts) != self.total:
            raise ValueError("histogram counts must sum to the pixel total")
        return self

    def merge(self, other: "DatasetStats") -> "DatasetStats":
        if other.kind != self.kind or other.edges != self.edges:
            raise ValueError("Cannot merge histograms with different kinds or bin edges")
        return DatasetStats(kind=self.kind, edges=self.edges,
                            counts=[a + b for a, b in zip(self.counts, other.counts)],
                            total=self.total + other.total)

    def fraction_below(self, upper: float) -> float:
        """Share of pixels in bins whose upper edge is <= upper."""
        if self.total == 0:
            return 0.0
        inside = sum(c for c, hi in zip(self.counts, self.edges[1:]) if hi <= upper + 1e-12)
        return inside / self.total


class Material(BaseModel):
    """One surface type of the synthetic scene generator."""
    model_config = ConfigDict(extra="forbid")

    class_id: int = Field(..., ge=0)
    name: str
    refractive_index: float = Field(..., gt=1.0)
    base_color: Tuple[float, float, float] = Field(..., description="Diffuse RGB in [0, 1].")
    roughness: float = Field(..., ge=0, le=1, description="1 - roughness is the polarized (specular) share.")


class SyntheticSceneConfig(BaseModel):
    """Desk-scale RGB-P scene generator settings. materials[0] is the background."""
    model_config = ConfigDict(extra="forbid")

    height: int = Field(64, ge=8)
    width: int = Field(64, ge=8)
    materials: List[Material]
    light_direction: Tuple[float, float, float] = (0.4, -0.3, 0.866)
    color_informative: bool = True
    shared_color: Tuple[float, float, float] = Field((0.5, 0.5, 0.5), description="Base color when color is uninformative.")
    shapes_min: int = Field(1, ge=0)
    shapes_max: int = Field(4, ge=0)
    incidence_min_deg: float = Field(30.0, ge=0, lt=90)
    incidence_max_deg: float = Field(75.0, ge=0, lt=90)
    noise_std: float = Field(0.005, ge=0)
    num_classes: int = Field(9, ge=2)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_materials(self):
        if len(self.materials) < 2:
            raise ValueError("a synthetic scene needs at least 2 materials")
        if self.shapes_min > self.shapes_max:
            raise ValueError("shapes_min must not exceed shapes_max")
        if self.incidence_min_deg > self.incidence_max_deg:
            raise ValueError("incidence_min_deg must not exceed incidence_max_deg")
        if any(m.class_id >= self.num_classes for m in self.materials):
            raise ValueError("material class ids must be below num_classes")
        return self

    @classmethod
    def default(cls, **overrides) -> "SyntheticSceneConfig":
        materials = [
            Material(class_id=0, name="Background", refractive_index=1.30, base_color=(0.45, 0.45, 0.45), roughness=1.0),
            Material(class_id=1, name="Building", refractive_index=1.55, base_color=(0.60, 0.50, 0.40), roughness=0.75),
            Material(class_id=2, name="Glass", refractive_index=1.50, base_color=(0.35, 0.45, 0.55), roughness=0.05),
            Material(class_id=3, name="Car", refractive_index=1.45, base_color=(0.70, 0.15, 0.15), roughness=0.35),
            Material(class_id=5, name="Vegetation", refractive_index=1.33, base_color=(0.20, 0.55, 0.20), roughness=0.85),
        ]
        return cls(materials=materials, **overrides)

    @classmethod
    def two_material(cls, **overrides) -> "SyntheticSceneConfig":
        materials = [
            Material(class_id=0, name="Background", refractive_index=1.30, base_color=(0.45, 0.45, 0.45), roughness=1.0),
            Material(class_id=2, name="Glass", refractive_index=1.50, base_color=(0.35, 0.45, 0.55), roughness=0.05),
        ]
        overrides.setdefault("color_informative", False)
        return cls(materials=materials, **overrides)

    @classmethod
    def low_polarization(cls, **overrides) -> "SyntheticSceneConfig":
        materials = [
            Material(class_id=0, name="Background", refractive_index=1.30, base_color=(0.45, 0.45, 0.45), roughness=1.0),
            Material(class_id=1, name="Building", refractive_index=1.55, base_color=(0.60, 0.50, 0.40), roughness=0.85),
            Material(class_id=4, name="Road", refractive_index=1.60, base_color=(0.30, 0.30, 0.32), roughness=0.90),
            Material(class_id=5, name="Vegetation", refractive_index=1.33, base_color=(0.20, 0.55, 0.20), roughness=0.80),
        ]
        return cls(materials=materials, **overrides)

    @classmethod
    def obstacle(cls, **overrides) -> "SyntheticSceneConfig":
        """Road scene with obstacles, ids of the 3-class obstacle schema."""
        materials = [
            Material(class_id=0, name="Background", refractive_index=1.30, base_color=(0.45, 0.45, 0.45), roughness=1.0),
            Material(class_id=1, name="Road", refractive_index=1.60, base_color=(0.30, 0.30, 0.32), roughness=0.70),
            Material(class_id=2, name="Obstacle", refractive_index=1.50, base_color=(0.55, 0.40, 0.25), roughness=0.30),
        ]
        overrides.setdefault("num_classes", 3)
        return cls(materials=materials, **overrides)

    @classmethod
    def preset(cls, name: str, **overrides) -> "SyntheticSceneConfig":
        factories = {"default": cls.default, "two_material": cls.two_material,
                     "low_polarization": cls.low_polarization, "obstacle": cls.obstacle}
        if name not in factories:
            raise ValueError(f"Unknown scene preset '{name}', expected one of {sorted(factories)}")
        return factories[name](**overrides)


# --- Model and experiment models ---

InputSource = Literal["rgb", "aolp", "dolp", "disparity"]


class BranchSpec(BaseModel):
    """One encoder input branch; sources are concatenated along channels in order."""
    name: str
    sources: List[InputSource] = Field(..., min_length=1)

    @property
    def channels(self) -> int:
        return sum(3 if s == "rgb" else 1 for s in self.sources)


class EafnetConfig(BaseModel):
    """Architecture description. One branch gives the single-path baseline; 2-3 branches enable fusion."""
    branches: List[BranchSpec] = Field(..., min_length=1, max_length=3)
    widths: List[int] = Field([16, 24, 32, 48, 64], min_length=5, max_length=5,
                              description="Stem width followed by the four stage widths.")
    blocks_per_stage: int = Field(2, ge=1)
    num_classes: int = Field(9, ge=2)
    spp_levels: List[int] = Field([1, 2, 4, 8], min_length=1)
    decoder_width: int = Field(32, ge=1)
    input_size: int = Field(64, ge=32, description="Training crop / nominal evaluation size.")
    kernel_parity: Literal["even", "odd"] = "even"
    eac_b: float = 1.0
    eac_gamma: float = 2.0
    eac_kernel_init: Literal["normal", "zeros"] = "normal"
    seed: int = Field(0, ge=0)

    @field_validator("widths", "spp_levels")
    @classmethod
    def check_positive(cls, value: List[int]) -> List[int]:
        if any(v <= 0 for v in value):
            raise ValueError("widths and SPP levels must be strictly positive")
        return value

    @property
    def is_fused(self) -> bool:
        return len(self.branches) >= 2

    def required_sources(self) -> List[str]:
        seen: List[str] = []
        for branch in self.branches:
            for source in branch.sources:
                if source not in seen:
                    seen.append(source)
        return seen


class ClassSchema(BaseModel):
    name: str
    class_names: List[str] = Field(..., min_length=2)
    evaluated: List[int] = Field(..., description="Class ids averaged into mIoU.")
    ignore_ids: List[int] = Field(default_factory=list, description="Label ids excluded from loss and metrics.")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @model_validator(mode="after")
    def check_ids(self):
        if any(not 0 <= c < self.num_classes for c in self.evaluated):
            raise ValueError("evaluated class ids out of range")
        return self


class ExperimentPreset(BaseModel):
    """Named branch/modality wiring of one experiment."""
    name: str
    description: str = ""
    branches: List[BranchSpec] = Field(..., min_length=1, max_length=3)
    schema_name: str = "zju-rgbp"

    @property
    def is_fused(self) -> bool:
        return len(self.branches) >= 2

    @property
    def slug(self) -> str:
        return self.name.lower().replace("/", "-")

    def modality_mode(self) -> ModalityMode:
        sources = {s for b in self.branches for s in b.sources}
        if "disparity" in sources:
            return ModalityMode.ALL if sources & {"aolp", "dolp"} else ModalityMode.DISPARITY
        if {"aolp", "dolp"} <= sources:
            return ModalityMode.AOLP_DOLP
        if "dolp" in sources:
            return ModalityMode.DOLP
        return ModalityMode.AOLP


class TrainConfig(BaseModel):
    """Optimization recipe: Adam + cosine annealing + L2 decay + cross entropy."""
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(4e-4, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    floor_fraction: float = Field(2.5e-3, ge=0, le=1)
    batch_size: int = Field(4, ge=1)
    epochs: int = Field(60, ge=1)
    seed: int = Field(7, ge=0)
    crop: int = Field(64, gt=0)
    scale_min: float = Field(0.75, gt=0)
    scale_max: float = Field(1.25, gt=0)
    hflip_prob: float = Field(0.5, ge=0, le=1)
    ignore_background_in_miou: bool = True
    eval_shards: int = Field(1, ge=1)

    @model_validator(mode="after")
    def check_crop(self):
        if self.crop % 32:
            raise ValueError("crop must be divisible by 32")
        if self.scale_min > self.scale_max:
            raise ValueError("scale_min must not exceed scale_max")
        return self

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(scale_min=self.scale_min, scale_max=self.scale_max,
                                  crop=self.crop, hflip_prob=self.hflip_prob, seed=self.seed)


# --- Metrics and diagnostics ---

class ClassMetrics(BaseModel):
    class_id: int
    name: str
    iou: Optional[float] = Field(None, description="None when TP + FP + FN == 0.")
    precision: Optional[float] = Field(None, description="None when TP + FP == 0.")
    recall: Optional[float] = Field(None, description="None when TP + FN == 0.")
    evaluated: bool = True


class MetricsReport(BaseModel):
    classes: List[ClassMetrics]
    miou: Optional[float] = Field(None, description="Mean IoU over evaluated classes with a defined IoU.")

    def by_id(self, class_id: int) -> ClassMetrics:
        return next(c for c in self.classes if c.class_id == class_id)


class TrainLogRow(BaseModel):
    epoch: int
    step: int
    lr: float
    loss: float
    val_miou: Optional[float] = None


class AttentionRecord(BaseModel):
    stage: str
    branch: str
    mean_weight: float = Field(..., gt=0, lt=1)


class ChannelAttention(BaseModel):
    stage: str
    branch: str
    channel: int
    weight: float


class AttentionReport(BaseModel):
    records: List[AttentionRecord]
    channels: List[ChannelAttention] = Field(default_factory=list)

    def lookup(self) -> Dict[Tuple[str, str], float]:
        return {(r.stage, r.branch): r.mean_weight for r in self.records}


class CheckResult(BaseModel):
    name: str
    passed: bool
    seconds: float
    detail: str = ""


# --- Command-line run configuration ---

class CliConfig(BaseModel):
    """Effective configuration of one command: JSON file values overridden by flags."""
    model_config = ConfigDict(extra="forbid")

    command: str
    seed: int = Field(7, ge=0, lt=2 ** 64)
    out: str = "runs"
    root: Optional[str] = None
    split: Literal["train", "val"] = "val"
    mode: ModalityMode = ModalityMode.AOLP_DOLP
    kind: ChannelKind = ChannelKind.DOLP
    bins: int = Field(100, ge=2)
    preset: Optional[str] = None
    schema_name: Optional[str] = None
    synthetic: bool = False
    synthetic_train: int = Field(16, ge=1)
    synthetic_val: int = Field(8, ge=1)
    scene: Optional[SyntheticSceneConfig] = None
    scene_preset: Optional[Literal["default", "two_material", "low_polarization", "obstacle"]] = Field(
        None, description="Built-in scene when `scene` is not given; defaults by class schema.")
    checks: Optional[List[str]] = Field(None, description="Subset of verification checks to run.")
    checkpoint: Optional[str] = None
    train: TrainConfig = Field(default_factory=TrainConfig)
    widths: List[int] = Field([16, 24, 32, 48, 64], min_length=5, max_length=5)
    blocks_per_stage: int = Field(2, ge=1)
    decoder_width: int = Field(32, ge=1)
    attention_stage: str = "layer3"
    attention_channels: Optional[int] = Field(None, ge=1, description="Per-channel dump limit; all channels when unset.")
