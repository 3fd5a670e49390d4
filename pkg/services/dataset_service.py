# polarseg/services/dataset_service.py
"""
Sample ingestion from <root>/<split>/<id>/, the scale -> crop -> flip augmentation
and channel histograms.
"""
import hashlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from api.models import (
    AugmentationConfig,
    BranchSpec,
    ChannelKind,
    DatasetStats,
    IntensityQuad,
    ModalityMode,
    PlaneKind,
    Sample,
)
from config import logger, settings
from core.errors import DatasetLoadError, InputValidationError
from services.polarimetry import channel_mean, compute_aolp, compute_dolp, compute_stokes, flip_aolp_values
from utils.image_io import read_intensity_png, read_label_png
from utils.resample import resize_bilinear_hw, resize_nearest_hw

PathLike = Union[str, Path]
QUAD_FILES = ("i0.png", "i45.png", "i90.png", "i135.png")


def list_sample_ids(root: PathLike, split: str) -> List[str]:
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise DatasetLoadError(f"Missing split directory: {split_dir}", path=str(split_dir))
    ids = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
    if not ids:
        raise DatasetLoadError(f"No samples under {split_dir}", path=str(split_dir))
    return ids


def _read_aligned(path: Path, shape: Tuple[int, int]) -> np.ndarray:
    plane = read_intensity_png(path)
    if plane.shape[:2] != shape:
        raise DatasetLoadError(f"{path.name} is {plane.shape[0]}x{plane.shape[1]}, expected {shape[0]}x{shape[1]}",
                               path=str(path))
    return plane


def load_sample(root: PathLike, split: str, sample_id: str, mode: ModalityMode,
                num_classes: int = 9) -> Sample:
    """
    RGB is the mean of the four polarized images (S0 / 2) unless rgb.png exists.
    AoLP and DoLP come from the channel-averaged quad; AoLP is divided by 180.
    """
    mode = ModalityMode(mode)
    sample_dir = Path(root) / split / sample_id
    needed = list(QUAD_FILES) + ["label.png"]
    if PlaneKind.DISPARITY in mode.kinds:
        needed.append("disparity.png")
    for name in needed:
        if not (sample_dir / name).is_file():
            raise DatasetLoadError(f"Missing file {sample_dir / name}", path=str(sample_dir / name))

    first = read_intensity_png(sample_dir / QUAD_FILES[0])
    shape = first.shape[:2]
    planes = [first] + [_read_aligned(sample_dir / name, shape) for name in QUAD_FILES[1:]]
    if len({p.shape for p in planes}) != 1:
        raise DatasetLoadError(f"Polarized images in {sample_dir} disagree in channel count", path=str(sample_dir))
    quad = IntensityQuad(i0=planes[0], i45=planes[1], i90=planes[2], i135=planes[3])

    rgb_path = sample_dir / "rgb.png"
    rgb = _read_aligned(rgb_path, shape) if rgb_path.is_file() else None
    if rgb is not None and rgb.shape[2] not in (1, 3):
        raise DatasetLoadError(f"Expected 1 or 3 color channels in {rgb_path}", path=str(rgb_path))
    disparity = None
    if PlaneKind.DISPARITY in mode.kinds:
        disparity = channel_mean(_read_aligned(sample_dir / "disparity.png", shape))

    label_path = sample_dir / "label.png"
    label = read_label_png(label_path)
    if label.shape != shape:
        raise DatasetLoadError(f"label.png is {label.shape}, expected {shape}", path=str(label_path))
    if label.max() >= num_classes:
        raise DatasetLoadError(f"label.png contains class id {int(label.max())} >= {num_classes}",
                               path=str(label_path), details={"num_classes": num_classes})

    return sample_from_quad(sample_id, quad, label, mode, num_classes, rgb=rgb, disparity=disparity)


def sample_from_quad(sample_id: str, quad: IntensityQuad, label: np.ndarray, mode: ModalityMode,
                     num_classes: int = 9, rgb: Optional[np.ndarray] = None,
                     disparity: Optional[np.ndarray] = None) -> Sample:
    """Derive the RGB plane and the modality stack of `mode` from a quad."""
    mode = ModalityMode(mode)
    if rgb is None:
        rgb = (quad.i0 + quad.i45 + quad.i90 + quad.i135) / 4.0
    if rgb.shape[2] == 1:
        rgb = np.repeat(rgb, 3, axis=2)

    gray = IntensityQuad(i0=channel_mean(quad.i0), i45=channel_mean(quad.i45),
                         i90=channel_mean(quad.i90), i135=channel_mean(quad.i135))
    stokes = compute_stokes(gray)
    modality = []
    for kind in mode.kinds:
        if kind == PlaneKind.AOLP:
            modality.append(compute_aolp(stokes, settings.AOLP_CONVENTION)[:, :, 0] / 180.0)
        elif kind == PlaneKind.DOLP:
            modality.append(compute_dolp(stokes, settings.DEG_EPS_S0)[:, :, 0])
        else:
            if disparity is None:
                raise InputValidationError(f"Sample '{sample_id}' has no disparity plane")
            modality.append(np.clip(disparity, 0.0, 1.0))

    return Sample(id=sample_id, rgb=np.clip(rgb, 0.0, 1.0), modality=np.stack(modality), kinds=mode.kinds,
                  label=np.asarray(label, dtype=np.int64), num_classes=num_classes)


def load_split(root: PathLike, split: str, mode: ModalityMode, num_classes: int = 9,
               workers: Optional[int] = None) -> List[Sample]:
    ids = list_sample_ids(root, split)
    with ThreadPoolExecutor(max_workers=workers or settings.EVAL_WORKERS) as pool:
        samples = list(pool.map(lambda i: load_sample(root, split, i, mode, num_classes), ids))
    logger.info(f"Loaded {len(samples)} {split} samples from {root} (mode={ModalityMode(mode).value})")
    return samples


def derive_seed(seed: int, epoch: int, sample_id: str) -> np.random.Generator:
    """Per-sample generator depending only on (seed, epoch, id), so any schedule gives the same draws."""
    digest = hashlib.blake2b(sample_id.encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng([seed, epoch, int.from_bytes(digest, "little")])


def hflip(sample: Sample) -> Sample:
    """Mirror every plane left-right; AoLP planes also get the a -> (180 - a) mod 180 remap."""
    modality = sample.modality[:, :, ::-1].copy()
    for index, kind in enumerate(sample.kinds):
        if kind == PlaneKind.AOLP:
            modality[index] = flip_aolp_values(modality[index] * 180.0) / 180.0
    return sample.model_copy(update={
        "rgb": sample.rgb[:, ::-1].copy(),
        "modality": modality,
        "label": sample.label[:, ::-1].copy(),
    })


def _pad_to(array: np.ndarray, height: int, width: int, label: bool) -> np.ndarray:
    pad_h = max(height - array.shape[0], 0)
    pad_w = max(width - array.shape[1], 0)
    if not pad_h and not pad_w:
        return array
    widths = [(pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)] + [(0, 0)] * (array.ndim - 2)
    if label:
        return np.pad(array, widths, mode="constant", constant_values=0)
    return np.pad(array, widths, mode="reflect")


def augment(sample: Sample, cfg: AugmentationConfig, rng: np.random.Generator) -> Sample:
    """Random scale, random crop (reflect-padding small images) and random horizontal flip."""
    scale = rng.uniform(cfg.scale_min, cfg.scale_max) if cfg.scale_min < cfg.scale_max else cfg.scale_min
    size = (max(1, int(round(sample.height * scale))), max(1, int(round(sample.width * scale))))
    rgb = resize_bilinear_hw(sample.rgb, size)
    modality = np.stack([resize_bilinear_hw(p, size) for p in sample.modality])
    label = resize_nearest_hw(sample.label, size)

    rgb = _pad_to(rgb, cfg.crop, cfg.crop, label=False)
    modality = np.stack([_pad_to(p, cfg.crop, cfg.crop, label=False) for p in modality])
    label = _pad_to(label, cfg.crop, cfg.crop, label=True)
    top = int(rng.integers(0, label.shape[0] - cfg.crop + 1))
    left = int(rng.integers(0, label.shape[1] - cfg.crop + 1))
    window = (slice(top, top + cfg.crop), slice(left, left + cfg.crop))

    out = sample.model_copy(update={
        "rgb": np.clip(rgb[window], 0.0, 1.0),
        "modality": np.clip(modality[(slice(None),) + window], 0.0, 1.0),
        "label": label[window].copy(),
    })
    if rng.random() < cfg.hflip_prob:
        out = hflip(out)
    return out


def _channel_values(sample: Sample, kind: ChannelKind) -> np.ndarray:
    if kind == ChannelKind.S0:
        return sample.rgb.mean(axis=2)
    plane_kind = PlaneKind(kind.value)
    if plane_kind not in sample.kinds:
        raise InputValidationError(f"Sample '{sample.id}' has no {kind.value} plane",
                                   details={"kinds": [k.value for k in sample.kinds]})
    return sample.plane(plane_kind)


def histogram_sample(sample: Sample, kind: ChannelKind, bins: int) -> DatasetStats:
    kind = ChannelKind(kind)
    edges = np.linspace(0.0, 1.0, bins + 1)
    values = np.clip(_channel_values(sample, kind), 0.0, 1.0)
    counts, _ = np.histogram(values, bins=edges)
    return DatasetStats(kind=kind, edges=edges.tolist(), counts=counts.tolist(), total=int(values.size))


def histogram(samples: Iterable[Sample], kind: ChannelKind, bins: int) -> DatasetStats:
    """Uniform bins over [0, 1], final bin right-closed. Per-sample histograms are merged."""
    if bins < 2:
        raise InputValidationError(f"histogram needs at least 2 bins, got {bins}")
    stats: Optional[DatasetStats] = None
    for sample in samples:
        part = histogram_sample(sample, kind, bins)
        stats = part if stats is None else stats.merge(part)
    if stats is None:
        raise InputValidationError("histogram over an empty sample set")
    return stats


def branch_inputs(samples: Sequence[Sample], branches: Sequence[BranchSpec]) -> List[np.ndarray]:
    """One N x C x H x W array per branch; sources are concatenated along channels in order."""
    inputs = []
    for branch in branches:
        per_sample = []
        for sample in samples:
            channels = []
            for source in branch.sources:
                if source == "rgb":
                    channels.extend(np.moveaxis(sample.rgb, 2, 0))
                else:
                    channels.append(_channel_values(sample, ChannelKind(source)))
            per_sample.append(np.stack(channels))
        inputs.append(np.stack(per_sample))
    return inputs


def collate_labels(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.label for s in samples]).astype(np.int64)
