# polarseg/services/synthetic_service.py
"""
Desk-scale RGB-P scenes: axis-aligned shapes of random materials over a background.
Each shape reflects light at its own incidence angle and orientation; the Fresnel
s/p reflectances set the polarized share of the reflected intensity.
"""
from pathlib import Path
from typing import List, NamedTuple, Union

import numpy as np

from api.models import IntensityQuad, ModalityMode, Sample, StokesMap, SyntheticSceneConfig
from config import logger
from services.dataset_service import derive_seed, sample_from_quad
from services.polarimetry import fresnel_reflectance, synthesize_intensities
from utils.image_io import write_intensity_png, write_label_png

PathLike = Union[str, Path]

BACKGROUND_DISPARITY = 0.1
INCIDENCE_RAMP_DEG = 5.0


class SceneRender(NamedTuple):
    quad: IntensityQuad
    label: np.ndarray
    disparity: np.ndarray


def _shading(cfg: SyntheticSceneConfig) -> np.ndarray:
    """Frame-level illumination from the light direction, the same for every material."""
    light = np.asarray(cfg.light_direction, dtype=np.float64)
    light = light / np.linalg.norm(light)
    v, u = np.meshgrid(np.linspace(-1.0, 1.0, cfg.height), np.linspace(-1.0, 1.0, cfg.width), indexing="ij")
    return np.clip(abs(light[2]) + 0.1 * (light[0] * u + light[1] * v), 0.2, 1.0)


def render_scene(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> SceneRender:
    h, w = cfg.height, cfg.width
    material_index = np.zeros((h, w), dtype=np.int64)
    orientation = np.full((h, w), rng.uniform(0.0, 180.0))
    incidence = np.full((h, w), rng.uniform(cfg.incidence_min_deg, cfg.incidence_max_deg))
    disparity = np.full((h, w), BACKGROUND_DISPARITY)

    for _ in range(int(rng.integers(cfg.shapes_min, cfg.shapes_max + 1))):
        index = int(rng.integers(1, len(cfg.materials)))
        sh = int(rng.integers(max(2, h // 6), h // 2 + 1))
        sw = int(rng.integers(max(2, w // 6), w // 2 + 1))
        top = int(rng.integers(0, h - sh + 1))
        left = int(rng.integers(0, w - sw + 1))
        phi = rng.uniform(0.0, 180.0)
        theta = rng.uniform(cfg.incidence_min_deg, cfg.incidence_max_deg)
        depth = rng.uniform(0.3, 1.0)
        window = (slice(top, top + sh), slice(left, left + sw))
        material_index[window] = index
        orientation[window] = phi
        incidence[window] = theta + INCIDENCE_RAMP_DEG * np.linspace(0.0, 1.0, sw)[None, :]
        disparity[window] = depth
    incidence = np.clip(incidence, 0.0, 89.0)

    shading = _shading(cfg)
    color = np.zeros((h, w, 3))
    polarized = np.zeros((h, w))
    label = np.zeros((h, w), dtype=np.int64)
    for index, material in enumerate(cfg.materials):
        mask = material_index == index
        if not mask.any():
            continue
        rs, rp = fresnel_reflectance(1.0, material.refractive_index, np.radians(incidence[mask]))
        polarized[mask] = (1.0 - material.roughness) * (rs - rp) / (rs + rp)
        color[mask] = material.base_color if cfg.color_informative else cfg.shared_color
        label[mask] = material.class_id

    s0 = color * shading[:, :, None]
    doubled = np.radians(2.0 * orientation)
    s1 = (polarized * np.cos(doubled))[:, :, None] * s0
    s2 = (polarized * np.sin(doubled))[:, :, None] * s0
    clean = synthesize_intensities(StokesMap(s0=s0, s1=s1, s2=s2))

    def noisy(plane: np.ndarray) -> np.ndarray:
        return np.clip(plane + rng.normal(0.0, cfg.noise_std, plane.shape), 0.0, 1.0) if cfg.noise_std else plane
    quad = IntensityQuad(i0=noisy(clean.i0), i45=noisy(clean.i45), i90=noisy(clean.i90), i135=noisy(clean.i135))
    return SceneRender(quad=quad, label=label, disparity=disparity)


def synthesize_scene(cfg: SyntheticSceneConfig, rng: np.random.Generator, sample_id: str = "scene",
                     mode: ModalityMode = ModalityMode.ALL) -> Sample:
    render = render_scene(cfg, rng)
    return sample_from_quad(sample_id, render.quad, render.label, mode, cfg.num_classes, disparity=render.disparity)


def scene_ids(count: int, prefix: str) -> List[str]:
    return [f"{prefix}{i:04d}" for i in range(count)]


def synthesize_dataset(cfg: SyntheticSceneConfig, count: int, prefix: str = "train",
                       mode: ModalityMode = ModalityMode.ALL) -> List[Sample]:
    """count scenes, each drawn from a generator seeded by (cfg.seed, id)."""
    samples = [synthesize_scene(cfg, derive_seed(cfg.seed, 0, sid), sid, mode) for sid in scene_ids(count, prefix)]
    logger.info(f"Synthesized {count} '{prefix}' scenes ({cfg.height}x{cfg.width}, {len(cfg.materials)} materials)")
    return samples


def export_dataset(cfg: SyntheticSceneConfig, root: PathLike, split: str, count: int) -> List[Path]:
    """Write scenes in the on-disk dataset layout as 8-bit PNGs."""
    written = []
    for sid in scene_ids(count, split):
        render = render_scene(cfg, derive_seed(cfg.seed, 0, sid))
        sample_dir = Path(root) / split / sid
        sample_dir.mkdir(parents=True, exist_ok=True)
        for name in ("i0", "i45", "i90", "i135"):
            write_intensity_png(sample_dir / f"{name}.png", getattr(render.quad, name))
        write_label_png(sample_dir / "label.png", render.label)
        write_intensity_png(sample_dir / "disparity.png", render.disparity)
        written.append(sample_dir)
    logger.info(f"Exported {count} synthetic '{split}' scenes to {Path(root) / split}")
    return written
