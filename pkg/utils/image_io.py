# polarseg/utils/image_io.py
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image

from core.errors import DatasetLoadError

PathLike = Union[str, Path]

# Segmentation palette, one RGB triple per class id (zju-rgbp order).
PALETTE: List[Tuple[int, int, int]] = [
    (0, 0, 0),        # Background
    (70, 70, 70),     # Building
    (0, 160, 230),    # Glass
    (0, 0, 142),      # Car
    (128, 64, 128),   # Road
    (107, 142, 35),   # Vegetation
    (70, 130, 180),   # Sky
    (220, 20, 60),    # Pedestrian
    (119, 11, 32),    # Bicycle
]


def read_intensity_png(path: PathLike) -> np.ndarray:
    """8- or 16-bit PNG scaled to [0, 1] by the bit depth's max value, as H x W x C float64."""
    path = Path(path)
    if not path.is_file():
        raise DatasetLoadError(f"Missing image file: {path}", path=str(path))
    try:
        with Image.open(path) as img:
            if img.mode == "P":
                img = img.convert("RGB")
            elif img.mode in ("RGBA", "LA"):
                img = img.convert(img.mode[:-1])
            mode = img.mode
            array = np.asarray(img)
    except OSError as e:
        raise DatasetLoadError(f"Unreadable image file: {path}", path=str(path)) from e
    if mode.startswith("I"):
        scale = 65535.0
    elif array.dtype == np.uint8:
        scale = 255.0
    else:
        raise DatasetLoadError(f"Unsupported PNG mode '{mode}' in {path}", path=str(path))
    array = array.astype(np.float64) / scale
    return array[:, :, None] if array.ndim == 2 else array


def read_label_png(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DatasetLoadError(f"Missing label file: {path}", path=str(path))
    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise DatasetLoadError(f"Label must be an 8-bit single-channel PNG, got mode '{img.mode}': {path}",
                                   path=str(path))
        return np.asarray(img).astype(np.int64)


def _to_uint8(plane: np.ndarray) -> np.ndarray:
    return np.round(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_intensity_png(path: PathLike, plane: np.ndarray) -> None:
    """Write an H x W (x 1 or 3) plane in [0, 1] as an 8-bit PNG."""
    data = _to_uint8(plane)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    Image.fromarray(data, mode="L" if data.ndim == 2 else "RGB").save(path)


def write_label_png(path: PathLike, label: np.ndarray) -> None:
    Image.fromarray(label.astype(np.uint8), mode="L").save(path)


def write_palette_png(path: PathLike, label: np.ndarray, palette: Sequence[Tuple[int, int, int]] = PALETTE) -> None:
    image = Image.fromarray(label.astype(np.uint8), mode="P")
    flat = [v for rgb in palette for v in rgb]
    image.putpalette(flat + [0] * (768 - len(flat)))
    image.save(path)


def dolp_preview(dolp: np.ndarray) -> np.ndarray:
    """Grayscale [0, 1] -> [0, 255]."""
    return _to_uint8(dolp)


def aolp_preview(aolp_deg: np.ndarray) -> np.ndarray:
    """Cyclic color map: hue = 2 * AoLP so 0 and 180 degrees share a color."""
    hue = np.mod(2.0 * aolp_deg, 360.0) / 360.0
    hsv = np.stack([hue, np.ones_like(hue), np.ones_like(hue)], axis=-1)
    return _to_uint8(hsv_to_rgb(hsv))


def write_preview_png(path: PathLike, image: np.ndarray) -> None:
    Image.fromarray(image, mode="L" if image.ndim == 2 else "RGB").save(path)
