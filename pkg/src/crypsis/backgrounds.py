"""Background image sets: a directory of photos, scaled once at load time."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class BackgroundError(RuntimeError):
    pass


@dataclass
class BackgroundSet:
    directory: Path
    images: list[np.ndarray]  # float64 (h, w, 3) in [0, 1], already scaled
    names: list[str]
    scale: float

    def __len__(self) -> int:
        return len(self.images)


def scale_image(im: Image.Image, scale: float) -> Image.Image:
    if scale == 1.0:
        return im
    w, h = im.size
    size = (max(1, round(w * scale)), max(1, round(h * scale)))
    return im.resize(size, Image.BILINEAR)


def load_background_set(directory: str | Path, scale: float = 0.5, crop_size: int = 512) -> BackgroundSet:
    """Decode every PNG/JPEG in ``directory``, scale it bilinearly and check
    that each result can hold a ``crop_size`` square crop."""
    directory = Path(directory)
    if not directory.is_dir():
        raise BackgroundError(f"background directory {directory} does not exist")
    if scale <= 0:
        raise BackgroundError(f"background scale must be positive, got {scale}")
    files = sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise BackgroundError(f"no PNG or JPEG images in {directory}")
    images, names = [], []
    for path in files:
        try:
            with Image.open(path) as im:
                im = scale_image(im.convert("RGB"), scale)
                arr = np.asarray(im, dtype=np.float64) / 255.0
        except (UnidentifiedImageError, OSError) as e:
            raise BackgroundError(f"cannot decode background image {path.name}: {e}") from e
        h, w = arr.shape[:2]
        if h < crop_size or w < crop_size:
            raise BackgroundError(
                f"background image {path.name} is {w}x{h} after scaling by {scale}; "
                f"a {crop_size}x{crop_size} crop does not fit"
            )
        images.append(arr)
        names.append(path.name)
    return BackgroundSet(directory, images, names, scale)
