"""Tournament image geometry: background crops, prey placement, aim error."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class Geometry:
    scene_size: int = 512  # tournament image edge, pixels
    disk_diameter: int = 100
    input_size: int = 128  # predator input edge, pixels
    # Prey centers keep at least this far from the image center.
    center_exclusion: float = 100.0

    def __post_init__(self) -> None:
        if self.scene_size % self.input_size:
            raise ValueError("scene size must be a multiple of the predator input size")
        if self.disk_diameter < 1 or self.disk_diameter > self.scene_size:
            raise ValueError("bad disk diameter")

    @property
    def radius(self) -> float:
        return self.disk_diameter / 2.0

    @property
    def image_center(self) -> np.ndarray:
        return np.array([self.scene_size / 2.0, self.scene_size / 2.0])


def random_crop(
    backgrounds: Sequence[np.ndarray], rng: np.random.Generator, size: int = 512
) -> tuple[np.ndarray, int, tuple[int, int]]:
    """Uniformly chosen image, then a uniformly placed ``size`` x ``size`` window.

    Backgrounds are expected already scaled.  Returns (crop, image index,
    (row, col) of the window origin).
    """
    if not backgrounds:
        raise ValueError("no background images")
    index = int(rng.integers(len(backgrounds)))
    image = backgrounds[index]
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"background {index} is {w}x{h}, smaller than a {size}x{size} crop")
    row = int(rng.integers(h - size + 1))
    col = int(rng.integers(w - size + 1))
    return image[row : row + size, col : col + size], index, (row, col)


def placement_ok(centers: np.ndarray, geometry: Geometry) -> bool:
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    r = geometry.radius
    if np.any(centers < r) or np.any(centers > geometry.scene_size - r):
        return False
    if np.any(np.hypot(*(centers - geometry.image_center).T) < geometry.center_exclusion):
        return False
    for i in range(len(centers)):
        for j in range(i + 1, len(centers)):
            if np.hypot(*(centers[i] - centers[j])) < geometry.disk_diameter:
                return False
    return True


def place_prey(
    rng: np.random.Generator, geometry: Geometry = Geometry(), n: int = 3, max_tries: int = 10_000
) -> np.ndarray:
    """``n`` disk centers (x, y) in pixels: inside the image, away from the
    image center and not overlapping each other.

    Whole sets are drawn and rejected, so accepted sets are uniform over all
    valid grid-aligned placements.
    """
    d = geometry.disk_diameter
    span = geometry.scene_size - d + 1
    for _ in range(max_tries):
        centers = rng.integers(span, size=(n, 2)) + d / 2.0
        if placement_ok(centers, geometry):
            return centers
    raise PlacementError(f"no valid placement of {n} prey after {max_tries} tries")


def aim_errors(predictions: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance from each prediction to its nearest center, and that center's index."""
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1, 2)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    d = np.hypot(
        predictions[:, None, 0] - centers[None, :, 0],
        predictions[:, None, 1] - centers[None, :, 1],
    )
    nearest = np.argmin(d, axis=1)
    return d[np.arange(len(predictions)), nearest], nearest


def noise_background(
    size: int,
    rng: np.random.Generator,
    feature_px: float = 48.0,
    octaves: int = 3,
    palette: np.ndarray | None = None,
) -> np.ndarray:
    """Stationary multi-octave gradient-noise image with a 3-color palette.

    Patch statistics are the same everywhere, which makes it an "easy"
    environment for camouflage.  Returns float64 (size, size, 3) in [0, 1].
    """
    from .texsyn import gradient_noise

    if palette is None:
        palette = rng.uniform(0.1, 0.9, (3, 3))
    palette = np.asarray(palette, dtype=np.float64)
    c = np.arange(size) + 0.5
    xx, yy = np.meshgrid(c, c)

    def fractal(offset):
        total = np.zeros_like(xx)
        amp, norm = 1.0, 0.0
        for o in range(octaves):
            f = (2.0**o) / feature_px
            total += amp * gradient_noise(xx * f + offset[0], yy * f + offset[1])
            norm += amp
            amp *= 0.5
        return np.clip(0.5 + total / norm, 0.0, 1.0)

    a = fractal(rng.uniform(0, 200, 2))[..., None]
    b = fractal(rng.uniform(0, 200, 2))[..., None]
    return (1 - b) * ((1 - a) * palette[0] + a * palette[1]) + b * palette[2]
