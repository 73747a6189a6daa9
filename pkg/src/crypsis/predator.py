"""Predators: pre-training on the "find conspicuous disk" (FCD) task, per-agent
memory reservoirs, fine-tuning, starvation and noisy-copy reproduction."""
from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import vision
from .gp import MAX_INIT_TREE_SIZE, random_tree
from .scene import Geometry, place_prey, random_crop
from .texsyn import TEXTURE, DiskRaster, Node, compose, disk_origin, downsample, load_image, render_disk, render_texture, save_png
from .vision import Adam, ConvNetSpec, NetParams

log = logging.getLogger(__name__)

RESERVOIR_SIZE = 500
HISTORY_LENGTH = 20
STARVATION_THRESHOLD = 0.40
MUTATION_NOISE = 0.003
FINE_TUNE_BATCH = 32
FCD_DATASET_SIZE = 20_000
PRETRAIN_EPOCHS = 25  # 20,000 examples x 25 = 500,000 augmented presentations


@dataclass
class LabeledImage:
    image: np.ndarray  # uint8 or float in [0, 1]
    label: np.ndarray  # (x, y) in [0, 1]^2


def as_float_image(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float32) / np.float32(255.0)
    return np.asarray(image, dtype=np.float32)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


class Reservoir:
    """Bounded memory: append until full, then overwrite a random slot."""

    def __init__(self, capacity: int = RESERVOIR_SIZE):
        self.capacity = capacity
        self.items: list[LabeledImage] = []

    def __len__(self) -> int:
        return len(self.items)

    def add(self, item: LabeledImage, rng: np.random.Generator) -> int:
        """Store ``item``; returns the slot it went into."""
        if len(self.items) < self.capacity:
            self.items.append(item)
            return len(self.items) - 1
        slot = int(rng.integers(self.capacity))
        self.items[slot] = item
        return slot

    def minibatch(self, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        k = min(size, len(self.items))
        picks = rng.choice(len(self.items), size=k, replace=False)
        images = np.stack([as_float_image(self.items[i].image) for i in picks])
        labels = np.stack([self.items[i].label for i in picks]).astype(np.float32)
        return images, labels


class PredatorAgent:
    """One predator: network weights, optimizer state, memory and hunting record."""

    def __init__(self, id: int, params: NetParams | None, reservoir_size: int = RESERVOIR_SIZE, history_length: int = HISTORY_LENGTH):
        self.id = id
        self.params = params
        self.optimizer = Adam()
        self.reservoir = Reservoir(reservoir_size)
        self.history: deque[bool] = deque(maxlen=history_length)

    def predict(self, image: np.ndarray) -> np.ndarray:
        return vision.predict(self.params, image)

    def train(self, images: np.ndarray, labels: np.ndarray, rng: np.random.Generator, learning_rate: float) -> float:
        self.params, value = vision.train_step(self.params, images, labels, learning_rate, self.optimizer, rng)
        return value

    def offspring(self, new_id: int, rng: np.random.Generator, magnitude: float = MUTATION_NOISE) -> "PredatorAgent":
        return PredatorAgent(new_id, vision.perturb(self.params, magnitude, rng), self.reservoir.capacity, self.history.maxlen)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(id={self.id}, memory={len(self.reservoir)}, history={list(self.history)})"


class StubPredator(PredatorAgent):
    """Guesses uniformly at random and never learns.  Used to test the step loop."""

    def __init__(self, id: int, rng: np.random.Generator, **kw):
        super().__init__(id, None, **kw)
        self.rng = rng

    def predict(self, image: np.ndarray) -> np.ndarray:
        return self.rng.random(2)

    def train(self, images, labels, rng, learning_rate) -> float:
        return 0.0

    def offspring(self, new_id, rng, magnitude=MUTATION_NOISE) -> "StubPredator":
        child_rng = np.random.default_rng(int(rng.integers(2**63)))
        return StubPredator(new_id, child_rng, reservoir_size=self.reservoir.capacity, history_length=self.history.maxlen)


def init_population(
    pretrained: NetParams, n: int, rng: np.random.Generator, magnitude: float = MUTATION_NOISE
) -> list[PredatorAgent]:
    """``n`` noisy copies of the pre-trained network."""
    if n < 1:
        raise ValueError("need at least one predator")
    return [PredatorAgent(i, vision.perturb(pretrained, magnitude, rng)) for i in range(n)]


def reservoir_add(agent: PredatorAgent, item: LabeledImage, rng: np.random.Generator) -> int:
    return agent.reservoir.add(item, rng)


def fine_tune(
    agent: PredatorAgent,
    rng: np.random.Generator,
    learning_rate: float = vision.FINE_TUNE_LEARNING_RATE,
    batch_size: int = FINE_TUNE_BATCH,
) -> float | None:
    """One training step on a random minibatch from the agent's memory."""
    if not len(agent.reservoir):
        log.warning("predator %d has an empty reservoir; fine-tuning skipped", agent.id)
        return None
    images, labels = agent.reservoir.minibatch(batch_size, rng)
    return agent.train(images, labels, rng, learning_rate)


def record_and_check_starvation(
    agent: PredatorAgent, success: bool, threshold: float = STARVATION_THRESHOLD
) -> bool:
    """Log a hunt; True when a full history shows success below ``threshold``."""
    agent.history.append(bool(success))
    if len(agent.history) < agent.history.maxlen:
        return False
    return sum(agent.history) / len(agent.history) < threshold


def spawn_predator_offspring(
    parents: Sequence[PredatorAgent], new_id: int, rng: np.random.Generator, magnitude: float = MUTATION_NOISE
) -> PredatorAgent:
    if not parents:
        raise ValueError("no parents")
    parent = parents[int(rng.integers(len(parents)))]
    return parent.offspring(new_id, rng, magnitude)


# ---------------------------------------------------------------------------
# FCD dataset


@dataclass
class FcdScene:
    """Everything needed to recompose an FCD image at full resolution."""

    background: np.ndarray
    centers: np.ndarray  # (k, 2) pixels; row 0 is the unaltered disk
    disks: list[DiskRaster]
    # Per muted disk: ("blend", fraction toward background) or ("dither", fraction of pixels dropped)
    muting: list[tuple[str, float]]
    dither_masks: list[np.ndarray | None] = field(default_factory=list)

    def render(self) -> np.ndarray:
        out = compose(self.background, [(self.disks[0], self.centers[0])], self.background.shape[0])
        for disk, center, (kind, amount), keep in zip(self.disks[1:], self.centers[1:], self.muting, self.dither_masks):
            r, c = disk_origin(center, disk.diameter)
            d = disk.diameter
            region = out[r : r + d, c : c + d]
            if kind == "blend":
                m = disk.mask
                region[m] = disk.pixels[m] + amount * (region[m] - disk.pixels[m])
            else:
                m = disk.mask & keep
                region[m] = disk.pixels[m]
        return out


@dataclass
class FcdExample:
    image: np.ndarray  # predator input, float32
    label: np.ndarray  # unaltered disk center, normalized (x, y)
    style: int
    centers: np.ndarray  # all disk centers, pixels
    photo: bool = True  # background is a photo crop rather than a rendered genome
    scene: FcdScene | None = None


def _distinct_uniform(rng: np.random.Generator, lo: float, hi: float, k: int) -> list[float]:
    while True:
        values = [float(v) for v in rng.uniform(lo, hi, k)]
        if len(set(values)) == k:
            return values


def random_texture_background(rng: np.random.Generator, geometry: Geometry, max_tree_size: int = MAX_INIT_TREE_SIZE) -> np.ndarray:
    """A random genome rendered as a full background.

    Rendered at a quarter of the scene resolution and enlarged with pixel
    replication; predators only ever see the image after block averaging.
    """
    genome = random_tree(TEXTURE, max_tree_size, rng)
    low = geometry.scene_size // 4
    img = render_texture(genome, low, extent=geometry.scene_size / geometry.disk_diameter)
    return np.repeat(np.repeat(img, 4, axis=0), 4, axis=1)


def fcd_generate(
    rng: np.random.Generator,
    backgrounds: Sequence[np.ndarray],
    geometry: Geometry = Geometry(),
    style: int | None = None,
    keep_scene: bool = False,
    max_tree_size: int = MAX_INIT_TREE_SIZE,
) -> FcdExample:
    """One labeled "find conspicuous disk" example.

    Style 1: one disk.  Style 2: three different disks.  Style 3: three copies
    of one disk.  In styles 2 and 3 two disks are muted into the background
    by blending or dithering, by different amounts; the label is the center
    of the unaltered disk.
    """
    if style is None:
        style = int(rng.integers(1, 4))
    if style not in (1, 2, 3):
        raise ValueError(f"bad FCD style {style}")
    photo = bool(backgrounds) and rng.random() < 0.5
    if photo:
        background, _, _ = random_crop(backgrounds, rng, geometry.scene_size)
        background = np.array(background, dtype=np.float64)
    else:
        background = random_texture_background(rng, geometry, max_tree_size)

    n = 1 if style == 1 else 3
    centers = place_prey(rng, geometry, n)
    if style == 3:
        disk = render_disk(random_tree(TEXTURE, max_tree_size, rng), geometry.disk_diameter)
        disks = [disk] * 3
    else:
        disks = [render_disk(random_tree(TEXTURE, max_tree_size, rng), geometry.disk_diameter) for _ in range(n)]

    muting: list[tuple[str, float]] = []
    dither_masks: list[np.ndarray | None] = []
    if n == 3:
        blends = _distinct_uniform(rng, 0.2, 0.8, 2)
        dithers = _distinct_uniform(rng, 0.5, 0.9, 2)
        for k in range(2):
            if rng.random() < 0.5:
                muting.append(("blend", blends[k]))
                dither_masks.append(None)
            else:
                muting.append(("dither", dithers[k]))
                dither_masks.append(rng.random(disks[k + 1].mask.shape) >= dithers[k])

    scene = FcdScene(background, centers, disks, muting, dither_masks)
    full = scene.render()
    image = downsample(full, geometry.input_size, geometry.scene_size).astype(np.float32)
    label = centers[0] / geometry.scene_size
    return FcdExample(image, label, style, centers, photo, scene if keep_scene else None)


@dataclass
class FcdDataset:
    images: np.ndarray  # (n, s, s, 3) float32
    labels: np.ndarray  # (n, 2)
    styles: np.ndarray  # (n,)
    centers: np.ndarray  # (n, 3, 2) pixels, NaN-padded for single-disk examples
    photo: np.ndarray | None = None  # (n,) bool background kind, when known

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "FcdDataset":
        photo = None if self.photo is None else self.photo[index]
        return FcdDataset(self.images[index], self.labels[index], self.styles[index], self.centers[index], photo)

    def save(self, path: str | Path) -> None:
        """Compact npz copy, e.g. to cache a generated training set."""
        photo = np.zeros(0, dtype=bool) if self.photo is None else self.photo
        np.savez_compressed(path, images=self.images, labels=self.labels, styles=self.styles,
                            centers=self.centers, photo=photo)

    @classmethod
    def load(cls, path: str | Path) -> "FcdDataset":
        with np.load(path) as z:
            photo = z["photo"] if len(z["photo"]) else None
            return cls(z["images"], z["labels"], z["styles"], z["centers"], photo)


def fcd_dataset(
    n: int,
    rng: np.random.Generator,
    backgrounds: Sequence[np.ndarray],
    geometry: Geometry = Geometry(),
    styles: Sequence[int] | None = None,
    progress: Callable[[int], None] | None = None,
) -> FcdDataset:
    """``n`` independent examples; ``styles`` forces the style of each one."""
    if n < 1:
        raise ValueError("n must be positive")
    if styles is not None and len(styles) != n:
        raise ValueError("need one forced style per example")
    s = geometry.input_size
    images = np.empty((n, s, s, 3), dtype=np.float32)
    labels = np.empty((n, 2))
    style_arr = np.empty(n, dtype=np.int64)
    centers = np.full((n, 3, 2), np.nan)
    photo = np.zeros(n, dtype=bool)
    for i in range(n):
        ex = fcd_generate(rng, backgrounds, geometry, None if styles is None else styles[i])
        images[i], labels[i], style_arr[i], photo[i] = ex.image, ex.label, ex.style, ex.photo
        centers[i, : len(ex.centers)] = ex.centers
        if progress is not None:
            progress(i)
    return FcdDataset(images, labels, style_arr, centers, photo)


def write_fcd_dataset(directory: str | Path, dataset: FcdDataset) -> Path:
    """One PNG per example plus ``manifest.tsv`` (filename, label x, label y, style)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.tsv"
    with open(manifest, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        for i in range(len(dataset)):
            name = f"fcd_{i:06d}.png"
            save_png(directory / name, dataset.images[i])
            w.writerow([name, repr(float(dataset.labels[i, 0])), repr(float(dataset.labels[i, 1])), int(dataset.styles[i])])
    return manifest


def read_fcd_dataset(directory: str | Path) -> FcdDataset:
    directory = Path(directory)
    images, labels, styles = [], [], []
    with open(directory / "manifest.tsv", newline="") as f:
        for name, x, y, style in csv.reader(f, delimiter="\t"):
            images.append(load_image(directory / name).astype(np.float32))
            labels.append((float(x), float(y)))
            styles.append(int(style))
    n = len(labels)
    return FcdDataset(np.stack(images), np.array(labels), np.array(styles), np.full((n, 3, 2), np.nan))


# ---------------------------------------------------------------------------
# Augmentation and pre-training


def apply_augmentation(
    image: np.ndarray, label: np.ndarray, hflip: bool, vflip: bool, quarter_turns: int, jitter: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Flip/rotate the image and move the label with it.

    Labels are (x, y) with x along columns and y along rows, both measured
    in image widths.  One counterclockwise quarter turn maps (x, y) to
    (y, 1 - x).
    """
    x, y = float(label[0]), float(label[1])
    if hflip:
        image = image[:, ::-1]
        x = 1.0 - x
    if vflip:
        image = image[::-1]
        y = 1.0 - y
    k = quarter_turns % 4
    if k:
        image = np.rot90(image, k)
        for _ in range(k):
            x, y = y, 1.0 - x
    image = np.ascontiguousarray(image)
    if jitter is not None:
        image = np.clip(image + np.asarray(jitter, dtype=image.dtype), 0.0, 1.0)
    return image, np.array([x, y])


def augment(image: np.ndarray, label: np.ndarray, rng: np.random.Generator, jitter: float = 0.05):
    hflip, vflip = rng.random(2) < 0.5
    k = int(rng.integers(4))
    shift = rng.uniform(-jitter, jitter, 3).astype(np.float32)
    return apply_augmentation(image, label, bool(hflip), bool(vflip), k, shift)


@dataclass
class PretrainResult:
    params: NetParams
    epoch_losses: list[float]


def pretrain(
    spec: ConvNetSpec,
    dataset: FcdDataset,
    epochs: int,
    rng: np.random.Generator,
    learning_rate: float = vision.PRETRAIN_LEARNING_RATE,
    batch_size: int = 32,
    init: NetParams | None = None,
    checkpoint: str | Path | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> PretrainResult:
    """Train a network on the FCD task with fresh augmentation every epoch."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    params = init.copy() if init is not None else vision.init_params(spec, rng)
    optimizer = Adam()
    losses = []
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = [augment(dataset.images[i], dataset.labels[i], rng) for i in idx]
            images = np.stack([b[0] for b in batch])
            labels = np.stack([b[1] for b in batch]).astype(np.float32)
            params, value = vision.train_step(params, images, labels, learning_rate, optimizer, rng)
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss {value} in epoch {epoch}")
            total += value * len(idx)
            count += len(idx)
        losses.append(total / count)
        log.info("pretrain epoch %d: loss %.5f", epoch + 1, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    if checkpoint is not None:
        vision.save_params(checkpoint, params)
    return PretrainResult(params, losses)
