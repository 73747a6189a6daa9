"""The coevolution step loop: tournaments between three prey and three
predators on a random background crop, then negative selection on both sides."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from . import vision
from .gp import PreyIndividual, PreyPopulation, replace_eaten, tournament_draw
from .predator import (
    LabeledImage,
    PredatorAgent,
    StubPredator,
    fine_tune,
    init_population,
    quantize,
    record_and_check_starvation,
    reservoir_add,
    spawn_predator_offspring,
)
from .scene import Geometry, aim_errors, place_prey, random_crop
from .texsyn import DiskRaster, compose, downsample, render_disk, to_uint8

log = logging.getLogger(__name__)

LABEL_MODES = ("nearest_truth", "own_prediction")
PREDATOR_MODELS = ("net", "stub")


@dataclass
class RunConfig:
    background_dir: str | None = None
    background_scale: float = 0.5
    seed: int = 0
    individuals: int = 400
    subpopulations: int = 20
    predators: int = 40
    max_init_tree_size: int = 100
    min_crossover_tree_size: int = 50
    max_crossover_tree_size: int = 150
    disk_diameter: int = 100
    scene_size: int = 512
    input_size: int = 128
    save_frequency: int = 19
    steps: int = 12_000
    starvation_threshold: float = 0.40
    history_length: int = 20
    reservoir_size: int = 500
    predator_noise: float = 0.003
    jiggle_fraction: float = 0.05
    fine_tune_learning_rate: float = vision.FINE_TUNE_LEARNING_RATE
    fine_tune_batch: int = 32
    label_mode: str = "nearest_truth"
    predator_model: str = "net"
    pretrained: str | None = None
    sqm_trials: int = 10
    sqm_sample: int = 20
    sqm_interval: int = 1000  # 0: only at the start and the end

    def __post_init__(self) -> None:
        for name in ("individuals", "subpopulations", "predators", "max_init_tree_size", "disk_diameter",
                     "scene_size", "input_size", "save_frequency", "history_length", "reservoir_size",
                     "sqm_trials", "fine_tune_batch", "min_crossover_tree_size", "max_crossover_tree_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0 or self.sqm_interval < 0 or self.sqm_sample < 0:
            raise ValueError("steps, sqm_interval and sqm_sample must be non-negative")
        if self.background_scale <= 0:
            raise ValueError("background_scale must be positive")
        if self.individuals % self.subpopulations:
            raise ValueError("individuals must split evenly into subpopulations")
        if self.individuals // self.subpopulations < 3:
            raise ValueError("each subpopulation needs at least 3 prey")
        if self.predators < 3:
            raise ValueError("tournaments need at least 3 predators")
        if self.min_crossover_tree_size > self.max_crossover_tree_size:
            raise ValueError("min crossover tree size exceeds max")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"label_mode must be one of {LABEL_MODES}")
        if self.predator_model not in PREDATOR_MODELS:
            raise ValueError(f"predator_model must be one of {PREDATOR_MODELS}")
        if not 0 < self.starvation_threshold <= 1:
            raise ValueError("starvation_threshold must be in (0, 1]")

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.scene_size, self.disk_diameter, self.input_size)

    def to_items(self) -> list[tuple[str, str]]:
        return [(f.name, str(getattr(self, f.name))) for f in dataclasses.fields(self)]

    @classmethod
    def from_items(cls, items: dict[str, str], base: "RunConfig | None" = None) -> "RunConfig":
        """Build a config from string values, e.g. a parsed key=value file."""
        base = base or cls()
        kinds = {f.name: type(getattr(base, f.name)) for f in dataclasses.fields(cls)}
        values = dataclasses.asdict(base)
        for key, text in items.items():
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            if text in ("None", "") and key in ("background_dir", "pretrained"):
                values[key] = None
            elif kinds[key] is bool:
                values[key] = text.lower() in ("1", "true", "yes")
            elif kinds[key] in (int, float):
                values[key] = kinds[key](text)
            else:
                values[key] = text
        return cls(**values)


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent named random stream derived from the master seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


@dataclass
class TournamentRecord:
    step: int
    deme: int
    background: int
    crop_origin: tuple[int, int]  # (row, col)
    prey_ids: list[int]
    centers: np.ndarray  # (3, 2) pixels
    predator_ids: list[int]
    predictions: np.ndarray  # (3, 2) pixels
    aim_errors: np.ndarray  # (3,) pixels
    ranking: list[int]  # indices into predator_ids, best first
    inside: list[bool]
    eaten_id: int | None = None
    offspring_id: int | None = None
    starved_id: int | None = None
    replacement_id: int | None = None
    image: np.ndarray | None = field(default=None, repr=False)  # full-resolution composite

    @property
    def abandoned(self) -> bool:
        return not any(self.inside)

    def log_line(self) -> str:
        def floats(a):
            return ";".join(",".join(repr(float(v)) for v in row) for row in np.atleast_2d(a))

        def opt(v):
            return "-" if v is None else str(v)

        return "\t".join([
            str(self.step),
            str(self.deme),
            str(self.background),
            f"{self.crop_origin[0]},{self.crop_origin[1]}",
            ",".join(map(str, self.prey_ids)),
            floats(self.centers),
            ",".join(map(str, self.predator_ids)),
            floats(self.predictions),
            ",".join(repr(float(e)) for e in self.aim_errors),
            opt(self.eaten_id),
            opt(self.offspring_id),
            opt(self.starved_id),
            opt(self.replacement_id),
        ])


STEP_LOG_HEADER = "\t".join([
    "step", "deme", "background", "crop_origin", "prey_ids", "centers", "predator_ids",
    "predictions", "aim_errors", "eaten", "offspring", "starved", "replacement",
])


def parse_log_line(line: str) -> dict:
    """Inverse of ``TournamentRecord.log_line`` for replay checks."""
    cols = line.rstrip("\n").split("\t")

    def floats(text):
        return np.array([[float(v) for v in row.split(",")] for row in text.split(";")])

    def opt(text):
        return None if text == "-" else int(text)

    return {
        "step": int(cols[0]),
        "deme": int(cols[1]),
        "background": int(cols[2]),
        "crop_origin": tuple(int(v) for v in cols[3].split(",")),
        "prey_ids": [int(v) for v in cols[4].split(",")],
        "centers": floats(cols[5]),
        "predator_ids": [int(v) for v in cols[6].split(",")],
        "predictions": floats(cols[7]),
        "aim_errors": np.array([float(v) for v in cols[8].split(",")]),
        "eaten": opt(cols[9]),
        "offspring": opt(cols[10]),
        "starved": opt(cols[11]),
        "replacement": opt(cols[12]),
    }


def predict_with(predictor, image: np.ndarray) -> np.ndarray:
    if isinstance(predictor, vision.NetParams):
        return vision.predict(predictor, image)
    return predictor.predict(image)


def sqm(
    prey: PreyIndividual,
    standard,
    rng: np.random.Generator,
    backgrounds: Sequence[np.ndarray],
    geometry: Geometry = Geometry(),
    trials: int = 10,
    disk: DiskRaster | None = None,
) -> float:
    """Fraction of single-prey trials in which ``standard`` misses the disk.

    ``standard`` is a network or anything with a ``predict(image)`` method
    returning a normalized (x, y).
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    disk = disk if disk is not None else render_disk(prey.genome, geometry.disk_diameter)
    failures = 0
    for _ in range(trials):
        crop, _, _ = random_crop(backgrounds, rng, geometry.scene_size)
        center = place_prey(rng, geometry, 1)
        image = compose(crop, [(disk, center[0])], geometry.scene_size)
        small = downsample(image, geometry.input_size, geometry.scene_size)
        guess = np.asarray(predict_with(standard, small.astype(np.float32)), dtype=np.float64) * geometry.scene_size
        if np.hypot(*(guess - center[0])) > geometry.radius:
            failures += 1
    return failures / trials


CROSSHAIR_COLORS = [((0, 0, 0), (255, 255, 255)), ((0, 255, 0), (0, 0, 0)), ((255, 0, 0), (0, 0, 0))]


def annotate(image: np.ndarray, predictions: np.ndarray, ranking: Sequence[int], arm: int = 12) -> Image.Image:
    """Draw a two-tone crosshair at each prediction: best first."""
    im = Image.fromarray(to_uint8(image), mode="RGB")
    draw = ImageDraw.Draw(im)
    for rank, idx in reversed(list(enumerate(ranking))):
        x, y = (float(v) for v in predictions[idx])
        a, b = CROSSHAIR_COLORS[rank]
        for color, width in ((b, 3), (a, 1)):
            draw.line([(x - arm, y), (x + arm, y)], fill=color, width=width)
            draw.line([(x, y - arm), (x, y + arm)], fill=color, width=width)
    return im


class Simulation:
    """Mutable run state: both populations, random streams and the step counter."""

    def __init__(
        self,
        config: RunConfig,
        backgrounds: Sequence[np.ndarray],
        predators: list[PredatorAgent],
        prey: PreyPopulation | None = None,
        standard=None,
    ):
        if not backgrounds:
            raise ValueError("no backgrounds")
        if len(predators) != config.predators:
            raise ValueError(f"expected {config.predators} predators, got {len(predators)}")
        self.config = config
        self.geometry = config.geometry
        self.backgrounds = list(backgrounds)
        s = config.seed
        self.rng_prey = stream(s, "prey")
        self.rng_predator = stream(s, "predator")
        self.rng_crop = stream(s, "crop")
        self.rng_placement = stream(s, "placement")
        self.rng_training = stream(s, "training")
        self.rng_sqm = stream(s, "sqm")
        if prey is None:
            prey = PreyPopulation.random(config.individuals, config.subpopulations, stream(s, "init"), config.max_init_tree_size)
        self.prey = prey
        self.predators = predators
        self.next_predator_id = max(p.id for p in predators) + 1
        self.standard = standard
        self.step_index = 0
        self._disks: dict[int, DiskRaster] = {}

    @classmethod
    def from_config(
        cls, config: RunConfig, backgrounds: Sequence[np.ndarray], pretrained: vision.NetParams | None = None
    ) -> "Simulation":
        rng = stream(config.seed, "predator-init")
        if config.predator_model == "stub":
            predators = [
                StubPredator(i, stream(config.seed, f"stub-{i}"), reservoir_size=config.reservoir_size,
                             history_length=config.history_length)
                for i in range(config.predators)
            ]
        else:
            if pretrained is None:
                raise ValueError("a pre-trained network is required for learning predators")
            if pretrained.spec.input_size != config.input_size:
                raise ValueError(f"pre-trained net expects {pretrained.spec.input_size}px input, run uses {config.input_size}px")
            predators = init_population(pretrained, config.predators, rng, config.predator_noise)
            for p in predators:
                p.reservoir.capacity = config.reservoir_size
                p.history = type(p.history)(maxlen=config.history_length)
        return cls(config, backgrounds, predators, standard=pretrained)

    def disk(self, prey: PreyIndividual) -> DiskRaster:
        d = self._disks.get(prey.id)
        if d is None:
            d = self._disks[prey.id] = render_disk(prey.genome, self.geometry.disk_diameter)
        return d

    def run_tournament(self, keep_image: bool = False) -> TournamentRecord:
        """Compose a scene for one step and score three predators on it."""
        self.step_index += 1
        g = self.geometry
        deme = (self.step_index - 1) % self.prey.n_demes
        prey = tournament_draw(self.prey, deme, self.rng_prey)
        picks = self.rng_predator.choice(len(self.predators), 3, replace=False)
        agents = [self.predators[i] for i in picks]
        crop, bg_index, origin = random_crop(self.backgrounds, self.rng_crop, g.scene_size)
        centers = place_prey(self.rng_placement, g, 3)
        image = compose(crop, [(self.disk(p), c) for p, c in zip(prey, centers)], g.scene_size)
        small = downsample(image, g.input_size, g.scene_size).astype(np.float32)
        predictions = np.array([predict_with(a, small) for a in agents], dtype=np.float64) * g.scene_size
        errors, _ = aim_errors(predictions, centers)
        ranking = [int(i) for i in np.argsort(errors, kind="stable")]
        record = TournamentRecord(
            step=self.step_index,
            deme=deme,
            background=bg_index,
            crop_origin=origin,
            prey_ids=[p.id for p in prey],
            centers=centers,
            predator_ids=[a.id for a in agents],
            predictions=predictions,
            aim_errors=errors,
            ranking=ranking,
            inside=[bool(e <= g.radius) for e in errors],
            image=image if keep_image else None,
        )
        self._prey_in_play = prey
        self._agents_in_play = agents
        self._small = small
        return record

    def resolve_prey(self, record: TournamentRecord) -> None:
        """The best predator eats the prey its estimate falls inside, if any."""
        best = record.ranking[0]
        if not record.inside[best]:
            return  # step abandoned for prey: nobody eaten
        _, nearest = aim_errors(record.predictions[best], record.centers)
        k = int(nearest[0])
        prey = self._prey_in_play
        eaten = prey[k]
        parents = [p for i, p in enumerate(prey) if i != k]
        child = replace_eaten(
            self.prey, eaten, parents[0], parents[1], self.rng_prey,
            self.config.min_crossover_tree_size, self.config.max_crossover_tree_size, self.config.jiggle_fraction,
        )
        self._disks.pop(eaten.id, None)
        record.eaten_id, record.offspring_id = eaten.id, child.id

    def resolve_predators(self, record: TournamentRecord) -> None:
        """Hunting records, memory, fine-tuning, then starvation of the worst."""
        cfg = self.config
        agents = self._agents_in_play
        stored = quantize(self._small)
        _, nearest = aim_errors(record.predictions, record.centers)
        starved = [False] * 3
        for i, agent in enumerate(agents):
            starved[i] = record_and_check_starvation(agent, record.inside[i], cfg.starvation_threshold)
            if cfg.label_mode == "nearest_truth":
                target = record.centers[nearest[i]]
            else:
                target = record.predictions[i]
            label = np.asarray(target, dtype=np.float64) / cfg.scene_size
            reservoir_add(agent, LabeledImage(stored, label), self.rng_training)
            fine_tune(agent, self.rng_training, cfg.fine_tune_learning_rate, cfg.fine_tune_batch)

        worst = record.ranking[-1]
        if not record.inside[worst] and starved[worst]:
            parents = [a for i, a in enumerate(agents) if i != worst]
            child = spawn_predator_offspring(parents, self.next_predator_id, self.rng_predator, cfg.predator_noise)
            self.next_predator_id += 1
            slot = next(i for i, a in enumerate(self.predators) if a is agents[worst])
            self.predators[slot] = child
            record.starved_id, record.replacement_id = agents[worst].id, child.id

    def step(self, keep_image: bool = False) -> TournamentRecord:
        record = self.run_tournament(keep_image)
        self.resolve_prey(record)
        self.resolve_predators(record)
        return record

    def sample_sqm(self, n: int | None = None) -> tuple[list[int], list[float]]:
        """SQM of ``n`` prey drawn without replacement from the whole population."""
        if self.standard is None:
            raise ValueError("SQM needs a standard (pre-trained) predator")
        members = list(self.prey)
        n = min(self.config.sqm_sample if n is None else n, len(members))
        picks = self.rng_sqm.choice(len(members), n, replace=False)
        chosen = [members[i] for i in picks]
        scores = [
            sqm(p, self.standard, self.rng_sqm, self.backgrounds, self.geometry, self.config.sqm_trials, self.disk(p))
            for p in chosen
        ]
        return [p.id for p in chosen], scores


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, config: RunConfig, extra: dict[str, str] | None = None) -> Path:
    """Effective config as key=value lines, then a sha256 line per artifact."""
    lines = [f"config.{k}={v}" for k, v in config.to_items()]
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    manifest = out_dir / "manifest"
    for path in sorted(p for p in out_dir.rglob("*") if p.is_file() and p != manifest):
        lines.append(f"sha256.{path.relative_to(out_dir).as_posix()}={_sha256(path)}")
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = value
    return out


def save_checkpoints(sim: Simulation, out_dir: Path, tag: str) -> None:
    ck = out_dir / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    sim.prey.save(ck / f"prey_{tag}.txt")
    lines = []
    for agent in sim.predators:
        history = "".join("1" if h else "0" for h in agent.history)
        lines.append(f"{agent.id}\t{len(agent.reservoir)}\t{history}")
        if agent.params is not None and tag == "final":
            vision.save_params(ck / f"predator_{agent.id}.net", agent.params)
    (ck / f"predators_{tag}.txt").write_text("\n".join(lines) + "\n")


@dataclass
class RunSummary:
    steps: int
    eaten: int
    abandoned: int
    starved: int
    sqm: list[tuple[int, float]]  # (step, mean SQM)
    abandoned_flags: list[bool]
    crossover_fallbacks: int


def run(
    config: RunConfig,
    out_dir: str | Path,
    backgrounds: Sequence[np.ndarray],
    pretrained: vision.NetParams | None = None,
    sim: Simulation | None = None,
) -> RunSummary:
    """Execute ``config.steps`` steps, writing logs and checkpoints under ``out_dir``."""
    out = Path(out_dir)
    (out / "visual").mkdir(parents=True, exist_ok=True)
    sim = sim or Simulation.from_config(config, backgrounds, pretrained)
    save_checkpoints(sim, out, "initial")
    summary = RunSummary(0, 0, 0, 0, [], [], 0)

    def do_sqm(sqm_log):
        ids, scores = sim.sample_sqm()
        mean = float(np.mean(scores)) if scores else float("nan")
        sqm_log.write(f"{sim.step_index}\t{','.join(map(str, ids))}\t{','.join(repr(s) for s in scores)}\t{mean!r}\n")
        sqm_log.flush()
        summary.sqm.append((sim.step_index, mean))
        log.info("step %d: mean SQM %.3f", sim.step_index, mean)

    try:
        with open(out / "steps.log", "w") as steps_log, open(out / "sqm.log", "w") as sqm_log:
            steps_log.write(STEP_LOG_HEADER + "\n")
            sqm_log.write("step\tprey_ids\tsqm\tmean_sqm\n")
            if sim.standard is not None:
                do_sqm(sqm_log)
            for _ in range(config.steps):
                save = (sim.step_index + 1) % config.save_frequency == 0
                record = sim.step(keep_image=save)
                steps_log.write(record.log_line() + "\n")
                summary.steps += 1
                summary.eaten += record.eaten_id is not None
                summary.abandoned += record.abandoned
                summary.starved += record.starved_id is not None
                summary.abandoned_flags.append(record.abandoned)
                if save:
                    annotate(record.image, record.predictions, record.ranking).save(
                        out / "visual" / f"step_{record.step:06d}.png"
                    )
                if sim.standard is not None and (
                    (config.sqm_interval and record.step % config.sqm_interval == 0) or record.step == config.steps
                ):
                    if not summary.sqm or summary.sqm[-1][0] != record.step:
                        do_sqm(sqm_log)
                if record.step % 100 == 0:
                    log.info("step %d: %d eaten, %d abandoned, %d starved", record.step, summary.eaten,
                             summary.abandoned, summary.starved)
    finally:
        if summary.steps:
            save_checkpoints(sim, out, "final")
        summary.crossover_fallbacks = sim.prey.fallback_count
        write_manifest(out, config, {
            "result.steps": str(summary.steps),
            "result.eaten": str(summary.eaten),
            "result.abandoned": str(summary.abandoned),
            "result.starved": str(summary.starved),
            "result.crossover_fallbacks": str(summary.crossover_fallbacks),
        })
    return summary
