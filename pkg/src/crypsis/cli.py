"""Command line entry point: ``crypsis {pretrain,run,sqm,render}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import vision
from .backgrounds import BackgroundError, load_background_set
from .gp import PreyPopulation
from .predator import FCD_DATASET_SIZE, PRETRAIN_EPOCHS, fcd_dataset, pretrain, write_fcd_dataset
from .scene import Geometry
from .sim import RunConfig, Simulation, run, sqm, stream
from .texsyn import GenomeError, parse_expression, render_disk, save_png

log = logging.getLogger("crypsis")

# CLI flag -> RunConfig field, for flags shared with the config file.
RUN_FLAGS = {
    "background_scale": float,
    "seed": int,
    "individuals": int,
    "subpopulations": int,
    "predators": int,
    "max_init_tree_size": int,
    "min_crossover_tree_size": int,
    "max_crossover_tree_size": int,
    "steps": int,
    "save_frequency": int,
    "sqm_interval": int,
    "sqm_sample": int,
    "sqm_trials": int,
    "label_mode": str,
    "predator_model": str,
    "input_size": int,
}


def read_config_file(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment.  Keys may use dashes."""
    items = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        items[key.replace("-", "_")] = value
    return items


def _common(p: argparse.ArgumentParser, background_required: bool = True) -> None:
    p.add_argument("-b", "--background-dir", required=background_required, help="directory of background photos")
    p.add_argument("-o", "--output-dir", default=".", help="where artifacts go (default: .)")
    p.add_argument("-s", "--background-scale", type=float, default=None, help="scale applied to backgrounds (default 0.5)")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crypsis", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="generate an FCD dataset and pre-train the predator network")
    _common(p)
    p.add_argument("--examples", type=int, default=FCD_DATASET_SIZE)
    p.add_argument("--epochs", type=int, default=PRETRAIN_EPOCHS)
    p.add_argument("--input-size", type=int, default=128)
    p.add_argument("--base-filters", type=int, default=16)
    p.add_argument("--checkpoint", default="pretrained.net", help="file name under the output directory")
    p.add_argument("--save-dataset", action="store_true", help="also write the FCD images and manifest")

    p = sub.add_parser("run", help="coevolution run")
    _common(p)
    p.add_argument("--config", help="key=value file; command line flags take precedence")
    p.add_argument("--individuals", type=int)
    p.add_argument("--subpopulations", type=int)
    p.add_argument("--max-init-tree-size", type=int)
    p.add_argument("--min-crossover-tree-size", type=int)
    p.add_argument("--max-crossover-tree-size", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--predators", type=int)
    p.add_argument("--save-frequency", type=int)
    p.add_argument("--sqm-interval", type=int)
    p.add_argument("--sqm-sample", type=int)
    p.add_argument("--sqm-trials", type=int)
    p.add_argument("--label-mode", choices=("nearest_truth", "own_prediction"))
    p.add_argument("--predator-model", choices=("net", "stub"), help="'stub' guesses at random and never learns")
    p.add_argument("--input-size", type=int)
    p.add_argument("--pretrained", help="pre-trained network checkpoint")
    p.add_argument("--window-width", type=int, help="accepted for compatibility; there is no window")
    p.add_argument("--window-height", type=int, help="accepted for compatibility; there is no window")

    p = sub.add_parser("sqm", help="static quality metric of a saved prey population")
    _common(p)
    p.add_argument("--population", required=True, help="prey population checkpoint")
    p.add_argument("--pretrained", required=True)
    p.add_argument("--trials", type=int, default=10)

    p = sub.add_parser("render", help="render saved genomes to PNG disks")
    p.add_argument("genomes", nargs="+", help="population checkpoints or files holding one expression")
    p.add_argument("-o", "--output-dir", default=".")
    p.add_argument("--diameter", type=int, default=100)
    return parser


def effective_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then command line flags."""
    items = read_config_file(args.config) if args.config else {}
    for name in RUN_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            items[name] = str(value)
    if args.background_dir is not None:
        items["background_dir"] = str(args.background_dir)
    if args.pretrained is not None:
        items["pretrained"] = str(args.pretrained)
    # Crossover bounds follow the initial tree size unless given.
    if "max_init_tree_size" in items:
        m = int(items["max_init_tree_size"])
        items.setdefault("min_crossover_tree_size", str(round(m * 0.5)))
        items.setdefault("max_crossover_tree_size", str(round(m * 1.5)))
    return RunConfig.from_items(items)


def cmd_pretrain(args) -> int:
    scale = 0.5 if args.background_scale is None else args.background_scale
    seed = 0 if args.seed is None else args.seed
    geometry = Geometry(input_size=args.input_size)
    bgs = load_background_set(args.background_dir, scale, geometry.scene_size)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = stream(seed, "dataset")
    log.info("generating %d FCD examples", args.examples)
    data = fcd_dataset(args.examples, rng, bgs.images, geometry)
    if args.save_dataset:
        write_fcd_dataset(out / "fcd", data)
    spec = vision.ConvNetSpec.desk(args.input_size, args.base_filters)
    result = pretrain(spec, data, args.epochs, stream(seed, "pretrain"), checkpoint=out / args.checkpoint)
    with open(out / "pretrain.log", "w") as f:
        for i, value in enumerate(result.epoch_losses, 1):
            f.write(f"{i}\t{value!r}\n")
    print(f"wrote {out / args.checkpoint}")
    return 0


def cmd_run(args) -> int:
    if args.window_width is not None or args.window_height is not None:
        log.warning("window width/height are ignored: this simulator has no display window")
    config = effective_config(args)
    bgs = load_background_set(config.background_dir, config.background_scale, config.scene_size)
    pretrained = None
    if config.predator_model == "net":
        if not config.pretrained:
            raise SystemExit("crypsis run: error: --pretrained is required unless --predator-model stub")
        pretrained = vision.load_params(config.pretrained)
    summary = run(config, args.output_dir, bgs.images, pretrained)
    print(f"{summary.steps} steps: {summary.eaten} eaten, {summary.abandoned} abandoned, {summary.starved} starved")
    return 0


def cmd_sqm(args) -> int:
    scale = 0.5 if args.background_scale is None else args.background_scale
    seed = 0 if args.seed is None else args.seed
    standard = vision.load_params(args.pretrained)
    geometry = Geometry(input_size=standard.spec.input_size)
    bgs = load_background_set(args.background_dir, scale, geometry.scene_size)
    pop = PreyPopulation.load(args.population)
    rng = stream(seed, "sqm")
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    scores = []
    with open(out / "sqm_scores.tsv", "w") as f:
        for prey in pop:
            s = sqm(prey, standard, rng, bgs.images, geometry, args.trials)
            scores.append(s)
            f.write(f"{prey.id}\t{s!r}\n")
    print(f"mean SQM {np.mean(scores):.4f} over {len(scores)} prey")
    return 0


def read_genomes(path: Path) -> list[tuple[str, object]]:
    text = path.read_text()
    first = text.strip().splitlines()[0] if text.strip() else ""
    if "\t" in first:
        return [(f"prey_{p.id}", p.genome) for p in PreyPopulation.from_text(text)]
    return [(path.stem, parse_expression(text.strip()))]


def cmd_render(args) -> int:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in args.genomes:
        for stem, genome in read_genomes(Path(name)):
            save_png(out / f"{stem}.png", render_disk(genome, args.diameter).pixels)
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "run": cmd_run, "sqm": cmd_sqm, "render": cmd_render}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (BackgroundError, GenomeError, ValueError, OSError) as e:
        print(f"crypsis {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
