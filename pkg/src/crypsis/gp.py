"""Strongly typed genetic programming over texture trees.

Steady-state evolution: the prey population never changes size.  Each
tournament draws three prey from one deme; the eaten one is replaced, in
place, by a crossover+mutation offspring of the other two.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np

from .texsyn import (
    CONSTANT_ARITY,
    CONSTANT_RANGES,
    FUNCTION_SET,
    TEXTURE,
    GenomeError,
    Node,
    OperatorSignature,
    parse_expression,
    to_expression,
)

log = logging.getLogger(__name__)

MAX_INIT_TREE_SIZE = 100
MIN_CROSSOVER_TREE_SIZE = 50
MAX_CROSSOVER_TREE_SIZE = 150
CROSSOVER_ATTEMPTS = 50
JIGGLE_FRACTION = 0.05


@lru_cache(maxsize=None)
def min_size(type_name: str) -> int:
    """Smallest tree returning ``type_name``."""
    terminals = [s for s in FUNCTION_SET.values() if s.return_type == type_name and s.is_terminal]
    if not terminals:
        raise GenomeError(f"function set has no terminal for type {type_name}")
    return 1


def op_min_size(sig: OperatorSignature) -> int:
    return 1 + sum(min_size(t) for t in sig.param_types)


def _random_constant(type_name: str, rng: np.random.Generator) -> tuple[float, ...]:
    lo, hi = CONSTANT_RANGES[type_name]
    return tuple(float(v) for v in rng.uniform(lo, hi, CONSTANT_ARITY[type_name]))


@lru_cache(maxsize=None)
def _growable_slots(sig: OperatorSignature) -> tuple[int, ...]:
    """Argument slots whose type has a non-terminal operator."""
    return tuple(
        i for i, t in enumerate(sig.param_types)
        if any(s.return_type == t and not s.is_terminal for s in FUNCTION_SET.values())
    )


def _grow(type_name: str, budget: int, rng: np.random.Generator) -> Node:
    # Operators with no growable slot would waste a large budget.
    candidates = [
        s for s in FUNCTION_SET.values()
        if s.return_type == type_name and not s.is_terminal and op_min_size(s) <= budget
        and (_growable_slots(s) or op_min_size(s) >= budget - 2)
    ]
    if not candidates:
        candidates = [s for s in FUNCTION_SET.values() if s.return_type == type_name and s.is_terminal]
        if not candidates:
            raise GenomeError(f"function set has no terminal for type {type_name}")
    sig = candidates[rng.integers(len(candidates))]
    if sig.is_terminal:
        return Node(sig.name, (), _random_constant(sig.constant_type, rng))

    # Share the spare budget among the slots that can grow beyond a leaf.
    spare = budget - op_min_size(sig)
    growable = _growable_slots(sig)
    extra = [0] * len(sig.param_types)
    if growable and spare > 0:
        cuts = np.sort(rng.integers(0, spare + 1, len(growable) - 1))
        parts = np.diff(np.concatenate([[0], cuts, [spare]]))
        for slot, part in zip(growable, parts):
            extra[slot] = int(part)
    children = tuple(
        _grow(t, min_size(t) + extra[i], rng) for i, t in enumerate(sig.param_types)
    )
    return Node(sig.name, children)


def random_tree(return_type: str, max_size: int, rng: np.random.Generator) -> Node:
    """Random type-correct tree of at most ``max_size`` nodes."""
    if max_size < 1:
        raise ValueError("max_size must be at least 1")
    return _grow(return_type, max_size, rng)


def tree_size(genome: Node) -> int:
    """Node count, constants included.  This is the size that crossover bounds."""
    return genome.size


def texture_size(genome: Node) -> int:
    """Count of Texture-valued nodes only: operators and solid colors, not
    their numeric arguments."""
    return (genome.return_type == TEXTURE) + sum(texture_size(c) for c in genome.children)


def iter_subtrees(node: Node, path: tuple[int, ...] = ()) -> Iterator[tuple[tuple[int, ...], Node]]:
    """Pre-order (path, subtree) pairs; a path is a sequence of child indices."""
    yield path, node
    for i, child in enumerate(node.children):
        yield from iter_subtrees(child, path + (i,))


def subtree_at(node: Node, path: tuple[int, ...]) -> Node:
    for i in path:
        node = node.children[i]
    return node


def replace_at(node: Node, path: tuple[int, ...], new: Node) -> Node:
    if not path:
        return new
    i = path[0]
    children = list(node.children)
    children[i] = replace_at(children[i], path[1:], new)
    return Node(node.op, tuple(children), node.value)


def crossover(
    recipient: Node,
    donor: Node,
    min_size: int = MIN_CROSSOVER_TREE_SIZE,
    max_size: int = MAX_CROSSOVER_TREE_SIZE,
    rng: np.random.Generator | None = None,
    attempts: int = CROSSOVER_ATTEMPTS,
) -> tuple[Node, bool]:
    """Replace a random recipient subtree with a same-typed random donor subtree.

    Crossover points are redrawn up to ``attempts`` times until the offspring
    size lands in ``[min_size, max_size]``.  If no draw does, the draw closest
    to the bounds is used and the second return value is ``True``.
    """
    rng = rng if rng is not None else np.random.default_rng()
    spots = list(iter_subtrees(recipient))
    by_type: dict[str, list[Node]] = {}
    for _, sub in iter_subtrees(donor):
        by_type.setdefault(sub.return_type, []).append(sub)

    best = None
    best_gap = math.inf
    for _ in range(attempts):
        path, old = spots[rng.integers(len(spots))]
        pool = by_type.get(old.return_type)
        if not pool:
            continue
        new = pool[rng.integers(len(pool))]
        size = recipient.size - old.size + new.size
        gap = max(min_size - size, size - max_size, 0)
        if gap == 0:
            return replace_at(recipient, path, new), False
        if gap < best_gap:
            best, best_gap = (path, new), gap
    if best is None:
        # Only possible when no recipient node type occurs in the donor.
        log.info("crossover fallback: no type-compatible subtree, recipient copied")
        return recipient, True
    log.info("crossover fallback: no offspring size in [%d, %d] after %d draws", min_size, max_size, attempts)
    return replace_at(recipient, best[0], best[1]), True


def jiggle_value(type_name: str, value: tuple[float, ...], offsets) -> tuple[float, ...]:
    """Add ``offsets`` to a constant and clip back into its type's range."""
    lo, hi = CONSTANT_RANGES[type_name]
    return tuple(float(min(hi, max(lo, v + o))) for v, o in zip(value, offsets))


def mutate_leaves(genome: Node, rng: np.random.Generator, jiggle_fraction: float = JIGGLE_FRACTION) -> Node:
    """Perturb every constant by a zero-mean offset of at most ``jiggle_fraction`` of its range."""
    if genome.value is not None:
        ctype = genome.signature.constant_type
        lo, hi = CONSTANT_RANGES[ctype]
        offsets = rng.uniform(-1.0, 1.0, len(genome.value)) * jiggle_fraction * (hi - lo)
        return Node(genome.op, (), jiggle_value(ctype, genome.value, offsets))
    return Node(genome.op, tuple(mutate_leaves(c, rng, jiggle_fraction) for c in genome.children))


# ---------------------------------------------------------------------------
# Population


@dataclass
class PreyIndividual:
    genome: Node
    id: int
    deme: int


class PreyPopulation:
    """Fixed-size prey population split into equal, isolated demes."""

    def __init__(self, demes: list[list[PreyIndividual]], next_id: int | None = None):
        if not demes or any(len(d) != len(demes[0]) for d in demes):
            raise ValueError("demes must be nonempty and of equal size")
        self.demes = demes
        ids = [p.id for d in demes for p in d]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate prey ids")
        self.next_id = max(ids) + 1 if next_id is None else next_id
        self.fallback_count = 0

    @classmethod
    def random(
        cls,
        size: int,
        n_demes: int,
        rng: np.random.Generator,
        max_init_size: int = MAX_INIT_TREE_SIZE,
    ) -> "PreyPopulation":
        if n_demes < 1 or size % n_demes:
            raise ValueError(f"population {size} does not split into {n_demes} equal demes")
        per = size // n_demes
        demes = [
            [PreyIndividual(random_tree(TEXTURE, max_init_size, rng), k * per + i, k) for i in range(per)]
            for k in range(n_demes)
        ]
        return cls(demes)

    @property
    def n_demes(self) -> int:
        return len(self.demes)

    def __len__(self) -> int:
        return sum(len(d) for d in self.demes)

    def __iter__(self) -> Iterator[PreyIndividual]:
        for d in self.demes:
            yield from d

    def new_id(self) -> int:
        i = self.next_id
        self.next_id += 1
        return i

    def fingerprint(self) -> tuple:
        return tuple((p.id, p.deme, p.genome) for p in self)

    def to_text(self) -> str:
        return "".join(f"{p.id}\t{p.deme}\t{to_expression(p.genome)}\n" for p in self)

    @classmethod
    def from_text(cls, text: str) -> "PreyPopulation":
        rows = []
        for line in text.splitlines():
            if line.strip():
                pid, deme, expr = line.split("\t", 2)
                rows.append(PreyIndividual(parse_expression(expr), int(pid), int(deme)))
        n_demes = max(r.deme for r in rows) + 1
        demes: list[list[PreyIndividual]] = [[] for _ in range(n_demes)]
        for r in rows:
            demes[r.deme].append(r)
        return cls(demes)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "PreyPopulation":
        return cls.from_text(Path(path).read_text())


def tournament_draw(pop: PreyPopulation, deme: int, rng: np.random.Generator) -> list[PreyIndividual]:
    """Three distinct members of one deme, uniformly without replacement."""
    members = pop.demes[deme]
    if len(members) < 3:
        raise ValueError(f"deme {deme} has {len(members)} members; tournaments need 3")
    return [members[i] for i in rng.choice(len(members), 3, replace=False)]


def replace_eaten(
    pop: PreyPopulation,
    eaten: PreyIndividual,
    parent_a: PreyIndividual,
    parent_b: PreyIndividual,
    rng: np.random.Generator,
    min_size: int = MIN_CROSSOVER_TREE_SIZE,
    max_size: int = MAX_CROSSOVER_TREE_SIZE,
    jiggle_fraction: float = JIGGLE_FRACTION,
) -> PreyIndividual:
    """Swap ``eaten`` for an offspring of the two parents, in the same deme slot."""
    if not eaten.deme == parent_a.deme == parent_b.deme:
        raise ValueError("eaten prey and parents must share a deme")
    members = pop.demes[eaten.deme]
    slot = next(i for i, p in enumerate(members) if p is eaten)
    if rng.random() < 0.5:
        parent_a, parent_b = parent_b, parent_a
    genome, fell_back = crossover(parent_a.genome, parent_b.genome, min_size, max_size, rng)
    if fell_back:
        pop.fallback_count += 1
    child = PreyIndividual(mutate_leaves(genome, rng, jiggle_fraction), pop.new_id(), eaten.deme)
    members[slot] = child
    return child
