from __future__ import annotations

import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crypsis import gp
from crypsis.gp import (
    PreyPopulation,
    crossover,
    iter_subtrees,
    jiggle_value,
    mutate_leaves,
    random_tree,
    replace_eaten,
    texture_size,
    tournament_draw,
    tree_size,
)
from crypsis.texsyn import build, constant, uniform

from oracles import count_nodes, leaves, type_of

BLUE = uniform(0.0, 0.0, 1.0)
YELLOW = uniform(1.0, 0.9, 0.0)


def spots_tree():
    return build("LotsOfSpots", *(constant("Float01", v) for v in (0.7, 0.05, 0.15, 0.2, 0.02)), BLUE, YELLOW)


def stripes_tree():
    return build("Grating", constant("Point2", 0.0, 0.0), uniform(1.0, 0.0, 0.0),
                 constant("Point2", 0.1, 0.05), uniform(1.0), constant("Float01", 0.2), constant("Float01", 0.5))


def test_random_tree_respects_size_and_type():
    rng = np.random.default_rng(0)
    sizes = []
    for _ in range(300):
        g = random_tree("Texture", 100, rng)
        assert type_of(g) == "Texture"
        assert tree_size(g) <= 100
        sizes.append(tree_size(g))
    # Trees should use most of the budget, not collapse to a leaf.
    assert np.mean(sizes) > 60


@given(st.integers(1, 200), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_random_tree_bound_holds_for_any_budget(max_size, seed):
    g = random_tree("Texture", max_size, np.random.default_rng(seed))
    assert 1 <= tree_size(g) <= max_size
    assert type_of(g) == "Texture"


@pytest.mark.parametrize("t", ["Color", "Point2", "Float01", "FloatPlus", "Angle"])
def test_random_tree_for_other_types(t):
    assert type_of(random_tree(t, 10, np.random.default_rng(1))) == t


def test_random_tree_is_deterministic():
    a = random_tree("Texture", 100, np.random.default_rng(42))
    b = random_tree("Texture", 100, np.random.default_rng(42))
    assert a == b


def test_random_tree_rejects_zero_budget():
    with pytest.raises(ValueError):
        random_tree("Texture", 0, np.random.default_rng(0))


def test_tree_size_counts():
    assert tree_size(uniform(0.5)) == 1
    rng = np.random.default_rng(3)
    for _ in range(100):
        g = random_tree("Texture", 100, rng)
        assert tree_size(g) == count_nodes(g)


def test_spots_tree_sizes():
    # One operator, two color leaves and five numeric arguments.
    assert tree_size(spots_tree()) == 8
    # Counting only texture-valued nodes gives operator + two colors.
    assert texture_size(spots_tree()) == 3


def test_crossover_can_replace_blue_with_stripes():
    """Spots recipient, stripes donor: blue spots become striped spots."""
    want = build("LotsOfSpots", *spots_tree().children[:5], stripes_tree(), YELLOW)
    found = False
    for seed in range(500):
        child, _ = crossover(spots_tree(), stripes_tree(), 1, 100, np.random.default_rng(seed))
        if child == want:
            found = True
            break
    assert found


def test_crossover_on_single_leaves_returns_parent():
    leaf = uniform(0.3)
    child, fell_back = crossover(leaf, leaf, 1, 1, np.random.default_rng(0))
    assert child == leaf and not fell_back


def test_crossover_leaves_parents_intact_and_types_correct():
    rng = np.random.default_rng(4)
    for _ in range(300):
        a = random_tree("Texture", 100, rng)
        b = random_tree("Texture", 100, rng)
        a_text, b_text = str(a), str(b)
        child, fell_back = crossover(a, b, 50, 150, rng)
        assert str(a) == a_text and str(b) == b_text
        assert type_of(child) == "Texture"
        if not fell_back:
            assert 50 <= tree_size(child) <= 150


def test_crossover_offspring_is_recipient_with_one_subtree_swapped():
    rng = np.random.default_rng(5)
    a = random_tree("Texture", 100, rng)
    b = random_tree("Texture", 100, rng)
    child, _ = crossover(a, b, 1, 1000, rng)
    donor_subtrees = {s for _, s in iter_subtrees(b)}
    matches = 0
    for path, old in iter_subtrees(a):
        try:
            new = gp.subtree_at(child, path)
        except IndexError:
            continue
        if gp.replace_at(a, path, new) == child and new in donor_subtrees and new.return_type == old.return_type:
            matches += 1
    assert matches >= 1


def test_crossover_fallback_is_flagged_and_logged(caplog):
    # Bounds that no offspring of two 3-node trees can meet.
    a = build("Add", uniform(0.1), uniform(0.2))
    with caplog.at_level(logging.INFO, logger="crypsis.gp"):
        child, fell_back = crossover(a, a, 50, 150, np.random.default_rng(0))
    assert fell_back
    assert type_of(child) == "Texture"
    assert "fallback" in caplog.text


def test_jiggle_clamps():
    assert jiggle_value("Float01", (0.98,), (0.05,)) == (1.0,)
    assert jiggle_value("Float01", (0.02,), (-0.05,)) == (0.0,)
    assert jiggle_value("FloatPlus", (5.0,), (0.2,)) == (5.2,)


def test_mutation_keeps_shape_and_ranges():
    rng = np.random.default_rng(6)
    for _ in range(300):
        g = random_tree("Texture", 100, rng)
        m = mutate_leaves(g, rng)
        assert tree_size(m) == tree_size(g)
        assert [n.op for _, n in iter_subtrees(m)] == [n.op for _, n in iter_subtrees(g)]
        type_of(m)
        for before, after in zip(leaves(g), leaves(m)):
            lo, hi = gp.CONSTANT_RANGES[before.signature.constant_type]
            bound = 0.05 * (hi - lo) + 1e-12
            assert all(abs(x - y) <= bound for x, y in zip(before.value, after.value))


def test_mutation_offsets_are_zero_mean():
    g = build("Blend", constant("Float01", 0.5), uniform(0.5), uniform(0.5))
    rng = np.random.default_rng(7)
    offsets = np.array([mutate_leaves(g, rng).children[0].value[0] - 0.5 for _ in range(20_000)])
    sigma = 0.05 / np.sqrt(3) / np.sqrt(len(offsets))
    assert abs(offsets.mean()) < 3 * sigma
    assert np.abs(offsets).max() <= 0.05


def test_tournament_draw_deme_of_three_returns_all():
    pop = PreyPopulation.random(9, 3, np.random.default_rng(8), 20)
    drawn = tournament_draw(pop, 1, np.random.default_rng(0))
    assert {p.id for p in drawn} == {p.id for p in pop.demes[1]}


def test_tournament_draw_rejects_small_deme():
    pop = PreyPopulation.random(4, 2, np.random.default_rng(8), 20)
    with pytest.raises(ValueError):
        tournament_draw(pop, 0, np.random.default_rng(0))


def test_tournament_draw_is_uniform():
    pop = PreyPopulation.random(40, 2, np.random.default_rng(9), 10)
    rng = np.random.default_rng(10)
    ids = [p.id for p in pop.demes[0]]
    counts = dict.fromkeys(ids, 0)
    for _ in range(100_000):
        drawn = tournament_draw(pop, 0, rng)
        assert len({p.id for p in drawn}) == 3
        for p in drawn:
            counts[p.id] += 1
    # Each member appears in a draw with probability 3/20.
    n = 100_000
    sigma = np.sqrt(n * 0.15 * 0.85)
    assert all(abs(c - n * 0.15) <= 3 * sigma for c in counts.values())


def test_replace_eaten_keeps_population_steady():
    rng = np.random.default_rng(11)
    pop = PreyPopulation.random(400, 20, rng)
    ids_before = {p.id for p in pop}
    for step in range(200):
        a, b, c = tournament_draw(pop, step % 20, rng)
        child = replace_eaten(pop, a, b, c, rng)
        assert len(pop) == 400
        assert all(len(d) == 20 for d in pop.demes)
        assert child.deme == a.deme
        assert child.id not in ids_before
        ids_before.add(child.id)
        assert child in pop.demes[a.deme] and a not in pop.demes[a.deme]
        type_of(child.genome)
    assert all(p.deme == k for k, d in enumerate(pop.demes) for p in d)


def test_replace_eaten_uses_both_recipient_orders(monkeypatch):
    """Either parent can be the recipient, so both kinds of offspring occur."""
    pop = PreyPopulation.random(3, 1, np.random.default_rng(0), 10)
    _, b, c = pop.demes[0]
    b.genome, c.genome = spots_tree(), stripes_tree()
    recipients = []
    real = gp.crossover

    def spy(recipient, donor, *args, **kw):
        recipients.append(recipient.op)
        return real(recipient, donor, *args, **kw)

    monkeypatch.setattr(gp, "crossover", spy)
    rng = np.random.default_rng(12)
    for _ in range(200):
        replace_eaten(pop, pop.demes[0][0], b, c, rng, 1, 100)
    n = recipients.count("LotsOfSpots")
    assert recipients.count("Grating") == 200 - n
    assert abs(n - 100) <= 3 * np.sqrt(50)


def test_replace_eaten_rejects_mixed_demes():
    pop = PreyPopulation.random(6, 2, np.random.default_rng(0), 10)
    with pytest.raises(ValueError):
        replace_eaten(pop, pop.demes[0][0], pop.demes[0][1], pop.demes[1][0], np.random.default_rng(0))


def test_population_text_round_trip(tmp_path):
    pop = PreyPopulation.random(12, 3, np.random.default_rng(13), 60)
    pop.save(tmp_path / "prey.txt")
    back = PreyPopulation.load(tmp_path / "prey.txt")
    assert back.fingerprint() == pop.fingerprint()
    assert back.next_id == pop.next_id


def test_population_rejects_uneven_demes():
    with pytest.raises(ValueError):
        PreyPopulation.random(10, 3, np.random.default_rng(0))
