from __future__ import annotations

import numpy as np
import pytest

from crypsis import texsyn
from crypsis.gp import random_tree
from crypsis.texsyn import (
    GenomeError,
    Point2,
    build,
    compose,
    compose_tournament,
    constant,
    disk_mask,
    downsample,
    parse_expression,
    render_disk,
    sample,
    sample_many,
    to_expression,
    uniform,
)

from oracles import SIGNATURES, block_mean, brute_force_mask, type_of


def test_function_set_matches_oracle_table():
    assert set(texsyn.FUNCTION_SET) == set(SIGNATURES)
    for name, sig in texsyn.FUNCTION_SET.items():
        assert (sig.return_type, sig.param_types) == SIGNATURES[name]
        assert set(sig.param_types) <= set(texsyn.TYPES)
    for t in texsyn.TYPES:
        assert any(s.is_terminal and s.return_type == t for s in texsyn.FUNCTION_SET.values())


def test_uniform_is_constant():
    g = uniform(0.2, 0.5, 0.8)
    rng = np.random.default_rng(0)
    for p in rng.uniform(-5, 5, (20, 2)):
        assert sample(g, Point2(*p)).as_tuple() == (0.2, 0.5, 0.8)


def test_degenerate_grating_is_its_color():
    a = uniform(0.3, 0.6, 0.1)
    g = build("Grating", constant("Point2", 0.0, 0.0), a, constant("Point2", 0.3, 0.2), a,
              constant("Float01", 0.4), constant("Float01", 0.5))
    xy = np.random.default_rng(1).uniform(-3, 3, (500, 2))
    assert np.array_equal(sample_many(g, xy), np.tile([0.3, 0.6, 0.1], (500, 1)))


def test_warped_noise_stays_in_range_over_a_million_points():
    g = build(
        "Warp", constant("FloatPlus", 7.0), constant("Float01", 0.9),
        build("Add",
              build("Noise", constant("FloatPlus", 9.0), constant("Point2", 0.1, -0.2), uniform(0.0), uniform(1.0)),
              build("ColorNoise", constant("FloatPlus", 5.0), constant("Point2", 0.0, 0.0), constant("Float01", 1.0))),
    )
    xy = np.random.default_rng(2).uniform(-2, 3, (1_000_000, 2))
    rgb = sample_many(g, xy)
    assert rgb.min() >= 0.0 and rgb.max() <= 1.0
    # The unclamped sum really does leave the unit range, so clamping matters.
    raw = texsyn.evaluate(g, xy[:10_000])
    assert raw.max() > 1.0


def test_sampling_is_pure_and_clamped():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        g = random_tree("Texture", 100, rng)
        xy = rng.uniform(-1.5, 2.5, (1000, 2))
        a = sample_many(g, xy)
        b = sample_many(g, xy.copy())
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0


def test_single_point_sample_matches_batch():
    rng = np.random.default_rng(4)
    g = random_tree("Texture", 60, rng)
    xy = rng.uniform(0, 1, (10, 2))
    batch = sample_many(g, xy)
    for p, rgb in zip(xy, batch):
        assert sample(g, (p[0], p[1])).as_tuple() == tuple(rgb)


@pytest.mark.parametrize("bad", [
    lambda: Node("Blend", (uniform(0.1), uniform(0.2), uniform(0.3))),  # Float01 slot given a Texture
    lambda: Node("Add", (uniform(0.1),)),
    lambda: constant("Float01", 1.5),
    lambda: constant("Color", 0.1, 0.2),
    lambda: Node("Bogus", ()),
    lambda: Node("Add", (uniform(0.1), uniform(0.2)), (0.5,)),
])
def test_malformed_genomes_rejected_at_construction(bad):
    with pytest.raises(GenomeError):
        bad()


Node = texsyn.Node


def test_expression_round_trip_is_exact():
    rng = np.random.default_rng(5)
    for _ in range(200):
        g = random_tree("Texture", 100, rng)
        text = to_expression(g)
        assert parse_expression(text) == g
        assert to_expression(parse_expression(text)) == text


def test_expression_shape():
    g = build("Blend", constant("Float01", 0.25), uniform(1.0, 0.0, 0.0), uniform(0.0, 0.0, 1.0))
    assert to_expression(g) == "Blend(Float01(0.25), Uniform(1.0, 0.0, 0.0), Uniform(0.0, 0.0, 1.0))"
    with pytest.raises(GenomeError):
        parse_expression("Blend(Float01(0.25), Uniform(1.0, 0.0, 0.0)")
    with pytest.raises(GenomeError):
        parse_expression("__import__('os')")


@pytest.mark.parametrize("d", [1, 7, 50, 100])
def test_disk_mask_matches_brute_force(d):
    assert np.array_equal(disk_mask(d), brute_force_mask(d))


def test_disk_of_diameter_one_has_one_pixel():
    assert render_disk(uniform(0.5), 1).mask.sum() == 1


def test_uniform_disk_pixels_all_equal():
    disk = render_disk(uniform(0.1, 0.7, 0.4), 100)
    inside = disk.pixels[disk.mask]
    assert np.all(inside == [0.1, 0.7, 0.4])
    assert np.all(disk.pixels[~disk.mask] == 0)


def test_disk_pixels_sample_texture_space_unit_square():
    g = random_tree("Texture", 80, np.random.default_rng(6))
    disk = render_disk(g, 20)
    i, j = 3, 11
    assert disk.mask[i, j]
    expected = sample(g, ((j + 0.5) / 20, (i + 0.5) / 20)).as_tuple()
    assert tuple(disk.pixels[i, j]) == expected


def test_compose_without_disks_is_background():
    bg = np.random.default_rng(7).random((512, 512, 3))
    assert np.array_equal(compose(bg, []), bg)


def test_black_disk_on_white_lowers_pixel_sum_by_mask_count():
    bg = np.ones((512, 512, 3))
    out = compose_tournament(bg, [(uniform(0.0), (150.0, 300.0))])
    assert bg.sum() - out.sum() == 3 * brute_force_mask(100).sum()


def test_three_disks_show_their_own_color_at_center():
    rng = np.random.default_rng(8)
    genomes = [random_tree("Texture", 100, rng) for _ in range(3)]
    centers = [(100.0, 100.0), (400.0, 120.0), (250.0, 420.0)]
    out = compose_tournament(rng.random((512, 512, 3)), list(zip(genomes, centers)))
    for g, (x, y) in zip(genomes, centers):
        # Pixel (row y, col x) has center (x + 0.5, y + 0.5): texture point (0.505, 0.505).
        assert tuple(out[int(y), int(x)]) == sample(g, (50.5 / 100, 50.5 / 100)).as_tuple()


def test_compose_rejects_wrong_background_size():
    with pytest.raises(ValueError):
        compose(np.zeros((500, 512, 3)), [])


def test_downsample_constant_and_shape():
    out = downsample(np.full((512, 512, 3), 0.3))
    assert out.shape == (128, 128, 3)
    assert np.allclose(out, 0.3)


def test_downsample_checkerboard_is_half_gray():
    i, j = np.indices((512, 512))
    board = ((i // 2 + j // 2) % 2).astype(float)
    img = np.repeat(board[..., None], 3, axis=2)
    assert np.array_equal(downsample(img), np.full((128, 128, 3), 0.5))


def test_downsample_matches_block_mean_and_conserves_mean():
    img = np.random.default_rng(9).random((512, 512, 3))
    out = downsample(img)
    assert np.allclose(out, block_mean(img, 4), atol=1e-12)
    assert np.all(np.abs(out.mean(axis=(0, 1)) - img.mean(axis=(0, 1))) < 1e-6)


def test_downsample_rejects_wrong_dimensions():
    with pytest.raises(ValueError):
        downsample(np.zeros((256, 256, 3)))


def test_random_genomes_type_check():
    rng = np.random.default_rng(10)
    for _ in range(200):
        assert type_of(random_tree("Texture", 100, rng)) == "Texture"


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(11).random((16, 16, 3))
    texsyn.save_png(tmp_path / "a.png", img)
    back = texsyn.load_image(tmp_path / "a.png")
    assert np.array_equal(texsyn.to_uint8(back), texsyn.to_uint8(img))
