"""Independent reference implementations used as test oracles.

Nothing here imports the operator table or geometry code under test; the
expected signatures and ranges are written out by hand.
"""
from __future__ import annotations

import math

import numpy as np

SIGNATURES = {
    "Uniform": ("Texture", ()),
    "Color": ("Color", ()),
    "Point2": ("Point2", ()),
    "Float01": ("Float01", ()),
    "FloatPlus": ("FloatPlus", ()),
    "Angle": ("Angle", ()),
    "Spot": ("Texture", ("Point2", "Float01", "Texture", "Float01", "Texture")),
    "Grating": ("Texture", ("Point2", "Texture", "Point2", "Texture", "Float01", "Float01")),
    "LotsOfSpots": ("Texture", ("Float01",) * 5 + ("Texture", "Texture")),
    "Noise": ("Texture", ("FloatPlus", "Point2", "Texture", "Texture")),
    "ColorNoise": ("Texture", ("FloatPlus", "Point2", "Float01")),
    "Blend": ("Texture", ("Float01", "Texture", "Texture")),
    "SoftMatte": ("Texture", ("Texture", "Texture", "Texture")),
    "Add": ("Texture", ("Texture", "Texture")),
    "Multiply": ("Texture", ("Texture", "Texture")),
    "Scale": ("Texture", ("FloatPlus", "Texture")),
    "Rotate": ("Texture", ("Angle", "Texture")),
    "Translate": ("Texture", ("Point2", "Texture")),
    "Warp": ("Texture", ("FloatPlus", "Float01", "Texture")),
}
# Leaf operator -> (arity, lo, hi)
LEAF_RANGES = {
    "Uniform": (3, 0.0, 1.0),
    "Color": (3, 0.0, 1.0),
    "Point2": (2, -1.0, 1.0),
    "Float01": (1, 0.0, 1.0),
    "FloatPlus": (1, 0.0, 10.0),
    "Angle": (1, 0.0, 2 * math.pi),
}


def type_of(node) -> str:
    """Return type of a tree, raising AssertionError on any violation."""
    assert node.op in SIGNATURES, f"unknown op {node.op}"
    ret, params = SIGNATURES[node.op]
    assert len(node.children) == len(params), f"{node.op} arity"
    for want, child in zip(params, node.children):
        assert type_of(child) == want, f"{node.op}: slot wants {want}"
    if node.op in LEAF_RANGES:
        arity, lo, hi = LEAF_RANGES[node.op]
        assert node.value is not None and len(node.value) == arity, f"{node.op} constant arity"
        assert all(lo <= v <= hi for v in node.value), f"{node.op} constant {node.value} out of range"
    else:
        assert node.value is None
    return ret


def count_nodes(node) -> int:
    n = 0
    stack = [node]
    while stack:
        cur = stack.pop()
        n += 1
        stack.extend(cur.children)
    return n


def leaves(node):
    if not node.children:
        yield node
    for c in node.children:
        yield from leaves(c)


def brute_force_mask(d: int) -> np.ndarray:
    """Pixel (i, j) is inside iff its center is within d/2 of the raster center."""
    out = np.zeros((d, d), dtype=bool)
    r = d / 2.0
    for i in range(d):
        for j in range(d):
            if math.hypot(i + 0.5 - r, j + 0.5 - r) <= r:
                out[i, j] = True
    return out


def block_mean(image: np.ndarray, k: int) -> np.ndarray:
    h, w, c = image.shape
    out = np.zeros((h // k, w // k, c))
    for i in range(h // k):
        for j in range(w // k):
            out[i, j] = image[i * k : (i + 1) * k, j * k : (j + 1) * k].reshape(-1, c).mean(axis=0)
    return out


def placement_violations(centers, size=512, diameter=100, exclusion=100.0) -> list[str]:
    bad = []
    r = diameter / 2
    pts = [tuple(map(float, c)) for c in centers]
    for x, y in pts:
        if not (r <= x <= size - r and r <= y <= size - r):
            bad.append(f"({x},{y}) not fully inside")
        if math.hypot(x - size / 2, y - size / 2) < exclusion:
            bad.append(f"({x},{y}) too close to the image center")
    for a in range(len(pts)):
        for b in range(a + 1, len(pts)):
            if math.dist(pts[a], pts[b]) < diameter:
                bad.append(f"{pts[a]} overlaps {pts[b]}")
    return bad


def within_3_sigma(counts, p: float) -> bool:
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    sigma = math.sqrt(n * p * (1 - p))
    return bool(np.all(np.abs(counts - n * p) <= 3 * sigma))


def chi_square_within_3_sigma(counts) -> bool:
    """Uniformity over many bins: the chi-square statistic lies within 3
    standard deviations of its expectation (k - 1 degrees of freedom)."""
    counts = np.asarray(counts, dtype=float)
    k = len(counts)
    expected = counts.sum() / k
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    return abs(chi2 - (k - 1)) <= 3 * math.sqrt(2 * (k - 1))


def valid_points(n: int, rng: np.random.Generator, size=512, diameter=100, exclusion=100.0) -> np.ndarray:
    """Uniform points a disk center may occupy (fully inside, clear of the middle)."""
    r = diameter / 2
    out = np.empty((0, 2))
    while len(out) < n:
        p = rng.uniform(r, size - r, (2 * n, 2))
        p = p[np.hypot(p[:, 0] - size / 2, p[:, 1] - size / 2) >= exclusion]
        out = np.concatenate([out, p])
    return out[:n]


def random_guess_baseline(n: int, rng: np.random.Generator, n_prey=3, size=512, diameter=100, exclusion=100.0) -> float:
    """Expected distance from a uniform valid guess to the nearest of
    ``n_prey`` non-overlapping valid centers, by Monte Carlo over ``n`` scenes."""
    total = 0.0
    for _ in range(n):
        while True:
            centers = valid_points(n_prey, rng, size, diameter, exclusion)
            if not placement_violations(centers, size, diameter, exclusion):
                break
        guess = valid_points(1, rng, size, diameter, exclusion)[0]
        total += min(math.dist(guess, c) for c in centers)
    return total / n
