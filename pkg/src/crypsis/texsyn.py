"""Procedural texture trees.

A texture is a tree of typed operators.  Evaluating the tree at a 2D point
gives an RGB color; nothing is stored as pixels until a texture is rendered.
Texture space is arranged so that the unit square covers a prey disk's
bounding box, whatever the render size.

Genomes are immutable :class:`Node` trees.  Every node is type checked when it
is constructed, so a tree that exists is a valid program.
"""
from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

# Semantic types.
TEXTURE = "Texture"
COLOR = "Color"
POINT2 = "Point2"
FLOAT01 = "Float01"
FLOATPLUS = "FloatPlus"
ANGLE = "Angle"

TYPES = (TEXTURE, COLOR, POINT2, FLOAT01, FLOATPLUS, ANGLE)

# Inclusive range and component count of each constant type.
CONSTANT_RANGES: dict[str, tuple[float, float]] = {
    COLOR: (0.0, 1.0),
    POINT2: (-1.0, 1.0),
    FLOAT01: (0.0, 1.0),
    FLOATPLUS: (0.0, 10.0),
    ANGLE: (0.0, 2.0 * math.pi),
}
CONSTANT_ARITY = {COLOR: 3, POINT2: 2, FLOAT01: 1, FLOATPLUS: 1, ANGLE: 1}


class GenomeError(ValueError):
    """Raised for a malformed texture tree or expression."""


@dataclass(frozen=True)
class OperatorSignature:
    name: str
    return_type: str
    param_types: tuple[str, ...] = ()
    # Type whose range/arity governs the node's inline constant, if any.
    constant_type: str | None = None

    @property
    def is_terminal(self) -> bool:
        return not self.param_types


@dataclass(frozen=True)
class Color:
    r: float
    g: float
    b: float

    def clamped(self) -> "Color":
        return Color(*(min(1.0, max(0.0, c)) for c in (self.r, self.g, self.b)))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.r, self.g, self.b)


@dataclass(frozen=True)
class Point2:
    x: float
    y: float


T, C, P, F, FP, A = TEXTURE, COLOR, POINT2, FLOAT01, FLOATPLUS, ANGLE

FUNCTION_SET: dict[str, OperatorSignature] = {
    s.name: s
    for s in [
        # Constant leaves.  Uniform is the only Texture terminal.
        OperatorSignature("Uniform", T, (), C),
        OperatorSignature("Color", C, (), C),
        OperatorSignature("Point2", P, (), P),
        OperatorSignature("Float01", F, (), F),
        OperatorSignature("FloatPlus", FP, (), FP),
        OperatorSignature("Angle", A, (), A),
        # Texture operators.
        OperatorSignature("Spot", T, (P, F, T, F, T)),
        OperatorSignature("Grating", T, (P, T, P, T, F, F)),
        OperatorSignature("LotsOfSpots", T, (F, F, F, F, F, T, T)),
        OperatorSignature("Noise", T, (FP, P, T, T)),
        OperatorSignature("ColorNoise", T, (FP, P, F)),
        OperatorSignature("Blend", T, (F, T, T)),
        OperatorSignature("SoftMatte", T, (T, T, T)),
        OperatorSignature("Add", T, (T, T)),
        OperatorSignature("Multiply", T, (T, T)),
        OperatorSignature("Scale", T, (FP, T)),
        OperatorSignature("Rotate", T, (A, T)),
        OperatorSignature("Translate", T, (P, T)),
        OperatorSignature("Warp", T, (FP, F, T)),
    ]
}
del T, C, P, F, FP, A


@dataclass(frozen=True)
class Node:
    """One operator application.  A genome is its root node.

    ``value`` holds the inline constant of a leaf (a color, vector or
    scalar); interior nodes have ``value=None``.
    """

    op: str
    children: tuple["Node", ...] = ()
    value: tuple[float, ...] | None = None
    size: int = field(init=False, compare=False, repr=False)

    def __post_init__(self) -> None:
        sig = FUNCTION_SET.get(self.op)
        if sig is None:
            raise GenomeError(f"unknown operator {self.op!r}")
        children = tuple(self.children)
        object.__setattr__(self, "children", children)
        if len(children) != len(sig.param_types):
            raise GenomeError(
                f"{self.op} takes {len(sig.param_types)} arguments, got {len(children)}"
            )
        for slot, (want, child) in enumerate(zip(sig.param_types, children)):
            if not isinstance(child, Node):
                raise GenomeError(f"{self.op} argument {slot} is not a Node")
            if child.return_type != want:
                raise GenomeError(
                    f"{self.op} argument {slot} must be {want}, got {child.return_type}"
                )
        if sig.constant_type is None:
            if self.value is not None:
                raise GenomeError(f"{self.op} takes no constant")
        else:
            if self.value is None:
                raise GenomeError(f"{self.op} needs a constant")
            value = tuple(float(v) for v in self.value)
            if len(value) != CONSTANT_ARITY[sig.constant_type]:
                raise GenomeError(f"{self.op} constant has wrong arity: {value}")
            lo, hi = CONSTANT_RANGES[sig.constant_type]
            for v in value:
                if not (math.isfinite(v) and lo <= v <= hi):
                    raise GenomeError(f"{self.op} constant {v} outside [{lo}, {hi}]")
            object.__setattr__(self, "value", value)
        object.__setattr__(self, "size", 1 + sum(c.size for c in children))

    @property
    def signature(self) -> OperatorSignature:
        return FUNCTION_SET[self.op]

    @property
    def return_type(self) -> str:
        return FUNCTION_SET[self.op].return_type

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def __str__(self) -> str:
        return to_expression(self)


TextureGenome = Node


def constant(type_name: str, *values: float) -> Node:
    """Leaf holding a constant of ``type_name`` (``Uniform`` for a solid texture)."""
    return Node(type_name, (), tuple(values))


def uniform(r: float, g: float | None = None, b: float | None = None) -> Node:
    """Solid color texture.  ``uniform(0.5)`` is a mid gray."""
    if g is None and b is None:
        g = b = r
    return Node("Uniform", (), (r, g, b))


def build(op: str, *children: Node) -> Node:
    return Node(op, tuple(children))


# ---------------------------------------------------------------------------
# Serialization: nested call expressions, e.g.
#   Blend(Float01(0.25), Uniform(1.0, 0.0, 0.0), Uniform(0.0, 0.0, 1.0))


def to_expression(node: Node) -> str:
    if node.value is not None:
        return f"{node.op}({', '.join(repr(v) for v in node.value)})"
    return f"{node.op}({', '.join(to_expression(c) for c in node.children)})"


def _from_ast(expr: ast.expr) -> Node:
    if not (isinstance(expr, ast.Call) and isinstance(expr.func, ast.Name)) or expr.keywords:
        raise GenomeError(f"expected operator call, got {ast.dump(expr)}")
    op = expr.func.id
    sig = FUNCTION_SET.get(op)
    if sig is None:
        raise GenomeError(f"unknown operator {op!r}")
    if sig.constant_type is not None:
        return Node(op, (), tuple(_number(a) for a in expr.args))
    return Node(op, tuple(_from_ast(a) for a in expr.args))


def _number(expr: ast.expr) -> float:
    try:
        value = ast.literal_eval(expr)
    except ValueError as exc:
        raise GenomeError(f"bad constant {ast.dump(expr)}") from exc
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise GenomeError(f"bad constant {value!r}")
    return float(value)


def parse_expression(text: str) -> Node:
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise GenomeError(f"cannot parse texture expression: {exc}") from exc
    return _from_ast(tree.body)


# ---------------------------------------------------------------------------
# Noise.  The permutation table is fixed so a genome renders the same way in
# every run.

_PERM = np.random.default_rng(20221121).permutation(256)
_PERM = np.concatenate([_PERM, _PERM]).astype(np.int64)
_GRAD_ANGLES = np.arange(8) * (np.pi / 4)
_GRAD_X = np.cos(_GRAD_ANGLES)
_GRAD_Y = np.sin(_GRAD_ANGLES)
# Largest |noise| for unit gradients in 2D is sqrt(1/2).
_NOISE_NORM = 1.0 / math.sqrt(2.0)


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def gradient_noise(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Lattice gradient noise, roughly in [-0.71, 0.71], zero at lattice points."""
    xf0 = np.floor(x)
    yf0 = np.floor(y)
    fx = x - xf0
    fy = y - yf0
    ix = xf0.astype(np.int64) & 255
    iy = yf0.astype(np.int64) & 255

    def corner(cx, cy, dx, dy):
        h = _PERM[_PERM[cx] + cy] & 7
        return _GRAD_X[h] * dx + _GRAD_Y[h] * dy

    n00 = corner(ix, iy, fx, fy)
    n10 = corner(ix + 1, iy, fx - 1.0, fy)
    n01 = corner(ix, iy + 1, fx, fy - 1.0)
    n11 = corner(ix + 1, iy + 1, fx - 1.0, fy - 1.0)
    u = _fade(fx)
    v = _fade(fy)
    nx0 = n00 + u * (n10 - n00)
    nx1 = n01 + u * (n11 - n01)
    return nx0 + v * (nx1 - nx0)


def unit_noise(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient noise remapped to [0, 1]."""
    return np.clip(0.5 + 0.5 * gradient_noise(x, y) / _NOISE_NORM, 0.0, 1.0)


_MASK32 = np.uint64(0xFFFFFFFF)


def _hash01(i: np.ndarray, j: np.ndarray, salt: int) -> np.ndarray:
    """Deterministic hash of integer lattice cells to [0, 1)."""
    h = (i.astype(np.uint64) * np.uint64(0x8DA6B343)) ^ (j.astype(np.uint64) * np.uint64(0xD8163841))
    h = (h ^ np.uint64(salt * 0x9E3779B9 + 0x7F4A7C15)) & _MASK32
    h ^= h >> np.uint64(16)
    h = (h * np.uint64(0x85EBCA6B)) & _MASK32
    h ^= h >> np.uint64(13)
    h = (h * np.uint64(0xC2B2AE35)) & _MASK32
    h ^= h >> np.uint64(16)
    return h.astype(np.float64) / 4294967296.0


def _smoothstep(e0: float, e1: float, x: np.ndarray) -> np.ndarray:
    if e1 <= e0:
        return (x >= e1).astype(np.float64)
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _lerp(a: np.ndarray, b: np.ndarray, t) -> np.ndarray:
    # a + t*(b-a) keeps lerp(a, a, t) exactly equal to a.
    t = np.asarray(t)
    if t.ndim == 1:
        t = t[:, None]
    return a + t * (b - a)


def _luminance(rgb: np.ndarray) -> np.ndarray:
    return rgb @ np.array([0.2126, 0.7152, 0.0722])


# ---------------------------------------------------------------------------
# Operator implementations.  Texture arguments arrive as callables
# xy -> rgb so that coordinate-transforming operators can resample them.

Tex = Callable[[np.ndarray], np.ndarray]


def _spot(xy, center, inner_radius, inner: Tex, outer_radius, outer: Tex):
    r0, r1 = sorted((inner_radius[0], outer_radius[0]))
    d = np.hypot(xy[:, 0] - center[0], xy[:, 1] - center[1])
    return _lerp(inner(xy), outer(xy), _smoothstep(r0, r1, d))


def _grating(xy, point_a, tex_a: Tex, point_b, tex_b: Tex, softness, duty):
    dx, dy = point_b[0] - point_a[0], point_b[1] - point_a[1]
    length2 = max(dx * dx + dy * dy, 1e-12)
    phase = ((xy[:, 0] - point_a[0]) * dx + (xy[:, 1] - point_a[1]) * dy) / length2
    phase = phase - np.floor(phase)
    square = (phase < duty[0]).astype(np.float64)
    sine = 0.5 + 0.5 * np.cos(2.0 * np.pi * phase)
    weight = _lerp(square[:, None], sine[:, None], softness[0])[:, 0]
    return _lerp(tex_b(xy), tex_a(xy), weight)


def _lots_of_spots(xy, density, min_radius, max_radius, softness, margin, spot: Tex, background: Tex):
    rmin, rmax = sorted((min_radius[0], max_radius[0]))
    # A spot stays within half a cell of its own cell, so the 3x3
    # neighborhood finds every spot covering a point.
    cell = max(2.0 * rmax + margin[0], 0.02)
    x = xy[:, 0] / cell
    y = xy[:, 1] / cell
    ci = np.floor(x).astype(np.int64)
    cj = np.floor(y).astype(np.int64)
    cover = np.zeros(len(xy))
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            a = ci + di
            b = cj + dj
            present = _hash01(a, b, 0) < density[0]
            sx = (a + _hash01(a, b, 1)) * cell
            sy = (b + _hash01(a, b, 2)) * cell
            r = rmin + (rmax - rmin) * _hash01(a, b, 3)
            d = np.hypot(xy[:, 0] - sx, xy[:, 1] - sy)
            edge = r * softness[0]
            t = (r - d) / np.maximum(edge, 1e-9)
            c = np.where(edge > 0, np.clip(t, 0.0, 1.0), (d <= r).astype(np.float64))
            cover = np.maximum(cover, np.where(present, c, 0.0))
    return _lerp(background(xy), spot(xy), cover)


def _noise(xy, scale, center, tex_a: Tex, tex_b: Tex):
    f = scale[0]
    w = unit_noise((xy[:, 0] - center[0]) * f, (xy[:, 1] - center[1]) * f)
    return _lerp(tex_a(xy), tex_b(xy), w)


def _color_noise(xy, scale, center, contrast):
    f = scale[0]
    x = (xy[:, 0] - center[0]) * f
    y = (xy[:, 1] - center[1]) * f
    channels = [gradient_noise(x + 17.3 * k, y - 29.1 * k) for k in range(3)]
    return 0.5 + (contrast[0] / _NOISE_NORM) * np.stack(channels, axis=1)


def _blend(xy, t, a: Tex, b: Tex):
    return _lerp(a(xy), b(xy), t[0])


def _soft_matte(xy, matte: Tex, a: Tex, b: Tex):
    w = np.clip(_luminance(matte(xy)), 0.0, 1.0)
    return _lerp(a(xy), b(xy), w)


def _add(xy, a: Tex, b: Tex):
    return a(xy) + b(xy)


def _multiply(xy, a: Tex, b: Tex):
    return a(xy) * b(xy)


def _scale(xy, factor, tex: Tex):
    return tex(xy / max(factor[0], 0.05))


def _rotate(xy, angle, tex: Tex):
    c, s = math.cos(angle[0]), math.sin(angle[0])
    inverse = np.array([[c, -s], [s, c]])
    return tex(xy @ inverse)


def _translate(xy, offset, tex: Tex):
    return tex(xy - np.asarray(offset))


def _warp(xy, scale, amplitude, tex: Tex):
    f = scale[0]
    dx = gradient_noise(xy[:, 0] * f, xy[:, 1] * f)
    dy = gradient_noise(xy[:, 0] * f + 31.4, xy[:, 1] * f - 47.2)
    shift = (amplitude[0] / _NOISE_NORM) * np.stack([dx, dy], axis=1)
    return tex(xy + shift)


_IMPLS: dict[str, Callable[..., np.ndarray]] = {
    "Spot": _spot,
    "Grating": _grating,
    "LotsOfSpots": _lots_of_spots,
    "Noise": _noise,
    "ColorNoise": _color_noise,
    "Blend": _blend,
    "SoftMatte": _soft_matte,
    "Add": _add,
    "Multiply": _multiply,
    "Scale": _scale,
    "Rotate": _rotate,
    "Translate": _translate,
    "Warp": _warp,
}


def _argument(node: Node):
    if node.return_type == TEXTURE:
        return lambda xy: evaluate(node, xy)
    return node.value


def evaluate(node: Node, xy: np.ndarray) -> np.ndarray:
    """Unclamped colors of a Texture tree at points ``xy`` (N x 2)."""
    if node.op == "Uniform":
        return np.broadcast_to(np.asarray(node.value), (len(xy), 3)).copy()
    return _IMPLS[node.op](xy, *[_argument(c) for c in node.children])


def sample_many(genome: Node, xy: np.ndarray) -> np.ndarray:
    """Clamped colors at many points."""
    if genome.return_type != TEXTURE:
        raise GenomeError(f"cannot sample a {genome.return_type} tree")
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    return np.clip(evaluate(genome, xy), 0.0, 1.0)


def sample(genome: Node, p: Point2 | tuple[float, float]) -> Color:
    x, y = (p.x, p.y) if isinstance(p, Point2) else p
    rgb = sample_many(genome, np.array([[x, y]]))[0]
    return Color(float(rgb[0]), float(rgb[1]), float(rgb[2]))


# ---------------------------------------------------------------------------
# Rendering


@dataclass(frozen=True)
class DiskRaster:
    pixels: np.ndarray  # (d, d, 3) float; zero outside the mask
    mask: np.ndarray  # (d, d) bool

    @property
    def diameter(self) -> int:
        return self.mask.shape[0]


def disk_mask(diameter_px: int) -> np.ndarray:
    """Pixels whose centers lie within ``diameter_px / 2`` of the raster center."""
    if diameter_px < 1:
        raise ValueError("diameter must be at least 1 pixel")
    c = np.arange(diameter_px) + 0.5 - diameter_px / 2.0
    r = diameter_px / 2.0
    return c[:, None] ** 2 + c[None, :] ** 2 <= r * r


def render_disk(genome: Node, diameter_px: int) -> DiskRaster:
    mask = disk_mask(diameter_px)
    rows, cols = np.nonzero(mask)
    xy = np.stack([(cols + 0.5) / diameter_px, (rows + 0.5) / diameter_px], axis=1)
    pixels = np.zeros((diameter_px, diameter_px, 3))
    pixels[rows, cols] = sample_many(genome, xy)
    return DiskRaster(pixels, mask)


def render_texture(genome: Node, size_px: int, extent: float = 1.0) -> np.ndarray:
    """Square image of the texture over ``[0, extent]^2`` in texture space."""
    c = (np.arange(size_px) + 0.5) * (extent / size_px)
    xx, yy = np.meshgrid(c, c)
    xy = np.stack([xx.ravel(), yy.ravel()], axis=1)
    return sample_many(genome, xy).reshape(size_px, size_px, 3)


def disk_origin(center: Sequence[float], diameter_px: int) -> tuple[int, int]:
    """Top-left pixel (row, col) of a disk raster centered at ``center`` = (x, y)."""
    col = center[0] - diameter_px / 2.0
    row = center[1] - diameter_px / 2.0
    r, c = int(round(row)), int(round(col))
    if abs(r - row) > 1e-9 or abs(c - col) > 1e-9:
        raise ValueError(f"center {tuple(center)} does not align with the pixel grid")
    return r, c


def compose(
    background: np.ndarray,
    disks: Sequence[tuple[DiskRaster, Sequence[float]]],
    size: int = 512,
) -> np.ndarray:
    """Paste disks onto a copy of ``background``; centers are (x, y) pixels."""
    background = np.asarray(background)
    if background.shape != (size, size, 3):
        raise ValueError(f"background must be {size}x{size}x3, got {background.shape}")
    out = np.array(background, dtype=np.float64)
    for disk, center in disks:
        d = disk.diameter
        r, c = disk_origin(center, d)
        if r < 0 or c < 0 or r + d > size or c + d > size:
            raise ValueError(f"disk at {tuple(center)} extends past the image")
        region = out[r : r + d, c : c + d]
        region[disk.mask] = disk.pixels[disk.mask]
    return out


def compose_tournament(
    background: np.ndarray,
    disks: Sequence[tuple[Node, Sequence[float]]],
    diameter_px: int = 100,
    size: int = 512,
) -> np.ndarray:
    rendered = [(render_disk(g, diameter_px), center) for g, center in disks]
    return compose(background, rendered, size)


def downsample(image: np.ndarray, out_size: int = 128, in_size: int = 512) -> np.ndarray:
    """Average non-overlapping square blocks: ``in_size``^2 -> ``out_size``^2."""
    image = np.asarray(image)
    if image.shape != (in_size, in_size, 3):
        raise ValueError(f"expected {in_size}x{in_size}x3 image, got {image.shape}")
    if in_size % out_size:
        raise ValueError(f"{in_size} is not a multiple of {out_size}")
    k = in_size // out_size
    return image.reshape(out_size, k, out_size, k, 3).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# Raster I/O


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
