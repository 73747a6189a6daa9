"""Convolutional localizer: RGB image in, (x, y) in the unit square out.

A small from-scratch numpy network with hand-written backpropagation.
Layout is NHWC throughout and the layer naming follows Keras, so the layer
table of the default model reads like a Keras ``model.summary()``.

Architecture: a stride-1 convolution, then stride-2 convolutions that each
double the filter count, each followed by dropout; flatten; dense layers
ending in 2 sigmoid units.  Convolutions use "same" padding.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PRETRAIN_LEARNING_RATE = 1e-3
FINE_TUNE_LEARNING_RATE = 1e-4


@dataclass(frozen=True)
class ConvNetSpec:
    input_size: int = 128
    conv_filters: tuple[int, ...] = (16, 32, 64, 128, 256)
    kernel_size: int = 5
    dense_widths: tuple[int, ...] = (128, 32, 8, 2)
    conv_dropout: float = 0.2
    dense_dropout: float = 0.2  # after the first dense layer only
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"
    channels: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "conv_filters", tuple(int(f) for f in self.conv_filters))
        object.__setattr__(self, "dense_widths", tuple(int(w) for w in self.dense_widths))
        if not self.conv_filters or not self.dense_widths:
            raise ValueError("need at least one convolution and one dense layer")
        if self.dense_widths[-1] != 2:
            raise ValueError("last dense layer must have width 2")
        for a, b in zip(self.conv_filters, self.conv_filters[1:]):
            if b != 2 * a:
                raise ValueError(f"filter counts must double after the first convolution: {self.conv_filters}")
        if self.hidden_activation not in ("relu", "linear"):
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in ("sigmoid", "linear"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @classmethod
    def desk(cls, input_size: int = 64, base_filters: int = 8, **kw) -> "ConvNetSpec":
        """Same five-stage layout, scaled down for quick runs."""
        return cls(input_size=input_size, conv_filters=tuple(base_filters * 2**i for i in range(5)), **kw)

    def strides(self) -> tuple[int, ...]:
        return (1,) + (2,) * (len(self.conv_filters) - 1)

    def conv_output_sizes(self) -> list[int]:
        sizes, s = [], self.input_size
        for stride in self.strides():
            s = -(-s // stride)
            sizes.append(s)
        return sizes

    def flat_size(self) -> int:
        return self.conv_output_sizes()[-1] ** 2 * self.conv_filters[-1]

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        k, c_in = self.kernel_size, self.channels
        for i, f in enumerate(self.conv_filters):
            name = _keras_name("conv2d", i)
            shapes += [(f"{name}/kernel", (k, k, c_in, f)), (f"{name}/bias", (f,))]
            c_in = f
        n_in = self.flat_size()
        for i, w in enumerate(self.dense_widths):
            name = _keras_name("dense", i)
            shapes += [(f"{name}/kernel", (n_in, w)), (f"{name}/bias", (w,))]
            n_in = w
        return shapes

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    def layer_table(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, output shape without batch, parameter count) per layer."""
        rows = []
        k, c_in, drop = self.kernel_size, self.channels, 0
        for i, (f, s) in enumerate(zip(self.conv_filters, self.conv_output_sizes())):
            rows.append((_keras_name("conv2d", i), (s, s, f), k * k * c_in * f + f))
            rows.append((_keras_name("dropout", drop), (s, s, f), 0))
            drop += 1
            c_in = f
        n_in = self.flat_size()
        rows.append(("flatten", (n_in,), 0))
        for i, w in enumerate(self.dense_widths):
            rows.append((_keras_name("dense", i), (w,), n_in * w + w))
            if i == 0:
                rows.append((_keras_name("dropout", drop), (w,), 0))
            n_in = w
        return rows

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ConvNetSpec":
        return cls(**d)


def _keras_name(base: str, i: int) -> str:
    return base if i == 0 else f"{base}_{i}"


class NetParams:
    """Weight arrays of one network, in ``spec.param_shapes()`` order."""

    def __init__(self, spec: ConvNetSpec, arrays: list[np.ndarray]):
        shapes = spec.param_shapes()
        if len(arrays) != len(shapes):
            raise ValueError(f"expected {len(shapes)} arrays, got {len(arrays)}")
        for (name, shape), a in zip(shapes, arrays):
            if a.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {a.shape}")
        self.spec = spec
        self.arrays = list(arrays)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.spec.param_shapes()]

    @property
    def dtype(self) -> np.dtype:
        return self.arrays[0].dtype

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays)

    def copy(self) -> "NetParams":
        return NetParams(self.spec, [a.copy() for a in self.arrays])

    def astype(self, dtype) -> "NetParams":
        return NetParams(self.spec, [a.astype(dtype) for a in self.arrays])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    def equals(self, other: "NetParams") -> bool:
        return self.spec == other.spec and all(
            a.dtype == b.dtype and np.array_equal(a, b) for a, b in zip(self.arrays, other.arrays)
        )


def init_params(spec: ConvNetSpec, rng: np.random.Generator, dtype=np.float32) -> NetParams:
    """Fan-in scaled uniform kernels, zero biases."""
    arrays = []
    for name, shape in spec.param_shapes():
        if name.endswith("/bias"):
            arrays.append(np.zeros(shape, dtype=dtype))
        else:
            fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            arrays.append(rng.uniform(-limit, limit, shape).astype(dtype))
    return NetParams(spec, arrays)


def zero_params(spec: ConvNetSpec, dtype=np.float32) -> NetParams:
    return NetParams(spec, [np.zeros(s, dtype=dtype) for _, s in spec.param_shapes()])


# ---------------------------------------------------------------------------
# Layers


def _same_padding(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _conv_forward(x, w, b, stride):
    n, h, _, c = x.shape
    k = w.shape[0]
    lo, hi = _same_padding(h, k, stride)
    xp = np.pad(x, ((0, 0), (lo, hi), (lo, hi), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho = win.shape[1]
    # (N, Ho, Wo, C, k, k) -> rows ordered (ki, kj, c) to match the kernel layout.
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * ho, k * k * c)
    z = (cols @ w.reshape(-1, w.shape[-1]) + b).reshape(n, ho, ho, w.shape[-1])
    return z, (cols, xp.shape, lo, stride, h)


def _conv_backward(dz, w, cache, need_dx):
    cols, padded_shape, lo, stride, size = cache
    n, ho, _, f = dz.shape
    k, c = w.shape[0], w.shape[2]
    dz2 = dz.reshape(-1, f)
    dw = (cols.T @ dz2).reshape(w.shape)
    db = dz2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dxp = np.zeros(padded_shape, dtype=dz.dtype)
    span = stride * (ho - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + span : stride, j : j + span : stride, :] += (dz2 @ w[i, j].T).reshape(n, ho, ho, c)
    return dxp[:, lo : lo + size, lo : lo + size, :], dw, db


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    return z


def _activate_backward(da, z, a, kind):
    if kind == "relu":
        return da * (z > 0)
    if kind == "sigmoid":
        return da * a * (1 - a)
    return da


def _dropout_mask(shape, rate, rng, dtype):
    keep = rng.random(shape, dtype=np.float32) >= rate
    return keep.astype(dtype) / dtype.type(1.0 - rate)


def forward(params: NetParams, x: np.ndarray, training: bool = False, rng: np.random.Generator | None = None):
    """Batch forward pass.  Returns (outputs N x 2, cache for :func:`backward`)."""
    spec = params.spec
    dtype = params.dtype
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 4 or x.shape[1:] != (spec.input_size, spec.input_size, spec.channels):
        raise ValueError(f"expected batch of {spec.input_size}x{spec.input_size}x{spec.channels} images, got {x.shape}")
    if training and rng is None:
        raise ValueError("training forward pass needs an rng for dropout")
    arrays = params.arrays
    caches = []
    h = x
    n_conv = len(spec.conv_filters)
    for i, stride in enumerate(spec.strides()):
        w, b = arrays[2 * i], arrays[2 * i + 1]
        z, conv_cache = _conv_forward(h, w, b, stride)
        a = _activate(z, spec.hidden_activation)
        mask = None
        if training and spec.conv_dropout > 0:
            mask = _dropout_mask(a.shape, spec.conv_dropout, rng, dtype)
            a = a * mask
        caches.append((conv_cache, z, mask))
        h = a
    conv_shape = h.shape
    h = h.reshape(h.shape[0], -1)
    dense_caches = []
    n_dense = len(spec.dense_widths)
    for j in range(n_dense):
        w, b = arrays[2 * (n_conv + j)], arrays[2 * (n_conv + j) + 1]
        z = h @ w + b
        last = j == n_dense - 1
        a = _activate(z, spec.output_activation if last else spec.hidden_activation)
        mask = None
        if training and j == 0 and not last and spec.dense_dropout > 0:
            mask = _dropout_mask(a.shape, spec.dense_dropout, rng, dtype)
            a = a * mask
        dense_caches.append((h, z, a, mask))
        h = a
    return h, (caches, conv_shape, dense_caches)


def backward(params: NetParams, cache, d_out: np.ndarray) -> list[np.ndarray]:
    """Gradients of all parameters given dLoss/dOutput."""
    spec = params.spec
    arrays = params.arrays
    caches, conv_shape, dense_caches = cache
    n_conv = len(spec.conv_filters)
    n_dense = len(spec.dense_widths)
    grads: list[np.ndarray] = [None] * len(arrays)  # type: ignore[list-item]
    da = d_out
    for j in reversed(range(n_dense)):
        h_in, z, a, mask = dense_caches[j]
        if mask is not None:
            da = da * mask
        kind = spec.output_activation if j == n_dense - 1 else spec.hidden_activation
        dz = _activate_backward(da, z, a, kind)
        w = arrays[2 * (n_conv + j)]
        grads[2 * (n_conv + j)] = h_in.T @ dz
        grads[2 * (n_conv + j) + 1] = dz.sum(axis=0)
        da = dz @ w.T
    da = da.reshape(conv_shape)
    for i in reversed(range(n_conv)):
        conv_cache, z, mask = caches[i]
        if mask is not None:
            da = da * mask
        dz = _activate_backward(da, z, None, spec.hidden_activation)
        da, dw, db = _conv_backward(dz, arrays[2 * i], conv_cache, need_dx=i > 0)
        grads[2 * i] = dw
        grads[2 * i + 1] = db
    return grads


# ---------------------------------------------------------------------------
# Inference, loss, training


def predict_batch(params: NetParams, images: np.ndarray) -> np.ndarray:
    out, _ = forward(params, images, training=False)
    return np.clip(out.astype(np.float64), 0.0, 1.0)


def predict(params: NetParams, image: np.ndarray) -> np.ndarray:
    """Location in [0, 1]^2 as (x, y); dropout is off."""
    image = np.asarray(image)
    s = params.spec.input_size
    if image.shape != (s, s, params.spec.channels):
        raise ValueError(f"expected {s}x{s}x{params.spec.channels} image, got {image.shape}")
    return predict_batch(params, image[None])[0]


def loss(prediction: np.ndarray, label: np.ndarray) -> float:
    """Mean squared error over coordinates (and over the batch, if any)."""
    d = np.asarray(prediction, dtype=np.float64) - np.asarray(label, dtype=np.float64)
    return float(np.mean(d * d))


def _loss_and_grad(params, images, labels, training, rng):
    out, cache = forward(params, images, training=training, rng=rng)
    labels = np.asarray(labels, dtype=out.dtype)
    diff = out - labels
    value = float(np.mean(diff.astype(np.float64) ** 2))
    d_out = (2.0 / diff.size) * diff
    return value, backward(params, cache, d_out)


class Adam:
    """Adam optimizer state for one parameter set."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, arrays: list[np.ndarray], grads: list[np.ndarray], lr: float) -> list[np.ndarray]:
        if self.m is None:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = lr * np.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        out = []
        for i, (a, g) in enumerate(zip(arrays, grads)):
            m = self.m[i] = b1 * self.m[i] + (1 - b1) * g
            v = self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            out.append((a - scale * m / (np.sqrt(v) + self.eps)).astype(a.dtype))
        return out


def train_step(
    params: NetParams,
    images: np.ndarray,
    labels: np.ndarray,
    learning_rate: float,
    optimizer: Adam,
    rng: np.random.Generator,
) -> tuple[NetParams, float]:
    """One Adam step on the minibatch's mean loss, dropout active.

    Returns the new parameters and the minibatch loss before the step.
    """
    if len(images) == 0:
        raise ValueError("empty minibatch")
    value, grads = _loss_and_grad(params, images, labels, True, rng)
    if learning_rate == 0:
        return params.copy(), value
    return NetParams(params.spec, optimizer.step(params.arrays, grads, learning_rate)), value


def evaluate_loss(params: NetParams, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    total = 0.0
    for i in range(0, len(images), batch_size):
        out = predict_batch(params, images[i : i + batch_size])
        total += float(np.sum((out - labels[i : i + batch_size]) ** 2))
    return total / (2 * len(images))


def training_loss(params: NetParams, images: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> float:
    """Minibatch loss with dropout active; a generator in the same state
    reproduces the dropout masks of a ``train_step``."""
    out, _ = forward(params, images, training=True, rng=rng)
    return loss(out, labels)


def gradients(params: NetParams, images: np.ndarray, labels: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Loss and analytic gradient with dropout off."""
    return _loss_and_grad(params, images, labels, False, None)


class GradientCheck(NamedTuple):
    max_relative_error: float
    indices: np.ndarray  # flat parameter indices checked
    analytic: np.ndarray
    numeric: np.ndarray


def gradient_check(
    params: NetParams,
    images: np.ndarray,
    labels: np.ndarray,
    n_samples: int = 200,
    h: float = 1e-4,
    eps: float = 1e-8,
    rng: np.random.Generator | None = None,
    indices: np.ndarray | None = None,
) -> GradientCheck:
    """Compare backprop with central differences at sampled parameters.

    Runs in float64.  The error for each parameter is
    ``|analytic - numeric| / (|analytic| + eps)``.
    """
    p64 = params.astype(np.float64)
    _, grads = gradients(p64, images, labels)
    flat_grad = np.concatenate([g.ravel() for g in grads])
    offsets = np.cumsum([0] + [a.size for a in p64.arrays])
    if indices is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        indices = rng.choice(offsets[-1], size=min(n_samples, offsets[-1]), replace=False)
    numeric = np.empty(len(indices))
    for n, idx in enumerate(indices):
        k = int(np.searchsorted(offsets, idx, side="right") - 1)
        arr = p64.arrays[k].reshape(-1)
        j = idx - offsets[k]
        saved = arr[j]
        arr[j] = saved + h
        plus = loss(predict_raw(p64, images), labels)
        arr[j] = saved - h
        minus = loss(predict_raw(p64, images), labels)
        arr[j] = saved
        numeric[n] = (plus - minus) / (2 * h)
    analytic = flat_grad[indices]
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + eps)
    return GradientCheck(float(rel.max()), np.asarray(indices), analytic, numeric)


def predict_raw(params: NetParams, images: np.ndarray) -> np.ndarray:
    """Unclamped network outputs with dropout off."""
    out, _ = forward(params, images, training=False)
    return out


def perturb(params: NetParams, magnitude: float, rng: np.random.Generator) -> NetParams:
    """Copy with independent uniform noise in (-magnitude, +magnitude) on every weight."""
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    if magnitude == 0:
        return params.copy()
    return NetParams(
        params.spec,
        [(a + rng.uniform(-magnitude, magnitude, a.shape)).astype(a.dtype) for a in params.arrays],
    )


# ---------------------------------------------------------------------------
# Checkpoints: magic, u64 manifest length, JSON manifest, raw array bytes.

_MAGIC = b"CRYPSNET"


def save_params(path: str | Path, params: NetParams) -> None:
    entries, offset = [], 0
    for name, a in zip(params.names, params.arrays):
        a = np.ascontiguousarray(a)
        entries.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str, "offset": offset, "nbytes": a.nbytes})
        offset += a.nbytes
    manifest = json.dumps({"spec": params.spec.to_dict(), "arrays": entries}).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for a in params.arrays:
            f.write(np.ascontiguousarray(a).tobytes())


def load_params(path: str | Path) -> NetParams:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    (length,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16 : 16 + length])
    base = 16 + length
    spec = ConvNetSpec.from_dict(manifest["spec"])
    arrays = []
    for e in manifest["arrays"]:
        start = base + e["offset"]
        buf = data[start : start + e["nbytes"]]
        arrays.append(np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy())
    return NetParams(spec, arrays)
