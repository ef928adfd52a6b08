"""A small numpy convolutional classifier engine.

Layers operate on NHWC arrays. Each parameterised layer owns a weight and a
bias array; ``Network.weights`` holds them flat in layer order (W, b, W, b,
...) and every gradient list uses the same order.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ChecksumMismatch,
    CorruptStream,
    EmptyDataset,
    IoFailure,
    LabelOutOfRange,
    ShapeMismatch,
    TooManyParameters,
    VersionMismatch,
)

LAYER_KINDS = ("conv", "maxpool", "relu", "fully_connected", "softmax_output")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: Optional[int] = None
    kernel: Optional[int] = None
    stride: int = 1
    padding: int = 0
    window: Optional[int] = None
    width: Optional[int] = None
    in_features: Optional[int] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeMismatch(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise ShapeMismatch("stride must be >= 1")
        if self.padding < 0:
            raise ShapeMismatch("padding must be >= 0")
        need = {"conv": ("out_channels", "kernel"), "maxpool": ("window",), "fully_connected": ("width",)}
        for name in need.get(self.kind, ()):
            v = getattr(self, name)
            if v is None or v < 1:
                raise ShapeMismatch(f"{self.kind} needs a positive {name}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "fully_connected")

    def to_json(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}

    @classmethod
    def from_json(cls, obj: dict) -> "LayerSpec":
        return cls(**obj)


def conv(out_channels: int, kernel: int, stride: int = 1, padding: Optional[int] = None) -> LayerSpec:
    """Convolution; ``padding`` defaults to ``kernel // 2`` (same size at stride 1)."""
    return LayerSpec("conv", out_channels=out_channels, kernel=kernel, stride=stride,
                     padding=kernel // 2 if padding is None else padding)


def maxpool(window: int, stride: Optional[int] = None) -> LayerSpec:
    return LayerSpec("maxpool", window=window, stride=window if stride is None else stride)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def fully_connected(width: int, in_features: Optional[int] = None) -> LayerSpec:
    return LayerSpec("fully_connected", width=width, in_features=in_features)


def softmax_output() -> LayerSpec:
    return LayerSpec("softmax_output")


@dataclass(frozen=True)
class ArchSpec:
    input: tuple
    layers: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input", tuple(int(v) for v in self.input))
        object.__setattr__(self, "layers", tuple(self.layers))

    def shapes(self) -> list[tuple]:
        """Output shape (without batch axis) of every layer.

        Raises ShapeMismatch when consecutive layers are incompatible.
        """
        if len(self.input) != 3 or min(self.input) < 1:
            raise ShapeMismatch(f"input must be (height, width, channels), got {self.input}")
        if self.num_classes < 1:
            raise ShapeMismatch("num_classes must be >= 1")
        if not self.layers or self.layers[-1].kind != "softmax_output":
            raise ShapeMismatch("the last layer must be softmax_output")
        shape = self.input
        out = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ShapeMismatch(f"layer {i}: conv after a flattened layer")
                h, w, _ = shape
                ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                if ho < 1 or wo < 1:
                    raise ShapeMismatch(f"layer {i}: conv output would be empty ({ho}x{wo})")
                shape = (ho, wo, layer.out_channels)
            elif layer.kind == "maxpool":
                if len(shape) != 3:
                    raise ShapeMismatch(f"layer {i}: pool after a flattened layer")
                h, w, c = shape
                ho = (h - layer.window) // layer.stride + 1
                wo = (w - layer.window) // layer.stride + 1
                if ho < 1 or wo < 1:
                    raise ShapeMismatch(f"layer {i}: pool output would be empty")
                shape = (ho, wo, c)
            elif layer.kind == "fully_connected":
                fan_in = int(np.prod(shape))
                if layer.in_features is not None and layer.in_features != fan_in:
                    raise ShapeMismatch(
                        f"layer {i}: fully_connected expects {layer.in_features} inputs, "
                        f"previous layer emits {fan_in}"
                    )
                shape = (layer.width,)
            elif layer.kind == "softmax_output":
                if i != len(self.layers) - 1:
                    raise ShapeMismatch("softmax_output must be the last layer")
                if len(shape) != 1 or shape[0] != self.num_classes:
                    raise ShapeMismatch(
                        f"final layer emits {shape}, expected {self.num_classes} logits"
                    )
            out.append(shape)
        return out

    def param_shapes(self) -> list[tuple]:
        shapes = []
        prev = self.input
        for layer, shape in zip(self.layers, self.shapes()):
            if layer.kind == "conv":
                shapes += [(layer.out_channels, prev[2], layer.kernel, layer.kernel), (layer.out_channels,)]
            elif layer.kind == "fully_connected":
                shapes += [(layer.width, int(np.prod(prev))), (layer.width,)]
            prev = shape
        return shapes

    def with_classes(self, num_classes: int) -> "ArchSpec":
        layers = list(self.layers)
        for i in range(len(layers) - 1, -1, -1):
            if layers[i].kind == "fully_connected":
                layers[i] = replace(layers[i], width=num_classes)
                break
        return ArchSpec(self.input, tuple(layers), num_classes)

    def to_json(self) -> dict:
        return {
            "input": list(self.input),
            "layers": [l.to_json() for l in self.layers],
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ArchSpec":
        return cls(tuple(obj["input"]), tuple(LayerSpec.from_json(l) for l in obj["layers"]), obj["num_classes"])


def full_arch(num_classes: int, patch_size: int = 157, channels: int = 3) -> ArchSpec:
    """Five conv + two 1000-wide fc layers with 3-stride pools after conv2 and conv5."""
    return ArchSpec(
        (patch_size, patch_size, channels),
        (
            conv(32, 5), relu(),
            conv(64, 3), relu(), maxpool(3, 3),
            conv(96, 3), relu(),
            conv(96, 3), relu(),
            conv(64, 3), relu(), maxpool(3, 3),
            fully_connected(1000), relu(),
            fully_connected(1000), relu(),
            fully_connected(num_classes), softmax_output(),
        ),
        num_classes,
    )


def desk_arch(num_classes: int, patch_size: int = 32, channels: int = 1) -> ArchSpec:
    """Same topology as :func:`full_arch`, sized for CPU training in minutes."""
    return ArchSpec(
        (patch_size, patch_size, channels),
        (
            conv(16, 3), relu(),
            conv(32, 3), relu(), maxpool(3, 3),
            conv(32, 3), relu(),
            conv(32, 3), relu(),
            conv(32, 3), relu(), maxpool(3, 3),
            fully_connected(128), relu(),
            fully_connected(128), relu(),
            fully_connected(num_classes), softmax_output(),
        ),
        num_classes,
    )


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


@dataclass(eq=False)
class Network:
    arch: ArchSpec
    weights: list
    rng_seed: int = 0
    velocity: Optional[list] = None
    epochs_trained: int = 0

    def __post_init__(self):
        expected = self.arch.param_shapes()
        if len(expected) != len(self.weights):
            raise ShapeMismatch(f"expected {len(expected)} weight arrays, got {len(self.weights)}")
        for i, (w, s) in enumerate(zip(self.weights, expected)):
            if tuple(w.shape) != tuple(s):
                raise ShapeMismatch(f"weight {i}: shape {w.shape} != {s}")
        if self.velocity is None:
            self.velocity = [np.zeros_like(w) for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype if self.weights else np.dtype(np.float32)

    def num_params(self) -> int:
        return int(sum(w.size for w in self.weights))

    def copy(self) -> "Network":
        return Network(self.arch, [w.copy() for w in self.weights], self.rng_seed,
                       [v.copy() for v in self.velocity], self.epochs_trained)

    def astype(self, dtype) -> "Network":
        return Network(self.arch, [w.astype(dtype) for w in self.weights], self.rng_seed,
                       [v.astype(dtype) for v in self.velocity], self.epochs_trained)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) for w in self.weights)


def build_network(arch: ArchSpec, seed: int = 0, dtype=np.float32) -> Network:
    """He-initialised weights (normal, std sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    weights = []
    for shape in arch.param_shapes():
        if len(shape) == 1:
            weights.append(np.zeros(shape, dtype=dtype))
        else:
            fan_in = int(np.prod(shape[1:]))
            weights.append((rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype))
    return Network(arch, weights, seed)


# -------------------------------------------------------------- layers ----

def _conv_forward(x, W, b, layer):
    k, s, p = layer.kernel, layer.stride, layer.padding
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
    n, ho, wo = win.shape[:3]
    cols = win.reshape(n * ho * wo, -1)
    out = cols @ W.reshape(W.shape[0], -1).T + b
    return out.reshape(n, ho, wo, -1), (cols, x.shape)


def _conv_backward(dout, W, cache, layer):
    cols, xshape = cache
    k, s, p = layer.kernel, layer.stride, layer.padding
    n, ho, wo, o = dout.shape
    d2 = dout.reshape(-1, o)
    dW = (d2.T @ cols).reshape(W.shape)
    db = d2.sum(axis=0)
    # (k, k, C, O) weight layout makes every tap's slab contiguous
    wt = W.transpose(2, 3, 1, 0).reshape(k * k * W.shape[1], o)
    dcols = (d2 @ wt.T).reshape(n, ho, wo, k, k, W.shape[1])
    dx = np.zeros(xshape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
    if p:
        dx = dx[:, p:-p, p:-p, :]
    return dx, dW, db


def _pool_forward(x, layer):
    w, s = layer.window, layer.stride
    win = sliding_window_view(x, (w, w), axis=(1, 2))[:, ::s, ::s]
    flat = win.reshape(win.shape[:4] + (w * w,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def _pool_backward(dout, cache, layer):
    arg, xshape = cache
    w, s = layer.window, layer.stride
    n, ho, wo, c = dout.shape
    dx = np.zeros(xshape, dtype=dout.dtype)
    for i in range(w):
        for j in range(w):
            sel = np.where(arg == i * w + j, dout, 0)
            dx[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += sel
    return dx


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _run(weights, arch, x):
    """Forward pass returning logits and the per-layer caches."""
    caches = []
    wi = 0
    for layer in arch.layers:
        if layer.kind == "conv":
            W, b = weights[wi], weights[wi + 1]
            wi += 2
            x, cache = _conv_forward(x, W, b, layer)
        elif layer.kind == "fully_connected":
            W, b = weights[wi], weights[wi + 1]
            wi += 2
            cache = x.shape
            x2 = x.reshape(x.shape[0], -1)
            cache = (x2, cache)
            x = x2 @ W.T + b
        elif layer.kind == "maxpool":
            x, cache = _pool_forward(x, layer)
        elif layer.kind == "relu":
            cache = x > 0
            x = x * cache
        else:
            cache = None
        caches.append(cache)
    return x, caches


def _backprop(weights, arch, caches, dlogits):
    grads = [None] * len(weights)
    wi = len(weights)
    d = dlogits
    for layer, cache in zip(reversed(arch.layers), reversed(caches)):
        if layer.kind == "softmax_output":
            continue
        if layer.kind == "fully_connected":
            wi -= 2
            W = weights[wi]
            x2, xshape = cache
            grads[wi] = d.T @ x2
            grads[wi + 1] = d.sum(axis=0)
            d = (d @ W).reshape(xshape)
        elif layer.kind == "conv":
            wi -= 2
            d, grads[wi], grads[wi + 1] = _conv_backward(d, weights[wi], cache, layer)
        elif layer.kind == "maxpool":
            d = _pool_backward(d, cache, layer)
        elif layer.kind == "relu":
            d = d * cache
    return grads


def _check_batch(net: Network, batch) -> np.ndarray:
    x = np.asarray(batch)
    if x.ndim == 3 and net.arch.input[2] == 1:
        x = x[..., None]
    if x.ndim != 4 or tuple(x.shape[1:]) != net.arch.input:
        raise ShapeMismatch(f"batch shape {x.shape} does not match input {net.arch.input}")
    return x.astype(net.dtype, copy=False)


def forward(net: Network, batch) -> np.ndarray:
    """Class probability rows for a batch shaped ``(N, H, W, C)``."""
    x = _check_batch(net, batch)
    logits, _ = _run(net.weights, net.arch, x)
    return softmax(logits.astype(np.float64))


def loss_and_grad(net: Network, batch, labels):
    """Mean softmax cross-entropy and its gradient for every weight array."""
    x = _check_batch(net, batch)
    y = np.asarray(labels, dtype=np.int64).ravel()
    if y.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"{y.shape[0]} labels for a batch of {x.shape[0]}")
    if y.size and (y.min() < 0 or y.max() >= net.arch.num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {net.arch.num_classes})")
    logits, caches = _run(net.weights, net.arch, x)
    n = x.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), y] - logsum
    loss = float(-logp.mean())
    p = np.exp(z - logsum[:, None])
    dlogits = p
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads = _backprop(net.weights, net.arch, caches, dlogits.astype(net.dtype, copy=False))
    return loss, grads


def _loss_only(weights, arch, x, y) -> float:
    logits, _ = _run(weights, arch, x)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    return float(-(z[np.arange(x.shape[0]), y] - logsum).mean())


MAX_GRADCHECK_PARAMS = 50_000


def numeric_gradient(net: Network, batch, labels, step: float = 1e-5) -> list:
    """Central finite differences of the mean loss, in double precision."""
    net64 = net.astype(np.float64)
    x = _check_batch(net64, batch)
    y = np.asarray(labels, dtype=np.int64).ravel()
    weights = net64.weights
    out = []
    for w in weights:
        g = np.zeros_like(w)
        flat = w.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            fp = _loss_only(weights, net64.arch, x, y)
            flat[k] = orig - step
            fm = _loss_only(weights, net64.arch, x, y)
            flat[k] = orig
            gflat[k] = (fp - fm) / (2.0 * step)
        out.append(g)
    return out


def grad_check(net: Network, batch, labels, step: float = 1e-5, analytic: Optional[Sequence] = None) -> float:
    """Max relative error between analytic and finite-difference gradients.

    ``analytic`` overrides the backprop gradients (used to inject faults).
    """
    if net.num_params() > MAX_GRADCHECK_PARAMS:
        raise TooManyParameters(f"{net.num_params()} parameters exceed {MAX_GRADCHECK_PARAMS}")
    net64 = net.astype(np.float64)
    if analytic is None:
        _, analytic = loss_and_grad(net64, np.asarray(batch, dtype=np.float64), labels)
    numeric = numeric_gradient(net64, batch, labels, step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        rel = np.abs(a - n) / denom
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst


def random_small_arch(rng: np.random.Generator) -> ArchSpec:
    """A random tiny net containing every layer kind, for gradient checks."""
    size = int(rng.integers(6, 10))
    ch = int(rng.integers(1, 4))
    k1 = int(rng.integers(1, 4))
    layers = [conv(int(rng.integers(2, 5)), k1, int(rng.integers(1, 3)), int(rng.integers(0, k1 // 2 + 1))), relu()]
    layers += [maxpool(2, int(rng.integers(1, 3)))]
    if rng.random() < 0.5:
        layers += [conv(int(rng.integers(2, 4)), 3, 1, 1), relu()]
    layers += [fully_connected(int(rng.integers(3, 7))), relu()]
    classes = int(rng.integers(2, 6))
    layers += [fully_connected(classes), softmax_output()]
    arch = ArchSpec((size, size, ch), tuple(layers), classes)
    arch.shapes()
    return arch


@dataclass
class GradCheckResult:
    index: int
    params: int
    kinds: tuple
    error: float

    def line(self) -> str:
        return f"net {self.index:02d} params={self.params} layers={'+'.join(self.kinds)} max_rel_err={self.error:.3e}"


def kink_margin(net: Network, batch) -> float:
    """Smallest distance of any relu input from 0 or any pool max from the runner-up."""
    x = _check_batch(net, batch)
    worst = np.inf
    wi = 0
    for layer in net.arch.layers:
        if layer.kind == "conv":
            x, _ = _conv_forward(x, net.weights[wi], net.weights[wi + 1], layer)
            wi += 2
        elif layer.kind == "fully_connected":
            x = x.reshape(x.shape[0], -1) @ net.weights[wi].T + net.weights[wi + 1]
            wi += 2
        elif layer.kind == "relu":
            worst = min(worst, float(np.abs(x).min()))
            x = np.maximum(x, 0)
        elif layer.kind == "maxpool":
            w, st = layer.window, layer.stride
            win = sliding_window_view(x, (w, w), axis=(1, 2))[:, ::st, ::st]
            top2 = np.sort(win.reshape(win.shape[:4] + (w * w,)), axis=-1)[..., -2:]
            # ties at zero come from relu and carry no gradient either way
            live = top2[..., 1] > 0
            if live.any():
                worst = min(worst, float((top2[..., 1] - top2[..., 0])[live].min()))
            x, _ = _pool_forward(x, layer)
    return worst


def gradcheck_suite(seed: int, count: int = 20, batch: int = 3, step: float = 1e-5,
                    margin: float = 1e-3) -> list[GradCheckResult]:
    """Grad-check ``count`` random small double-precision nets.

    Inputs are redrawn until no relu input or pool comparison sits within
    ``margin`` of a kink, where finite differences are meaningless.
    """
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        arch = random_small_arch(rng)
        net = build_network(arch, int(rng.integers(0, 2**31)), dtype=np.float64)
        # nonzero biases so no unit sits exactly on a relu kink
        for w in net.weights[1::2]:
            w += rng.normal(0.0, 0.1, size=w.shape)
        for _ in range(100):
            x = rng.normal(0.0, 1.0, size=(batch,) + arch.input)
            if kink_margin(net, x) > margin:
                break
        y = rng.integers(0, arch.num_classes, size=batch)
        kinds = tuple(dict.fromkeys(l.kind for l in arch.layers))
        out.append(GradCheckResult(i, net.num_params(), kinds, grad_check(net, x, y, step)))
    return out


# ------------------------------------------------------------ training ----

def sgd_step(net: Network, grads, cfg: TrainConfig) -> Network:
    """Momentum SGD, in place: v <- mu*v + g; w <- w - lr*(v + decay*w)."""
    if len(grads) != len(net.weights):
        raise ShapeMismatch(f"{len(grads)} gradients for {len(net.weights)} weight arrays")
    for w, v, g in zip(net.weights, net.velocity, grads):
        if g.shape != w.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != weight shape {w.shape}")
        v *= cfg.momentum
        v += g
        if cfg.weight_decay:
            w -= cfg.learning_rate * (v + cfg.weight_decay * w)
        else:
            w -= cfg.learning_rate * v
    return net


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float

    def to_json(self) -> dict:
        return {"epoch": self.epoch, "loss": self.loss, "accuracy": self.accuracy}


def train(net: Network, data, cfg: TrainConfig, log=None):
    """Train a copy of ``net`` on ``data = (inputs, labels)``.

    Epoch ``e`` (counted over the network's whole life, so resumed runs line
    up) shuffles with ``default_rng([cfg.seed, e])``. Returns the trained
    network and one :class:`EpochStats` per epoch.
    """
    x, y = data
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise EmptyDataset("no training samples")
    if len(x) != len(y):
        raise ShapeMismatch(f"{len(x)} inputs but {len(y)} labels")
    if y.min() < 0 or y.max() >= net.arch.num_classes:
        raise LabelOutOfRange(f"labels must lie in [0, {net.arch.num_classes})")
    net = net.copy()
    history = []
    for _ in range(cfg.epochs):
        epoch = net.epochs_trained
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(x))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = _check_batch(net, x[idx])
            logits, caches = _run(net.weights, net.arch, xb)
            yb = y[idx]
            nb = len(idx)
            z = logits.astype(np.float64)
            z = z - z.max(axis=1, keepdims=True)
            logsum = np.log(np.exp(z).sum(axis=1))
            total_loss += float(-(z[np.arange(nb), yb] - logsum).sum())
            correct += int((z.argmax(axis=1) == yb).sum())
            p = np.exp(z - logsum[:, None])
            p[np.arange(nb), yb] -= 1.0
            p /= nb
            grads = _backprop(net.weights, net.arch, caches, p.astype(net.dtype))
            sgd_step(net, grads, cfg)
        if not net.all_finite():
            raise FloatingPointError(f"non-finite weights after epoch {epoch}")
        net.epochs_trained += 1
        stats = EpochStats(epoch, total_loss / len(x), correct / len(x))
        history.append(stats)
        if log is not None:
            log(stats)
    return net, history


def predict_classes(net: Network, x, batch_size: int = 256) -> np.ndarray:
    return predict_proba(net, x, batch_size).argmax(axis=1)


def predict_proba(net: Network, x, batch_size: int = 256) -> np.ndarray:
    rows = [forward(net, x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(rows) if rows else np.zeros((0, net.arch.num_classes))


# ---------------------------------------------------------- checkpoint ----

MAGIC = b"QCIA"
FORMAT_VERSION = 1


def checkpoint_bytes(net: Network) -> bytes:
    header = json.dumps(
        {
            "arch": net.arch.to_json(),
            "rng_seed": int(net.rng_seed),
            "epochs_trained": int(net.epochs_trained),
            "has_velocity": True,
        },
        sort_keys=True,
    ).encode("utf-8")
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", FORMAT_VERSION)
    buf += struct.pack("<I", len(header)) + header
    for arr in list(net.weights) + list(net.velocity):
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


def network_from_bytes(data: bytes) -> Network:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CorruptStream("not a qcia checkpoint")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch("checkpoint CRC32 mismatch")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        arch = ArchSpec.from_json(header["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptStream(f"bad checkpoint header: {exc}") from None
    shapes = arch.param_shapes()
    if header.get("has_velocity"):
        shapes = shapes + shapes
    offset = 12 + hlen
    arrays = []
    for s in shapes:
        count = int(np.prod(s))
        chunk = data[offset:offset + 4 * count]
        if len(chunk) != 4 * count:
            raise CorruptStream("checkpoint weight data truncated")
        arrays.append(np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(s))
        offset += 4 * count
    if offset != len(data) - 4:
        raise CorruptStream("trailing bytes in checkpoint")
    k = len(arch.param_shapes())
    velocity = arrays[k:] if header.get("has_velocity") else None
    return Network(arch, arrays[:k], header.get("rng_seed", 0), velocity, header.get("epochs_trained", 0))


def save_checkpoint(net: Network, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(checkpoint_bytes(net))
        tmp.replace(path)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_checkpoint(path) -> Network:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return network_from_bytes(data)
