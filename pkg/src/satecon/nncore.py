"""Small numpy conv/FC network with momentum SGD, weight decay and a step LR policy.

Tensors are plain ``numpy.ndarray`` objects laid out channel-first
(batch, channels, height, width).  Convolutions are unpadded ("valid") and
may be strided; fully-connected layers flatten whatever arrives.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

INIT_STD = 0.005
WEIGHT_DECAY = 0.005

FORMAT_VERSION = 1


class SpecError(ValueError):
    """Layer chain is not shape consistent."""


class InputError(ValueError):
    """Data handed to an operation has the wrong shape."""


class NumericError(ArithmeticError):
    def __init__(self, message, layer=None, iteration=None):
        super().__init__(message)
        self.layer = layer
        self.iteration = iteration


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv", "fc", "relu" or "dropout"
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    p: float = 0.0
    decay_mult: float = 1.0
    init_std: float | None = None

    def __post_init__(self):
        if self.kind not in ("conv", "fc", "relu", "dropout"):
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if not 0.0 <= self.p < 1.0:
            raise SpecError(f"dropout probability {self.p} outside [0, 1)")
        if self.kind in ("conv", "fc") and (self.in_channels < 1 or self.out_channels < 1):
            raise SpecError(f"{self.kind} layer needs positive in/out sizes")
        if self.kernel < 1 or self.stride < 1:
            raise SpecError("kernel and stride must be >= 1")

    @property
    def parameterized(self) -> bool:
        return self.kind in ("conv", "fc")


def conv(in_channels, out_channels, kernel=3, stride=1, **kw) -> LayerSpec:
    return LayerSpec("conv", in_channels, out_channels, kernel, stride, **kw)


def fc(in_features, out_features, **kw) -> LayerSpec:
    return LayerSpec("fc", in_features, out_features, **kw)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def dropout(p) -> LayerSpec:
    return LayerSpec("dropout", p=p)


@dataclass(frozen=True)
class SgdConfig:
    """Momentum SGD hyper-parameters.

    Defaults are the fine-tuning values of the original satellite model
    (lr 1e-6, gamma 0.2, momentum 0.8, weight decay 0.005, batch 32).  Those
    assume raw-percentage targets and a pretrained trunk; the desk-scale
    experiments override ``lr``.  ``step_interval`` counts iterations; when
    ``None`` the trainer uses two epochs.
    """

    lr: float = 1e-6
    gamma: float = 0.2
    momentum: float = 0.8
    weight_decay: float = WEIGHT_DECAY
    batch_size: int = 32
    step_interval: int | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.step_interval is not None and self.step_interval < 1:
            raise ValueError("step interval must be >= 1")

    def learning_rate(self, iteration: int, step_interval: int | None = None) -> float:
        interval = step_interval or self.step_interval
        if interval is None:
            raise ValueError("step interval unresolved")
        return self.lr * self.gamma ** (iteration // interval)


@dataclass(frozen=True)
class AugmentSpec:
    hflip: bool = True
    vflip: bool = True
    rotations: tuple[int, ...] = (0, 90, 180, 270)
    seed: int = 0

    def __post_init__(self):
        bad = set(self.rotations) - {0, 90, 180, 270}
        if bad or not self.rotations:
            raise ValueError(f"rotations must be a non-empty subset of 0/90/180/270, got {self.rotations}")


NO_AUGMENT = AugmentSpec(hflip=False, vflip=False, rotations=(0,))


@dataclass
class Network:
    specs: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]  # per-sample, channel first
    weights: list  # ndarray per parameterized layer, None otherwise
    biases: list
    vel_w: list
    vel_b: list
    shapes: list = field(default_factory=list)  # per-layer output shape, filled by init

    @property
    def dtype(self):
        for w in self.weights:
            if w is not None:
                return w.dtype
        return np.dtype(np.float64)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1] if self.shapes else self.input_shape

    def param_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.specs) if s.parameterized]

    def astype(self, dtype) -> "Network":
        cast = lambda arrs: [None if a is None else a.astype(dtype) for a in arrs]
        return replace(self, weights=cast(self.weights), biases=cast(self.biases),
                       vel_w=cast(self.vel_w), vel_b=cast(self.vel_b))

    def copy(self) -> "Network":
        return self.astype(self.dtype)


def _chain_shapes(specs: Sequence[LayerSpec], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    shapes = []
    shape = tuple(input_shape)
    for i, s in enumerate(specs):
        if s.kind == "conv":
            if len(shape) != 3:
                raise SpecError(f"layer {i}: conv needs (C, H, W) input, got {shape}")
            c, h, w = shape
            if c != s.in_channels:
                raise SpecError(f"layer {i}: conv expects {s.in_channels} channels, chain gives {c}")
            if s.kernel > h or s.kernel > w:
                raise SpecError(f"layer {i}: kernel {s.kernel} exceeds spatial extent {h}x{w}")
            shape = (s.out_channels, (h - s.kernel) // s.stride + 1, (w - s.kernel) // s.stride + 1)
        elif s.kind == "fc":
            n = int(np.prod(shape))
            if n != s.in_channels:
                raise SpecError(f"layer {i}: fc expects {s.in_channels} inputs, chain gives {n}")
            shape = (s.out_channels,)
        shapes.append(shape)
    return shapes


def init_network(specs: Sequence[LayerSpec], seed: int, input_shape: Sequence[int],
                 dtype=np.float64) -> Network:
    """Draw weights N(0, std^2) (std 0.005 unless a layer overrides it); biases and momentum zero."""
    specs = tuple(specs)
    input_shape = tuple(int(v) for v in input_shape)
    shapes = _chain_shapes(specs, input_shape)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for s in specs:
        if s.kind == "conv":
            wshape = (s.out_channels, s.in_channels, s.kernel, s.kernel)
        elif s.kind == "fc":
            wshape = (s.in_channels, s.out_channels)
        else:
            weights.append(None)
            biases.append(None)
            continue
        std = INIT_STD if s.init_std is None else s.init_std
        weights.append((rng.standard_normal(wshape) * std).astype(dtype))
        biases.append(np.zeros(s.out_channels, dtype=dtype))
    zeros = lambda arrs: [None if a is None else np.zeros_like(a) for a in arrs]
    return Network(specs, input_shape, weights, biases, zeros(weights), zeros(biases), shapes)


def micro_net(input_shape=(1, 64, 64), outputs=16, width=(8, 16, 16), features=128,
              dropout_p=0.0, conv_init="he") -> list[LayerSpec]:
    """Default desk-scale regressor: three stride-2 3x3 conv+ReLU blocks, then FC-ReLU-FC.

    The conv trunk has no pretrained weights to start from, so by default it
    is He-initialised; the fully-connected layers keep the N(0, 0.005^2) draw.
    Pass ``conv_init=None`` to draw the conv layers at 0.005 as well.
    """
    c, h, w = input_shape
    specs = []
    for out in width:
        std = math.sqrt(2.0 / (c * 9)) if conv_init == "he" else None
        specs += [conv(c, out, 3, 2, init_std=std), relu()]
        c, h, w = out, (h - 3) // 2 + 1, (w - 3) // 2 + 1
    specs.append(fc(c * h * w, features))
    specs.append(relu())
    if dropout_p > 0:
        specs.append(dropout(dropout_p))
    specs.append(fc(features, outputs))
    return specs


def penultimate_index(net: Network) -> int:
    """Index of the layer whose output is the feature vector feeding the last FC layer."""
    fcs = [i for i, s in enumerate(net.specs) if s.kind == "fc"]
    if len(fcs) < 2:
        raise SpecError("network has no penultimate fully-connected layer")
    last = fcs[-1]
    # activations following the second-to-last fc (relu/dropout) belong to the feature
    i = fcs[-2]
    while i + 1 < last and net.specs[i + 1].kind == "relu":
        i += 1
    return i


# -- layer kernels -----------------------------------------------------------

def _im2col(x, k, stride):
    n, c, h, w = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _conv_forward(x, wgt, b, stride):
    n = x.shape[0]
    o, c, k, _ = wgt.shape
    cols, ho, wo = _im2col(x, k, stride)
    out = cols @ wgt.reshape(o, -1).T + b
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, x_shape, cols, wgt, stride):
    n, c, h, w = x_shape
    o, _, k, _ = wgt.shape
    ho, wo = dout.shape[2], dout.shape[3]
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dflat.T @ cols).reshape(wgt.shape)
    db = dflat.sum(axis=0)
    dcols = (dflat @ wgt.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dw, db


def _check_batch(net: Network, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.shape[1:] != net.input_shape:
        if batch.shape == net.input_shape:
            raise InputError(f"missing batch axis: got {batch.shape}")
        raise InputError(f"batch sample shape {batch.shape[1:]} != network input {net.input_shape}")
    return batch


def forward(net: Network, batch, training=False, rng=None, upto=None, return_cache=False):
    """Run ``batch`` through the network.

    ``upto`` stops after that layer index (inclusive) and returns its output.
    Dropout only acts when ``training`` is set, and then needs ``rng``.
    """
    x = _check_batch(net, batch).astype(net.dtype, copy=False)
    cache = []
    last = len(net.specs) - 1 if upto is None else upto
    for i, s in enumerate(net.specs[:last + 1]):
        if s.kind == "conv":
            y, cols = _conv_forward(x, net.weights[i], net.biases[i], s.stride)
            cache.append((x.shape, cols))
        elif s.kind == "fc":
            flat = x.reshape(x.shape[0], -1)
            y = flat @ net.weights[i] + net.biases[i]
            cache.append((x.shape, flat))
        elif s.kind == "relu":
            mask = x > 0
            y = np.maximum(x, 0)
            cache.append(mask)
        else:
            if training and s.p > 0:
                if rng is None:
                    raise ValueError("dropout in training mode needs an rng")
                keep = (rng.random(x.shape) >= s.p).astype(x.dtype) / (1.0 - s.p)
                y = x * keep
                cache.append(keep)
            else:
                y = x
                cache.append(None)
        x = y
    if return_cache:
        return x, cache
    return x


def backward(net: Network, cache, grad_out):
    """Back-propagate ``grad_out`` (d loss / d output); returns per-layer (dW, db) or None."""
    grads = [None] * len(net.specs)
    g = grad_out
    for i in range(len(cache) - 1, -1, -1):
        s = net.specs[i]
        c = cache[i]
        if s.kind == "conv":
            x_shape, cols = c
            g, dw, db = _conv_backward(g, x_shape, cols, net.weights[i], s.stride)
            grads[i] = (dw, db)
        elif s.kind == "fc":
            x_shape, flat = c
            g2 = g.reshape(g.shape[0], -1)
            grads[i] = (flat.T @ g2, g2.sum(axis=0))
            g = (g2 @ net.weights[i].T).reshape(x_shape)
        elif s.kind == "relu":
            g = g * c
        else:
            if c is not None:
                g = g * c
    return grads


# -- objective ---------------------------------------------------------------

def euclidean_loss(pred, target):
    """(1/2M) * sum of squared residuals over samples and outputs, with its gradient."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise InputError(f"prediction shape {pred.shape} != target shape {target.shape}")
    m = pred.shape[0]
    diff = pred - target
    return float(np.sum(diff * diff) / (2.0 * m)), diff / m


def regularization(net: Network, d=WEIGHT_DECAY) -> float:
    total = 0.0
    for s, w in zip(net.specs, net.weights):
        if w is not None:
            total += s.decay_mult * float(np.sum(np.square(w, dtype=np.float64)))
    return 0.5 * d * total


def regularized_objective(net: Network, loss: float, d=WEIGHT_DECAY) -> float:
    """Data loss plus (d/2) * sum_l d_l * ||W_l||^2 (biases are not decayed)."""
    return loss + regularization(net, d)


def loss_and_grads(net: Network, batch, target, training=False, rng=None):
    out, cache = forward(net, batch, training=training, rng=rng, return_cache=True)
    loss, g = euclidean_loss(out.reshape(target.shape), target)
    return loss, backward(net, cache, g.reshape(out.shape))


def sgd_step(net: Network, grads, config: SgdConfig, iteration: int,
             step_interval: int | None = None) -> Network:
    """One momentum step; returns a new Network and leaves ``net`` untouched.

    v <- momentum * v - lr(t) * (grad + d * d_l * w);  w <- w + v
    """
    lr = config.learning_rate(iteration, step_interval)
    d = config.weight_decay
    weights, biases = list(net.weights), list(net.biases)
    vel_w, vel_b = list(net.vel_w), list(net.vel_b)
    for i in net.param_layers():
        if grads[i] is None:
            raise InputError(f"missing gradient for layer {i}")
        gw, gb = grads[i]
        if gw.shape != weights[i].shape or gb.shape != biases[i].shape:
            raise InputError(f"layer {i}: gradient shape {gw.shape} != weight shape {weights[i].shape}")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError(f"non-finite gradient in layer {i}", layer=i, iteration=iteration)
        w = weights[i]
        vw = config.momentum * vel_w[i] - lr * (gw + d * net.specs[i].decay_mult * w)
        vb = config.momentum * vel_b[i] - lr * gb
        vel_w[i], vel_b[i] = vw.astype(w.dtype), vb.astype(w.dtype)
        weights[i] = w + vel_w[i]
        biases[i] = biases[i] + vel_b[i]
    return replace(net, weights=weights, biases=biases, vel_w=vel_w, vel_b=vel_b)


# -- augmentation ------------------------------------------------------------

def augment(image, spec: AugmentSpec, draw: int) -> np.ndarray:
    """Flip/rotate the last two axes; the transform is a pure function of (spec.seed, draw)."""
    image = np.asarray(image)
    rng = np.random.default_rng([spec.seed, draw])
    h = spec.hflip and rng.random() < 0.5
    v = spec.vflip and rng.random() < 0.5
    rot = spec.rotations[rng.integers(len(spec.rotations))]
    out = image
    if h:
        out = out[..., ::-1]
    if v:
        out = out[..., ::-1, :]
    if rot:
        out = np.rot90(out, rot // 90, axes=(-2, -1))
    return np.ascontiguousarray(out)


def hflip(image):
    return np.ascontiguousarray(np.asarray(image)[..., ::-1])


def rot90(image, quarter_turns=1):
    return np.ascontiguousarray(np.rot90(image, quarter_turns, axes=(-2, -1)))


# -- gradient check ----------------------------------------------------------

def analytic_objective_grads(net: Network, batch, target, d=WEIGHT_DECAY):
    _, grads = loss_and_grads(net, batch, target)
    out = []
    for i, g in enumerate(grads):
        if g is None:
            out.append(None)
        else:
            out.append((g[0] + d * net.specs[i].decay_mult * net.weights[i], g[1]))
    return out


def grad_check(net: Network, batch, target, epsilon=1e-5, d=WEIGHT_DECAY, samples=40,
               seed=0, grads=None, atol=1e-6) -> float:
    """Max relative error between analytic dC/dtheta and central differences of C.

    Runs in float64 on a copy.  ``grads`` lets a caller inject its own analytic
    gradients (the detector test corrupts them on purpose).  Relative error is
    |analytic - numeric| / max(|numeric|, atol).
    """
    net = net.astype(np.float64)
    batch = np.asarray(batch, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if grads is None:
        grads = analytic_objective_grads(net, batch, target, d)
    rng = np.random.default_rng(seed)

    def objective():
        loss, _ = euclidean_loss(forward(net, batch).reshape(target.shape), target)
        return regularized_objective(net, loss, d)

    worst = 0.0
    for i in net.param_layers():
        for arr, g in ((net.weights[i], grads[i][0]), (net.biases[i], grads[i][1])):
            flat = arr.reshape(-1)
            gflat = np.asarray(g).reshape(-1)
            idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
            for j in idx:
                old = flat[j]
                flat[j] = old + epsilon
                up = objective()
                flat[j] = old - epsilon
                down = objective()
                flat[j] = old
                num = (up - down) / (2 * epsilon)
                err = abs(gflat[j] - num) / max(abs(num), atol)
                worst = max(worst, err)
    return worst


# -- serialization -----------------------------------------------------------

def _pack(arr):
    if arr is None:
        return None
    a = np.ascontiguousarray(arr)
    return {"dtype": a.dtype.newbyteorder("<").str, "shape": list(a.shape),
            "data": base64.b64encode(a.astype(a.dtype.newbyteorder("<")).tobytes()).decode("ascii")}


def _unpack(obj):
    if obj is None:
        return None
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=np.dtype(obj["dtype"])).reshape(obj["shape"]).astype(
        np.dtype(obj["dtype"]).newbyteorder("="))


def network_to_dict(net: Network) -> dict:
    return {
        "format": "satecon-network",
        "version": FORMAT_VERSION,
        "input_shape": list(net.input_shape),
        "specs": [s.__dict__.copy() for s in net.specs],
        "weights": [_pack(a) for a in net.weights],
        "biases": [_pack(a) for a in net.biases],
        "vel_w": [_pack(a) for a in net.vel_w],
        "vel_b": [_pack(a) for a in net.vel_b],
    }


def network_from_dict(obj: dict) -> Network:
    if obj.get("format") != "satecon-network":
        raise ValueError("not a network container")
    if obj.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported network container version {obj.get('version')}")
    specs = tuple(LayerSpec(**s) for s in obj["specs"])
    input_shape = tuple(obj["input_shape"])
    return Network(specs, input_shape,
                   [_unpack(a) for a in obj["weights"]], [_unpack(a) for a in obj["biases"]],
                   [_unpack(a) for a in obj["vel_w"]], [_unpack(a) for a in obj["vel_b"]],
                   _chain_shapes(specs, input_shape))


def save_network(net: Network, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), sort_keys=True))


def load_network(path) -> Network:
    return network_from_dict(json.loads(Path(path).read_text()))
