"""U-Net style encoder-decoder with concat (U-Net) or additive (LinkNet) skips."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 2
    depth: int = 2
    base_width: int = 8
    skip_mode: str = "concat"  # "concat" | "add"
    out_activation: str = "sigmoid"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.in_channels < 1 or self.base_width < 1:
            raise ValueError("channel counts must be positive")
        if self.skip_mode not in ("concat", "add"):
            raise ValueError(f"unknown skip_mode {self.skip_mode!r}")
        if self.out_activation != "sigmoid":
            raise ValueError("only the sigmoid head is supported")

    def width(self, level: int) -> int:
        return self.base_width * 2**level

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    """Name -> shape for every kernel and bias, in a fixed order."""
    shapes: OrderedDict[str, tuple] = OrderedDict()

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.w"] = (cout, cin, k, k)
        shapes[f"{name}.b"] = (cout,)

    cin = cfg.in_channels
    for i in range(cfg.depth):
        conv(f"enc{i}.conv1", cin, cfg.width(i))
        conv(f"enc{i}.conv2", cfg.width(i), cfg.width(i))
        cin = cfg.width(i)
    conv("bottleneck.conv1", cin, cfg.width(cfg.depth))
    conv("bottleneck.conv2", cfg.width(cfg.depth), cfg.width(cfg.depth))
    for i in reversed(range(cfg.depth)):
        w = cfg.width(i)
        conv(f"dec{i}.reduce", cfg.width(i + 1), w)
        conv(f"dec{i}.conv1", 2 * w if cfg.skip_mode == "concat" else w, w)
        conv(f"dec{i}.conv2", w, w)
    conv("head", cfg.width(0), 1, k=1)
    return shapes


def init_weights(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "OrderedDict[str, np.ndarray]":
    """He (fan-in) normal kernels, zero biases, drawn in parameter order."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x17E7])))
    weights = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            weights[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            weights[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return weights


def zero_weights(cfg: ModelConfig, dtype=np.float32):
    return OrderedDict((n, np.zeros(s, dtype=dtype)) for n, s in param_shapes(cfg).items())


def check_input(cfg: ModelConfig, x) -> None:
    if x.ndim != 4:
        raise ShapeError(f"input: expected (B, C, H, W), got shape {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"enc0.conv1: expected {cfg.in_channels} input channels, got {x.shape[1]}")
    f = 2**cfg.depth
    if x.shape[2] % f or x.shape[3] % f:
        raise ShapeError(f"enc{cfg.depth - 1}.pool: H, W = {x.shape[2:]} not divisible by 2^depth = {f}")


def _check_weights(cfg, weights):
    for name, shape in param_shapes(cfg).items():
        if name not in weights:
            raise ShapeError(f"{name}: missing parameter")
        if tuple(weights[name].shape) != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {tuple(weights[name].shape)}")


def forward_tape(weights, cfg: ModelConfig, x):
    """Forward pass that also returns the tape needed by :func:`backward_tape`."""
    check_input(cfg, x)
    _check_weights(cfg, weights)
    x = x.astype(weights["head.w"].dtype, copy=False)
    tape = []

    def conv_relu(name, h):
        h, c = L.conv2d_forward(h, weights[f"{name}.w"], weights[f"{name}.b"])
        tape.append(("conv", name, c))
        h, c = L.relu_forward(h)
        tape.append(("relu", name, c))
        return h

    skips = []
    h = x
    for i in range(cfg.depth):
        h = conv_relu(f"enc{i}.conv1", h)
        h = conv_relu(f"enc{i}.conv2", h)
        skips.append(h)
        h, c = L.maxpool2_forward(h)
        tape.append(("pool", f"enc{i}.pool", c))
    h = conv_relu("bottleneck.conv1", h)
    h = conv_relu("bottleneck.conv2", h)
    for i in reversed(range(cfg.depth)):
        h, c = L.upsample2_forward(h)
        tape.append(("up", f"dec{i}.up", c))
        h = conv_relu(f"dec{i}.reduce", h)
        if cfg.skip_mode == "concat":
            h, c = L.concat_forward(h, skips[i])
        else:
            h, c = L.add_forward(h, skips[i])
        tape.append(("join", f"dec{i}.join", (i, c)))
        h = conv_relu(f"dec{i}.conv1", h)
        h = conv_relu(f"dec{i}.conv2", h)
    h, c = L.conv2d_forward(h, weights["head.w"], weights["head.b"])
    tape.append(("conv", "head", c))
    out, c = L.sigmoid_forward(h)
    tape.append(("sigmoid", "head.sigmoid", c))
    if not np.all(np.isfinite(out)):
        raise NumericalError("head: non-finite output")
    return out, tape


def backward_tape(cfg: ModelConfig, tape, dout, need_input_grad: bool = False):
    grads = OrderedDict()
    skip_grads = {}
    g = dout
    for kind, name, cache in reversed(tape):
        if kind == "sigmoid":
            g = L.sigmoid_backward(g, cache)
        elif kind == "relu":
            g = L.relu_backward(g, cache)
        elif kind == "conv":
            g, dw, db = L.conv2d_backward(g, cache)
            grads[f"{name}.w"], grads[f"{name}.b"] = dw, db
        elif kind == "join":
            level, c = cache
            if cfg.skip_mode == "concat":
                g, gs = L.concat_backward(g, c)
            else:
                g, gs = L.add_backward(g, c)
            skip_grads[level] = gs
        elif kind == "up":
            g = L.upsample2_backward(g, cache)
        elif kind == "pool":
            g = L.maxpool2_backward(g, cache)
            level = int(name[3:name.index(".")])
            g = g + skip_grads.pop(level)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"{name}: non-finite gradient")
    for n, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"{n}: non-finite parameter gradient")
    ordered = OrderedDict((n, grads[n]) for n in param_shapes(cfg))
    if need_input_grad:
        return ordered, g
    return ordered


def forward(weights, cfg: ModelConfig, x):
    """Predict (B, 1, H, W) probabilities from (B, in_channels, H, W) inputs."""
    return forward_tape(weights, cfg, x)[0]


def backward(weights, cfg: ModelConfig, x, upstream):
    """Parameter gradients of ``sum(upstream * forward(x))``."""
    out, tape = forward_tape(weights, cfg, x)
    if upstream.shape != out.shape:
        raise ShapeError(f"head: upstream gradient shape {upstream.shape} != output {out.shape}")
    return backward_tape(cfg, tape, upstream.astype(out.dtype, copy=False))
