"""Small CNN / MLP models on the tape, and Adam.

Default CNN: four same-padded 3x3 convolutions with channels
1 -> 16 -> 16 -> 16 -> 1, tanh between layers and a linear output.  Its
parameter count is

    sum over layers of  c_out * c_in * k * k + c_out
    = (16*1*9 + 16) + 2 * (16*16*9 + 16) + (1*16*9 + 1) = 4945.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DivergenceError, ShapeError
from .tape import Op, Tape, Variable, relu, reshape, tanh

ARCHITECTURES = ("cnn", "mlp")
ACTIVATIONS = ("tanh", "relu", "linear")
INITS = ("glorot_uniform", "zeros")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "cnn"
    channels: tuple[int, ...] = (1, 16, 16, 16, 1)
    kernel_size: int = 3
    activation: str = "tanh"
    init: str = "glorot_uniform"
    # (ny + 1, nx + 1); required for mlp, checked against inputs when set
    grid_shape: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.grid_shape is not None:
            object.__setattr__(self, "grid_shape", tuple(int(n) for n in self.grid_shape))
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.init not in INITS:
            raise ValueError(f"unknown init scheme {self.init!r}")
        if len(self.channels) < 2 or min(self.channels) < 1:
            raise ValueError(f"need at least two positive widths, got {self.channels}")
        if self.arch == "cnn":
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise ValueError("same padding needs an odd kernel size")
            if self.channels[0] != 1 or self.channels[-1] != 1:
                raise ValueError("cnn maps one input channel to one output channel")
        if self.arch == "mlp" and self.grid_shape is None:
            raise ValueError("mlp needs grid_shape")

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        c = self.channels
        if self.arch == "cnn":
            k = self.kernel_size
            for i, (cin, cout) in enumerate(zip(c, c[1:])):
                shapes.append((f"conv{i}.weight", (cout, cin, k, k)))
                shapes.append((f"conv{i}.bias", (cout,)))
        else:
            n = self.grid_shape[0] * self.grid_shape[1]
            widths = (n,) + c[1:-1] + (n,)
            for i, (nin, nout) in enumerate(zip(widths, widths[1:])):
                shapes.append((f"dense{i}.weight", (nout, nin)))
                shapes.append((f"dense{i}.bias", (nout,)))
        return shapes

    def n_layers(self) -> int:
        return len(self.channels) - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        if d.get("grid_shape") is not None:
            d["grid_shape"] = tuple(d["grid_shape"])
        return cls(**d)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    seed: int = 0

    def __post_init__(self):
        expected = self.config.layer_shapes()
        if [n for n, _ in expected] != list(self.tensors):
            raise ShapeError(f"parameter names {list(self.tensors)} do not match config")
        for name, shape in expected:
            a = np.asarray(self.tensors[name], dtype=np.float64)
            if a.shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} has non-finite entries")
            self.tensors[name] = a

    @property
    def count(self) -> int:
        return sum(a.size for a in self.tensors.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.tensors.values()])

    def unflatten(self, flat: np.ndarray) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.count,):
            raise ShapeError(f"expected {self.count} values, got {flat.shape}")
        out, pos = {}, 0
        for name, a in self.tensors.items():
            out[name] = flat[pos:pos + a.size].reshape(a.shape).copy()
            pos += a.size
        return ModelParams(self.config, out, self.seed)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.seed)

    def on_tape(self, tape: Tape, requires_grad=True) -> dict[str, Variable]:
        return {k: tape.variable(v, requires_grad=requires_grad, name=k) for k, v in self.tensors.items()}


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, drawn in layer order from ``seed``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.layer_shapes():
        if name.endswith(".bias") or config.init == "zeros":
            tensors[name] = np.zeros(shape)
            continue
        receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
        fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(config, tensors, seed)


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    return sliding_window_view(xp, (k, k), axis=(1, 2))  # (C, H, W, k, k)


class Conv2d(Op):
    """Same-padded 2D cross-correlation with bias: (C, H, W) -> (O, H, W)."""

    name = "conv2d"

    def forward(self, x, w, b):
        k = w.shape[-1]
        if x.ndim != 3 or x.shape[0] != w.shape[1]:
            raise ShapeError(f"conv input {x.shape} incompatible with kernel {w.shape}")
        patches = _patches(x, k)
        y = np.tensordot(w, patches, axes=([1, 2, 3], [0, 3, 4])) + b[:, None, None]
        return y, (patches, w)

    def backward(self, ctx, g, needs):
        patches, w = ctx
        k = w.shape[-1]
        gx = gw = gb = None
        if needs[0]:
            gx = np.tensordot(w[:, :, ::-1, ::-1], _patches(g, k), axes=([0, 2, 3], [0, 3, 4]))
        if needs[1]:
            gw = np.tensordot(g, patches, axes=([1, 2], [1, 2]))
        if needs[2]:
            gb = g.sum(axis=(1, 2))
        return gx, gw, gb


class Dense(Op):
    name = "dense"

    def forward(self, x, w, b):
        return w @ x + b, (x, w)

    def backward(self, ctx, g, needs):
        x, w = ctx
        return (w.T @ g if needs[0] else None, np.outer(g, x) if needs[1] else None, g)


def conv2d(x: Variable, w: Variable, b: Variable) -> Variable:
    return x.tape.apply(Conv2d(), x, w, b)


def dense(x: Variable, w: Variable, b: Variable) -> Variable:
    return x.tape.apply(Dense(), x, w, b)


def _activate(x: Variable, tag: str) -> Variable:
    if tag == "tanh":
        return tanh(x)
    if tag == "relu":
        return relu(x)
    return x


def model_forward(params, x: Variable) -> Variable:
    """Map an observed grid ``(ny + 1, nx + 1)`` to a conductivity grid of the same shape.

    ``params`` is a :class:`ModelParams` (wrapped as fresh leaves on ``x``'s
    tape) or a :class:`BoundParams` already on that tape.
    """
    tape = x.tape
    if isinstance(params, ModelParams):
        config = params.config
        pv = params.on_tape(tape)
    else:
        config, pv = params.config, params
    if len(x.shape) != 2:
        raise ShapeError(f"model input must be 2D, got shape {x.shape}")
    if config.grid_shape is not None and x.shape != config.grid_shape:
        raise ShapeError(f"input grid {x.shape} does not match configured {config.grid_shape}")

    shape = x.shape
    n = config.n_layers()
    if config.arch == "cnn":
        h = reshape(x, (1,) + shape)
        for i in range(n):
            h = conv2d(h, pv[f"conv{i}.weight"], pv[f"conv{i}.bias"])
            if i < n - 1:
                h = _activate(h, config.activation)
        return reshape(h, shape)
    h = reshape(x, (-1,))
    for i in range(n):
        h = dense(h, pv[f"dense{i}.weight"], pv[f"dense{i}.bias"])
        if i < n - 1:
            h = _activate(h, config.activation)
    return reshape(h, shape)


class BoundParams(dict):
    """Parameter Variables on a tape, remembering the config they came from."""

    def __init__(self, params: ModelParams, tape: Tape, requires_grad=True):
        super().__init__(params.on_tape(tape, requires_grad))
        self.config = params.config


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.tensors.items()},
            {k: np.zeros_like(a) for k, a in params.tensors.items()},
        )


def adam_step(
    params: ModelParams,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
    t = state.step + 1
    new_t, new_m, new_v = {}, {}, {}
    for name, p in params.tensors.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_t[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return ModelParams(params.config, new_t, params.seed), AdamState(new_m, new_v, t)
