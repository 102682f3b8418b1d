"""Small dense MLPs with hand-written reverse mode and an Adam optimizer.

Only what the radiance-field model needs: fixed-topology fully connected
networks with ReLU hidden layers and one of three output activations.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

HIDDEN_ACTIVATIONS = ("relu",)
OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "exp")

# Pre-activation clamp for the exponential output.
EXP_CLAMP = 15.0
# hot loops (encoding, marching) run compiled; "numpy" selects the reference routes
DEFAULT_BACKEND = "numba"

MODEL_MAGIC = b"INGW"
MODEL_VERSION = 1


class ConfigError(ValueError):
    """Raised for inconsistent shapes or settings."""


class UsageError(RuntimeError):
    """Raised when a call violates the contract of a previous call."""


@dataclass
class Mlp:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "identity"
    exp_scale: float = 1.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigError("need one bias per weight matrix")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ConfigError(f"layer {k}: weight {w.shape} / bias {b.shape}")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ConfigError(f"layer {k} in-dim {w.shape[0]} does not chain")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"unknown output activation {self.output_activation!r}")

    @classmethod
    def create(cls, dims, rng, output_activation="identity", exp_scale=1.0,
               dtype=np.float32):
        """Uniform(+-1/sqrt(fan_in)) init for a network with layer widths ``dims``."""
        dims = list(dims)
        if len(dims) < 2:
            raise ConfigError("need at least input and output width")
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
            biases.append(rng.uniform(-bound, bound, fan_out).astype(dtype))
        return cls(weights, biases, output_activation=output_activation,
                   exp_scale=exp_scale)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        """Parameters in canonical order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def astype(self, dtype) -> "Mlp":
        return Mlp([w.astype(dtype) for w in self.weights],
                   [b.astype(dtype) for b in self.biases],
                   self.hidden_activation, self.output_activation, self.exp_scale)

    def copy(self) -> "Mlp":
        return self.astype(self.weights[0].dtype)


@dataclass
class GradientTape:
    """Activations recorded by :func:`mlp_forward` for one batch."""

    mlp: Mlp
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activation of each layer
    output: np.ndarray

    @property
    def batch(self) -> int:
        return self.output.shape[0]


def _output_act(mlp: Mlp, z: np.ndarray) -> np.ndarray:
    if mlp.output_activation == "identity":
        return z
    if mlp.output_activation == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free logistic
    return mlp.exp_scale * np.exp(np.clip(z, -EXP_CLAMP, EXP_CLAMP))


def mlp_forward(mlp: Mlp, x: np.ndarray) -> tuple[np.ndarray, GradientTape]:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != mlp.weights[0].shape[0]:
        raise ConfigError(
            f"input shape {x.shape} does not match in-dim {mlp.weights[0].shape[0]}")
    inputs, pre = [], []
    h = x
    last = len(mlp.weights) - 1
    for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0) if k < last else _output_act(mlp, z)
    return h, GradientTape(mlp, inputs, pre, h)


def mlp_backward(tape: GradientTape, dy: np.ndarray):
    """Returns ``(param_grads, input_grad)``; param grads follow ``Mlp.params`` order."""
    mlp = tape.mlp
    dy = np.asarray(dy)
    if dy.shape != tape.output.shape:
        raise UsageError(f"upstream gradient {dy.shape} != output {tape.output.shape}")
    z = tape.pre[-1]
    if mlp.output_activation == "identity":
        dz = dy
    elif mlp.output_activation == "sigmoid":
        dz = dy * tape.output * (1 - tape.output)
    else:
        # flat outside the clamp window
        inside = (z > -EXP_CLAMP) & (z < EXP_CLAMP)
        dz = dy * tape.output * inside
    grads = [None] * (2 * len(mlp.weights))
    for k in range(len(mlp.weights) - 1, -1, -1):
        grads[2 * k] = tape.inputs[k].T @ dz
        grads[2 * k + 1] = dz.sum(axis=0)
        dh = dz @ mlp.weights[k].T
        if k:
            dz = dh * (tape.pre[k - 1] > 0)
    return grads, dh


def mlp_eval(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    """Forward pass without keeping a tape."""
    return mlp_forward(mlp, x)[0]


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    step: int = 0
    skipped: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def _ensure(self, params):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(self.m) != len(params) or any(
                m.shape != p.shape for m, p in zip(self.m, params)):
            raise ConfigError("moment buffers do not match parameters")


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> bool:
    """Update ``params`` in place. Returns False when the step was skipped.

    A step with any non-finite gradient is skipped entirely and counted in
    ``state.skipped``; moments and the step counter are left untouched.
    """
    state._ensure(params)
    if len(grads) != len(params):
        raise ConfigError("one gradient per parameter required")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ConfigError(f"gradient {g.shape} != parameter {p.shape}")
    if not all(np.isfinite(g).all() for g in grads):
        state.skipped += 1
        return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return True


# -- snapshots ---------------------------------------------------------------

def write_params_header(fh, layer_dims: list[list[int]], extra: list[int] = ()):
    fh.write(MODEL_MAGIC)
    fh.write(struct.pack("<I", MODEL_VERSION))
    fh.write(struct.pack("<I", len(layer_dims)))
    for dims in layer_dims:
        fh.write(struct.pack("<I", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
    fh.write(struct.pack("<I", len(extra)))
    if extra:
        fh.write(struct.pack(f"<{len(extra)}I", *extra))


def read_params_header(fh):
    magic = fh.read(4)
    if magic != MODEL_MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model snapshot version {version}")
    (n_mlps,) = struct.unpack("<I", fh.read(4))
    layer_dims = []
    for _ in range(n_mlps):
        (n,) = struct.unpack("<I", fh.read(4))
        layer_dims.append(list(struct.unpack(f"<{n}I", fh.read(4 * n))))
    (n_extra,) = struct.unpack("<I", fh.read(4))
    extra = list(struct.unpack(f"<{n_extra}I", fh.read(4 * n_extra))) if n_extra else []
    return layer_dims, extra


def write_mlp_params(fh, mlp: Mlp):
    for p in mlp.params():
        fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def read_mlp_params(fh, dims: list[int], **kwargs) -> Mlp:
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        n = fan_in * fan_out
        w = np.frombuffer(fh.read(4 * n), dtype="<f4")
        b = np.frombuffer(fh.read(4 * fan_out), dtype="<f4")
        if w.size != n or b.size != fan_out:
            raise ValueError("truncated parameter payload")
        weights.append(w.reshape(fan_in, fan_out).astype(np.float32))
        biases.append(b.astype(np.float32))
    return Mlp(weights, biases, **kwargs)


def save_mlp(path, mlp: Mlp):
    """Write a standalone single-network snapshot."""
    with open(path, "wb") as fh:
        write_params_header(fh, [mlp.dims])
        write_mlp_params(fh, mlp)


def load_mlp(path, **kwargs) -> Mlp:
    with open(path, "rb") as fh:
        (dims,), _ = read_params_header(fh)
        return read_mlp_params(fh, dims, **kwargs)
