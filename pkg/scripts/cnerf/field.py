"""Positional-encoded MLP radiance field and its Adam optimizer.

Architecture (one network, no coarse/fine hierarchy):

    gamma(x) -> [hidden_width] x hidden_layers -> density head (softplus)
                                  |
                 concat(h, gamma(d)) -> color_width -> color head (sigmoid)

The density head reads only the position trunk, so density never depends
on the viewing direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from cnerf import tape as T
from cnerf.errors import FieldError, OptimizerError, PreconditionError
from cnerf.models import ACTIVATIONS, FieldConfig

DIRECTION_NORM_TOL = 1e-9


# ============================================================================
# Positional encoding
# ============================================================================


@dataclass(frozen=True)
class PositionalEncoding:
    num_frequencies_position: int = 6
    num_frequencies_direction: int = 2

    def __post_init__(self):
        for name in ("num_frequencies_position", "num_frequencies_direction"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 0:
                raise PreconditionError(f"{name} must be an integer >= 0, got {value!r}")

    @property
    def position_dim(self) -> int:
        return 3 + 6 * self.num_frequencies_position

    @property
    def direction_dim(self) -> int:
        return 3 + 6 * self.num_frequencies_direction


def encode(x: np.ndarray, L: int) -> np.ndarray:
    """[x, sin(2^0 x), cos(2^0 x), ..., sin(2^(L-1) x), cos(2^(L-1) x)] along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for k in range(L):
        scaled = (2.0 ** k) * x
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    return np.concatenate(parts, axis=-1)


# ============================================================================
# Parameters
# ============================================================================


@dataclass(frozen=True)
class FieldArchitecture:
    encoding: PositionalEncoding = field(default_factory=PositionalEncoding)
    hidden_layers: int = 4
    hidden_width: int = 64
    color_width: int = 32
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise PreconditionError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.hidden_layers < 1 or self.hidden_width < 1 or self.color_width < 1:
            raise PreconditionError("hidden_layers, hidden_width and color_width must be >= 1")

    @classmethod
    def from_config(cls, config: FieldConfig) -> FieldArchitecture:
        return cls(
            encoding=PositionalEncoding(config.num_frequencies_position, config.num_frequencies_direction),
            hidden_layers=config.hidden_layers,
            hidden_width=config.hidden_width,
            color_width=config.color_width,
            activation=config.activation,
        )

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        """(fan_in, fan_out) of every dense layer, in parameter order."""
        shapes = {}
        fan_in = self.encoding.position_dim
        for i in range(self.hidden_layers):
            shapes[f"trunk.{i}"] = (fan_in, self.hidden_width)
            fan_in = self.hidden_width
        shapes["density"] = (self.hidden_width, 1)
        shapes["color_hidden"] = (self.hidden_width + self.encoding.direction_dim, self.color_width)
        shapes["color_out"] = (self.color_width, 3)
        return shapes

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for layer, (fan_in, fan_out) in self.layer_shapes().items():
            shapes[f"{layer}.weight"] = (fan_in, fan_out)
            shapes[f"{layer}.bias"] = (fan_out,)
        return shapes


@dataclass
class FieldParams:
    """Named parameter arrays in the fixed order of FieldArchitecture.parameter_shapes()."""

    architecture: FieldArchitecture
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.architecture.parameter_shapes()
        if list(self.arrays) != list(expected):
            raise PreconditionError(f"parameter names {list(self.arrays)} do not match {list(expected)}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise PreconditionError(f"{name}: expected shape {shape}, got {self.arrays[name].shape}")

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    @classmethod
    def unflatten(cls, architecture: FieldArchitecture, flat: np.ndarray) -> FieldParams:
        flat = np.asarray(flat, dtype=np.float64)
        arrays = {}
        offset = 0
        for name, shape in architecture.parameter_shapes().items():
            n = int(np.prod(shape))
            arrays[name] = flat[offset:offset + n].reshape(shape).copy()
            offset += n
        if offset != flat.size:
            raise PreconditionError(f"flat parameter vector has {flat.size} entries, expected {offset}")
        return cls(architecture, arrays)

    def check_finite(self) -> None:
        """FieldError naming the first non-finite entry, e.g. trunk.1.weight[3, 7]."""
        for name, a in self.arrays.items():
            bad = np.argwhere(~np.isfinite(a))
            if len(bad):
                where = ", ".join(str(int(i)) for i in bad[0])
                raise FieldError(f"{name}[{where}]")


def init_params(architecture: FieldArchitecture, seed: int = 0) -> FieldParams:
    """Glorot-uniform weights, zero biases, from a seeded generator."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for layer, (fan_in, fan_out) in architecture.layer_shapes().items():
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        arrays[f"{layer}.weight"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        arrays[f"{layer}.bias"] = np.zeros(fan_out)
    return FieldParams(architecture, arrays)


# ============================================================================
# Forward pass
# ============================================================================


def forward(architecture: FieldArchitecture, arrays: dict, enc_x: np.ndarray, enc_d: np.ndarray):
    """Network body on encoded inputs; `arrays` may hold Vars or plain arrays.

    Returns (color (n, 3), density (n,)).
    """
    act = T.relu if architecture.activation == "relu" else T.softplus
    h = enc_x
    for i in range(architecture.hidden_layers):
        h = act(T.add(T.matmul(h, arrays[f"trunk.{i}.weight"]), arrays[f"trunk.{i}.bias"]))
    density = T.softplus(T.add(T.matmul(h, arrays["density.weight"]), arrays["density.bias"]))
    density = T.index(density, (slice(None), 0))
    hc = act(T.add(T.matmul(T.concat([h, enc_d], axis=1), arrays["color_hidden.weight"]),
                   arrays["color_hidden.bias"]))
    color = T.sigmoid(T.add(T.matmul(hc, arrays["color_out.weight"]), arrays["color_out.bias"]))
    return color, density


def encode_inputs(architecture: FieldArchitecture, x: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    enc = architecture.encoding
    return encode(x, enc.num_frequencies_position), encode(d, enc.num_frequencies_direction)


def evaluate(params: FieldParams, x, d) -> tuple[np.ndarray, np.ndarray]:
    """Color in [0, 1]^3 and density >= 0 at points x with unit directions d.

    Accepts a single 3-vector pair or (n, 3) batches.
    """
    params.check_finite()
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    single = x.ndim == 1
    X = x.reshape(-1, 3)
    D = np.broadcast_to(d.reshape(-1, 3), X.shape)
    norms = np.sqrt(np.sum(D * D, axis=1))
    if np.any(np.abs(norms - 1.0) > DIRECTION_NORM_TOL):
        raise PreconditionError("view directions must be unit length")
    enc_x, enc_d = encode_inputs(params.architecture, X, D)
    color, density = forward(params.architecture, params.arrays, enc_x, enc_d)
    if single:
        return color[0], float(density[0])
    return color, density


def attach(params: FieldParams, tape: T.DualTape) -> dict[str, T.Var]:
    """Register every parameter array as a leaf of `tape`, in parameter order."""
    return {name: tape.variable(a) for name, a in params.arrays.items()}


def gradient(loss_tape: T.DualTape, loss: T.Var, variables: dict[str, T.Var]) -> np.ndarray:
    """Flat d(loss)/d(theta) in FieldParams.flatten() order."""
    grads = loss_tape.gradient(loss, list(variables.values()))
    return np.concatenate([g.ravel() for g in grads])


# ============================================================================
# Optimizer
# ============================================================================


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> AdamState:
        return cls(np.zeros(size), np.zeros(size), 0)


BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


def optimizer_step(
    params: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    iteration: Optional[int] = None,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new arrays, inputs untouched."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise PreconditionError(f"shape mismatch: params {params.shape}, grad {grad.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise OptimizerError(state.step if iteration is None else iteration)
    step = state.step + 1
    m = BETA1 * state.m + (1.0 - BETA1) * grad
    v = BETA2 * state.v + (1.0 - BETA2) * grad * grad
    m_hat = m / (1.0 - BETA1 ** step)
    v_hat = v / (1.0 - BETA2 ** step)
    updated = params - lr * m_hat / (np.sqrt(v_hat) + EPSILON)
    return updated, AdamState(m, v, step)


def learning_rate(iteration: int, total: int, lr: float, final_ratio: float = 0.1) -> float:
    """Exponential decay from lr at iteration 0 to final_ratio * lr at the last iteration."""
    if total <= 1:
        return lr
    return lr * final_ratio ** (iteration / (total - 1))
