"""Dense float64 numerics: a small manually-differentiated MLP, Adam, and a
per-epoch cosine warm-restart learning-rate schedule.

All arrays are float64 throughout; every consumer of this module relies on
that for reproducibility and for finite-difference agreement at tight
tolerances.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, StateError

log = logging.getLogger(__name__)

# A matrix is a 2-D float64 ndarray; vectors are 1-D float64 ndarrays.
Matrix = np.ndarray


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> Matrix:
    """Coerce nested data to a 2-D float64 array, checking shape and finiteness."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected 2-D data, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise DimensionError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise DimensionError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.isfinite(m).all():
        raise DomainError("matrix contains non-finite entries")
    return m


def check_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.isfinite(arr).all():
        raise DomainError(f"{name} contains non-finite entries")
    return arr


# ---------------------------------------------------------------------------
# MLP

_ACTIVATIONS = ("relu", "tanh", "linear")


def _act_fwd(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Derivative of the activation at pre-activation z (a = act(z))."""
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class MlpModel:
    """Fully connected net: hidden layers use `activation`, output is linear.

    weights[i] has shape (layer_dims[i], layer_dims[i+1]); biases[i] has shape
    (layer_dims[i+1],).
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ConfigError("MLP needs at least an input and an output layer")
        if any(d <= 0 for d in self.layer_dims):
            raise ConfigError(f"layer dims must be positive, got {self.layer_dims}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        n = len(self.layer_dims) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise DimensionError("parameter count does not match layer_dims")
        for i in range(n):
            if self.weights[i].shape != (self.layer_dims[i], self.layer_dims[i + 1]):
                raise DimensionError(f"weight {i} has shape {self.weights[i].shape}")
            if self.biases[i].shape != (self.layer_dims[i + 1],):
                raise DimensionError(f"bias {i} has shape {self.biases[i].shape}")

    @classmethod
    def init(cls, layer_dims: list[int], rng: np.random.Generator,
             activation: str = "relu") -> "MlpModel":
        """Fan-in scaled uniform init: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), b = 0."""
        weights, biases = [], []
        for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = 1.0 / math.sqrt(d_in)
            weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
            biases.append(np.zeros(d_out))
        return cls(list(layer_dims), weights, biases, activation)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def params(self) -> list[np.ndarray]:
        """Flat parameter list in a stable order: w0, b0, w1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(list(self.layer_dims), [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases], self.activation)


@dataclass
class ForwardCache:
    """Activations recorded by mlp_forward_cached, consumed by mlp_backward."""

    inputs: list[np.ndarray]    # input to each layer, length = n_layers
    pre_acts: list[np.ndarray]  # z = x @ W + b per layer


def mlp_forward(model: MlpModel, batch: Matrix) -> Matrix:
    """Map a (B, input_dim) batch to (B, output_dim) features."""
    feats, _ = _forward(model, batch, keep=False)
    return feats


def mlp_forward_cached(model: MlpModel, batch: Matrix) -> tuple[Matrix, ForwardCache]:
    return _forward(model, batch, keep=True)


def _forward(model: MlpModel, batch: Matrix, keep: bool):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimensionError(
            f"batch shape {x.shape} incompatible with input dim {model.input_dim}")
    check_finite(x, "batch")
    inputs, pre_acts = [], []
    n = len(model.weights)
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        if keep:
            inputs.append(x)
        z = x @ w + b
        if keep:
            pre_acts.append(z)
        x = _act_fwd(model.activation, z) if i < n - 1 else z
    return x, (ForwardCache(inputs, pre_acts) if keep else None)


def mlp_backward(model: MlpModel, cache: ForwardCache | None,
                 grad_features: Matrix) -> tuple[list[np.ndarray], Matrix]:
    """Backprop grad_features (B, output_dim) through the net.

    Returns (param_grads, grad_input): param_grads aligns with model.params()
    and accumulates over the batch (gradient of the summed objective);
    grad_input has the batch's shape.
    """
    if cache is None:
        raise StateError("mlp_backward requires the cache from mlp_forward_cached")
    n = len(model.weights)
    if len(cache.inputs) != n or len(cache.pre_acts) != n:
        raise StateError("forward cache does not match the model")
    g = np.asarray(grad_features, dtype=np.float64)
    if g.shape != cache.pre_acts[-1].shape:
        raise DimensionError(
            f"grad_features shape {g.shape} != output shape {cache.pre_acts[-1].shape}")
    grad_w = [None] * n
    grad_b = [None] * n
    for i in range(n - 1, -1, -1):
        if i < n - 1:  # output layer is linear, hidden layers carry the activation
            g = g * _act_grad(model.activation, cache.pre_acts[i],
                              _act_fwd(model.activation, cache.pre_acts[i]))
        grad_w[i] = cache.inputs[i].T @ g
        grad_b[i] = g.sum(axis=0)
        g = g @ model.weights[i].T
    out = []
    for gw, gb in zip(grad_w, grad_b):
        out.append(gw)
        out.append(gb)
    return out, g


# ---------------------------------------------------------------------------
# Adam

@dataclass
class OptimizerState:
    """Adam moments. `step` counts applied updates; `skipped` counts updates
    dropped because a gradient was non-finite."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def for_params(cls, params: list[np.ndarray], beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "OptimizerState":
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if eps <= 0.0:
            raise ConfigError("eps must be positive")
        return cls([np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params], 0, beta1, beta2, eps)


def adam_step(state: OptimizerState, params: list[np.ndarray],
              grads: list[np.ndarray], lr: float) -> list[np.ndarray]:
    """One bias-corrected Adam update, in place on `params`.

    A non-finite gradient anywhere skips the whole update (moments and step
    count untouched) and logs a warning.
    """
    if lr < 0.0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    if len(params) != len(state.m) or len(grads) != len(params):
        raise DimensionError("params/grads do not match optimizer state")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError(f"param shape {p.shape} != grad shape {g.shape}")
    if any(not np.isfinite(g).all() for g in grads):
        state.skipped += 1
        log.warning("adam_step: non-finite gradient, update %d skipped", state.step + 1)
        return params
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# Learning-rate schedule

def cosine_warm_restart_lr(progress: float, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine anneal within one epoch; callers reset progress to 0 per epoch.

    progress is the fraction of the current epoch completed, in [0, 1].
    """
    if not 0.0 <= progress <= 1.0:
        raise DomainError(f"progress must lie in [0, 1], got {progress}")
    if lr_min > lr_max:
        raise ConfigError(f"lr_min {lr_min} exceeds lr_max {lr_max}")
    if lr_max < 0.0:
        raise ConfigError("learning rates must be non-negative")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))
