"""Dense numeric engine: trainable parameters, layers with explicit
forward/backward passes, losses, Adam, and a finite-difference oracle.

Everything is float64. Backpropagation is hand-written per layer (the model
family is closed, so a general autodiff graph buys nothing and a manual pass
is easy to verify against finite differences).

Randomness comes exclusively from numpy's PCG64 bit generator seeded through
``SeedSequence`` (see :func:`new_rng`). PCG64 is the project-wide RNG
algorithm and part of the reproducibility contract: equal seeds give equal
draw sequences on every platform for a fixed numpy version.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

PROB_CLAMP_EPS = 1e-7

ACTIVATIONS = ("relu", "sigmoid", "identity", "softmax")


class ShapeMismatchError(ValueError):
    """Operands with incompatible shapes; message names both shapes."""


class BackwardStateError(RuntimeError):
    """backward() called without a matching cached forward()."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf surfaced where finite values are required."""


def new_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Project-wide deterministic RNG.

    PCG64 keyed by ``SeedSequence(entropy=seed, spawn_key=(stream,))``.
    Distinct streams (model init, batch shuffling, data synthesis) share one
    user-facing seed without overlapping draw sequences.
    """
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))
    )


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, int] | None = None) -> Array:
    """uniform(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)


class Parameter:
    """Trainable matrix plus gradient and Adam moment buffers.

    All four arrays share one 2-d shape. ``grad`` is zeroed by the owner at
    the start of every batch; ``adam_step`` never touches it.
    """

    def __init__(self, name: str, value: Array):
        value = np.array(value, dtype=np.float64)
        if value.ndim != 2:
            raise ShapeMismatchError(
                f"parameter '{name}': value must be 2-d, got shape {value.shape}")
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.m = np.zeros_like(value)
        self.v = np.zeros_like(value)
        self.step_count = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[:] = 0.0

    def __repr__(self) -> str:  # pragma: no cover
        return f"Parameter({self.name!r}, shape={self.shape})"


def sigmoid(z: Array) -> Array:
    """Numerically stable logistic function."""
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax_rows(z: Array) -> Array:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def activate(z: Array, kind: str) -> Array:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "identity":
        return z
    if kind == "softmax":
        return _softmax_rows(z)
    raise ValueError(f"unknown activation '{kind}' (expected one of {ACTIVATIONS})")


def activation_backward(dy: Array, z: Array, y: Array, kind: str) -> Array:
    """Map upstream dL/dy to dL/dz for the given activation."""
    if kind == "relu":
        return dy * (z > 0.0)
    if kind == "sigmoid":
        return dy * y * (1.0 - y)
    if kind == "identity":
        return dy
    if kind == "softmax":
        # rowwise Jacobian-vector product: dz = y * (dy - sum(dy * y))
        inner = (dy * y).sum(axis=1, keepdims=True)
        return y * (dy - inner)
    raise ValueError(f"unknown activation '{kind}'")


class Dense:
    """Fully connected layer ``act(x W + b)`` with an explicit backward pass.

    forward() caches the input and pre-activation; backward() consumes the
    cache, accumulates dW and db into the Parameters, and returns dX.
    """

    def __init__(self, name: str, din: int, dout: int, activation: str = "identity",
                 rng: np.random.Generator | None = None, weight_scale: float = 1.0):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{activation}' (expected one of {ACTIVATIONS})")
        if rng is None:
            rng = new_rng(0)
        self.name = name
        self.activation = activation
        self.w = Parameter(f"{name}.w", glorot_uniform(rng, din, dout) * weight_scale)
        self.b = Parameter(f"{name}.b", np.zeros((1, dout)))
        self._cache: tuple[Array, Array, Array] | None = None

    @property
    def din(self) -> int:
        return self.w.shape[0]

    @property
    def dout(self) -> int:
        return self.w.shape[1]

    def forward(self, x: Array) -> Array:
        if x.ndim != 2 or x.shape[1] != self.din:
            raise ShapeMismatchError(
                f"{self.name}: input shape {x.shape} does not match weight shape {self.w.shape}")
        z = x @ self.w.value + self.b.value
        y = activate(z, self.activation)
        self._cache = (x, z, y)
        return y

    def backward(self, dy: Array) -> Array:
        if self._cache is None:
            raise BackwardStateError(f"{self.name}: backward() without a cached forward()")
        x, z, y = self._cache
        self._cache = None
        if dy.shape != z.shape:
            raise ShapeMismatchError(
                f"{self.name}: upstream gradient shape {dy.shape} does not match output shape {z.shape}")
        dz = activation_backward(dy, z, y, self.activation)
        self.w.grad += x.T @ dz
        self.b.grad += dz.sum(axis=0, keepdims=True)
        return dz @ self.w.value.T

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


class MLP:
    """Stack of Dense layers, ReLU inside, configurable final activation."""

    def __init__(self, name: str, dims: Sequence[int], rng: np.random.Generator,
                 final_activation: str = "identity"):
        if len(dims) < 2:
            raise ValueError(f"{name}: an MLP needs at least [din, dout], got {list(dims)}")
        self.name = name
        self.layers: list[Dense] = []
        for i in range(len(dims) - 1):
            act = final_activation if i == len(dims) - 2 else "relu"
            self.layers.append(Dense(f"{name}.{i}", dims[i], dims[i + 1], act, rng))

    @property
    def din(self) -> int:
        return self.layers[0].din

    @property
    def dout(self) -> int:
        return self.layers[-1].dout

    def forward(self, x: Array) -> Array:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy: Array) -> Array:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


def _validate_binary_labels(y: Array) -> Array:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    bad = ~((y == 0.0) | (y == 1.0))
    if bad.any():
        raise ValueError(f"labels must be 0 or 1, got {y[bad][:5]} at positions {np.flatnonzero(bad)[:5]}")
    return y


def logloss(y: Array, yhat: Array, eps: float = PROB_CLAMP_EPS) -> float:
    """Mean binary cross entropy; predictions clamped into (eps, 1-eps)."""
    y = _validate_binary_labels(y)
    p = np.clip(np.asarray(yhat, dtype=np.float64).reshape(-1), eps, 1.0 - eps)
    if p.shape != y.shape:
        raise ShapeMismatchError(f"labels shape {y.shape} vs predictions shape {p.shape}")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def sigmoid_logloss(y: Array, logits: Array) -> tuple[float, Array]:
    """Mean binary cross entropy of sigmoid(logits), plus d(loss)/d(logits).

    Evaluated in the numerically stable fused form
    ``mean(max(z, 0) - z*y + log(1 + exp(-|z|)))``; the per-sample gradient
    is ``(sigmoid(z) - y) / B``.
    """
    yv = _validate_binary_labels(y)
    z = np.asarray(logits, dtype=np.float64)
    zv = z.reshape(-1)
    if zv.shape != yv.shape:
        raise ShapeMismatchError(f"labels shape {yv.shape} vs logits shape {zv.shape}")
    loss = float(np.mean(np.maximum(zv, 0.0) - zv * yv + np.log1p(np.exp(-np.abs(zv)))))
    dlogits = ((sigmoid(zv) - yv) / zv.size).reshape(z.shape)
    return loss, dlogits


def adam_step(p: Parameter, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; the caller zeroes the gradient."""
    if not np.all(np.isfinite(p.grad)):
        raise NonFiniteError(f"non-finite gradient in parameter '{p.name}'")
    p.step_count += 1
    t = p.step_count
    p.m = beta1 * p.m + (1.0 - beta1) * p.grad
    p.v = beta2 * p.v + (1.0 - beta2) * np.square(p.grad)
    m_hat = p.m / (1.0 - beta1 ** t)
    v_hat = p.v / (1.0 - beta2 ** t)
    p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


def finite_diff_grad(f: Callable[[], float], p: Parameter, h: float = 1e-5) -> Array:
    """Central-difference gradient of scalar f() w.r.t. every entry of p.value.

    f must be deterministic and must read p.value on each call. The entry is
    restored exactly after probing, so the oracle leaves p untouched.
    """
    grad = np.zeros_like(p.value)
    flat_value = p.value.ravel()
    flat_grad = grad.ravel()
    for i in range(flat_value.size):
        orig = flat_value[i]
        flat_value[i] = orig + h
        f_plus = f()
        flat_value[i] = orig - h
        f_minus = f()
        flat_value[i] = orig
        flat_grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: Array, numeric: Array, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor), the gradient-check statistic."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeMismatchError(f"analytic shape {a.shape} vs numeric shape {n.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
