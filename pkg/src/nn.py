"""
Minimal dense neural-network engine.

Everything downstream (backbones, extractors, migrator, trainer) builds on the
pieces here: 64-bit matrices as numpy arrays, dense layers with hand-written
backward functions, numerically stable activations, binary cross-entropy, Adam
and a central-difference gradient checker.

Parameters are handled as ordered ``Dict[str, np.ndarray]`` groups. Updates are
applied in place so that every structure holding a reference to an array sees
the new values.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, Tuple

import numpy as np

from src.errors import ConfigError, DimensionError, NonFiniteError


ACTIVATIONS = ("identity", "relu", "sigmoid", "softmax")
LOG_CLAMP = 1e-12

Params = Dict[str, np.ndarray]


def check_finite(values: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite values in {what}")
    return values


def as_matrix(values, what: str = "input") -> np.ndarray:
    """Coerces to a 2-D float64 array (row-major)."""
    matrix = np.asarray(values, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(1, -1)
    if matrix.ndim != 2:
        raise DimensionError(f"{what} must be 2-D, got shape {matrix.shape}")
    return matrix


# --- Activations ---

def sigmoid(z):
    """Logistic function that saturates instead of overflowing."""
    z_arr = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z_arr))
    out = np.where(z_arr >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    if np.ndim(z) == 0:
        return float(out)
    return out


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max-subtraction. Accepts a vector or a matrix."""
    arr = np.asarray(logits, dtype=np.float64)
    if arr.size == 0 or arr.shape[-1] == 0:
        raise DimensionError("softmax of an empty vector")
    shifted = arr - np.max(arr, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    if arr.size == 0 or arr.shape[-1] == 0:
        raise DimensionError("log_softmax of an empty vector")
    shifted = arr - np.max(arr, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return pre
    if activation == "relu":
        return np.maximum(pre, 0.0)
    if activation == "sigmoid":
        return sigmoid(pre)
    return softmax(pre)


def _activation_backward(outputs: np.ndarray, grad_out: np.ndarray, activation: str) -> np.ndarray:
    # Derivatives are expressed through the activation outputs.
    if activation == "identity":
        return grad_out
    if activation == "relu":
        return grad_out * (outputs > 0.0)
    if activation == "sigmoid":
        return grad_out * outputs * (1.0 - outputs)
    inner = np.sum(grad_out * outputs, axis=1, keepdims=True)
    return outputs * (grad_out - inner)


# --- Dense layer ---

@dataclass
class DenseLayer:
    weight: np.ndarray  # out x in
    bias: np.ndarray  # out
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{self.activation}', expected one of {ACTIVATIONS}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match weight shape {self.weight.shape}"
            )

    @property
    def in_width(self) -> int:
        return self.weight.shape[1]

    @property
    def out_width(self) -> int:
        return self.weight.shape[0]

    def parameters(self, prefix: str) -> Params:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class DenseCache:
    inputs: np.ndarray
    outputs: np.ndarray


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def new_dense(rng: np.random.Generator, in_width: int, out_width: int, activation: str) -> DenseLayer:
    """Glorot-uniform weights, zero bias."""
    return DenseLayer(glorot_uniform(rng, out_width, in_width), np.zeros(out_width), activation)


def zero_dense(in_width: int, out_width: int, activation: str) -> DenseLayer:
    return DenseLayer(np.zeros((out_width, in_width)), np.zeros(out_width), activation)


def dense_forward_cached(inputs: np.ndarray, layer: DenseLayer) -> Tuple[np.ndarray, DenseCache]:
    if inputs.ndim != 2 or inputs.shape[1] != layer.in_width:
        raise DimensionError(
            f"dense input shape {inputs.shape} incompatible with weight shape {layer.weight.shape}"
        )
    pre = inputs @ layer.weight.T + layer.bias
    outputs = check_finite(_activate(pre, layer.activation), "dense layer output")
    return outputs, DenseCache(inputs, outputs)


def dense_forward(inputs, layer: DenseLayer) -> np.ndarray:
    """activation(inputs . weight^T + bias), row-wise."""
    outputs, _ = dense_forward_cached(as_matrix(inputs), layer)
    return outputs


def dense_backward(layer: DenseLayer, cache: DenseCache, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad wrt inputs, grad wrt weight, grad wrt bias)."""
    if grad_out.shape != cache.outputs.shape:
        raise DimensionError(
            f"upstream gradient shape {grad_out.shape} does not match output shape {cache.outputs.shape}"
        )
    grad_pre = _activation_backward(cache.outputs, grad_out, layer.activation)
    grad_weight = grad_pre.T @ cache.inputs
    grad_bias = np.sum(grad_pre, axis=0)
    grad_inputs = grad_pre @ layer.weight
    return grad_inputs, grad_weight, grad_bias


# --- Losses ---

def binary_cross_entropy(predictions, targets) -> float:
    """Mean binary cross-entropy with logs clamped at LOG_CLAMP."""
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.size == 0:
        raise DimensionError("cross-entropy of an empty batch")
    if p.shape != t.shape:
        raise DimensionError(f"prediction shape {p.shape} does not match label shape {t.shape}")
    loss = -(t * np.log(np.maximum(p, LOG_CLAMP)) + (1.0 - t) * np.log(np.maximum(1.0 - p, LOG_CLAMP)))
    return float(np.mean(loss))


def binary_cross_entropy_grad(predictions: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """d(binary_cross_entropy)/d(predictions), respecting the clamp."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64).reshape(p.shape)
    pos = np.where(p > LOG_CLAMP, t / np.maximum(p, LOG_CLAMP), 0.0)
    neg = np.where(1.0 - p > LOG_CLAMP, (1.0 - t) / np.maximum(1.0 - p, LOG_CLAMP), 0.0)
    return -(pos - neg) / p.size


# --- Parameter vectors ---

def flatten_params(params: Params) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([p.ravel() for p in params.values()])


def assign_flat(params: Params, vector: np.ndarray) -> None:
    """Writes a flat vector back into the arrays of ``params`` in place."""
    offset = 0
    for name, p in params.items():
        p[...] = vector[offset:offset + p.size].reshape(p.shape)
        offset += p.size
    if offset != vector.size:
        raise DimensionError(f"flat vector of length {vector.size} does not match {offset} parameters")


def copy_params(params: Params) -> Params:
    return {name: p.copy() for name, p in params.items()}


def params_equal(a: Params, b: Params) -> bool:
    """Bitwise equality of two parameter groups."""
    if a.keys() != b.keys():
        return False
    return all(np.array_equal(a[k], b[k]) for k in a)


# --- Adam ---

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Params = field(default_factory=dict)
    second_moment: Params = field(default_factory=dict)


def adam_state_for(params: Params, lr: float = 0.001, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
        first_moment={k: np.zeros_like(p) for k, p in params.items()},
        second_moment={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(params: Params, grads: Params, state: AdamState) -> Tuple[Params, AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if params.keys() != grads.keys() or params.keys() != state.first_moment.keys():
        raise DimensionError(
            f"parameter names {sorted(params)} do not match gradients {sorted(grads)} "
            f"or optimizer state {sorted(state.first_moment)}"
        )
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.first_moment[name].shape != p.shape:
            raise DimensionError(f"'{name}': parameter shape {p.shape} vs gradient shape {g.shape}")
        m = state.beta1 * state.first_moment[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.second_moment[name] + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        check_finite(p, f"parameter '{name}' after Adam step")
    return params, state


# --- Gradient checking ---

def grad_check(loss_and_grad: Callable[[np.ndarray], Tuple[float, np.ndarray]],
               point: np.ndarray, eps: float = 1e-5) -> float:
    """
    Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``loss_and_grad`` maps a flat parameter vector to (loss, analytic gradient).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ConfigError(f"grad_check eps must lie in [1e-7, 1e-4] (got {eps})")
    p = np.array(point, dtype=np.float64)
    loss, analytic = loss_and_grad(p.copy())
    if not np.isfinite(loss):
        raise NonFiniteError(f"loss is non-finite at the check point ({loss})")
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != p.shape:
        raise DimensionError(f"gradient shape {analytic.shape} does not match point shape {p.shape}")

    worst = 0.0
    for i in range(p.size):
        original = p[i]
        p[i] = original + eps
        loss_plus = loss_and_grad(p.copy())[0]
        p[i] = original - eps
        loss_minus = loss_and_grad(p.copy())[0]
        p[i] = original
        if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
            raise NonFiniteError(f"loss is non-finite around coordinate {i}")
        numeric = (loss_plus - loss_minus) / (2.0 * eps)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return worst
