"""Dense layers, activations, the Adam optimizer, and a finite-difference
gradient checker.

All math is done in 64-bit floats so that analytic gradients can be compared
against central finite differences at tight tolerances. Layers are plain
parameter containers; forward/backward are free functions that accept either
a single input vector or a batch matrix with one row per sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

ParamDict = dict[str, np.ndarray]

ACTIVATION_KINDS = ("relu", "sigmoid", "softmax")


def _finite_float_array(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


@dataclass
class DenseLayer:
    """Affine map x -> weights @ x + bias, with weights shaped [out, in]."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = _finite_float_array(self.weights, "weights")
        self.bias = _finite_float_array(self.bias, "bias")
        if self.weights.ndim != 2:
            raise ValueError("weights must be a 2-d matrix")
        if self.bias.ndim != 1:
            raise ValueError("bias must be a 1-d vector")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} does not match output size "
                f"{self.weights.shape[0]}"
            )

    @property
    def in_size(self) -> int:
        return self.weights.shape[1]

    @property
    def out_size(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy())


def init_dense(in_size: int, out_size: int, rng: np.random.Generator) -> DenseLayer:
    """Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero bias."""
    limit = np.sqrt(6.0 / (in_size + out_size))
    weights = rng.uniform(-limit, limit, size=(out_size, in_size))
    return DenseLayer(weights, np.zeros(out_size))


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    """Affine forward pass.

    Accepts a vector of length ``in_size`` (returns a vector of length
    ``out_size``) or a batch matrix [n, in_size] (returns [n, out_size]).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != layer.in_size:
            raise ValueError(
                f"input length {x.shape[0]} does not match layer input size "
                f"{layer.in_size}"
            )
        return layer.weights @ x + layer.bias
    if x.ndim == 2:
        if x.shape[1] != layer.in_size:
            raise ValueError(
                f"input width {x.shape[1]} does not match layer input size "
                f"{layer.in_size}"
            )
        return x @ layer.weights.T + layer.bias
    raise ValueError("input must be 1-d or 2-d")


def dense_backward(
    x: np.ndarray, layer: DenseLayer, upstream_grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of an affine layer: (grad_weights, grad_bias, grad_input).

    For batch inputs the parameter gradients are summed over the batch.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream_grad, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != layer.in_size or upstream.shape != (layer.out_size,):
            raise ValueError("shapes inconsistent with the layer's forward pass")
        grad_weights = np.outer(upstream, x)
        grad_bias = upstream.copy()
        grad_input = layer.weights.T @ upstream
        return grad_weights, grad_bias, grad_input
    if x.ndim == 2:
        if x.shape[1] != layer.in_size or upstream.shape != (x.shape[0], layer.out_size):
            raise ValueError("shapes inconsistent with the layer's forward pass")
        grad_weights = upstream.T @ x
        grad_bias = upstream.sum(axis=0)
        grad_input = upstream @ layer.weights
        return grad_weights, grad_bias, grad_input
    raise ValueError("input must be 1-d or 2-d")


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def sigmoid(x):
    """Numerically stable logistic function; scalar in, scalar out."""
    arr = np.asarray(x, dtype=np.float64)
    flat = arr.ravel()
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    expx = np.exp(flat[~pos])
    out[~pos] = expx / (1.0 + expx)
    out = out.reshape(arr.shape)
    if arr.ndim == 0:
        return float(out)
    return out


def softmax(x):
    """Softmax with max-subtraction; row-wise for 2-d input."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        shifted = arr - arr.max()
        expd = np.exp(shifted)
        return expd / expd.sum()
    if arr.ndim == 2:
        shifted = arr - arr.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        return expd / expd.sum(axis=1, keepdims=True)
    raise ValueError("softmax input must be 1-d or 2-d")


def activation_forward(x, kind: str):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x)
    raise ValueError(f"unknown activation kind '{kind}' (expected one of {ACTIVATION_KINDS})")


@dataclass
class AdamState:
    """Per-parameter Adam moments, keyed like the parameter dict they track."""

    first_moment: ParamDict
    second_moment: ParamDict
    timestep: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamDict, beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(
            first_moment={k: np.zeros_like(v) for k, v in params.items()},
            second_moment={k: np.zeros_like(v) for k, v in params.items()},
            timestep=0,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(params: ParamDict, grads: ParamDict, state: AdamState, lr: float) -> None:
    """One Adam update with bias correction, applied to ``params`` in place."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if set(params) != set(grads):
        raise ValueError("parameter and gradient dicts carry different blocks")
    for name, grad in grads.items():
        if grad.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for parameter block '{name}'")
        if not np.all(np.isfinite(grad)):
            raise ValueError(f"non-finite gradient in parameter block '{name}'")
    state.timestep += 1
    correction1 = 1.0 - state.beta1 ** state.timestep
    correction2 = 1.0 - state.beta2 ** state.timestep
    for name, grad in grads.items():
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(grad)
        step = (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        params[name] -= lr * step


@dataclass
class GradientCheckReport:
    """Outcome of one finite-difference sweep over a parameter dict."""

    max_rel_error: float
    worst_param: str
    worst_index: tuple
    n_coordinates: int
    tolerance: float
    passed: bool
    near_kink: bool = False


def gradient_check(
    fn: Callable[[ParamDict], tuple[float, ParamDict]],
    params: ParamDict,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    kink_distance: Callable[[ParamDict], float] | None = None,
) -> GradientCheckReport:
    """Compare the analytic gradient of ``fn`` against central finite differences.

    ``fn(params) -> (value, grads)`` must return a scalar value and a gradient
    dict keyed like ``params``. Parameter arrays are perturbed in place and
    restored afterwards, so ``fn`` must read them fresh on every call. A
    failing tolerance is recorded in the report, never raised. ``kink_distance``
    may report the distance to the nearest non-differentiable point; the report
    flags proximity when it is within ten finite-difference steps.
    """
    _, analytic = fn(params)
    near_kink = bool(
        kink_distance is not None and kink_distance(params) < 10.0 * step
    )
    worst_rel = 0.0
    worst_param = ""
    worst_index: tuple = ()
    count = 0
    for name in sorted(params):
        block = params[name]
        grad_block = np.asarray(analytic[name], dtype=np.float64)
        if grad_block.shape != block.shape:
            raise ValueError(f"analytic gradient shape mismatch for block '{name}'")
        for idx in np.ndindex(block.shape):
            original = block[idx]
            block[idx] = original + step
            f_plus, _ = fn(params)
            block[idx] = original - step
            f_minus, _ = fn(params)
            block[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(grad_block[idx]), abs(numeric), 1e-6)
            rel = float(abs(grad_block[idx] - numeric) / denom)
            count += 1
            if rel > worst_rel:
                worst_rel = rel
                worst_param = name
                worst_index = idx
    return GradientCheckReport(
        max_rel_error=worst_rel,
        worst_param=worst_param,
        worst_index=worst_index,
        n_coordinates=count,
        tolerance=tolerance,
        passed=bool(worst_rel < tolerance),
        near_kink=near_kink,
    )
