"""Dense layers with exact reverse-mode gradients, Adam, and a grad checker.

Covers the five layer kinds the mask network and the domain discriminator are
built from: affine, batch normalization, LeakyReLU/ReLU, sigmoid and row-wise
softmax, plus gradient reversal and Adam with decoupled weight decay. Forward
calls return an opaque cache that the matching backward consumes. All arrays
are float64 and C-contiguous; the heavy arithmetic lives in
:mod:`fedadapt.kernels`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedadapt import kernels

LEAKY_RELU_SLOPE = 0.01
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

ACTIVATION_KINDS = ("leaky_relu", "relu", "sigmoid", "softmax_rows")


def as_matrix(x, name: str = "x") -> np.ndarray:
    out = np.ascontiguousarray(x, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {out.shape}")
    return out


def as_vector(x, name: str = "x") -> np.ndarray:
    out = np.ascontiguousarray(x, dtype=np.float64)
    if out.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {out.shape}")
    return out


@dataclass
class AdamConfig:
    """Adam with decoupled weight decay; defaults match the training recipe."""

    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-6
    weight_decay: float = 0.02

    def validate(self) -> None:
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie strictly in (0, 1)")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be non-negative")


@dataclass
class ParamBlock:
    """A trainable tensor with its gradient accumulator and Adam state."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    adam_m: np.ndarray = field(default=None)  # type: ignore[assignment]
    adam_v: np.ndarray = field(default=None)  # type: ignore[assignment]
    step_count: int = 0

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        for name in ("grad", "adam_m", "adam_v"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros_like(self.value))
        if not (self.value.shape == self.grad.shape == self.adam_m.shape == self.adam_v.shape):
            raise ValueError("value, grad and Adam moments must share one shape")
        if self.step_count < 0:
            raise ValueError("step_count must be non-negative")

    @classmethod
    def zeros(cls, *shape: int) -> "ParamBlock":
        return cls(np.zeros(shape))

    def clone(self) -> "ParamBlock":
        return ParamBlock(
            self.value.copy(), self.grad.copy(),
            self.adam_m.copy(), self.adam_v.copy(), self.step_count,
        )

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def adam_step(p: ParamBlock, cfg: AdamConfig) -> ParamBlock:
    """One bias-corrected Adam update in place; clears the gradient."""
    p.step_count += 1
    kernels.adam_update(
        p.value, p.grad, p.adam_m, p.adam_v, p.step_count,
        cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay,
    )
    p.zero_grad()
    return p


# ---------------------------------------------------------------------------
# affine


def linear_forward(x, w, b):
    """out = x @ w + b with b broadcast over rows."""
    x = as_matrix(x, "x")
    w = as_matrix(w, "w")
    b = as_vector(b, "b")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"shape mismatch: x is {x.shape}, w is {w.shape}")
    if b.shape[0] != w.shape[1]:
        raise ValueError(f"bias length {b.shape[0]} != output width {w.shape[1]}")
    out = kernels.linear_forward(x, w, b)
    return out, ("linear", x, w)


def linear_backward(g, cache):
    kind, x, w = cache
    if kind != "linear":
        raise ValueError(f"cache is for {kind!r}, expected 'linear'")
    g = as_matrix(g, "g")
    if g.shape != (x.shape[0], w.shape[1]):
        raise ValueError(f"upstream grad shape {g.shape} does not match forward output")
    return kernels.linear_backward(x, w, g)


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode,
                      momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Normalize columns; train mode updates running stats in place.

    Train mode uses biased batch variance for the normalization and the
    unbiased estimate for the running-variance update. A train-mode batch of
    one row has no usable variance and is rejected.
    """
    x = as_matrix(x, "x")
    for arr, name in ((gamma, "gamma"), (beta, "beta"),
                      (running_mean, "running_mean"), (running_var, "running_var")):
        if arr.shape != (x.shape[1],):
            raise ValueError(f"{name} must have shape ({x.shape[1]},), got {arr.shape}")
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("train-mode batch normalization needs at least 2 rows")
        out, xhat, mean, var, invstd = kernels.bn_train_forward(x, gamma, beta, eps)
        n = x.shape[0]
        unbiased = var * (n / (n - 1.0))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        return out, ("bn_train", xhat, gamma, invstd)
    if mode == "eval":
        out = kernels.bn_eval_forward(x, gamma, beta, running_mean, running_var, eps)
        return out, ("bn_eval", x, gamma, running_mean, running_var, eps)
    raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def batchnorm_backward(g, cache):
    g = as_matrix(g, "g")
    if cache[0] == "bn_train":
        _, xhat, gamma, invstd = cache
        if g.shape != xhat.shape:
            raise ValueError("upstream grad shape does not match forward output")
        return kernels.bn_train_backward(g, xhat, gamma, invstd)
    if cache[0] == "bn_eval":
        _, x, gamma, rmean, rvar, eps = cache
        invstd = 1.0 / np.sqrt(rvar + eps)
        dx = g * (gamma * invstd)
        dgamma = (g * (x - rmean) * invstd).sum(axis=0)
        dbeta = g.sum(axis=0)
        return dx, dgamma, dbeta
    raise ValueError(f"cache is for {cache[0]!r}, expected a batchnorm cache")


# ---------------------------------------------------------------------------
# activations


def activation_forward(x, kind: str):
    x = as_matrix(x, "x")
    if kind == "leaky_relu":
        out = kernels.leaky_relu_forward(x, LEAKY_RELU_SLOPE)
        return out, ("leaky_relu", x)
    if kind == "relu":
        return kernels.relu_forward(x), ("relu", x)
    if kind == "sigmoid":
        out = kernels.sigmoid_forward(x)
        return out, ("sigmoid", out)
    if kind == "softmax_rows":
        if x.shape[1] < 1:
            raise ValueError("softmax_rows needs at least one column")
        out = kernels.softmax_rows(x)
        return out, ("softmax_rows", out)
    raise ValueError(f"unknown activation kind {kind!r}")


def activation_backward(g, cache):
    kind, saved = cache
    g = as_matrix(g, "g")
    if g.shape != saved.shape:
        raise ValueError("upstream grad shape does not match forward output")
    if kind == "leaky_relu":
        return kernels.leaky_relu_backward(g, saved, LEAKY_RELU_SLOPE)
    if kind == "relu":
        return kernels.relu_backward(g, saved)
    if kind == "sigmoid":
        return kernels.sigmoid_backward(g, saved)
    if kind == "softmax_rows":
        return kernels.softmax_rows_backward(g, saved)
    raise ValueError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# gradient reversal


def grad_reverse_forward(x):
    """Identity on values; pair with grad_reverse_backward."""
    return x


def grad_reverse_backward(g, lam: float):
    """Scale the upstream gradient by -lam (lam >= 0)."""
    if lam < 0.0:
        raise ValueError("gradient-reversal weight must be non-negative")
    return -lam * g


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def central_difference(f, x, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar-valued f at x, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        f_plus = float(f(x))
        flat_x[i] = orig - h
        f_minus = float(f(x))
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Worst per-coordinate |a - n| / max(|a| + |n|, floor).

    The floor keeps coordinates whose true gradient is zero from turning
    finite-difference roundoff into a spurious 100% error.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.abs(a) + np.abs(n), floor)
    return float((np.abs(a - n) / scale).max())


def finite_diff_check(f, x, analytic_grad, h: float = 1e-5) -> float:
    """Relative error between the analytic gradient and central differences."""
    numeric = central_difference(f, np.array(x, dtype=np.float64, copy=True), h)
    return relative_error(analytic_grad, numeric)
