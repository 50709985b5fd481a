"""Hot numeric kernels with two interchangeable backends.

The training loop spends nearly all of its time in a handful of small dense
operations (affine maps, batch normalization, activations, Adam updates).
Each of them exists here twice: a numba ``@njit`` version with fused loops
and a pure-numpy version. The backend is chosen once at import time from the
``FEDADAPT_KERNELS`` environment variable:

    FEDADAPT_KERNELS=numba   force the JIT kernels (error if numba missing)
    FEDADAPT_KERNELS=numpy   force the vectorized numpy fallback
    unset / "auto"           numba when importable, numpy otherwise

Both backends implement identical math on float64 C-contiguous arrays and
are individually deterministic; they may differ from each other in the last
bits because summation orders differ. ``benchmarks/kernel_bench.py`` compares
them head to head.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_FLAG = "FEDADAPT_KERNELS"

_KERNEL_NAMES = (
    "linear_forward",
    "linear_backward",
    "bn_train_forward",
    "bn_train_backward",
    "bn_eval_forward",
    "leaky_relu_forward",
    "leaky_relu_backward",
    "relu_forward",
    "relu_backward",
    "sigmoid_forward",
    "sigmoid_backward",
    "softmax_rows",
    "softmax_rows_backward",
    "adam_update",
)


def _numpy_kernels():
    def linear_forward(x, w, b):
        return x @ w + b

    def linear_backward(x, w, g):
        dx = g @ w.T
        dw = x.T @ g
        db = g.sum(axis=0)
        return dx, dw, db

    def bn_train_forward(x, gamma, beta, eps):
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * invstd
        out = xhat * gamma + beta
        return out, xhat, mean, var, invstd

    def bn_train_backward(g, xhat, gamma, invstd):
        n = g.shape[0]
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma
        dx = (invstd / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )
        return dx, dgamma, dbeta

    def bn_eval_forward(x, gamma, beta, rmean, rvar, eps):
        invstd = 1.0 / np.sqrt(rvar + eps)
        return (x - rmean) * invstd * gamma + beta

    def leaky_relu_forward(x, slope):
        return np.where(x > 0.0, x, slope * x)

    def leaky_relu_backward(g, x, slope):
        return np.where(x > 0.0, g, slope * g)

    def relu_forward(x):
        return np.maximum(x, 0.0)

    def relu_backward(g, x):
        return np.where(x > 0.0, g, 0.0)

    def sigmoid_forward(x):
        out = np.empty_like(x)
        pos = x >= 0.0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    def sigmoid_backward(g, s):
        return g * s * (1.0 - s)

    def softmax_rows(x):
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
        return e / e.sum(axis=1, keepdims=True)

    def softmax_rows_backward(g, p):
        dot = (g * p).sum(axis=1, keepdims=True)
        return p * (g - dot)

    def adam_update(value, grad, m, v, t, lr, b1, b2, eps, wd):
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        value -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * value)
        return value

    return {name: fn for name, fn in locals().items() if name in _KERNEL_NAMES}


def _numba_kernels():
    from numba import njit

    jit = njit(cache=True, nogil=True)

    @jit
    def linear_forward(x, w, b):
        out = np.dot(x, w)
        for i in range(out.shape[0]):
            for j in range(out.shape[1]):
                out[i, j] += b[j]
        return out

    @jit
    def linear_backward(x, w, g):
        dx = np.dot(g, np.ascontiguousarray(w.T))
        dw = np.dot(np.ascontiguousarray(x.T), g)
        db = np.zeros(g.shape[1])
        for i in range(g.shape[0]):
            for j in range(g.shape[1]):
                db[j] += g[i, j]
        return dx, dw, db

    @jit
    def bn_train_forward(x, gamma, beta, eps):
        n, d = x.shape
        mean = np.zeros(d)
        var = np.zeros(d)
        for i in range(n):
            for j in range(d):
                mean[j] += x[i, j]
        for j in range(d):
            mean[j] /= n
        for i in range(n):
            for j in range(d):
                diff = x[i, j] - mean[j]
                var[j] += diff * diff
        for j in range(d):
            var[j] /= n
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = np.empty_like(x)
        out = np.empty_like(x)
        for i in range(n):
            for j in range(d):
                xhat[i, j] = (x[i, j] - mean[j]) * invstd[j]
                out[i, j] = xhat[i, j] * gamma[j] + beta[j]
        return out, xhat, mean, var, invstd

    @jit
    def bn_train_backward(g, xhat, gamma, invstd):
        n, d = g.shape
        dgamma = np.zeros(d)
        dbeta = np.zeros(d)
        sum_dxhat = np.zeros(d)
        sum_dxhat_xhat = np.zeros(d)
        for i in range(n):
            for j in range(d):
                dgamma[j] += g[i, j] * xhat[i, j]
                dbeta[j] += g[i, j]
                dxh = g[i, j] * gamma[j]
                sum_dxhat[j] += dxh
                sum_dxhat_xhat[j] += dxh * xhat[i, j]
        dx = np.empty_like(g)
        for i in range(n):
            for j in range(d):
                dxh = g[i, j] * gamma[j]
                dx[i, j] = (invstd[j] / n) * (
                    n * dxh - sum_dxhat[j] - xhat[i, j] * sum_dxhat_xhat[j]
                )
        return dx, dgamma, dbeta

    @jit
    def bn_eval_forward(x, gamma, beta, rmean, rvar, eps):
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                out[i, j] = (x[i, j] - rmean[j]) / np.sqrt(rvar[j] + eps) * gamma[j] + beta[j]
        return out

    @jit
    def leaky_relu_forward(x, slope):
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                v = x[i, j]
                out[i, j] = v if v > 0.0 else slope * v
        return out

    @jit
    def leaky_relu_backward(g, x, slope):
        dx = np.empty_like(g)
        for i in range(g.shape[0]):
            for j in range(g.shape[1]):
                dx[i, j] = g[i, j] if x[i, j] > 0.0 else slope * g[i, j]
        return dx

    @jit
    def relu_forward(x):
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                v = x[i, j]
                out[i, j] = v if v > 0.0 else 0.0
        return out

    @jit
    def relu_backward(g, x):
        dx = np.empty_like(g)
        for i in range(g.shape[0]):
            for j in range(g.shape[1]):
                dx[i, j] = g[i, j] if x[i, j] > 0.0 else 0.0
        return dx

    @jit
    def sigmoid_forward(x):
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                v = x[i, j]
                if v >= 0.0:
                    out[i, j] = 1.0 / (1.0 + np.exp(-v))
                else:
                    e = np.exp(v)
                    out[i, j] = e / (1.0 + e)
        return out

    @jit
    def sigmoid_backward(g, s):
        dx = np.empty_like(g)
        for i in range(g.shape[0]):
            for j in range(g.shape[1]):
                dx[i, j] = g[i, j] * s[i, j] * (1.0 - s[i, j])
        return dx

    @jit
    def softmax_rows(x):
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            m = x[i, 0]
            for j in range(1, x.shape[1]):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(x.shape[1]):
                e = np.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            for j in range(x.shape[1]):
                out[i, j] /= s
        return out

    @jit
    def softmax_rows_backward(g, p):
        dx = np.empty_like(g)
        for i in range(g.shape[0]):
            dot = 0.0
            for j in range(g.shape[1]):
                dot += g[i, j] * p[i, j]
            for j in range(g.shape[1]):
                dx[i, j] = p[i, j] * (g[i, j] - dot)
        return dx

    @jit
    def adam_update(value, grad, m, v, t, lr, b1, b2, eps, wd):
        flat_value = value.reshape(-1)
        flat_grad = grad.reshape(-1)
        flat_m = m.reshape(-1)
        flat_v = v.reshape(-1)
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for k in range(flat_value.shape[0]):
            gk = flat_grad[k]
            flat_m[k] = b1 * flat_m[k] + (1.0 - b1) * gk
            flat_v[k] = b2 * flat_v[k] + (1.0 - b2) * gk * gk
            mhat = flat_m[k] / c1
            vhat = flat_v[k] / c2
            flat_value[k] -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * flat_value[k])
        return value

    return {name: fn for name, fn in locals().items() if name in _KERNEL_NAMES}


def _select_backend() -> str:
    choice = os.environ.get(_ENV_FLAG, "auto").strip().lower() or "auto"
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(
            f"{_ENV_FLAG} must be 'numba', 'numpy' or 'auto', got {choice!r}"
        )
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise
        return "numpy"
    return "numba"


def load_kernels(backend: str) -> dict:
    """Build the kernel table for an explicit backend (used by the benchmark)."""
    if backend == "numpy":
        return _numpy_kernels()
    if backend == "numba":
        return _numba_kernels()
    raise ValueError(f"unknown kernel backend {backend!r}")


_BACKEND = _select_backend()
_IMPLS = load_kernels(_BACKEND)

linear_forward = _IMPLS["linear_forward"]
linear_backward = _IMPLS["linear_backward"]
bn_train_forward = _IMPLS["bn_train_forward"]
bn_train_backward = _IMPLS["bn_train_backward"]
bn_eval_forward = _IMPLS["bn_eval_forward"]
leaky_relu_forward = _IMPLS["leaky_relu_forward"]
leaky_relu_backward = _IMPLS["leaky_relu_backward"]
relu_forward = _IMPLS["relu_forward"]
relu_backward = _IMPLS["relu_backward"]
sigmoid_forward = _IMPLS["sigmoid_forward"]
sigmoid_backward = _IMPLS["sigmoid_backward"]
softmax_rows = _IMPLS["softmax_rows"]
softmax_rows_backward = _IMPLS["softmax_rows_backward"]
adam_update = _IMPLS["adam_update"]


def kernel_backend() -> str:
    """Name of the backend currently bound to the module-level functions."""
    return _BACKEND


def use_backend(backend: str) -> str:
    """Rebind the module-level kernels to ``backend``, returning the old name.

    Callers in this package go through ``kernels.<name>`` attribute lookups,
    so swapping the globals here switches every consumer at once. Meant for
    benchmarks and tests; normal runs stick with the import-time choice.
    """
    global _BACKEND, _IMPLS
    previous = _BACKEND
    table = load_kernels(backend)
    globals().update(table)
    _BACKEND = backend
    _IMPLS = table
    return previous


def warmup(table: dict | None = None) -> None:
    """Run every kernel once on tiny inputs, forcing JIT compilation."""
    k = table if table is not None else _IMPLS
    x = np.array([[0.5, -1.0], [2.0, 0.25]])
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.zeros(2)
    ones = np.ones(2)
    g = np.full((2, 2), 0.1)
    k["linear_forward"](x, w, b)
    k["linear_backward"](x, w, g)
    out, xhat, mean, var, invstd = k["bn_train_forward"](x, ones, b, 1e-5)
    k["bn_train_backward"](g, xhat, ones, invstd)
    k["bn_eval_forward"](x, ones, b, b, ones, 1e-5)
    k["leaky_relu_forward"](x, 0.01)
    k["leaky_relu_backward"](g, x, 0.01)
    k["relu_forward"](x)
    k["relu_backward"](g, x)
    s = k["sigmoid_forward"](x)
    k["sigmoid_backward"](g, s)
    p = k["softmax_rows"](x)
    k["softmax_rows_backward"](g, p)
    k["adam_update"](x.copy(), g.copy(), np.zeros((2, 2)), np.zeros((2, 2)),
                     1, 1e-3, 0.9, 0.98, 1e-6, 0.0)
