"""Image-text contrastive loss, class-probability rule, and domain loss.

All three come with exact analytic gradients. Temperature defaults to the
frozen encoder's logit scale (inverse temperature 100).
"""

from __future__ import annotations

import numpy as np

from fedadapt import kernels
from fedadapt.numerics import as_matrix, as_vector

DEFAULT_TAU = 0.01
PROB_FLOOR = 1e-7


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0.0:
        raise ValueError("temperature must be positive")
    return tau


def cosine_similarity(iq, t):
    """S[j, c] = cos(iq_j, t_c) for feature rows iq (B x D) and t (M x D)."""
    s, _ = cosine_similarity_forward(iq, t)
    return s


def cosine_similarity_forward(iq, t):
    """cosine_similarity plus the cache its backward pass needs."""
    iq = as_matrix(iq, "iq")
    t = as_matrix(t, "t")
    if iq.shape[1] != t.shape[1]:
        raise ValueError(f"feature widths differ: {iq.shape[1]} vs {t.shape[1]}")
    iq_norm = np.sqrt((iq * iq).sum(axis=1))
    t_norm = np.sqrt((t * t).sum(axis=1))
    if not (iq_norm > 0.0).all():
        raise ValueError("iq contains a zero-norm row; cosine undefined")
    if not (t_norm > 0.0).all():
        raise ValueError("t contains a zero-norm row; cosine undefined")
    iq_hat = iq / iq_norm[:, None]
    t_hat = t / t_norm[:, None]
    s = np.dot(iq_hat, np.ascontiguousarray(t_hat.T))
    return s, ("cosine", iq_hat, t_hat, iq_norm, t_norm)


def cosine_similarity_backward(ds, cache):
    """Gradient of a scalar w.r.t. both feature matrices given dL/dS."""
    kind, iq_hat, t_hat, iq_norm, t_norm = cache
    if kind != "cosine":
        raise ValueError(f"cache is for {kind!r}, expected 'cosine'")
    ds = as_matrix(ds, "ds")
    if ds.shape != (iq_hat.shape[0], t_hat.shape[0]):
        raise ValueError(f"ds shape {ds.shape} does not match similarity matrix")
    # Through row normalization: d(u/|u|) projects out the radial component.
    g_iq_hat = np.dot(ds, t_hat)
    g_t_hat = np.dot(np.ascontiguousarray(ds.T), iq_hat)
    d_iq = (g_iq_hat - iq_hat * (g_iq_hat * iq_hat).sum(axis=1, keepdims=True))
    d_iq /= iq_norm[:, None]
    d_t = (g_t_hat - t_hat * (g_t_hat * t_hat).sum(axis=1, keepdims=True))
    d_t /= t_norm[:, None]
    return d_iq, d_t


def class_probabilities(s, tau: float = DEFAULT_TAU):
    """softmax(s / tau) over the class axis; accepts a row or a matrix."""
    tau = _check_tau(tau)
    arr = np.ascontiguousarray(s, dtype=np.float64)
    if arr.ndim == 1:
        return kernels.softmax_rows(arr[None, :] / tau)[0]
    if arr.ndim == 2:
        return kernels.softmax_rows(arr / tau)
    raise ValueError(f"similarities must be 1-D or 2-D, got shape {arr.shape}")


def contrastive_loss(s, tau: float = DEFAULT_TAU):
    """Symmetric image-text cross-entropy on a square similarity matrix.

    P = rowsoftmax(S/tau) and Q = rowsoftmax(S'/tau); the loss averages the
    negative log diagonal of both. Returns (loss, dL/dS) with the gradient of
    the unclamped objective; the 1e-7 probability floor only guards the logs.
    """
    tau = _check_tau(tau)
    s = as_matrix(s, "s")
    b = s.shape[0]
    if s.shape[1] != b:
        raise ValueError(f"similarity matrix must be square, got {s.shape}")
    p = kernels.softmax_rows(s / tau)
    q = kernels.softmax_rows(np.ascontiguousarray(s.T) / tau)
    diag_p = np.maximum(np.diagonal(p), PROB_FLOOR)
    diag_q = np.maximum(np.diagonal(q), PROB_FLOOR)
    loss = -0.5 * (np.log(diag_p) + np.log(diag_q)).sum() / b
    ds = (p + q.T - 2.0 * np.eye(b)) / (2.0 * b * tau)
    return float(loss), ds


def da_loss(d, z):
    """Mean binary cross-entropy of source-vs-target predictions.

    d holds sigmoid outputs, z the 0/1 domain labels. Predictions are clamped
    to [1e-7, 1 - 1e-7]; the returned gradient is zero where the clamp is
    active and exact elsewhere.
    """
    d = as_vector(d, "d")
    z = as_vector(z, "z")
    if d.shape != z.shape:
        raise ValueError(f"predictions and labels differ in length: {d.shape} vs {z.shape}")
    if d.size == 0:
        raise ValueError("empty prediction vector")
    if not np.isin(z, (0.0, 1.0)).all():
        raise ValueError("domain labels must be 0 or 1")
    n = d.size
    clamped = np.clip(d, PROB_FLOOR, 1.0 - PROB_FLOOR)
    loss = -(z * np.log(clamped) + (1.0 - z) * np.log1p(-clamped)).sum() / n
    dd = -(z / clamped - (1.0 - z) / (1.0 - clamped)) / n
    dd[(d < PROB_FLOOR) | (d > 1.0 - PROB_FLOOR)] = 0.0
    return float(loss), dd
