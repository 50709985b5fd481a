"""Per-client domain discriminator trained against the mask network.

The discriminator scores masked features as source (the client's own data,
label 1) versus target (shared unlabeled pool, label 0). Its gradient is
reversed and scaled before flowing into the mask network, so one combined
optimizer step descends the discriminator loss while ascending it for the
mask parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedadapt import fam as fam_mod
from fedadapt.losses import da_loss
from fedadapt.numerics import (
    ParamBlock,
    activation_backward,
    activation_forward,
    as_matrix,
    batchnorm_backward,
    batchnorm_forward,
    grad_reverse_backward,
    linear_backward,
    linear_forward,
)


@dataclass(frozen=True)
class DcConfig:
    feature_dim: int
    hidden1: int = 512
    hidden2: int = 256

    def __post_init__(self):
        if min(self.feature_dim, self.hidden1, self.hidden2) < 1:
            raise ValueError("all discriminator widths must be >= 1")


class DcParams:
    """linear, batchnorm, ReLU, linear, batchnorm, ReLU, linear, sigmoid."""

    def __init__(self, config: DcConfig, blocks, running):
        self.config = config
        self.blocks = blocks
        self.running = running

    @classmethod
    def init(cls, config: DcConfig, seed: int = 0) -> "DcParams":
        """Seeded init; the final linear starts at zero so every initial
        prediction is 0.5 and the initial domain loss is exactly ln 2."""
        rng = np.random.default_rng(seed)
        d, h1, h2 = config.feature_dim, config.hidden1, config.hidden2
        blocks = {}
        running = {}

        def linear(name, fan_in, fan_out, zero=False):
            if zero:
                w = np.zeros((fan_in, fan_out))
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            blocks[f"{name}_w"] = ParamBlock(w)
            blocks[f"{name}_b"] = ParamBlock(np.zeros(fan_out))

        def bn(name, width):
            blocks[f"{name}_gamma"] = ParamBlock(np.ones(width))
            blocks[f"{name}_beta"] = ParamBlock(np.zeros(width))
            running[f"{name}_mean"] = np.zeros(width)
            running[f"{name}_var"] = np.ones(width)

        linear("lin1", d, h1)
        bn("bn1", h1)
        linear("lin2", h1, h2)
        bn("bn2", h2)
        linear("lin3", h2, 1, zero=True)
        return cls(config, blocks, running)

    def clone(self) -> "DcParams":
        return DcParams(
            self.config,
            {k: v.clone() for k, v in self.blocks.items()},
            {k: v.copy() for k, v in self.running.items()},
        )

    def trainable_blocks(self):
        return list(self.blocks.items())

    def zero_grads(self) -> None:
        for block in self.blocks.values():
            block.zero_grad()


def _dc_segment_specs(config: DcConfig):
    d, h1, h2 = config.feature_dim, config.hidden1, config.hidden2
    return [
        ("lin1_w", False, (d, h1)),
        ("lin1_b", False, (h1,)),
        ("bn1_gamma", False, (h1,)),
        ("bn1_beta", False, (h1,)),
        ("bn1_mean", True, (h1,)),
        ("bn1_var", True, (h1,)),
        ("lin2_w", False, (h1, h2)),
        ("lin2_b", False, (h2,)),
        ("bn2_gamma", False, (h2,)),
        ("bn2_beta", False, (h2,)),
        ("bn2_mean", True, (h2,)),
        ("bn2_var", True, (h2,)),
        ("lin3_w", False, (h2, 1)),
        ("lin3_b", False, (1,)),
    ]


def dc_param_count(config: DcConfig) -> int:
    return sum(int(np.prod(shape)) for _, _, shape in _dc_segment_specs(config))


def dc_to_vector(params: DcParams) -> np.ndarray:
    parts = []
    for key, is_stat, _ in _dc_segment_specs(params.config):
        arr = params.running[key] if is_stat else params.blocks[key].value
        parts.append(arr.ravel())
    return np.concatenate(parts)


def dc_load_vector(params: DcParams, vec) -> DcParams:
    vec = np.ascontiguousarray(vec, dtype=np.float64)
    expected = dc_param_count(params.config)
    if vec.shape != (expected,):
        raise ValueError(f"vector must have shape ({expected},), got {vec.shape}")
    offset = 0
    for key, is_stat, shape in _dc_segment_specs(params.config):
        size = int(np.prod(shape))
        segment = vec[offset:offset + size].reshape(shape)
        target = params.running[key] if is_stat else params.blocks[key].value
        target[...] = segment
        offset += size
    return params


def dc_forward(params: DcParams, x, mode: str):
    """Source probability per row, in the open interval (0, 1)."""
    x = as_matrix(x, "x")
    if x.shape[1] != params.config.feature_dim:
        raise ValueError(
            f"input width {x.shape[1]} != feature_dim {params.config.feature_dim}")
    b = params.blocks
    r = params.running
    caches = []
    h, c = linear_forward(x, b["lin1_w"].value, b["lin1_b"].value)
    caches.append(("lin1", c))
    h, c = batchnorm_forward(h, b["bn1_gamma"].value, b["bn1_beta"].value,
                             r["bn1_mean"], r["bn1_var"], mode)
    caches.append(("bn1", c))
    h, c = activation_forward(h, "relu")
    caches.append(("act1", c))
    h, c = linear_forward(h, b["lin2_w"].value, b["lin2_b"].value)
    caches.append(("lin2", c))
    h, c = batchnorm_forward(h, b["bn2_gamma"].value, b["bn2_beta"].value,
                             r["bn2_mean"], r["bn2_var"], mode)
    caches.append(("bn2", c))
    h, c = activation_forward(h, "relu")
    caches.append(("act2", c))
    h, c = linear_forward(h, b["lin3_w"].value, b["lin3_b"].value)
    caches.append(("lin3", c))
    prob, c = activation_forward(h, "sigmoid")
    caches.append(("sigmoid", c))
    return prob[:, 0], ("dc", caches)


def dc_backward(params: DcParams, cache, dd):
    """Backprop dL/dd; parameter grads accumulate, returns dL/dinput."""
    kind, caches = cache
    if kind != "dc":
        raise ValueError(f"cache is for {kind!r}, expected 'dc'")
    dd = np.ascontiguousarray(dd, dtype=np.float64)
    if dd.ndim != 1:
        raise ValueError("dd must be 1-D, one entry per prediction")
    b = params.blocks
    g = dd[:, None]
    for name, c in reversed(caches):
        if name == "sigmoid" or name.startswith("act"):
            g = activation_backward(g, c)
        elif name.startswith("lin"):
            g, dw, db = linear_backward(g, c)
            b[f"{name}_w"].grad += dw
            b[f"{name}_b"].grad += db
        elif name.startswith("bn"):
            g, dgamma, dbeta = batchnorm_backward(g, c)
            b[f"{name}_gamma"].grad += dgamma
            b[f"{name}_beta"].grad += dbeta
        else:
            raise ValueError(f"unknown cache entry {name!r}")
    return g


@dataclass
class DomainBatch:
    """Masked features with domain labels: source rows (z=1) then target
    rows (z=0), equally many of each."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = as_matrix(self.features, "features")
        self.labels = np.ascontiguousarray(self.labels, dtype=np.float64)
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise ValueError("one label per feature row required")
        if not np.isin(self.labels, (0.0, 1.0)).all():
            raise ValueError("domain labels must be 0 or 1")
        n_source = int(self.labels.sum())
        if 2 * n_source != n:
            raise ValueError(
                f"domain batch must be balanced, got {n_source} source of {n}")


def make_domain_batch(masked_source, masked_target) -> DomainBatch:
    masked_source = as_matrix(masked_source, "masked_source")
    masked_target = as_matrix(masked_target, "masked_target")
    if masked_source.shape != masked_target.shape:
        raise ValueError("source and target halves must have equal shapes")
    features = np.vstack([masked_source, masked_target])
    labels = np.concatenate([np.ones(len(masked_source)), np.zeros(len(masked_target))])
    return DomainBatch(features, labels)


def adversarial_backprop(fam_params, dc_params, batch: DomainBatch,
                         mask_caches, lam: float, mode: str = "train"):
    """Domain loss plus one adversarial gradient accumulation.

    The discriminator receives the true loss gradient (descent); the mask
    network receives the reversed gradient scaled by -lam (ascent), routed
    through the given mask-application caches, whose masked outputs must be
    the rows of the batch in order. Returns (loss, predictions).
    """
    if lam < 0.0:
        raise ValueError("lam must be non-negative")
    d, dc_cache = dc_forward(dc_params, batch.features, mode)
    loss, dd = da_loss(d, batch.labels)
    d_star = dc_backward(dc_params, dc_cache, dd)
    reversed_grad = grad_reverse_backward(d_star, lam)
    offset = 0
    for cache in mask_caches:
        rows = cache[2].shape[0]
        fam_mod.fam_backward(fam_params, cache, reversed_grad[offset:offset + rows])
        offset += rows
    if offset != batch.features.shape[0]:
        raise ValueError("mask caches do not cover the domain batch rows")
    return loss, d
