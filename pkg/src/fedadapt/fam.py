"""Feature-adaptation mask network.

A small trainable stack that maps a batch of frozen image features to a
per-sample softmax mask over the feature coordinates; the mask multiplies
the features elementwise. Standard variant: linear, batchnorm, LeakyReLU,
linear, softmax. Deep variant inserts a second linear+batchnorm+LeakyReLU
block. Parameters flatten to a canonical vector, the unit of transmission
in the federated loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedadapt.numerics import (
    ParamBlock,
    activation_backward,
    activation_forward,
    as_matrix,
    batchnorm_backward,
    batchnorm_forward,
    linear_backward,
    linear_forward,
)

VARIANTS = ("standard", "deep")


@dataclass(frozen=True)
class FamConfig:
    feature_dim: int
    hidden_dim: int = 0  # 0 means: same as feature_dim
    variant: str = "standard"

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.hidden_dim == 0:
            object.__setattr__(self, "hidden_dim", self.feature_dim)
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


class FamParams:
    """Learnable blocks plus batchnorm running statistics.

    Running statistics are plain arrays, mutated in place by train-mode
    forward passes, and travel with the learnable values in the canonical
    flat vector.
    """

    def __init__(self, config: FamConfig, blocks, running):
        self.config = config
        self.blocks = blocks      # name -> ParamBlock, canonical order
        self.running = running    # name -> ndarray, canonical order

    @classmethod
    def init(cls, config: FamConfig, seed: int = 0) -> "FamParams":
        """Seeded init: uniform +-1/sqrt(fan_in) weights, zero biases,
        identity batchnorm."""
        rng = np.random.default_rng(seed)
        d, h = config.feature_dim, config.hidden_dim
        blocks = {}
        running = {}

        def linear(name, fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            blocks[f"{name}_w"] = ParamBlock(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            blocks[f"{name}_b"] = ParamBlock(np.zeros(fan_out))

        def bn(name, width):
            blocks[f"{name}_gamma"] = ParamBlock(np.ones(width))
            blocks[f"{name}_beta"] = ParamBlock(np.zeros(width))
            running[f"{name}_mean"] = np.zeros(width)
            running[f"{name}_var"] = np.ones(width)

        linear("lin1", d, h)
        bn("bn1", h)
        if config.variant == "deep":
            linear("mid", h, h)
            bn("bn2", h)
        linear("lin2", h, d)
        return cls(config, blocks, running)

    def clone(self) -> "FamParams":
        return FamParams(
            self.config,
            {k: v.clone() for k, v in self.blocks.items()},
            {k: v.copy() for k, v in self.running.items()},
        )

    def trainable_blocks(self):
        return list(self.blocks.items())

    def zero_grads(self) -> None:
        for block in self.blocks.values():
            block.zero_grad()


def _segment_specs(config: FamConfig):
    """Canonical flat-vector layout: (key, is_running_stat, shape)."""
    d, h = config.feature_dim, config.hidden_dim
    specs = [
        ("lin1_w", False, (d, h)),
        ("lin1_b", False, (h,)),
        ("bn1_gamma", False, (h,)),
        ("bn1_beta", False, (h,)),
        ("bn1_mean", True, (h,)),
        ("bn1_var", True, (h,)),
    ]
    if config.variant == "deep":
        specs += [
            ("mid_w", False, (h, h)),
            ("mid_b", False, (h,)),
            ("bn2_gamma", False, (h,)),
            ("bn2_beta", False, (h,)),
            ("bn2_mean", True, (h,)),
            ("bn2_var", True, (h,)),
        ]
    specs += [
        ("lin2_w", False, (h, d)),
        ("lin2_b", False, (d,)),
    ]
    return specs


def vector_layout(config: FamConfig):
    """(key, start, stop, shape, is_running_stat) for each vector segment."""
    layout = []
    offset = 0
    for key, is_stat, shape in _segment_specs(config):
        size = int(np.prod(shape))
        layout.append((key, offset, offset + size, shape, is_stat))
        offset += size
    return layout


def fam_param_count(config: FamConfig) -> int:
    """Length of the canonical vector, running statistics included."""
    return sum(int(np.prod(shape)) for _, _, shape in _segment_specs(config))


def fam_learnable_count(config: FamConfig) -> int:
    return sum(int(np.prod(shape)) for _, is_stat, shape in _segment_specs(config)
               if not is_stat)


def to_vector(params: FamParams) -> np.ndarray:
    parts = []
    for key, is_stat, _ in _segment_specs(params.config):
        arr = params.running[key] if is_stat else params.blocks[key].value
        parts.append(arr.ravel())
    return np.concatenate(parts)


def from_vector(config: FamConfig, vec) -> FamParams:
    """Fresh params (zero grads, zero optimizer state) from a flat vector."""
    params = FamParams.init(config, seed=0)
    for block in params.blocks.values():
        block.adam_m[...] = 0.0
        block.adam_v[...] = 0.0
        block.step_count = 0
    load_vector(params, vec)
    return params


def load_vector(params: FamParams, vec, skip_bn: bool = False) -> FamParams:
    """Overwrite parameter values in place from a flat vector.

    Gradients and optimizer state are untouched. skip_bn leaves every
    batchnorm-owned segment (gamma, beta, running stats) as is.
    """
    vec = np.ascontiguousarray(vec, dtype=np.float64)
    expected = fam_param_count(params.config)
    if vec.shape != (expected,):
        raise ValueError(f"vector must have shape ({expected},), got {vec.shape}")
    for key, start, stop, shape, is_stat in vector_layout(params.config):
        if skip_bn and key.startswith("bn"):
            continue
        segment = vec[start:stop].reshape(shape)
        target = params.running[key] if is_stat else params.blocks[key].value
        target[...] = segment
    return params


def fam_forward(params: FamParams, i, mode: str):
    """Run the mask network; rows of the returned mask sum to 1."""
    i = as_matrix(i, "i")
    cfg = params.config
    if i.shape[1] != cfg.feature_dim:
        raise ValueError(f"input width {i.shape[1]} != feature_dim {cfg.feature_dim}")
    b = params.blocks
    r = params.running
    caches = []
    x, c = linear_forward(i, b["lin1_w"].value, b["lin1_b"].value)
    caches.append(("lin1", c))
    x, c = batchnorm_forward(x, b["bn1_gamma"].value, b["bn1_beta"].value,
                             r["bn1_mean"], r["bn1_var"], mode)
    caches.append(("bn1", c))
    x, c = activation_forward(x, "leaky_relu")
    caches.append(("act1", c))
    if cfg.variant == "deep":
        x, c = linear_forward(x, b["mid_w"].value, b["mid_b"].value)
        caches.append(("mid", c))
        x, c = batchnorm_forward(x, b["bn2_gamma"].value, b["bn2_beta"].value,
                                 r["bn2_mean"], r["bn2_var"], mode)
        caches.append(("bn2", c))
        x, c = activation_forward(x, "leaky_relu")
        caches.append(("act2", c))
    x, c = linear_forward(x, b["lin2_w"].value, b["lin2_b"].value)
    caches.append(("lin2", c))
    mask, c = activation_forward(x, "softmax_rows")
    caches.append(("softmax", c))
    return mask, ("fam", caches)


def apply_mask(i, mask):
    i = as_matrix(i, "i")
    mask = as_matrix(mask, "mask")
    if i.shape != mask.shape:
        raise ValueError(f"shape mismatch: features {i.shape} vs mask {mask.shape}")
    return i * mask


def masked_forward(params: FamParams, i, mode: str):
    """Mask network plus Hadamard application: returns (masked features, cache)."""
    i = as_matrix(i, "i")
    mask, fam_cache = fam_forward(params, i, mode)
    return apply_mask(i, mask), ("masked", fam_cache, i, mask)


def _mask_backward(params: FamParams, fam_cache, d_mask):
    kind, caches = fam_cache
    if kind != "fam":
        raise ValueError(f"cache is for {kind!r}, expected 'fam'")
    b = params.blocks
    g = d_mask
    for name, cache in reversed(caches):
        if name == "softmax" or name.startswith("act"):
            g = activation_backward(g, cache)
        elif name in ("lin1", "mid", "lin2"):
            g, dw, db = linear_backward(g, cache)
            b[f"{name}_w"].grad += dw
            b[f"{name}_b"].grad += db
        elif name.startswith("bn"):
            g, dgamma, dbeta = batchnorm_backward(g, cache)
            b[f"{name}_gamma"].grad += dgamma
            b[f"{name}_beta"].grad += dbeta
        else:
            raise ValueError(f"unknown cache entry {name!r}")
    return g


def fam_backward(params: FamParams, cache, d_masked):
    """Backprop through mask application and the mask network.

    The product rule feeds the upstream gradient down both paths: the
    identity path (scaled by the mask) and the network path (scaled by the
    input). Parameter gradients accumulate into the blocks; returns the
    gradient w.r.t. the input features.
    """
    kind, fam_cache, i, mask = cache
    if kind != "masked":
        raise ValueError(f"cache is for {kind!r}, expected 'masked'")
    d_masked = as_matrix(d_masked, "d_masked")
    if d_masked.shape != i.shape:
        raise ValueError("upstream grad shape does not match forward output")
    d_mask = d_masked * i
    d_input = d_masked * mask
    d_input += _mask_backward(params, fam_cache, d_mask)
    return d_input
