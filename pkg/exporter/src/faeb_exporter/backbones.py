"""Featurizers: the real frozen encoder and a deterministic offline stand-in.

A featurizer exposes `dim`, `encode_images(batch) -> (B, dim)` taking
preprocessed (B, 224, 224, 3) float arrays, and `encode_texts(texts) ->
(K, dim)` returning unit rows.
"""

from __future__ import annotations

import hashlib

import numpy as np

MOCK_BACKBONE = "mock"
_MOCK_DIM = 512
_POOL = 32  # 224 = 32 * 7, so block-mean pooling is exact


class MockFeaturizer:
    """Deterministic stand-in for environments without encoder weights.

    Images: block-mean pool to 32x32x3, then a fixed random projection to
    512 dims, one row at a time so output bytes do not depend on batch
    size. Texts: unit vectors seeded from the text's SHA-256. Carries no
    semantics; it exists so export pipelines and their consumers can be
    exercised offline.
    """

    dim = _MOCK_DIM

    def __init__(self):
        rng = np.random.default_rng(int.from_bytes(b"FAEB", "big"))
        fan_in = _POOL * _POOL * 3
        self._w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, _MOCK_DIM))

    def encode_images(self, batch) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 4 or batch.shape[1:] != (224, 224, 3):
            raise ValueError(f"expected (B, 224, 224, 3), got {batch.shape}")
        if not len(batch):
            return np.empty((0, _MOCK_DIM))
        block = 224 // _POOL
        pooled = batch.reshape(-1, _POOL, block, _POOL, block, 3).mean(axis=(2, 4))
        flat = pooled.reshape(len(batch), -1)
        # one row at a time: output bytes must not depend on batch size
        return np.stack([flat[i] @ self._w for i in range(len(batch))])

    def encode_texts(self, texts) -> np.ndarray:
        rows = []
        for text in texts:
            seed = int.from_bytes(
                hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
            v = np.random.default_rng(seed).normal(size=_MOCK_DIM)
            rows.append(v / np.linalg.norm(v))
        return np.stack(rows) if rows else np.empty((0, _MOCK_DIM))


class ClipFeaturizer:
    """Frozen pretrained vision-language encoder via open_clip.

    Requires the open_clip package and a locally available checkpoint.
    Note the exporter z-scores each image by its own statistics; a given
    checkpoint may have been trained with canonical normalization
    constants instead, which shifts absolute similarities but not the
    pipeline contract.
    """

    def __init__(self, name: str, device: str = "cpu"):
        try:
            import open_clip  # deferred: heavy and optional
            import torch
        except ImportError as exc:
            raise ValueError(
                f"backbone {name!r} needs the open_clip and torch packages "
                f"with a local checkpoint; install them, or use "
                f"--backbone {MOCK_BACKBONE}") from exc
        try:
            model, _, _ = open_clip.create_model_and_transforms(
                name.replace("/", "-"), pretrained="openai")
        except Exception as exc:
            raise ValueError(
                f"could not load backbone {name!r}: {exc}; use "
                f"--backbone {MOCK_BACKBONE} for an offline run") from exc
        self._torch = torch
        self._model = model.to(device).eval()
        self._tokenizer = open_clip.get_tokenizer(name.replace("/", "-"))
        self._device = device
        self.dim = int(model.visual.output_dim)

    def encode_images(self, batch) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            t = torch.as_tensor(np.asarray(batch, dtype=np.float32))
            t = t.permute(0, 3, 1, 2).to(self._device)
            return self._model.encode_image(t).cpu().double().numpy()

    def encode_texts(self, texts) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            tokens = self._tokenizer(list(texts)).to(self._device)
            out = self._model.encode_text(tokens).cpu().double().numpy()
        return out / np.linalg.norm(out, axis=1, keepdims=True)


def get_featurizer(name: str, device: str = "cpu"):
    if name == MOCK_BACKBONE:
        return MockFeaturizer()
    return ClipFeaturizer(name, device)
