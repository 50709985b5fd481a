"""Embedding datasets: binary persistence, partitioners, synthetic generator.

The on-disk format is little-endian throughout and round-trips bitwise:

    magic "FAEB" (4 bytes); version u32 = 1; D u32; K u32; N u64;
    K x (name_len u32, UTF-8 name bytes);
    prompt_flag u8 (1 = bank present) then K x D float32 prompt rows;
    N x (label u32, D x float32 features).

Features are stored raw (unnormalized); cosine similarity normalizes at
compute time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"FAEB"
FORMAT_VERSION = 1


class DatasetFormatError(Exception):
    """Malformed or truncated embedding file."""


@dataclass
class EmbeddingDataset:
    """Frozen-encoder features with labels and an optional prompt bank.

    Arrays are float32, matching the storage format, so write/read round
    trips are bit-identical.
    """

    class_names: list
    features: np.ndarray                       # N x D float32
    labels: np.ndarray                         # N int64
    prompt_bank: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("one label per feature row required")
        k = len(self.class_names)
        if k < 1:
            raise ValueError("at least one class required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        if self.prompt_bank is not None:
            self.prompt_bank = np.ascontiguousarray(self.prompt_bank, dtype=np.float32)
            if self.prompt_bank.shape != (k, self.feature_dim):
                raise ValueError(
                    f"prompt bank must be {k} x {self.feature_dim}, "
                    f"got {self.prompt_bank.shape}")
            norms = np.linalg.norm(self.prompt_bank.astype(np.float64), axis=1)
            if not (norms > 0.0).all():
                raise ValueError("prompt bank contains a zero-norm row")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, indices) -> "EmbeddingDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return EmbeddingDataset(
            list(self.class_names), self.features[idx], self.labels[idx],
            None if self.prompt_bank is None else self.prompt_bank.copy(),
        )


def write_dataset(ds: EmbeddingDataset, path) -> None:
    d = ds.feature_dim
    k = ds.n_classes
    n = len(ds)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIIQ", FORMAT_VERSION, d, k, n))
        for name in ds.class_names:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
        if ds.prompt_bank is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(ds.prompt_bank.astype("<f4").tobytes())
        record = np.empty(n, dtype=_record_dtype(d))
        record["label"] = ds.labels.astype("<u4")
        record["feat"] = ds.features.astype("<f4")
        f.write(record.tobytes())


def _record_dtype(d: int):
    return np.dtype([("label", "<u4"), ("feat", "<f4", (d,))])


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.blob):
            raise DatasetFormatError(f"{self.path}: truncated while reading {what}")
        out = self.blob[self.pos:self.pos + size]
        self.pos += size
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_dataset(path) -> EmbeddingDataset:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, path)
    if r.take(4, "magic") != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic, not an embedding file")
    version, d, k, n = r.unpack("<IIIQ", "header")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    if d < 1 or k < 1:
        raise DatasetFormatError(f"{path}: invalid dimensions D={d}, K={k}")
    names = []
    for i in range(k):
        (name_len,) = r.unpack("<I", f"class name {i} length")
        raw = r.take(name_len, f"class name {i}")
        try:
            names.append(raw.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise DatasetFormatError(f"{path}: class name {i} is not UTF-8") from exc
    (prompt_flag,) = r.unpack("<B", "prompt flag")
    if prompt_flag not in (0, 1):
        raise DatasetFormatError(f"{path}: prompt flag must be 0 or 1, got {prompt_flag}")
    prompt_bank = None
    if prompt_flag:
        raw = r.take(4 * k * d, "prompt bank")
        prompt_bank = np.frombuffer(raw, dtype="<f4").reshape(k, d).copy()
    raw = r.take(n * (4 + 4 * d), "records")
    if r.pos != len(blob):
        raise DatasetFormatError(f"{path}: {len(blob) - r.pos} trailing bytes")
    records = np.frombuffer(raw, dtype=_record_dtype(d))
    labels = records["label"].astype(np.int64)
    if n and labels.max() >= k:
        raise DatasetFormatError(f"{path}: label {labels.max()} out of range for K={k}")
    features = records["feat"].reshape(n, d).copy()
    try:
        return EmbeddingDataset(names, features, labels, prompt_bank)
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# partitioners


@dataclass(frozen=True)
class DirichletPartitionConfig:
    alpha: float
    n_clients: int
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0.0:
            raise ValueError("alpha must be positive")
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")


def dirichlet_partition(labels, cfg: DirichletPartitionConfig):
    """Class-skewed partition: per class, allocation proportions are drawn
    from Dirichlet(alpha, ..., alpha) and the class's shuffled indices are
    split at the cumulative proportions. Disjoint and exhaustive; empty
    shares are allowed."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("labels must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    shares = [[] for _ in range(cfg.n_clients)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(cfg.n_clients, cfg.alpha))
        cuts = np.floor(np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for client, chunk in enumerate(np.split(idx, cuts)):
            shares[client].append(chunk)
    return [np.sort(np.concatenate(s)) if s else np.empty(0, dtype=np.int64)
            for s in shares]


def pathological_partition(labels, n_clients: int, seed: int = 0):
    """Disjoint class subsets per client; remainder classes round-robin."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("labels must be non-empty")
    classes = np.unique(labels)
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if n_clients > classes.size:
        raise ValueError(
            f"n_clients={n_clients} exceeds the {classes.size} present classes")
    rng = np.random.default_rng(seed)
    shuffled = rng.permutation(classes)
    assignment = [[] for _ in range(n_clients)]
    for pos, cls in enumerate(shuffled):
        assignment[pos % n_clients].append(cls)
    return [np.sort(np.flatnonzero(np.isin(labels, cls_list)))
            for cls_list in assignment]


def split_train_val_test(indices, ratios=(0.6, 0.2, 0.2), seed: int = 0):
    """Seeded shuffle then floor-sized val/test splits; remainder to train."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("cannot split an empty index list")
    if len(ratios) != 3:
        raise ValueError("ratios must be (train, val, test)")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    rng = np.random.default_rng(seed)
    shuffled = rng.permutation(indices)
    n = indices.size
    n_val = int(np.floor(n * ratios[1]))
    n_test = int(np.floor(n * ratios[2]))
    n_train = n - n_val - n_test
    return (shuffled[:n_train],
            shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SyntheticConfig:
    """Desk-scale stand-in for frozen-encoder features.

    n_domains counts source domains; generation always appends one extra
    shifted domain that serves as the held-out target pool.
    """

    n_classes: int
    feature_dim: int
    n_domains: int
    samples_per_class: int
    separation: float = 0.5     # pairwise |cosine| bound between class anchors
    shift: float = 1.0          # per-domain offset magnitude
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.n_classes, self.feature_dim, self.n_domains,
               self.samples_per_class) < 1:
            raise ValueError("counts must be >= 1")
        if not 0.0 < self.separation <= 1.0:
            raise ValueError("separation must be in (0, 1]")
        if self.shift < 0.0 or self.noise_sigma < 0.0:
            raise ValueError("shift and noise_sigma must be non-negative")


def _unit(v):
    return v / np.linalg.norm(v)


def _class_anchors(cfg: SyntheticConfig, rng) -> np.ndarray:
    anchors = []
    attempts = 0
    while len(anchors) < cfg.n_classes:
        attempts += 1
        if attempts > 1000 * cfg.n_classes:
            raise ValueError(
                "could not place class anchors below the separation bound; "
                "raise separation or feature_dim")
        cand = _unit(rng.normal(size=cfg.feature_dim))
        if all(abs(float(np.dot(cand, a))) <= cfg.separation for a in anchors):
            anchors.append(cand)
    return np.stack(anchors)


def synth_generate(cfg: SyntheticConfig):
    """One labeled dataset per source domain plus a held-out target domain,
    every one carrying the shared anchor prompt bank. Domain d's samples sit
    at anchor + the domain's fixed offset (norm = shift) + Gaussian noise.
    The target domain is the last list entry and doubles as the unlabeled
    target pool.

    Each domain offset is drawn on a narrow random coordinate support
    (feature_dim/16 dims): domain identity concentrates in a few feature
    coordinates, the way style information does in encoder embeddings, which
    is what gives a multiplicative feature mask something to suppress."""
    rng = np.random.default_rng(cfg.seed)
    anchors = _class_anchors(cfg, rng)
    class_names = [f"class_{i}" for i in range(cfg.n_classes)]
    support = max(1, cfg.feature_dim // 16)
    datasets = []
    for _ in range(cfg.n_domains + 1):
        dims = rng.choice(cfg.feature_dim, size=support, replace=False)
        direction = np.zeros(cfg.feature_dim)
        direction[dims] = rng.normal(size=support)
        offset = cfg.shift * _unit(direction)
        rows = []
        labels = []
        for cls in range(cfg.n_classes):
            noise = rng.normal(scale=cfg.noise_sigma,
                               size=(cfg.samples_per_class, cfg.feature_dim))
            rows.append(anchors[cls] + offset + noise)
            labels.extend([cls] * cfg.samples_per_class)
        features = np.vstack(rows)
        norms = np.linalg.norm(features, axis=1)
        if not (norms > 0.0).all():
            raise ValueError("synthetic sample with zero norm; adjust shift/sigma")
        datasets.append(EmbeddingDataset(class_names, features,
                                         np.array(labels), anchors.copy()))
    return datasets
