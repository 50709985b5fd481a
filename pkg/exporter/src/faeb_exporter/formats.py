"""FAEB embedding files: writer and a strict verifying reader.

Layout, little-endian throughout:

    magic "FAEB"; version u32 = 1; D u32; K u32; N u64;
    K x (name_len u32, UTF-8 name bytes);
    prompt_flag u8 (1 = bank present) then K x D float32 prompt rows;
    N x (label u32, D x float32 features).

This package carries its own writer/reader pair on purpose: the exporter
and its consumers share only the bytes, so drift between the two sides
shows up in the round-trip tests instead of being masked by a shared
implementation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"FAEB"
FORMAT_VERSION = 1


class FormatError(Exception):
    """Malformed or truncated embedding file."""


def write_embeddings(path, class_names, labels, features, prompt_bank=None) -> None:
    """Write one embedding file. Features are stored raw (unnormalized),
    float32; labels index into class_names."""
    names = [str(n) for n in class_names]
    if not names:
        raise ValueError("at least one class required")
    feats = np.ascontiguousarray(features, dtype="<f4")
    if feats.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {feats.shape}")
    n, d = feats.shape
    if d < 1:
        raise ValueError("feature dimension must be >= 1")
    labs = np.asarray(labels, dtype=np.int64)
    if labs.shape != (n,):
        raise ValueError("one label per feature row required")
    k = len(names)
    if n and (labs.min() < 0 or labs.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    bank = None
    if prompt_bank is not None:
        bank = np.ascontiguousarray(prompt_bank, dtype="<f4")
        if bank.shape != (k, d):
            raise ValueError(f"prompt bank must be {k} x {d}, got {bank.shape}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIIQ", FORMAT_VERSION, d, k, n))
        for name in names:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
        if bank is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(bank.tobytes())
        record = np.empty(n, dtype=[("label", "<u4"), ("feat", "<f4", (d,))])
        record["label"] = labs.astype("<u4")
        record["feat"] = feats
        f.write(record.tobytes())


class _Cursor:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.blob):
            raise FormatError(f"{self.path}: truncated while reading {what}")
        out = self.blob[self.pos:self.pos + size]
        self.pos += size
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_embeddings(path):
    """Strict read. Returns (class_names, labels, features, prompt_bank);
    raises FormatError on any structural defect, including trailing bytes."""
    with open(path, "rb") as f:
        blob = f.read()
    c = _Cursor(blob, path)
    if c.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic, not an embedding file")
    version, d, k, n = c.unpack("<IIIQ", "header")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if d < 1 or k < 1:
        raise FormatError(f"{path}: invalid dimensions D={d}, K={k}")
    names = []
    for i in range(k):
        (name_len,) = c.unpack("<I", f"class name {i} length")
        raw = c.take(name_len, f"class name {i}")
        try:
            names.append(raw.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: class name {i} is not UTF-8") from exc
    (flag,) = c.unpack("<B", "prompt flag")
    if flag not in (0, 1):
        raise FormatError(f"{path}: prompt flag must be 0 or 1, got {flag}")
    bank = None
    if flag:
        raw = c.take(4 * k * d, "prompt bank")
        bank = np.frombuffer(raw, dtype="<f4").reshape(k, d).copy()
    raw = c.take(n * (4 + 4 * d), "records")
    if c.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - c.pos} trailing bytes")
    records = np.frombuffer(raw, dtype=[("label", "<u4"), ("feat", "<f4", (d,))])
    labels = records["label"].astype(np.int64)
    if n and labels.max() >= k:
        raise FormatError(f"{path}: label {labels.max()} out of range for K={k}")
    features = records["feat"].reshape(n, d).copy()
    return names, labels, features, bank


@dataclass
class VerifyReport:
    path: str
    feature_dim: int
    n_classes: int
    n_records: int
    class_names: list
    label_histogram: list        # count per class id, sums to n_records
    has_prompt_bank: bool
    norm_min: float = None      # type: ignore[assignment]  # None when empty
    norm_mean: float = None     # type: ignore[assignment]
    norm_max: float = None      # type: ignore[assignment]

    def lines(self) -> list:
        out = [
            f"file:    {self.path}",
            f"D:       {self.feature_dim}",
            f"K:       {self.n_classes}",
            f"N:       {self.n_records}",
            f"prompts: {'yes' if self.has_prompt_bank else 'no'}",
        ]
        if self.n_records:
            out.append(f"norms:   min {self.norm_min:.6g}  "
                       f"mean {self.norm_mean:.6g}  max {self.norm_max:.6g}")
        for name, count in zip(self.class_names, self.label_histogram):
            out.append(f"  [{count:>6}] {name}")
        return out


def verify_file(path) -> VerifyReport:
    """Read with full validation and summarize."""
    names, labels, features, bank = read_embeddings(path)
    k = len(names)
    hist = np.bincount(labels, minlength=k).tolist() if labels.size else [0] * k
    norms = np.linalg.norm(features.astype(np.float64), axis=1)
    return VerifyReport(
        path=str(path),
        feature_dim=features.shape[1],
        n_classes=k,
        n_records=labels.size,
        class_names=names,
        label_histogram=hist,
        has_prompt_bank=bank is not None,
        norm_min=float(norms.min()) if labels.size else None,
        norm_mean=float(norms.mean()) if labels.size else None,
        norm_max=float(norms.max()) if labels.size else None,
    )
