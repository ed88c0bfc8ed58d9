"""Embedding sets: synthetic identity clusters and file ingestion.

EMB1 container (little-endian)::

    "EMB1" u32 count u32 dim, then count x (u32 label, dim x f32)

CSV alternative: one ``label,f1,...,fd`` row per embedding, no header.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

EMB_MAGIC = b"EMB1"


@dataclass
class EmbeddingSet:
    embeddings: np.ndarray  # N x d
    labels: np.ndarray  # N, integer identity labels

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embeddings.ndim != 2 or len(self.labels) != len(self.embeddings):
            raise ValueError("embeddings must be N x d with N labels")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("embeddings contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def identities(self) -> list[int]:
        return sorted(set(self.labels.tolist()))

    def indices_of(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    n_identities: int = 55
    images_per_identity: int = 7
    embedding_dim: int = 128
    sigma_between: float = 1.0
    sigma_within: float = 0.95
    seed: int = 0
    n_images: Optional[int] = None  # if set, spread this total as evenly as possible

    def __post_init__(self):
        if self.n_identities < 1 or self.images_per_identity < 1 or self.embedding_dim < 1:
            raise ValueError("counts must be positive")
        if self.sigma_between <= 0 or self.sigma_within < 0:
            raise ValueError("sigma_between must be > 0 and sigma_within >= 0")
        if self.sigma_within >= self.sigma_between:
            raise ValueError("sigma_within must be smaller than sigma_between")
        if self.n_images is not None and self.n_images < self.n_identities:
            raise ValueError("n_images must cover every identity")

    def counts(self) -> list[int]:
        if self.n_images is None:
            return [self.images_per_identity] * self.n_identities
        base, extra = divmod(self.n_images, self.n_identities)
        return [base + 1 if i < extra else base for i in range(self.n_identities)]


# 55 identities / 412 images, the size of the face working set this mirrors
WORKING_SET = SyntheticDatasetSpec(n_identities=55, n_images=412, embedding_dim=128)


def generate_synthetic(spec: SyntheticDatasetSpec) -> EmbeddingSet:
    """Identity means ~ N(0, sb^2 I); each image = mean + N(0, sw^2 I)."""
    rng = np.random.default_rng(spec.seed)
    d = spec.embedding_dim
    means = rng.normal(0.0, spec.sigma_between, size=(spec.n_identities, d))
    counts = spec.counts()
    labels = np.repeat(np.arange(spec.n_identities), counts)
    noise = rng.normal(0.0, 1.0, size=(len(labels), d)) * spec.sigma_within
    return EmbeddingSet(means[labels] + noise, labels)


def write_emb(dataset: EmbeddingSet, path) -> None:
    n, d = dataset.embeddings.shape
    rows = np.empty(n, dtype=[("label", "<u4"), ("vec", "<f4", (d,))])
    rows["label"] = dataset.labels
    rows["vec"] = dataset.embeddings
    Path(path).write_bytes(EMB_MAGIC + struct.pack("<II", n, d) + rows.tobytes())


def read_emb(path) -> EmbeddingSet:
    raw = Path(path).read_bytes()
    if raw[:4] != EMB_MAGIC:
        raise ValueError(f"{path}: not an EMB1 file")
    n, d = struct.unpack_from("<II", raw, 4)
    dtype = np.dtype([("label", "<u4"), ("vec", "<f4", (d,))])
    if len(raw) != 12 + n * dtype.itemsize:
        raise ValueError(f"{path}: size disagrees with header ({n} x {d})")
    rows = np.frombuffer(raw, dtype=dtype, count=n, offset=12)
    return EmbeddingSet(rows["vec"].astype(np.float64), rows["label"].astype(np.int64))


def write_csv(dataset: EmbeddingSet, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for label, vec in zip(dataset.labels, dataset.embeddings):
            writer.writerow([int(label)] + [repr(float(v)) for v in vec])


def read_csv(path) -> EmbeddingSet:
    labels, rows = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError(f"{path}: empty or ragged embedding rows")
    return EmbeddingSet(np.array(rows), np.array(labels))


def load_embeddings(path) -> EmbeddingSet:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_csv(path)
    return read_emb(path)


def save_embeddings(dataset: EmbeddingSet, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        write_csv(dataset, path)
    else:
        write_emb(dataset, path)
