"""PCA projection + ITQ rotation + sign binarization for short face templates."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .apdu import SUPPORTED_LENGTHS, BinaryTemplate

MODEL_MAGIC = b"PITQ"
MODEL_FORMAT_VERSION = 1
DEFAULT_ITQ_ITERATIONS = 50
ORTHO_TOL = 1e-6


class DimensionError(ValueError):
    pass


def train_pca(embeddings: np.ndarray, length_bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(mu, W)`` with W holding the top principal directions as columns.

    Columns are ordered by descending eigenvalue and signed so that each
    column's largest-magnitude entry is non-negative.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError("embeddings must be an N x d matrix")
    n, d = X.shape
    if d < length_bits:
        raise DimensionError(f"dimension {d} < L={length_bits}")
    if n <= length_bits:
        raise DimensionError(f"need more than L={length_bits} samples, got {n}")

    mu = X.mean(axis=0)
    Xc = X - mu
    cov = Xc.T @ Xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1][:length_bits]
    W = evecs[:, order]
    pivots = np.argmax(np.abs(W), axis=0)
    signs = np.where(W[pivots, np.arange(length_bits)] < 0, -1.0, 1.0)
    return mu, W * signs


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    Q, Rq = np.linalg.qr(rng.standard_normal((n, n)))
    # sign fix makes the draw Haar-distributed and deterministic per seed
    return Q * np.where(np.diag(Rq) < 0, -1.0, 1.0)


def quantization_loss(V: np.ndarray, R: np.ndarray) -> float:
    """||B - VR||_F^2 with B = sign(VR) in {-1, +1}."""
    Z = V @ R
    B = np.where(Z > 0, 1.0, -1.0)
    return float(np.sum((B - Z) ** 2))


def train_itq(
    projected: np.ndarray,
    iterations: int = DEFAULT_ITQ_ITERATIONS,
    seed: int = 0,
    init: Optional[np.ndarray] = None,
    callback: Optional[Callable[[int, np.ndarray, float], None]] = None,
) -> np.ndarray:
    """Learn the orthogonal rotation by alternating minimization.

    Each step fixes ``B = sign(VR)`` and solves the orthogonal Procrustes
    problem ``SVD(B^T V) = U S W^T -> R = W U^T``. ``callback(k, R, loss)``
    is called with the starting rotation (k=0) and after every update.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    V = np.asarray(projected, dtype=np.float64)
    L = V.shape[1]
    R = random_orthogonal(L, np.random.default_rng(seed)) if init is None else np.array(init, dtype=np.float64)
    if callback is not None:
        callback(0, R, quantization_loss(V, R))
    for k in range(1, iterations + 1):
        B = np.where(V @ R > 0, 1.0, -1.0)
        U, _, Wt = np.linalg.svd(B.T @ V)
        R = Wt.T @ U.T
        if callback is not None:
            callback(k, R, quantization_loss(V, R))
    return R


def binarize(z: np.ndarray) -> np.ndarray:
    """Bit is 1 iff the coordinate is strictly positive."""
    return (np.asarray(z) > 0).astype(np.uint8)


@dataclass
class PcaItqModel:
    mu: np.ndarray
    w_pca: np.ndarray
    r: np.ndarray
    rotation_id: int
    length_bits: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.w_pca = np.asarray(self.w_pca, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        L = self.length_bits
        if L not in SUPPORTED_LENGTHS:
            raise DimensionError(f"unsupported template length {L}")
        if self.w_pca.shape != (self.dim, L) or self.r.shape != (L, L):
            raise DimensionError("model matrix shapes disagree with L and d")
        if not 0 <= self.rotation_id <= 0xFFFF:
            raise ValueError("rotation_id must fit in u16")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def project(self, embeddings: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise DimensionError(f"expected dimension {self.dim}, got {X.shape[1]}")
        return (X - self.mu) @ self.w_pca @ self.r

    def encode_bits(self, embeddings: np.ndarray) -> np.ndarray:
        """N x L array of template bits."""
        return binarize(self.project(embeddings))

    def encode(self, embedding: np.ndarray) -> BinaryTemplate:
        f = np.asarray(embedding, dtype=np.float64)
        if f.ndim != 1:
            raise DimensionError("encode takes a single embedding vector")
        return BinaryTemplate(np.packbits(self.encode_bits(f)[0]).tobytes(), self.length_bits)

    def encode_batch(self, embeddings: np.ndarray) -> list[BinaryTemplate]:
        packed = np.packbits(self.encode_bits(embeddings), axis=1)
        return [BinaryTemplate(row.tobytes(), self.length_bits) for row in packed]

    def check_orthogonality(self, tol: float = ORTHO_TOL) -> None:
        I = np.eye(self.length_bits)
        if np.max(np.abs(self.w_pca.T @ self.w_pca - I)) > tol:
            raise AssertionError("PCA columns are not orthonormal")
        if np.max(np.abs(self.r.T @ self.r - I)) > tol:
            raise AssertionError("ITQ rotation is not orthogonal")

    # -- file format -------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = MODEL_MAGIC + struct.pack(
            "<BHIH", MODEL_FORMAT_VERSION, self.length_bits, self.dim, self.rotation_id
        )
        body = b"".join(
            np.ascontiguousarray(a, dtype="<f8").tobytes() for a in (self.mu, self.w_pca, self.r)
        )
        return header + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> PcaItqModel:
        if raw[:4] != MODEL_MAGIC:
            raise ValueError("not a PITQ model file")
        version, L, d, rotation_id = struct.unpack_from("<BHIH", raw, 4)
        if version != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model version {version}")
        offset = 4 + struct.calcsize("<BHIH")
        sizes = (d, d * L, L * L)
        if len(raw) != offset + 8 * sum(sizes):
            raise ValueError("model file size disagrees with its header")
        arrays = []
        for size in sizes:
            arrays.append(np.frombuffer(raw, dtype="<f8", count=size, offset=offset).copy())
            offset += 8 * size
        mu, w, r = arrays
        return cls(mu, w.reshape(d, L), r.reshape(L, L), rotation_id, L)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> PcaItqModel:
        return cls.from_bytes(Path(path).read_bytes())


def fit_pca_itq(
    embeddings: np.ndarray,
    length_bits: int,
    seed: int = 0,
    rotation_id: int = 1,
    iterations: int = DEFAULT_ITQ_ITERATIONS,
    callback=None,
) -> PcaItqModel:
    mu, W = train_pca(embeddings, length_bits)
    V = (np.asarray(embeddings, dtype=np.float64) - mu) @ W
    R = train_itq(V, iterations=iterations, seed=seed, callback=callback)
    return PcaItqModel(mu, W, R, rotation_id, length_bits)


def majority_fuse(templates: Sequence[BinaryTemplate]) -> BinaryTemplate:
    """Per-bit majority vote; a tied position takes the first template's bit."""
    if not templates:
        raise ValueError("cannot fuse an empty template list")
    L = templates[0].length_bits
    if any(t.length_bits != L for t in templates):
        raise ValueError("templates have mixed lengths")
    bits = np.array([t.bits for t in templates], dtype=np.int64)
    ones = bits.sum(axis=0)
    zeros = len(templates) - ones
    fused = np.where(ones > zeros, 1, np.where(ones < zeros, 0, bits[0]))
    return BinaryTemplate.from_bits(fused.tolist())


class RotationRegistry:
    """Directory of model files keyed by RotationID, with a JSON index.

    New ids are allocated as one past the largest id ever issued, so a
    revoked id is never reused.
    """

    INDEX = "registry.json"

    def __init__(self, root):
        self.root = Path(root)

    def _index(self) -> dict:
        path = self.root / self.INDEX
        if path.exists():
            return json.loads(path.read_text())
        return {"next_id": 1, "models": {}}

    def _write_index(self, index: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.root / (self.INDEX + ".tmp")
        tmp.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.root / self.INDEX)

    def allocate_id(self) -> int:
        index = self._index()
        rid = index["next_id"]
        if rid > 0xFFFF:
            raise RuntimeError("RotationID space exhausted")
        index["next_id"] = rid + 1
        self._write_index(index)
        return rid

    def path_for(self, rotation_id: int) -> Path:
        return self.root / f"rotation_{rotation_id:04x}.pitq"

    def register(self, model: PcaItqModel, seed: int) -> Path:
        index = self._index()
        path = self.path_for(model.rotation_id)
        self.root.mkdir(parents=True, exist_ok=True)
        model.save(path)
        index["models"][str(model.rotation_id)] = {
            "file": path.name,
            "length_bits": model.length_bits,
            "dim": model.dim,
            "seed": seed,
        }
        index["next_id"] = max(index["next_id"], model.rotation_id + 1)
        self._write_index(index)
        return path

    def load(self, rotation_id: int) -> PcaItqModel:
        entry = self._index()["models"].get(str(rotation_id))
        if entry is None:
            raise KeyError(f"unknown rotation id {rotation_id}")
        return PcaItqModel.load(self.root / entry["file"])

    def ids(self) -> list[int]:
        return sorted(int(k) for k in self._index()["models"])
