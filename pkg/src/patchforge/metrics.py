"""Unsupervised embedding-quality metrics and the embedding file format.

Embeddings are plain (N, K) float arrays, one row per sample. The two
metrics quantify how distinguishable and how spread-out the rows are
without needing labels: odcorr is the root-mean-square Pearson correlation
between pairs of rows (0 = samples fully decorrelated, 1 = all samples
collinear), rankme is the effective rank of the matrix via the entropy of
its normalized singular-value spectrum.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

EMBEDDING_MAGIC = b"KEM1"
_HEADER = struct.Struct("<4sIIB3x")  # magic, N, K, dtype tag
_DTYPE_F32 = 0

# Added inside the log when computing spectral entropy; keeps exact
# zero singular values from producing log(0) while perturbing the
# result by less than 1e-6 for float32-scale spectra.
RANKME_EPSILON = 1e-7


class EmbeddingFormatError(ValueError):
    pass


def validate_embeddings(values: np.ndarray, min_rows: int = 2) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"embeddings must be 2D, got shape {arr.shape}")
    if arr.shape[0] < min_rows:
        raise ValueError(f"need at least {min_rows} rows, got {arr.shape[0]}")
    if arr.shape[1] < 2:
        raise ValueError(f"need at least 2 dims, got {arr.shape[1]}")
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        r, c = bad[0]
        raise ValueError(f"non-finite value at (row {r}, col {c})")
    return arr


def odcorr(values: np.ndarray) -> float:
    """Root-mean-square off-diagonal pairwise Pearson correlation of rows.

    Computed as sqrt(sum_{i != j} rho(Z_i, Z_j)^2 / (N(N-1))) where rho is
    the Pearson coefficient between two rows across the K dimensions. Rows
    with zero variance carry no information about sample identity and
    contribute rho = 0 rather than poisoning the sum with NaN. Implemented
    via the Gram matrix of standardized rows: O(N^2 K) in one pass.
    """
    arr = validate_embeddings(values)
    n, k = arr.shape
    centered = arr - arr.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1, keepdims=True)
    degenerate = norms[:, 0] == 0.0
    norms[degenerate] = 1.0
    unit = centered / norms
    unit[degenerate] = 0.0
    corr = np.clip(unit @ unit.T, -1.0, 1.0)
    off_diag_sq = float((corr**2).sum() - (np.diag(corr) ** 2).sum())
    return float(np.sqrt(off_diag_sq / (n * (n - 1))))


def rankme(values: np.ndarray, epsilon: float = RANKME_EPSILON) -> float:
    """Effective rank: exp of the entropy of the normalized singular values.

    p_k = sigma_k / sum(sigma); rankme = exp(-sum p_k * log(p_k + epsilon)).
    Ranges from 1 (rank-1 collapse) to min(N, K) (isotropic spectrum).
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"embeddings must be 2D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("embeddings contain non-finite values")
    sigma = np.linalg.svd(arr, compute_uv=False)
    total = sigma.sum()
    if total == 0.0:
        raise ValueError("all-zero matrix has no spectrum")
    p = sigma / total
    entropy = -float(np.sum(p * np.log(p + epsilon)))
    return float(np.exp(entropy))


def write_embeddings(values: np.ndarray, path) -> None:
    """Write an (N, K) matrix as little-endian f32 with a KEM1 header."""
    arr = validate_embeddings(values)
    n, k = arr.shape
    payload = arr.astype("<f4").tobytes()
    with open(Path(path), "wb") as fh:
        fh.write(_HEADER.pack(EMBEDDING_MAGIC, n, k, _DTYPE_F32))
        fh.write(payload)


def read_embeddings(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise EmbeddingFormatError("file too short for a header")
    magic, n, k, dtype_tag = _HEADER.unpack_from(data)
    if magic != EMBEDDING_MAGIC:
        raise EmbeddingFormatError(f"bad magic {magic!r}")
    if dtype_tag != _DTYPE_F32:
        raise EmbeddingFormatError(f"unknown dtype tag {dtype_tag}")
    if n < 2:
        raise EmbeddingFormatError(f"embedding file needs N >= 2, has N = {n}")
    if k < 1:
        raise EmbeddingFormatError(f"embedding file needs K >= 1, has K = {k}")
    expected = n * k * 4
    payload = data[_HEADER.size :]
    if len(payload) != expected:
        raise EmbeddingFormatError(
            f"payload is {len(payload)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(n, k)
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        r, c = bad[0]
        raise EmbeddingFormatError(f"non-finite value at (row {r}, col {c})")
    return arr.astype(np.float32)


def write_labels(labels, path, groups=None) -> None:
    """Labels sidecar: one JSON object {row, label, group} per line."""
    with open(Path(path), "w", encoding="utf-8") as fh:
        for row, label in enumerate(labels):
            group = groups[row] if groups is not None else row
            fh.write(json.dumps({"row": row, "label": label, "group": group}))
            fh.write("\n")


def read_labels(path) -> tuple[list, list]:
    """Returns (labels, groups) ordered by row index."""
    entries = {}
    with open(Path(path), encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            entries[int(doc["row"])] = (doc["label"], doc.get("group", doc["row"]))
    if sorted(entries) != list(range(len(entries))):
        raise EmbeddingFormatError("label rows must cover 0..N-1 exactly once")
    labels = [entries[i][0] for i in range(len(entries))]
    groups = [entries[i][1] for i in range(len(entries))]
    return labels, groups
