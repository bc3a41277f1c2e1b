"""Linear discriminant analysis on labeled frame embeddings.

Fits a whitened discriminant projection by solving the generalized
eigenproblem for the between-class and (shrinkage-regularized) within-class
scatter via a Cholesky reformulation, so the computation stays symmetric and
deterministic. Columns are scaled to unit projected within-class variance and
sign-fixed by making each column's largest-magnitude component positive.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, FormatError

MAGIC = b"LIDL"
VERSION = 1


@dataclass
class LdaTransform:
    projection: np.ndarray    # (D, d)
    class_means: np.ndarray   # (C, D)
    global_mean: np.ndarray   # (D,)
    eigenvalues: np.ndarray   # (d,), descending
    shrinkage: float

    def __post_init__(self):
        self.projection = np.asarray(self.projection, dtype=np.float64)
        self.class_means = np.asarray(self.class_means, dtype=np.float64)
        self.global_mean = np.asarray(self.global_mean, dtype=np.float64)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64)
        d = self.projection.shape[1]
        c = self.class_means.shape[0]
        if d > min(self.projection.shape[0], c - 1):
            raise ValueError(f"projection rank {d} exceeds min(D, C-1) for C={c}")
        if np.any(np.diff(self.eigenvalues) > 0) or np.any(self.eigenvalues < 0):
            raise ValueError("eigenvalues must be non-negative and sorted descending")
        if not np.all(np.isfinite(self.projection)):
            raise ValueError("projection contains non-finite entries")

    @property
    def in_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def out_dim(self) -> int:
        return self.projection.shape[1]


def scatter_matrices(frames: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Within/between-class scatter plus class means and global mean."""
    classes = np.unique(labels)
    dim = frames.shape[1]
    global_mean = frames.mean(axis=0)
    s_w = np.zeros((dim, dim))
    s_b = np.zeros((dim, dim))
    class_means = np.zeros((classes.size, dim))
    for i, c in enumerate(classes):
        xc = frames[labels == c]
        mu = xc.mean(axis=0)
        class_means[i] = mu
        centered = xc - mu
        s_w += centered.T @ centered
        diff = (mu - global_mean)[:, None]
        s_b += xc.shape[0] * (diff @ diff.T)
    return s_w, s_b, class_means, global_mean


def regularize(s_w: np.ndarray, shrinkage: float) -> np.ndarray:
    dim = s_w.shape[0]
    return s_w + shrinkage * (np.trace(s_w) / dim) * np.eye(dim)


def fit_lda(frames: np.ndarray, labels, dim: int = 6, shrinkage: float = 0.01) -> LdaTransform:
    """Fit the discriminant projection from (N, D) frames and per-frame class ids.

    The requested output dimension is clamped to C-1 (with a warning) since
    the between-class scatter has at most C-1 nonzero directions.
    """
    frames = np.asarray(frames, dtype=np.float64)
    labels = np.asarray(labels)
    if frames.ndim != 2:
        raise ValueError(f"frames must be (N, D), got shape {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise ValueError("frames contain non-finite entries")
    if labels.shape[0] != frames.shape[0]:
        raise ValueError("labels and frames disagree on N")
    if dim < 1:
        raise ValueError(f"target dimension must be >= 1, got {dim}")
    if not 0.0 <= shrinkage < 1.0:
        raise ValueError(f"shrinkage must be in [0, 1), got {shrinkage}")
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise ValueError(f"need at least 2 classes, got {classes.size}")
    thin = classes[counts < 2]
    if thin.size:
        raise ValueError(f"class {thin[0]!r} has fewer than 2 frames")

    n, d_in = frames.shape
    c = classes.size
    if dim > c - 1:
        warnings.warn(f"LDA dimension {dim} clamped to C-1={c - 1}")
        dim = c - 1
    dim = min(dim, d_in)

    s_w, s_b, class_means, global_mean = scatter_matrices(frames, labels)
    chol = np.linalg.cholesky(regularize(s_w, shrinkage))
    # M = L^-1 S_b L^-T is symmetric with the same eigenvalues as S_w^-1 S_b.
    half = np.linalg.solve(chol, s_b)
    m = np.linalg.solve(chol, half.T).T
    m = (m + m.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(m)
    order = np.argsort(eigvals)[::-1][:dim]
    eigvals = np.maximum(eigvals[order], 0.0)
    basis = np.linalg.solve(chol.T, eigvecs[:, order])

    pooled = s_w / max(n - c, 1)
    for j in range(dim):
        col = basis[:, j]
        scale = float(col @ pooled @ col)
        col /= np.sqrt(max(scale, 1e-12))
        if col[np.argmax(np.abs(col))] < 0:
            col *= -1.0
        basis[:, j] = col
    return LdaTransform(basis, class_means, global_mean, eigvals, shrinkage)


def apply_lda(matrix: np.ndarray, transform: LdaTransform) -> np.ndarray:
    """Center by the global mean and project: (T, D) -> (T, d)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape[-1] != transform.in_dim:
        raise ValueError(f"matrix has {matrix.shape[-1]} columns, transform expects {transform.in_dim}")
    return (matrix - transform.global_mean) @ transform.projection


def save_lda(transform: LdaTransform, path) -> Path:
    """Serialize as magic, version, D/d/C, shrinkage, then f32 arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d_in, d_out = transform.projection.shape
    c = transform.class_means.shape[0]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIIf", VERSION, d_in, d_out, c, transform.shrinkage))
        for arr in (transform.projection, transform.class_means, transform.global_mean, transform.eigenvalues):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def load_lda(path) -> LdaTransform:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 24 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad LDA transform magic")
    version, d_in, d_out, c, shrinkage = struct.unpack_from("<IIIIf", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported LDA transform version {version}")
    sizes = (d_in * d_out, c * d_in, d_in, d_out)
    need = 24 + 4 * sum(sizes)
    if len(blob) < need:
        raise CorruptFileError(f"{path}: transform truncated ({len(blob)} of {need} bytes)")
    arrays = []
    pos = 24
    for count in sizes:
        arrays.append(np.frombuffer(blob, dtype="<f4", count=count, offset=pos).astype(np.float64))
        pos += 4 * count
    projection, class_means, global_mean, eigenvalues = arrays
    return LdaTransform(
        projection.reshape(d_in, d_out), class_means.reshape(c, d_in),
        global_mean, eigenvalues, float(shrinkage),
    )
