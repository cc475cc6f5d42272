"""Linear centered kernel alignment between layer representations.

Given activation matrices X (n x d_x) and Y (n x d_y) over the same sample
batch, the similarity is

    cka(X, Y) = ||Xc' Yc||_F^2 / (||Xc' Xc||_F * ||Yc' Yc||_F)

where Xc, Yc are the column-mean-centered matrices. This is the usual
HSIC ratio for the linear kernel: the same value can be computed from the
sample-by-sample Gram matrices (``cka_pair_gram``), which serves as an
independent cross-check path.

The index is invariant to orthogonal transforms and nonzero isotropic
scaling of either argument, and lives in [0, 1]. Constant (degenerate)
layers carry no representation; their similarity to everything, including
themselves, is pinned to 0 and a warning is emitted.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .io import ActivationSet

#: Frobenius norms at or below this are treated as exactly zero.
DEGENERATE_EPS = 1e-12


@dataclass(frozen=True)
class SimilarityMatrix:
    """Pairwise CKA between all layers: symmetric, unit diagonal, values in [0, 1]."""

    values: np.ndarray
    layer_names: tuple[str, ...]

    def validate(self) -> None:
        m = self.values
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DataError(f"similarity matrix must be square, got shape {m.shape}")
        if len(self.layer_names) != m.shape[0]:
            raise DataError("layer name count does not match matrix size")
        if float(np.abs(m - m.T).max()) > 1e-9:
            raise DataError("similarity matrix is not symmetric")
        diag = np.diag(m)
        ok = (np.abs(diag - 1.0) <= 1e-9) | (np.abs(diag) <= 1e-9)
        if not ok.all():
            raise DataError("similarity diagonal entries must be 1 (or 0 for degenerate layers)")
        if float(m.min()) < 0.0 or float(m.max()) > 1.0 + 1e-9:
            raise DataError("similarity values must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.values.shape[0])


def center_gram(gram: np.ndarray) -> np.ndarray:
    """Doubly center a symmetric Gram matrix: returns H G H with H = I - (1/n) 11'.

    Centering runs over the sample dimension, so row and column sums of the
    result vanish (up to rounding).
    """
    g = np.asarray(gram, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise DataError(f"gram matrix must be square, got shape {g.shape}")
    if float(np.abs(g - g.T).max()) > 1e-9:
        raise DataError("gram matrix is not symmetric")
    row_means = g.mean(axis=1, keepdims=True)
    col_means = g.mean(axis=0, keepdims=True)
    total_mean = g.mean()
    return g - row_means - col_means + total_mean


def _centered(x: np.ndarray) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DataError(f"activations must be 2-D, got shape {a.shape}")
    if a.shape[0] < 2:
        raise DataError(f"need at least 2 samples, got {a.shape[0]}")
    if not np.isfinite(a).all():
        raise DataError("activations contain non-finite values")
    return a - a.mean(axis=0, keepdims=True)


def cka_pair(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA between two activation matrices sharing the sample axis.

    Feature-space evaluation (works with d x d cross-covariances), cheap when
    d << n. Returns 0.0 if either centered argument is numerically zero.
    """
    xc = _centered(x)
    yc = _centered(y)
    if xc.shape[0] != yc.shape[0]:
        raise DataError(f"sample counts differ: {xc.shape[0]} vs {yc.shape[0]}")
    if np.linalg.norm(xc) <= DEGENERATE_EPS or np.linalg.norm(yc) <= DEGENERATE_EPS:
        return 0.0
    numerator = float(np.sum((xc.T @ yc) ** 2))
    dx = float(np.sqrt(np.sum((xc.T @ xc) ** 2)))
    dy = float(np.sqrt(np.sum((yc.T @ yc) ** 2)))
    denominator = dx * dy
    if denominator <= DEGENERATE_EPS:
        return 0.0
    return min(1.0, max(0.0, numerator / denominator))


def cka_pair_gram(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA evaluated through centered n x n Gram matrices.

    Mathematically identical to :func:`cka_pair`; kept as an independent
    computation path for cross-checking.
    """
    xc = _centered(x)
    yc = _centered(y)
    if xc.shape[0] != yc.shape[0]:
        raise DataError(f"sample counts differ: {xc.shape[0]} vs {yc.shape[0]}")
    if np.linalg.norm(xc) <= DEGENERATE_EPS or np.linalg.norm(yc) <= DEGENERATE_EPS:
        return 0.0
    k = center_gram(np.asarray(x, dtype=np.float64) @ np.asarray(x, dtype=np.float64).T)
    l = center_gram(np.asarray(y, dtype=np.float64) @ np.asarray(y, dtype=np.float64).T)
    numerator = float(np.sum(k * l))
    denominator = float(np.sqrt(np.sum(k * k))) * float(np.sqrt(np.sum(l * l)))
    if denominator <= DEGENERATE_EPS:
        return 0.0
    return min(1.0, max(0.0, numerator / denominator))


def similarity_matrix(activation_set: ActivationSet) -> SimilarityMatrix:
    """Pairwise CKA over all layers of an activation set.

    Degenerate layers (constant activations) get zero rows/columns, zero
    diagonal included, with a warning naming them.
    """
    activation_set.validate()
    mats = [np.asarray(layer.matrix, dtype=np.float64) for layer in activation_set.layers]
    count = len(mats)
    degenerate = [
        np.linalg.norm(m - m.mean(axis=0, keepdims=True)) <= DEGENERATE_EPS for m in mats
    ]
    if any(degenerate):
        names = [activation_set.layers[i].name for i, d in enumerate(degenerate) if d]
        warnings.warn(
            f"degenerate (constant) layers pinned to similarity 0: {', '.join(names)}",
            stacklevel=2,
        )
    values = np.zeros((count, count), dtype=np.float64)
    for i in range(count):
        if degenerate[i]:
            continue
        values[i, i] = cka_pair(mats[i], mats[i])
        for j in range(i + 1, count):
            if degenerate[j]:
                continue
            v = cka_pair(mats[i], mats[j])
            values[i, j] = v
            values[j, i] = v
    result = SimilarityMatrix(values, activation_set.layer_names)
    result.validate()
    return result
