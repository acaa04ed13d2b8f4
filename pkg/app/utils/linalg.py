"""
Dense vector / matrix primitives shared by the encoders, losses and ensembles.

Everything is float64. Feature vectors are unit norm so that a dot product is
a cosine similarity.
"""

from typing import Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from app.exception.exce import (
    BadLabel,
    DimMismatch,
    NonPositiveTemperature,
    ShapeMismatch,
    ZeroNorm,
)

Vec = NDArray[np.float64]
FeatureVec = NDArray[np.float64]
Matrix = NDArray[np.float64]

NORM_FLOOR = 1e-12


def as_vec(data: Union[Sequence[float], NDArray]) -> Vec:
    v = np.array(data, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 1:
        raise ShapeMismatch(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ShapeMismatch("vector has non-finite entries")
    return v


def as_matrix(data: Union[Sequence[Sequence[float]], NDArray]) -> Matrix:
    m = np.array(data, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeMismatch(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ShapeMismatch("matrix has non-finite entries")
    return m


def check_dims(a: NDArray, b: NDArray, what: str = "vectors") -> None:
    if a.shape[-1] != b.shape[-1]:
        raise DimMismatch(f"{what}: dim {a.shape[-1]} != {b.shape[-1]}")


def l2_normalize(v: Vec) -> FeatureVec:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.sqrt(np.dot(v, v)))
    if not n > NORM_FLOOR:
        raise ZeroNorm(f"cannot normalize vector with norm {n:.3e}")
    return v / n


def l2_normalize_rows(m: Matrix) -> Tuple[Matrix, NDArray[np.float64]]:
    """Normalize every row; returns (unit rows, original norms)."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    bad = np.flatnonzero(~(norms > NORM_FLOOR))
    if bad.size:
        raise ZeroNorm(f"row {int(bad[0])} has norm {norms[bad[0]]:.3e}")
    return m / norms[:, None], norms


def dot(a: FeatureVec, b: FeatureVec) -> float:
    check_dims(a, b)
    return float(np.dot(a, b))


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")


def softmax(logits: NDArray, temperature: float = 1.0) -> NDArray[np.float64]:
    """Row-wise softmax of logits / temperature with max subtraction."""
    _check_temperature(temperature)
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_cross_entropy(
    logits: Union[Sequence[float], NDArray], label: int, temperature: float = 1.0
) -> Tuple[float, NDArray[np.float64]]:
    """-log softmax(logits / temperature)[label] and its gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    losses, grad = softmax_cross_entropy_rows(
        logits[None, :], np.array([label]), temperature
    )
    return float(losses[0]), grad[0]


def softmax_cross_entropy_rows(
    logits: Matrix, labels: NDArray, temperature: float = 1.0
) -> Tuple[NDArray[np.float64], Matrix]:
    """Per-row cross-entropy and per-row gradient (not averaged)."""
    _check_temperature(temperature)
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, m = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= m):
        raise BadLabel(f"labels must lie in [0, {m})")
    if not np.all(np.isfinite(logits)):
        raise ShapeMismatch("logits have non-finite entries")

    z = logits / temperature
    z = z - np.max(z, axis=1, keepdims=True)
    e = np.exp(z)
    total = np.sum(e, axis=1)
    rows = np.arange(n)
    losses = np.log(total) - z[rows, labels]
    # log(total) can round a hair below z[label] == 0
    losses = np.maximum(losses, 0.0)

    grad = e / total[:, None]
    grad[rows, labels] -= 1.0
    return losses, grad / temperature
