"""
Prompt ensembles: language (text prompt variants of one class), vision
(class-wise fusion of augmented image views) and the temporal image-text
centroid, plus the uniform / weighted / voting baselines.

Every fused centroid is L2-normalized.
"""

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from app.exception.exce import BadLabel, DimMismatch, MissingCentroid, ZeroNorm
from app.utils.linalg import FeatureVec, Matrix, l2_normalize, softmax

OptionalCentroids = List[Optional[FeatureVec]]


@dataclass(frozen=True)
class CentroidBank:
    text: Matrix  # M x D, delta^T
    image: OptionalCentroids  # delta^I, None for classes never pseudo-labeled
    fused: Optional[Matrix]  # delta^IT, None until init_fused
    lam: float

    @property
    def num_classes(self) -> int:
        return self.text.shape[0]

    @property
    def initialized(self) -> bool:
        return self.fused is not None


def _stack(features: Sequence[FeatureVec]) -> Matrix:
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise DimMismatch(f"expected K >= 1 features of equal dim, got shape {z.shape}")
    return z


def language_weights(features: Sequence[FeatureVec], raw: bool = False) -> np.ndarray:
    """w_k = z_k . mean(z), clamped at 0 unless `raw`."""
    z = _stack(features)
    w = z @ z.mean(axis=0)
    return w if raw else np.maximum(w, 0.0)


def language_ensemble(features: Sequence[FeatureVec], raw_weights: bool = False) -> FeatureVec:
    """Two-step text prompt fusion.

    The plain mean is used as an anchor; every prompt is then re-weighted by its
    agreement with the anchor, which pushes failed prompts towards zero weight.
    """
    z = _stack(features)
    # the weights sum to K |anchor|^2, so they all vanish only when the anchor does
    return l2_normalize(language_weights(z, raw=raw_weights) @ z)


def vision_ensemble(
    features: Matrix, pseudo_labels: Sequence[int], num_classes: int
) -> OptionalCentroids:
    """Per-class normalized mean of the features pseudo-labeled as that class."""
    z = np.asarray(features, dtype=np.float64)
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    if labels.shape != (z.shape[0],):
        raise DimMismatch(f"{z.shape[0]} features but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise BadLabel(f"pseudo labels must lie in [0, {num_classes})")

    centroids: OptionalCentroids = []
    for m in range(num_classes):
        members = z[labels == m]
        centroids.append(l2_normalize(members.mean(axis=0)) if members.shape[0] else None)
    return centroids


def init_fused(bank: CentroidBank, fallback_to_text: bool = False) -> CentroidBank:
    """delta^IT = normalize(delta^I + delta^T) for every class.

    With `fallback_to_text`, classes without an image centroid start from delta^T
    instead of raising.
    """
    fused = np.empty_like(bank.text)
    missing = []
    for m in range(bank.num_classes):
        image = bank.image[m]
        if image is None:
            if not fallback_to_text:
                raise MissingCentroid(f"class {m} has no image centroid")
            missing.append(m)
            fused[m] = bank.text[m]
        else:
            fused[m] = l2_normalize(image + bank.text[m])
    if missing:
        logger.warning(f"classes {missing} have no pseudo-labeled samples; fused centroid = text")
    return replace(bank, fused=fused)


def temporal_update(bank: CentroidBank, new_image_centroids: OptionalCentroids) -> CentroidBank:
    """delta^IT <- normalize(lam * delta^IT + (1 - lam) * delta^I) where a new delta^I exists."""
    if not bank.initialized:
        raise MissingCentroid("temporal_update on a bank without fused centroids")
    fused = bank.fused.copy()
    image = list(bank.image)
    lam = bank.lam
    for m, centroid in enumerate(new_image_centroids):
        if centroid is None:
            continue
        fused[m] = l2_normalize(lam * fused[m] + (1.0 - lam) * centroid)
        image[m] = centroid
    return replace(bank, fused=fused, image=image)


def latest_fusion(bank: CentroidBank, new_image_centroids: OptionalCentroids) -> CentroidBank:
    """delta^IT = normalize(delta^I + delta^T) from the newest delta^I, no memory.

    Classes absent from the batch keep their previous fused centroid.
    """
    if not bank.initialized:
        raise MissingCentroid("latest_fusion on a bank without fused centroids")
    fused = bank.fused.copy()
    image = list(bank.image)
    for m, centroid in enumerate(new_image_centroids):
        if centroid is None:
            continue
        fused[m] = l2_normalize(centroid + bank.text[m])
        image[m] = centroid
    return replace(bank, fused=fused, image=image)


def baseline_uniform(features: Sequence[FeatureVec]) -> FeatureVec:
    return l2_normalize(_stack(features).mean(axis=0))


def baseline_weighted(features: Sequence[FeatureVec]) -> FeatureVec:
    """Softmax(z_k . mean) weighted average, unit temperature."""
    z = _stack(features)
    w = softmax(z @ z.mean(axis=0))
    return l2_normalize(w @ z)


def baseline_majority_vote(
    view_labels: Sequence[int], view_scores: Sequence[float], num_classes: int
) -> int:
    """Plurality label; ties go to the larger summed score, then the lower index."""
    labels = np.asarray(view_labels, dtype=np.int64)
    scores = np.asarray(view_scores, dtype=np.float64)
    if labels.size == 0 or labels.shape != scores.shape:
        raise DimMismatch(f"{labels.size} labels vs {scores.size} scores")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise BadLabel(f"view labels must lie in [0, {num_classes})")
    counts = np.bincount(labels, minlength=num_classes)
    totals = np.zeros(num_classes)
    for label, score in zip(labels, scores):
        totals[label] += score
    best = 0
    for m in range(1, num_classes):
        if (counts[m], totals[m]) > (counts[best], totals[best]):
            best = m
    return best


def class_centroids(prompt_features: np.ndarray, method: str, raw_weights: bool = False) -> Matrix:
    """Fuse an M x K x D block of prompt features into M class centroids."""
    fuse = {
        "language": lambda z: language_ensemble(z, raw_weights=raw_weights),
        "uniform": baseline_uniform,
        "weighted": baseline_weighted,
    }[method]
    try:
        return np.stack([fuse(z) for z in prompt_features])
    except ZeroNorm as e:
        raise ZeroNorm(f"{method} prompt fusion: {e.value}") from e


def dump_bank(bank: CentroidBank) -> pd.DataFrame:
    """One row per (class, kind) with the centroid components; absent centroids are blank."""
    dim = bank.text.shape[1]
    columns = ["class_index", "kind"] + [f"c{i}" for i in range(dim)]
    records = []
    for m in range(bank.num_classes):
        rows = [("text", bank.text[m]), ("image", bank.image[m])]
        if bank.fused is not None:
            rows.append(("fused", bank.fused[m]))
        for kind, vec in rows:
            values = [np.nan] * dim if vec is None else [float(v) for v in vec]
            records.append([m, kind] + values)
    return pd.DataFrame.from_records(records, columns=columns)
