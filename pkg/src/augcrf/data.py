"""Core sequence containers shared by the feature, retrieval and model layers.

An action is a fixed-length sequence of segment feature vectors. Augmented
actions additionally carry, per segment, retrieved alternative vectors with
full provenance so that downstream metrics can audit every substitution.
All positions and indices are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def as_feature_matrix(values, dim: int | None = None) -> np.ndarray:
    """Coerce to a finite (T, d) float array, validating shape and finiteness."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d (segments x features) array, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"segments and feature dimension must be >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature values must be finite")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"expected feature dimension {dim}, got {arr.shape[1]}")
    return arr


@dataclass
class ActionSequence:
    """A length-T sequence of segment feature vectors with optional label/mask."""

    id: str
    segments: np.ndarray  # (T, d)
    label: str | None = None
    known_outlier_mask: np.ndarray | None = None  # (T,) bool, True = annotated corrupt

    def __post_init__(self):
        self.segments = as_feature_matrix(self.segments)
        if self.known_outlier_mask is not None:
            mask = np.asarray(self.known_outlier_mask, dtype=bool)
            if mask.shape != (self.num_segments,):
                raise ValueError("known_outlier_mask length must equal the segment count")
            self.known_outlier_mask = mask

    @property
    def num_segments(self) -> int:
        return self.segments.shape[0]

    @property
    def dim(self) -> int:
        return self.segments.shape[1]


@dataclass
class Alternative:
    """One retrieved replacement vector and where it came from.

    ``source_label`` is consumed only by quality metrics; inference never
    reads it.
    """

    vector: np.ndarray  # (d,)
    source_action_id: str
    source_position: int
    recommender_position: int
    source_label: str | None = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise ValueError("alternative vector must be 1-d")


@dataclass
class AugmentedSegment:
    """Original segment vector plus its retrieved alternatives.

    ``allow_original`` is False for segments whose original observation is
    known to be missing (early-prediction style), which removes the
    keep-original state from the composite domain.
    """

    original: np.ndarray  # (d,)
    alternatives: list[Alternative] = field(default_factory=list)
    allow_original: bool = True

    def __post_init__(self):
        self.original = np.asarray(self.original, dtype=np.float64)
        if not self.allow_original and not self.alternatives:
            raise ValueError("segment with no alternatives must allow the original")

    @property
    def num_alternatives(self) -> int:
        return len(self.alternatives)

    def observation_rows(self) -> np.ndarray:
        """Stack original and alternatives into a ((1+m), d) matrix, row 0 = original."""
        rows = [self.original] + [a.vector for a in self.alternatives]
        return np.vstack(rows)


@dataclass
class AugmentedAction:
    """An action whose segments carry retrieved alternatives."""

    id: str
    segments: list[AugmentedSegment]
    label: str | None = None

    @property
    def num_segments(self) -> int:
        return len(self.segments)

    @property
    def dim(self) -> int:
        return self.segments[0].original.shape[0]


def check_consistent(actions) -> tuple[int, int]:
    """Return the shared (T, d) of a non-empty action collection, or raise."""
    actions = list(actions)
    if not actions:
        raise ValueError("empty action collection")
    T, d = actions[0].num_segments, actions[0].dim
    for a in actions:
        if a.num_segments != T or a.dim != d:
            raise ValueError(
                f"inconsistent shapes: action {a.id!r} has (T={a.num_segments}, d={a.dim}), "
                f"expected (T={T}, d={d})"
            )
    return T, d


def class_vocabulary(actions) -> tuple[str, ...]:
    """Sorted label set of a labeled collection. Raises on missing labels."""
    labels = set()
    for a in actions:
        if a.label is None:
            raise ValueError(f"action {a.id!r} has no label")
        labels.add(a.label)
    return tuple(sorted(labels))


def feature_std(actions) -> float:
    """Std of all segment feature entries across a plain-action dataset."""
    stacked = np.concatenate([a.segments.ravel() for a in actions])
    return float(stacked.std())
