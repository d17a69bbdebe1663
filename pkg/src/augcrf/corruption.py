"""Seeded injection of corrupt segments into a dataset.

Corruption kinds: a centered contiguous gap, a truncated tail, randomly
located segments, or additive noise overlay. Corrupted vectors are either
replaced by pure noise drawn at the dataset's feature scale (gap, truncate,
random-segments) or perturbed in place (noise-overlay). Ground-truth masks
are always returned; they are attached to the actions only when the spec
marks the locations as known.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ActionSequence, check_consistent, feature_std

KINDS = ("gap", "truncate", "random-segments", "noise-overlay")


@dataclass
class CorruptionSpec:
    kind: str = "random-segments"
    ratio: float = 0.0
    known: bool = False
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 0.0 <= self.ratio <= 0.8:
            raise ValueError("ratio must be in [0, 0.8]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def corrupted_count(ratio: float, num_segments: int) -> int:
    """round(ratio * T), half away from zero for determinism."""
    return int(np.floor(ratio * num_segments + 0.5))


def corrupted_positions(spec: CorruptionSpec, num_segments: int,
                        rng: np.random.Generator) -> np.ndarray:
    n = corrupted_count(spec.ratio, num_segments)
    if n == 0:
        return np.zeros(num_segments, dtype=bool)
    mask = np.zeros(num_segments, dtype=bool)
    if spec.kind == "gap":
        start = (num_segments - n) // 2
        mask[start:start + n] = True
    elif spec.kind == "truncate":
        mask[num_segments - n:] = True
    else:
        mask[rng.choice(num_segments, size=n, replace=False)] = True
    return mask


def inject_corruption(dataset, spec: CorruptionSpec, scale: float | None = None):
    """Corrupt every action in the dataset according to the spec.

    Returns (corrupted_actions, truth_masks) where truth_masks maps action id
    to the ground-truth boolean mask. Uncorrupted segments are bitwise
    unchanged. At ratio 0 the actions are plain copies with no mask attached.
    ``scale`` overrides the replacement-noise std (defaults to the dataset's
    feature std), for callers corrupting a subset of a larger dataset.
    """
    actions = list(dataset)
    check_consistent(actions)
    rng = np.random.default_rng(spec.seed)
    if scale is None:
        scale = feature_std(actions)

    corrupted = []
    truth: dict[str, np.ndarray] = {}
    for a in actions:
        mask = corrupted_positions(spec, a.num_segments, rng)
        truth[a.id] = mask
        segments = a.segments.copy()
        for t in np.flatnonzero(mask):
            if spec.kind == "noise-overlay":
                segments[t] = segments[t] + rng.normal(scale=spec.noise_std,
                                                       size=a.dim)
            else:
                segments[t] = rng.normal(scale=scale, size=a.dim)
        known_mask = mask.copy() if (spec.known and mask.any()) else None
        corrupted.append(ActionSequence(id=a.id, segments=segments, label=a.label,
                                        known_outlier_mask=known_mask))
    return corrupted, truth
