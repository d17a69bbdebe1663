"""Per-frame descriptor streams to fixed-length segment feature vectors.

Covers uniform temporal segmentation, person-centric skeleton normalization,
k-means visual codebooks with bag-of-words histograms, and a seeded synthetic
dataset generator for desk-scale evaluation.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .data import ActionSequence

GENERIC = "generic-descriptor"
SKELETON = "skeleton-joints"


@dataclass(frozen=True)
class SkeletonTopology:
    """Joint tree rooted at the hip center; parents[root] == -1."""

    parents: tuple[int, ...]
    hip_center: int
    left_hip: int
    right_hip: int

    def __post_init__(self):
        J = len(self.parents)
        if J < 2:
            raise ValueError("a skeleton needs at least 2 joints")
        for name in ("hip_center", "left_hip", "right_hip"):
            idx = getattr(self, name)
            if not 0 <= idx < J:
                raise ValueError(f"{name} index {idx} out of range for {J} joints")
        if self.parents[self.hip_center] != -1:
            raise ValueError("hip_center must be the root (parent -1)")
        if sum(1 for p in self.parents if p == -1) != 1:
            raise ValueError("exactly one root joint expected")
        if len(self.bfs_order()) != J:
            raise ValueError("joint tree is disconnected or cyclic")

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    def children(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.parents]
        for j, p in enumerate(self.parents):
            if p >= 0:
                out[p].append(j)
        return out

    def bfs_order(self) -> list[int]:
        kids = self.children()
        order, queue, seen = [], deque([self.hip_center]), {self.hip_center}
        while queue:
            j = queue.popleft()
            order.append(j)
            for c in kids[j]:
                if c not in seen:
                    seen.add(c)
                    queue.append(c)
        return order


@dataclass
class FrameStream:
    """Ordered per-frame descriptors of one recording."""

    frames: np.ndarray  # (F, dim)
    modality: str = GENERIC
    topology: SkeletonTopology | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("frames must be a non-empty (F, dim) array")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frame descriptors must be finite")
        if self.modality not in (GENERIC, SKELETON):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.modality == SKELETON:
            if self.topology is None:
                raise ValueError("skeleton streams need a topology")
            if self.frames.shape[1] != 3 * self.topology.num_joints:
                raise ValueError("skeleton frames must have 3 coordinates per joint")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def segment_boundaries(num_frames: int, num_segments: int) -> list[int]:
    """Window edges: segment t covers frame indices [b[t], b[t+1])."""
    if num_frames < 1:
        raise ValueError("need at least one frame")
    if num_segments < 1:
        raise ValueError("need at least one segment")
    return [num_frames * t // num_segments for t in range(num_segments + 1)]


def segment_uniform(stream, num_segments: int) -> list[np.ndarray]:
    """Split a stream into ``num_segments`` contiguous frame windows.

    Windows partition the frames when F >= T. When F < T, empty windows are
    filled by duplicating the nearest preceding frame (the first frame for a
    leading empty window).
    """
    frames = stream.frames if isinstance(stream, FrameStream) else np.asarray(stream, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError("stream must be a non-empty (F, dim) array")
    bounds = segment_boundaries(frames.shape[0], num_segments)
    windows = []
    for t in range(num_segments):
        lo, hi = bounds[t], bounds[t + 1]
        if lo == hi:
            src = lo - 1 if lo > 0 else 0
            windows.append(frames[src:src + 1])
        else:
            windows.append(frames[lo:hi])
    return windows


@dataclass
class NormalizedSkeleton:
    joints: np.ndarray  # (J, 3)
    rotation_skipped: bool = False


def normalize_skeleton(joints, reference, topology: SkeletonTopology) -> NormalizedSkeleton:
    """Person-centric skeleton normalization.

    Moves the hip center to the origin, rescales every bone (breadth-first
    from the root, so a bone's rescale keeps its parent joint fixed) to the
    reference's bone length, then rotates about the vertical (z) axis so the
    ground-plane projection of the left-hip to right-hip vector points along
    +x. A degenerate hip projection skips the rotation and flags the result.
    """
    joints = np.asarray(joints, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    J = topology.num_joints
    if joints.shape != (J, 3) or reference.shape != (J, 3):
        raise ValueError(f"joints and reference must both be ({J}, 3) arrays")

    centered = joints - joints[topology.hip_center]

    out = centered.copy()
    for j in topology.bfs_order():
        p = topology.parents[j]
        if p < 0:
            continue
        offset = centered[j] - centered[p]
        length = np.linalg.norm(offset)
        ref_length = np.linalg.norm(reference[j] - reference[p])
        if length < 1e-15:
            out[j] = out[p]
        else:
            out[j] = out[p] + offset * (ref_length / length)

    hips = out[topology.right_hip] - out[topology.left_hip]
    vx, vy = hips[0], hips[1]
    if np.hypot(vx, vy) < 1e-12:
        return NormalizedSkeleton(out, rotation_skipped=True)
    angle = np.arctan2(vy, vx)
    c, s = np.cos(-angle), np.sin(-angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return NormalizedSkeleton(out @ rot.T, rotation_skipped=False)


@dataclass
class Codebook:
    """k-means centers used as visual words."""

    centers: np.ndarray  # (k, dim)
    inertia_trace: tuple[float, ...] = ()

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[0] < 1:
            raise ValueError("centers must be a non-empty (k, dim) array")
        if not np.all(np.isfinite(self.centers)):
            raise ValueError("centers must be finite")
        if self.centers.shape[0] > 1 and pdist(self.centers).min() <= 1e-12:
            raise ValueError("codebook centers must be pairwise distinct")

    @property
    def size(self) -> int:
        return self.centers.shape[0]


def _kmeanspp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        probs = d2 / d2.sum()
        centers[i] = X[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((X - centers[i]) ** 2, axis=1))
    return centers


def build_codebook(descriptors, k: int, seed: int, max_iter: int = 300,
                   tol: float = 1e-6) -> Codebook:
    """Seeded k-means (k-means++ init, Lloyd iterations).

    Stops when the largest center movement falls below ``tol`` or after
    ``max_iter`` iterations. Requires at least k distinct descriptors.
    """
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("descriptors must be a non-empty (n, dim) array")
    if k < 1:
        raise ValueError("k must be >= 1")
    if np.unique(X, axis=0).shape[0] < k:
        raise ValueError(f"need at least {k} distinct descriptors")

    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(X, k, rng)
    trace = []
    for _ in range(max_iter):
        assign = np.argmin(cdist(X, centers), axis=1)
        trace.append(float(np.sum((X - centers[assign]) ** 2)))
        new_centers = centers.copy()
        for c in range(k):
            members = X[assign == c]
            if members.shape[0] > 0:
                new_centers[c] = members.mean(axis=0)
        movement = np.max(np.linalg.norm(new_centers - centers, axis=1))
        centers = new_centers
        if movement < tol:
            break
    assign = np.argmin(cdist(X, centers), axis=1)
    trace.append(float(np.sum((X - centers[assign]) ** 2)))
    return Codebook(centers, tuple(trace))


def bow_histogram(window, codebook: Codebook) -> np.ndarray:
    """L1-normalized nearest-center histogram; empty windows become uniform.

    Ties in the nearest-center assignment go to the lowest center index.
    """
    k = codebook.size
    window = np.asarray(window, dtype=np.float64)
    if window.size == 0:
        return np.full(k, 1.0 / k)
    if window.ndim != 2:
        raise ValueError("window must be a (n, dim) array")
    assign = np.argmin(cdist(window, codebook.centers), axis=1)
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    return counts / counts.sum()


@dataclass
class SyntheticSpec:
    """Shape and noise of a generated labeled dataset."""

    num_classes: int = 5
    num_actions_per_class: int = 40
    num_segments: int = 10
    dim: int = 8
    num_prototypes: int = 3
    noise_std: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "num_actions_per_class", "num_segments",
                     "dim", "num_prototypes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def prototype_schedule(num_segments: int, num_prototypes: int) -> np.ndarray:
    """Prototype index used at each segment: a staircase over the sequence."""
    return np.array([t * num_prototypes // num_segments for t in range(num_segments)])


def generate_synthetic_dataset(spec: SyntheticSpec) -> list[ActionSequence]:
    """Labeled actions following per-class prototype schedules plus noise.

    Class c owns ``num_prototypes`` prototype vectors; segment t of every
    action of class c is the scheduled prototype plus isotropic Gaussian
    noise. Deterministic given the seed.
    """
    rng = np.random.default_rng(spec.seed)
    prototypes = rng.normal(size=(spec.num_classes, spec.num_prototypes, spec.dim))
    sched = prototype_schedule(spec.num_segments, spec.num_prototypes)
    actions = []
    for c in range(spec.num_classes):
        base = prototypes[c][sched]  # (T, d)
        for i in range(spec.num_actions_per_class):
            noise = rng.normal(scale=spec.noise_std, size=(spec.num_segments, spec.dim))
            actions.append(ActionSequence(
                id=f"c{c}_a{i}", segments=base + noise, label=f"c{c}"))
    return actions
