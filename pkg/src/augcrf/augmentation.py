"""Mutual-recommendation retrieval of alternative segments from training data.

Every position j of an action serves as a query against the training set at
that same position; the winning training action donates all of its segments
as alternatives for the corresponding positions. One nearest-neighbor search
per position therefore yields T alternatives for every segment. The index
counts its queries so callers can audit the retrieval cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .data import ActionSequence, Alternative, AugmentedAction, AugmentedSegment, \
    check_consistent


@dataclass
class AugmentOptions:
    """Controls for building augmented actions.

    duplicate_window w > 0 additionally offers each retrieved segment to its
    w temporal neighbors (appended after the T base alternatives).
    known_mask_mode leaves annotated-clean segments unaugmented.
    ban_masked_original removes the keep-original state for annotated-corrupt
    segments (truncated-tail recognition, where the original truly is gone).
    """

    exclude_self: bool = False
    duplicate_window: int = 0
    known_mask_mode: bool = False
    ban_masked_original: bool = False

    def __post_init__(self):
        if self.duplicate_window < 0:
            raise ValueError("duplicate_window must be >= 0")


class RetrievalIndex:
    """Position-restricted exact nearest-neighbor index over a training set.

    Backends: "linear" (vectorized scan) and "kdtree" (scipy cKDTree with an
    exact tie-resolution pass). Both return identical results; ties resolve
    to the lowest insertion order.
    """

    def __init__(self, training_set, backend: str = "linear"):
        actions = list(training_set)
        if not actions:
            raise ValueError("cannot index an empty training set")
        if backend not in ("linear", "kdtree"):
            raise ValueError(f"unknown backend {backend!r}")
        self.num_segments, self.dim = check_consistent(actions)
        ids = [a.id for a in actions]
        if len(set(ids)) != len(ids):
            raise ValueError("training action ids must be unique")
        self.ids = ids
        self.labels = [a.label for a in actions]
        self.vectors = np.stack([a.segments for a in actions])  # (N, T, d)
        self.backend = backend
        self._row_of = {aid: i for i, aid in enumerate(ids)}
        self._trees: dict[int, cKDTree] = {}
        self.nns_calls = 0

    @property
    def size(self) -> int:
        return len(self.ids)

    def _tree(self, position: int) -> cKDTree:
        if position not in self._trees:
            self._trees[position] = cKDTree(self.vectors[:, position, :])
        return self._trees[position]

    def _query_linear(self, query, position, exclude_row):
        d2 = np.sum((self.vectors[:, position, :] - query) ** 2, axis=1)
        if exclude_row is not None:
            d2[exclude_row] = np.inf
        row = int(np.argmin(d2))
        if not np.isfinite(d2[row]):
            raise ValueError("all candidates excluded")
        return row, float(np.sqrt(d2[row]))

    def _query_kdtree(self, query, position, exclude_row):
        tree = self._tree(position)
        k = 1 if exclude_row is None else min(2, self.size)
        dists, rows = tree.query(query, k=k)
        dists, rows = np.atleast_1d(dists), np.atleast_1d(rows)
        finite = [(d, r) for d, r in zip(dists, rows)
                  if r != exclude_row and r < self.size]
        if not finite:
            raise ValueError("all candidates excluded")
        radius = min(d for d, _ in finite) * (1 + 1e-12)
        candidates = sorted(r for r in tree.query_ball_point(query, radius)
                            if r != exclude_row)
        d2 = np.sum((self.vectors[candidates, position, :] - query) ** 2, axis=1)
        best = int(np.argmin(d2))
        return candidates[best], float(np.sqrt(d2[best]))

    def query(self, query: np.ndarray, position: int, exclude_id: str | None = None):
        """Nearest training action at one position: (action_id, row, distance)."""
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.dim,):
            raise ValueError(f"query must have dimension {self.dim}")
        if not 0 <= position < self.num_segments:
            raise ValueError(f"position {position} out of range")
        exclude_row = None
        if exclude_id is not None:
            exclude_row = self._row_of.get(exclude_id)
        if exclude_row is not None and self.size == 1:
            raise ValueError("all candidates excluded")
        self.nns_calls += 1
        if self.backend == "kdtree":
            row, dist = self._query_kdtree(query, position, exclude_row)
        else:
            row, dist = self._query_linear(query, position, exclude_row)
        return self.ids[row], row, dist


def build_index(training_set, backend: str = "linear") -> RetrievalIndex:
    """Index a training set for position-restricted nearest-neighbor queries."""
    return RetrievalIndex(training_set, backend=backend)


def nearest_training_action(index: RetrievalIndex, query, position: int,
                            exclude_id: str | None = None) -> str:
    """Id of the training action whose segment at ``position`` is nearest."""
    action_id, _, _ = index.query(query, position, exclude_id)
    return action_id


def recommend(index: RetrievalIndex, action: ActionSequence, position: int,
              exclude_id: str | None = None) -> list[Alternative]:
    """Alternatives recommended by one query position: one per segment.

    Issues exactly one nearest-neighbor search; the winner's segment t
    becomes the alternative offered to segment t, for every t.
    """
    _, row, _ = index.query(action.segments[position], position, exclude_id)
    label = index.labels[row]
    return [Alternative(vector=index.vectors[row, t].copy(),
                        source_action_id=index.ids[row],
                        source_position=t,
                        recommender_position=position,
                        source_label=label)
            for t in range(index.num_segments)]


def augment_action(index: RetrievalIndex, action: ActionSequence,
                   options: AugmentOptions | None = None) -> AugmentedAction:
    """Attach retrieved alternatives to every segment of one action.

    Runs one query per position (T total). With duplicate_window w, the
    alternative retrieved for segment t is also appended to segments within
    w of t. In known-mask mode, segments annotated clean receive no
    alternatives at all.
    """
    options = options or AugmentOptions()
    T = action.num_segments
    if T != index.num_segments or action.dim != index.dim:
        raise ValueError("action shape does not match the index")
    exclude = action.id if options.exclude_self else None
    recs = [recommend(index, action, j, exclude) for j in range(T)]

    mask = action.known_outlier_mask
    gate = mask if (options.known_mask_mode and mask is not None) else None
    w = options.duplicate_window

    segments = []
    for t in range(T):
        if gate is not None and not gate[t]:
            segments.append(AugmentedSegment(original=action.segments[t].copy(),
                                             alternatives=[]))
            continue
        alts = [recs[j][t] for j in range(T)]
        if w > 0:
            for j in range(T):
                for src in range(T):
                    if src != t and abs(src - t) <= w:
                        alts.append(recs[j][src])
        banned = (options.ban_masked_original and mask is not None and bool(mask[t]))
        segments.append(AugmentedSegment(original=action.segments[t].copy(),
                                         alternatives=alts,
                                         allow_original=not banned))
    return AugmentedAction(id=action.id, segments=segments, label=action.label)


def augment_dataset(training_set, test_set, options: AugmentOptions | None = None,
                    index: RetrievalIndex | None = None, backend: str = "linear"):
    """Augment a whole corpus: training actions leave themselves out of the
    candidate pool; test actions retrieve from the full training set.

    Returns (augmented_train, augmented_test, index).
    """
    options = options or AugmentOptions()
    training_set = list(training_set)
    test_set = list(test_set)
    if index is None:
        index = build_index(training_set, backend=backend)
    train_opts = AugmentOptions(True, options.duplicate_window,
                                options.known_mask_mode, options.ban_masked_original)
    test_opts = AugmentOptions(False, options.duplicate_window,
                               options.known_mask_mode, options.ban_masked_original)
    aug_train = [augment_action(index, a, train_opts) for a in training_set]
    aug_test = [augment_action(index, a, test_opts) for a in test_set]
    return aug_train, aug_test, index
