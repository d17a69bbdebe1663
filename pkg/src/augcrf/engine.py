"""Exact chain inference for plain and observation-augmented hidden-state CRFs.

The model scores a class y and a hidden configuration h over T segments.
For plain actions each hidden variable is a pose index p in {0..S-1}. For
augmented actions the hidden variable is composite: (o, p) where o selects
the observation used at that segment (o=0 keeps the original, o=j>=1 picks
alternative j-1) and p is the pose. The composite pair is flattened to a
single index o*S + p, so one chain code path serves both model variants.

Potential of a configuration, for class y:

    sum_t [ <obs_t(o_t), poses[p_t]> + bias(o_t) ]         (observation term)
  + sum_t class_affinity[y, p_t]                            (class-pose term)
  + sum_{t<T-1} transition[y, p_t, p_{t+1}]                 (pose-pair term)

where bias(o)=inlier_bias when o=0 on an augmented action and 0 otherwise.
The pairwise term depends on poses only, so sum-product messages collapse
the observation index analytically; max-product decoding runs on the dense
flattened chain to keep lexicographic tie-breaking exact.

All inference is in log-space. Marginals and partition values are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .data import ActionSequence, AugmentedAction

NEG_INF = -np.inf


@dataclass
class ModelParameters:
    """Learned weights plus the fixed inlier bias and regularization scale.

    poses           (S, d)    pose template vectors, one per latent pose
    class_affinity  (Y, S)    score of pose p under class y
    transition      (Y, S, S) score of pose pair (p, p') under class y
    inlier_bias     added to the keep-original state of augmented segments
    sigma           L2 regularization std used at training time
    class_names     optional label names, index-aligned with class axis
    """

    poses: np.ndarray
    class_affinity: np.ndarray
    transition: np.ndarray
    inlier_bias: float = 0.0
    sigma: float = 1.0
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        self.class_affinity = np.asarray(self.class_affinity, dtype=np.float64)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        S, d = self.poses.shape
        Y = self.class_affinity.shape[0]
        if self.class_affinity.shape != (Y, S):
            raise ValueError("class_affinity must have shape (num_classes, num_poses)")
        if self.transition.shape != (Y, S, S):
            raise ValueError("transition must have shape (num_classes, num_poses, num_poses)")
        for name, arr in (("poses", self.poses), ("class_affinity", self.class_affinity),
                          ("transition", self.transition)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        if not (self.inlier_bias >= 0.0):
            raise ValueError("inlier_bias must be >= 0")
        if not (self.sigma > 0.0):
            raise ValueError("sigma must be > 0")
        if self.class_names and len(self.class_names) != Y:
            raise ValueError("class_names length must match the class axis")

    @property
    def num_poses(self) -> int:
        return self.poses.shape[0]

    @property
    def dim(self) -> int:
        return self.poses.shape[1]

    @property
    def num_classes(self) -> int:
        return self.class_affinity.shape[0]

    def label_of(self, index: int):
        return self.class_names[index] if self.class_names else index


@dataclass
class Configuration:
    """A full hidden assignment: one (o, p) pair per segment, plus its potential."""

    states: list[tuple[int, int]]
    potential: float


@dataclass
class PosteriorResult:
    """Normalized class log-posteriors and the arg-max prediction."""

    log_posteriors: np.ndarray   # (Y,), logsumexp == 0
    log_class_scores: np.ndarray  # (Y,), unnormalized log sum over configurations
    predicted_index: int
    map_config: Configuration | None = None
    class_names: tuple[str, ...] = ()

    @property
    def predicted_label(self):
        if self.class_names:
            return self.class_names[self.predicted_index]
        return self.predicted_index


class Chain:
    """Flattened-chain view of a plain or augmented action.

    Precomputes the stacked observation matrix so that repeated inference
    under changing parameters (training) costs one matmul per action.
    """

    def __init__(self, obs: list[np.ndarray], augmented: bool,
                 allow_original: np.ndarray):
        self.obs = obs                    # per t: (rows_t, d)
        self.augmented = augmented        # augmented actions get the inlier bias
        self.allow_original = allow_original
        self.rows = np.array([o.shape[0] for o in obs])
        self.stacked = np.vstack(obs)     # (sum rows_t, d)
        self.offsets = np.concatenate([[0], np.cumsum(self.rows)])

    @classmethod
    def from_action(cls, action) -> "Chain":
        if isinstance(action, Chain):
            return action
        if isinstance(action, ActionSequence):
            obs = [action.segments[t:t + 1] for t in range(action.num_segments)]
            return cls(obs, augmented=False,
                       allow_original=np.ones(action.num_segments, dtype=bool))
        if isinstance(action, AugmentedAction):
            obs = [seg.observation_rows() for seg in action.segments]
            allow = np.array([seg.allow_original for seg in action.segments])
            return cls(obs, augmented=True, allow_original=allow)
        raise TypeError(f"cannot build a chain from {type(action).__name__}")

    @property
    def num_segments(self) -> int:
        return len(self.obs)

    @property
    def dim(self) -> int:
        return self.stacked.shape[1]

    def node_tables(self, params: ModelParameters) -> list[np.ndarray]:
        """Observation scores per segment: (rows_t, S), bias and bans applied."""
        if self.dim != params.dim:
            raise ValueError(
                f"feature dimension {self.dim} does not match model dimension {params.dim}")
        scores = self.stacked @ params.poses.T
        tables = []
        for t in range(self.num_segments):
            table = scores[self.offsets[t]:self.offsets[t + 1]].copy()
            if self.augmented:
                if self.allow_original[t]:
                    table[0] += params.inlier_bias
                else:
                    table[0] = NEG_INF
            tables.append(table)
        return tables


@dataclass
class Messages:
    """Forward/backward quantities for every class at once.

    alpha[t]  (Y, rows_t, S)  forward scores including node t
    brow[t]   (Y, S)          backward scores excluding node t (o-independent)
    apose[t]  (Y, S)          alpha collapsed over the observation index
    csum[t]   (Y, S)          node + backward collapsed over the observation index
    log_class_scores (Y,)     log sum over configurations per class
    """

    alpha: list[np.ndarray]
    brow: list[np.ndarray]
    apose: list[np.ndarray]
    csum: list[np.ndarray]
    log_class_scores: np.ndarray
    node: list[np.ndarray]  # (Y, rows_t, S) node scores incl. class affinity


def _forward_backward(chain: Chain, params: ModelParameters) -> Messages:
    T = chain.num_segments
    trans = params.transition            # (Y, S, S)
    unary = chain.node_tables(params)    # per t (rows_t, S)
    node = [unary[t][None, :, :] + params.class_affinity[:, None, :] for t in range(T)]

    alpha: list[np.ndarray] = [node[0]]
    apose: list[np.ndarray] = [logsumexp(node[0], axis=1)]
    for t in range(1, T):
        msg = logsumexp(apose[t - 1][:, :, None] + trans, axis=1)  # (Y, S)
        alpha.append(node[t] + msg[:, None, :])
        apose.append(logsumexp(alpha[t], axis=1))

    brow: list[np.ndarray] = [None] * T
    csum: list[np.ndarray] = [None] * T
    Y, S = params.num_classes, params.num_poses
    brow[T - 1] = np.zeros((Y, S))
    csum[T - 1] = logsumexp(node[T - 1], axis=1)
    for t in range(T - 2, -1, -1):
        brow[t] = logsumexp(trans + csum[t + 1][:, None, :], axis=2)
        csum[t] = logsumexp(node[t] + brow[t][:, None, :], axis=1)

    log_class_scores = logsumexp(alpha[T - 1], axis=(1, 2))
    return Messages(alpha, brow, apose, csum, log_class_scores, node)


def _validate_chain(chain: Chain, params: ModelParameters):
    if chain.num_segments < 1:
        raise ValueError("chain must have at least one segment")
    for t in range(chain.num_segments):
        if chain.rows[t] == 1 and chain.augmented and not chain.allow_original[t]:
            raise ValueError(f"segment {t} has no admissible observation")
    if chain.dim != params.dim:
        raise ValueError(
            f"feature dimension {chain.dim} does not match model dimension {params.dim}")


def unary_plain(x: np.ndarray, pose_index: int, params: ModelParameters) -> float:
    """Observation score of a plain segment under one pose: <x, poses[p]>."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.dim,):
        raise ValueError(f"expected a vector of dimension {params.dim}, got shape {x.shape}")
    if not 0 <= pose_index < params.num_poses:
        raise ValueError(f"pose index {pose_index} out of range")
    return float(x @ params.poses[pose_index])


def unary_composite(segment, state: tuple[int, int], params: ModelParameters,
                    materialize: bool = False) -> float:
    """Observation score of an augmented segment under composite state (o, p).

    o = 0 scores the original and adds the inlier bias; o = j >= 1 scores
    alternative j-1. The default path exploits the block-sparse weight
    layout; ``materialize=True`` builds the concatenated observation vector
    and the matching zero-padded weight vector explicitly (debug oracle,
    agrees to 1e-12).
    """
    o, p = state
    m = segment.num_alternatives
    if not (0 <= o <= m) or not (0 <= p < params.num_poses):
        raise ValueError(f"composite state {state} out of domain ((1+{m}) x {params.num_poses})")
    if o == 0 and not segment.allow_original:
        raise ValueError("state selects the original of a segment that disallows it")
    d = params.dim
    if segment.original.shape != (d,):
        raise ValueError("segment dimension does not match model dimension")
    if materialize:
        concat = segment.observation_rows().ravel()          # ((1+m) * d,)
        weights = np.zeros((1 + m) * d)
        weights[o * d:(o + 1) * d] = params.poses[p]
        score = float(concat @ weights)
    else:
        vec = segment.original if o == 0 else segment.alternatives[o - 1].vector
        score = float(vec @ params.poses[p])
    if o == 0:
        score += params.inlier_bias
    return score


def potential(y: int, configuration, action, params: ModelParameters) -> float:
    """Total potential of class y and a full hidden configuration."""
    if not 0 <= y < params.num_classes:
        raise ValueError(f"class index {y} out of range")
    states = configuration.states if isinstance(configuration, Configuration) else list(configuration)
    chain = Chain.from_action(action)
    _validate_chain(chain, params)
    if len(states) != chain.num_segments:
        raise ValueError("configuration length must equal the segment count")
    total = 0.0
    for t, (o, p) in enumerate(states):
        if not (0 <= o < chain.rows[t]) or not (0 <= p < params.num_poses):
            raise ValueError(f"state ({o}, {p}) out of domain at segment {t}")
        total += float(chain.obs[t][o] @ params.poses[p])
        if chain.augmented and o == 0:
            if not chain.allow_original[t]:
                raise ValueError(f"segment {t} disallows the original observation")
            total += params.inlier_bias
        total += float(params.class_affinity[y, p])
    for t in range(chain.num_segments - 1):
        total += float(params.transition[y, states[t][1], states[t + 1][1]])
    return total


def log_partition(action, params: ModelParameters) -> float:
    """log sum over classes and hidden configurations of exp(potential)."""
    chain = Chain.from_action(action)
    _validate_chain(chain, params)
    msgs = _forward_backward(chain, params)
    return float(logsumexp(msgs.log_class_scores))


def class_posterior(action, params: ModelParameters, decode: bool = False) -> PosteriorResult:
    """Exact class posterior; optionally attach the MAP configuration of the winner."""
    chain = Chain.from_action(action)
    _validate_chain(chain, params)
    msgs = _forward_backward(chain, params)
    scores = msgs.log_class_scores
    log_post = scores - logsumexp(scores)
    predicted = int(np.argmax(log_post))
    config = map_decode(chain, predicted, params) if decode else None
    return PosteriorResult(log_post, scores, predicted, config, params.class_names)


def predict(action, params: ModelParameters) -> int:
    """Class index with the highest posterior; ties go to the lowest index."""
    return class_posterior(action, params).predicted_index


def posterior_marginals(action, y: int, params: ModelParameters):
    """Exact unary and pairwise state marginals conditioned on class y.

    Returns (unary, pairwise): unary[t] is a flat (rows_t * S,) probability
    vector over composite states o*S + p; pairwise[t] is the joint over
    flattened states at segments t and t+1 (empty list when T == 1).
    """
    if not 0 <= y < params.num_classes:
        raise ValueError(f"class index {y} out of range")
    chain = Chain.from_action(action)
    _validate_chain(chain, params)
    msgs = _forward_backward(chain, params)
    logz = msgs.log_class_scores[y]
    T = chain.num_segments
    S = params.num_poses

    unary = []
    for t in range(T):
        log_m = msgs.alpha[t][y] + msgs.brow[t][y][None, :] - logz
        unary.append(np.exp(log_m).ravel())

    pairwise = []
    for t in range(T - 1):
        a = msgs.alpha[t][y].ravel()                                   # (n_t,)
        b = (msgs.node[t + 1][y] + msgs.brow[t + 1][y][None, :]).ravel()  # (n_{t+1},)
        trans_flat = np.tile(params.transition[y], (chain.rows[t], chain.rows[t + 1]))
        log_pair = a[:, None] + trans_flat + b[None, :] - logz
        pairwise.append(np.exp(log_pair))
    return unary, pairwise


def map_decode(action, y: int, params: ModelParameters) -> Configuration:
    """Max-potential configuration for class y (exact max-product).

    Ties resolve to the lexicographically smallest flattened state sequence:
    suffix scores are computed right-to-left, then states are chosen
    greedily left-to-right with first-occurrence arg-max.
    """
    if not 0 <= y < params.num_classes:
        raise ValueError(f"class index {y} out of range")
    chain = Chain.from_action(action)
    _validate_chain(chain, params)
    T = chain.num_segments
    unary = chain.node_tables(params)
    node = [(unary[t] + params.class_affinity[y][None, :]).ravel() for t in range(T)]
    trans = params.transition[y]

    # delta[t][s] = best score of the suffix starting at segment t in state s
    delta = [None] * T
    delta[T - 1] = node[T - 1]
    for t in range(T - 2, -1, -1):
        trans_flat = np.tile(trans, (chain.rows[t], chain.rows[t + 1]))
        best_next = np.max(trans_flat + delta[t + 1][None, :], axis=1)
        delta[t] = node[t] + best_next

    states = []
    s = int(np.argmax(delta[0]))
    states.append(s)
    for t in range(T - 1):
        trans_flat = np.tile(trans, (chain.rows[t], chain.rows[t + 1]))
        s = int(np.argmax(trans_flat[s] + delta[t + 1]))
        states.append(s)

    S = params.num_poses
    pairs = [(s // S, s % S) for s in states]
    return Configuration(pairs, float(delta[0][states[0]]))
