"""Maximum-likelihood fitting of the chain model by quasi-Newton ascent.

The objective is the sum of class log-posteriors over labeled (plain or
augmented) training actions minus an L2 penalty ||theta||^2 / (2 sigma^2)
over the learned weight blocks. The gradient is the usual latent-CRF form:
label-clamped expected sufficient statistics minus model-expected ones,
both obtained from exact chain marginals. Optimization uses L-BFGS with
history 10 and a strong-Wolfe line search, from small seeded random init.

Per-action contributions are reduced in sorted-id order, so the result is
bitwise independent of the training-set ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .data import class_vocabulary
from .engine import Chain, ModelParameters, _forward_backward, _validate_chain


@dataclass
class TrainConfig:
    """Hyperparameters of one training run."""

    num_poses: int = 4
    sigma: float = 1.0
    inlier_bias: float = 0.0
    max_iterations: int = 500
    gradient_tolerance: float = 1e-5
    seed: int = 0
    init_scale: float = 0.1

    def __post_init__(self):
        if self.num_poses < 1:
            raise ValueError("num_poses must be >= 1")
        if not (self.sigma > 0):
            raise ValueError("sigma must be > 0")
        if self.inlier_bias < 0:
            raise ValueError("inlier_bias must be >= 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not (self.gradient_tolerance > 0):
            raise ValueError("gradient_tolerance must be > 0")
        if not (self.init_scale >= 0):
            raise ValueError("init_scale must be >= 0")


@dataclass
class TrainReport:
    """Optimization trace: objective values at accepted iterates."""

    final_objective: float
    iterations: int
    trace: list[float] = field(default_factory=list)
    trace_gradient_norms: list[float] = field(default_factory=list)
    gradient_norm_at_exit: float = 0.0
    converged: bool = False
    message: str = ""


@dataclass
class ParameterBlocks:
    """Gradient (or step) with the same block layout as the learned weights."""

    poses: np.ndarray
    class_affinity: np.ndarray
    transition: np.ndarray

    def ravel(self) -> np.ndarray:
        return np.concatenate([self.poses.ravel(), self.class_affinity.ravel(),
                               self.transition.ravel()])


def pack(params: ModelParameters) -> np.ndarray:
    return np.concatenate([params.poses.ravel(), params.class_affinity.ravel(),
                           params.transition.ravel()])


def unpack(theta: np.ndarray, num_classes: int, num_poses: int, dim: int,
           inlier_bias: float = 0.0, sigma: float = 1.0,
           class_names: tuple[str, ...] = ()) -> ModelParameters:
    S, d, Y = num_poses, dim, num_classes
    if theta.shape != (S * d + Y * S + Y * S * S,):
        raise ValueError("flat parameter vector has the wrong length")
    poses = theta[:S * d].reshape(S, d)
    affinity = theta[S * d:S * d + Y * S].reshape(Y, S)
    transition = theta[S * d + Y * S:].reshape(Y, S, S)
    return ModelParameters(poses, affinity, transition, inlier_bias, sigma, class_names)


def _label_index(params: ModelParameters, label) -> int:
    if params.class_names:
        try:
            return params.class_names.index(label)
        except ValueError:
            raise ValueError(f"label {label!r} not in model classes {params.class_names}")
    return int(label)


def _prepare(train_set, params: ModelParameters):
    """Sorted (chain, label-index) pairs; raises on missing labels."""
    actions = sorted(train_set, key=lambda a: a.id)
    prepared = []
    for a in actions:
        if a.label is None:
            raise ValueError(f"training action {a.id!r} has no label")
        chain = Chain.from_action(a)
        _validate_chain(chain, params)
        prepared.append((chain, _label_index(params, a.label)))
    return prepared


def _action_terms(chain: Chain, yi: int, params: ModelParameters):
    """Log-posterior of the label plus expected-statistic gradient blocks."""
    msgs = _forward_backward(chain, params)
    scores = msgs.log_class_scores                     # (Y,)
    total = logsumexp(scores)
    loglik = float(scores[yi] - total)
    pi = np.exp(scores - total)                        # (Y,)

    T = chain.num_segments
    Y, S = params.num_classes, params.num_poses

    # Per-class unary marginals, stacked over segments: (Y, R, S).
    marg = np.concatenate(
        [np.exp(msgs.alpha[t] + msgs.brow[t][:, None, :] - scores[:, None, None])
         for t in range(T)], axis=1)
    weights = marg[yi] - np.tensordot(pi, marg, axes=1)          # (R, S)
    g_poses = weights.T @ chain.stacked                          # (S, d)

    e_affinity = marg.sum(axis=1)                                # (Y, S)
    g_affinity = -pi[:, None] * e_affinity
    g_affinity[yi] += e_affinity[yi]

    g_transition = np.zeros((Y, S, S))
    if T > 1:
        e_trans = np.zeros((Y, S, S))
        for t in range(T - 1):
            e_trans += np.exp(msgs.apose[t][:, :, None] + params.transition
                              + msgs.csum[t + 1][:, None, :] - scores[:, None, None])
        g_transition = -pi[:, None, None] * e_trans
        g_transition[yi] += e_trans[yi]

    return loglik, g_poses, g_affinity, g_transition


def objective(train_set, params: ModelParameters, sigma: float) -> float:
    """Regularized conditional log-likelihood (to be maximized)."""
    prepared = _prepare(train_set, params)
    loglik = 0.0
    for chain, yi in prepared:
        msgs = _forward_backward(chain, params)
        scores = msgs.log_class_scores
        loglik += float(scores[yi] - logsumexp(scores))
    return loglik - _penalty(params, sigma)


def _penalty(params: ModelParameters, sigma: float) -> float:
    sq = (float(np.sum(params.poses ** 2)) + float(np.sum(params.class_affinity ** 2))
          + float(np.sum(params.transition ** 2)))
    return sq / (2.0 * sigma * sigma) if np.isfinite(sigma) else 0.0


def gradient(train_set, params: ModelParameters, sigma: float) -> ParameterBlocks:
    """Analytic gradient of :func:`objective` with respect to the weight blocks."""
    _, blocks = _objective_and_gradient(_prepare(train_set, params), params, sigma)
    return blocks


def _objective_and_gradient(prepared, params: ModelParameters, sigma: float):
    Y, S, d = params.num_classes, params.num_poses, params.dim
    loglik = 0.0
    g_poses = np.zeros((S, d))
    g_affinity = np.zeros((Y, S))
    g_transition = np.zeros((Y, S, S))
    for chain, yi in prepared:
        ll, gp, ga, gt = _action_terms(chain, yi, params)
        loglik += ll
        g_poses += gp
        g_affinity += ga
        g_transition += gt
    inv_var = 1.0 / (sigma * sigma) if np.isfinite(sigma) else 0.0
    g_poses -= params.poses * inv_var
    g_affinity -= params.class_affinity * inv_var
    g_transition -= params.transition * inv_var
    value = loglik - _penalty(params, sigma)
    return value, ParameterBlocks(g_poses, g_affinity, g_transition)


class TrainingError(RuntimeError):
    def __init__(self, message: str, report: TrainReport):
        super().__init__(message)
        self.report = report


def train(train_set, config: TrainConfig):
    """Fit model weights by L-BFGS ascent; returns (ModelParameters, TrainReport)."""
    actions = list(train_set)
    if not actions:
        raise ValueError("training set is empty")
    class_names = class_vocabulary(actions)
    dims = {a.dim for a in actions}
    if len(dims) != 1:
        raise ValueError("training actions disagree on feature dimension")
    d = dims.pop()
    Y, S = len(class_names), config.num_poses

    rng = np.random.default_rng(config.seed)
    n_params = S * d + Y * S + Y * S * S
    x0 = rng.uniform(-config.init_scale, config.init_scale, size=n_params)

    def make_params(theta):
        return unpack(theta, Y, S, d, config.inlier_bias, config.sigma, class_names)

    prepared = _prepare(actions, make_params(x0))

    cache: dict[bytes, tuple[float, float]] = {}

    def fun(theta):
        params = make_params(theta)
        value, blocks = _objective_and_gradient(prepared, params, config.sigma)
        grad = blocks.ravel()
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            # A worse-than-anything value forces the line search to shrink.
            return 1e100, np.zeros_like(theta)
        key = theta.tobytes()
        if len(cache) > 8:
            cache.clear()
        cache[key] = (value, float(np.linalg.norm(grad)))
        return -value, -grad

    trace: list[float] = []
    trace_gnorm: list[float] = []

    def record(theta):
        hit = cache.get(np.asarray(theta).tobytes())
        if hit is None:
            params = make_params(theta)
            value, blocks = _objective_and_gradient(prepared, params, config.sigma)
            hit = (value, float(np.linalg.norm(blocks.ravel())))
        trace.append(hit[0])
        trace_gnorm.append(hit[1])

    record(x0)
    result = minimize(
        fun, x0, jac=True, method="L-BFGS-B", callback=record,
        options={"maxiter": config.max_iterations, "maxcor": 10,
                 "gtol": config.gradient_tolerance, "ftol": 1e-14,
                 "maxfun": 20 * config.max_iterations + 100})

    params = make_params(result.x)
    final_value, blocks = _objective_and_gradient(prepared, params, config.sigma)
    report = TrainReport(
        final_objective=float(final_value),
        iterations=int(result.nit),
        trace=trace,
        trace_gradient_norms=trace_gnorm,
        gradient_norm_at_exit=float(np.linalg.norm(blocks.ravel())),
        converged=bool(result.success),
        message=str(result.message),
    )
    if not np.isfinite(final_value):
        raise TrainingError("objective is non-finite at the returned solution", report)
    return params, report


def select_inlier_bias(train_augmented, val_augmented, config: TrainConfig,
                       grid=(0.0, 0.01, 0.1, 1.0, 10.0)):
    """Pick the inlier bias from a grid scaled by the typical unary magnitude.

    Trains once with bias 0 to estimate the median |<obs, pose>| over the
    training data, scales the grid by it, trains one model per candidate and
    returns (best_bias, per-candidate validation accuracies). Ties go to the
    smaller bias.
    """
    train_augmented = list(train_augmented)
    val_augmented = list(val_augmented)
    if not val_augmented:
        raise ValueError("validation set is empty")

    base_cfg = TrainConfig(config.num_poses, config.sigma, 0.0, config.max_iterations,
                           config.gradient_tolerance, config.seed, config.init_scale)
    base_params, _ = train(train_augmented, base_cfg)
    mags = np.concatenate([np.abs(Chain.from_action(a).stacked @ base_params.poses.T).ravel()
                           for a in train_augmented])
    scale = float(np.median(mags))
    scaled = [g * scale for g in grid]

    from .engine import class_posterior  # local import to keep module load light
    accuracies = []
    best_bias, best_acc = scaled[0], -1.0
    for bias in scaled:
        cfg = TrainConfig(config.num_poses, config.sigma, bias, config.max_iterations,
                          config.gradient_tolerance, config.seed, config.init_scale)
        params, _ = train(train_augmented, cfg)
        hits = sum(1 for a in val_augmented
                   if class_posterior(a, params).predicted_label == a.label)
        acc = hits / len(val_augmented)
        accuracies.append(acc)
        if acc > best_acc:
            best_bias, best_acc = bias, acc
    return best_bias, list(zip(scaled, accuracies))
