"""End-to-end evaluation pipelines and the metrics of the experiment harness.

A run splits a labeled dataset, optionally corrupts train and/or test
actions, augments them against the training index, fits the augmented model
(and, optionally, a plain baseline without augmentation), predicts every
test action, and aggregates accuracy, alternative-quality and
correct-replacement statistics per outlier ratio.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .augmentation import AugmentOptions, augment_action, build_index
from .corruption import CorruptionSpec, inject_corruption
from .data import check_consistent, class_vocabulary, feature_std
from .engine import class_posterior
from .training import TrainConfig, train

TASKS = ("task1-clean", "task2-clean-train-corrupt-test", "task3-mixed",
         "gapfilling", "early-prediction", "random-outliers")

_TASK_KINDS = {"gapfilling": ("gap",), "early-prediction": ("truncate",),
               "random-outliers": ("random-segments", "noise-overlay")}


@dataclass
class SplitSpec:
    kind: str = "fixed"  # fixed | kfold | leave-one-out
    train_fraction: float = 0.5
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fixed", "kfold", "leave-one-out"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")


def make_splits(actions, spec: SplitSpec) -> list[tuple[list[int], list[int]]]:
    """Index folds, stratified by label where the split kind allows it."""
    actions = list(actions)
    rng = np.random.default_rng(spec.seed)
    by_label: dict[str, list[int]] = {}
    for i, a in enumerate(actions):
        by_label.setdefault(a.label, []).append(i)
    for idxs in by_label.values():
        rng.shuffle(idxs)

    if spec.kind == "leave-one-out":
        n = len(actions)
        return [([j for j in range(n) if j != i], [i]) for i in range(n)]

    if spec.kind == "fixed":
        train_idx, test_idx = [], []
        for label in sorted(by_label):
            idxs = by_label[label]
            n_train = int(np.floor(spec.train_fraction * len(idxs) + 0.5))
            n_train = min(max(n_train, 1), max(len(idxs) - 1, 1))
            train_idx.extend(idxs[:n_train])
            test_idx.extend(idxs[n_train:])
        if not test_idx:
            raise ValueError("fixed split produced an empty test set")
        return [(sorted(train_idx), sorted(test_idx))]

    fold_of = {}
    for label in sorted(by_label):
        for pos, idx in enumerate(by_label[label]):
            fold_of[idx] = pos % spec.folds
    splits = []
    for f in range(spec.folds):
        test = sorted(i for i, g in fold_of.items() if g == f)
        trainset = sorted(i for i, g in fold_of.items() if g != f)
        if test and trainset:
            splits.append((trainset, test))
    return splits


@dataclass
class ExperimentConfig:
    task: str = "task1-clean"
    corruption: CorruptionSpec | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    ratios: list[float] | None = None
    duplicate_window: int = 0
    backend: str = "linear"
    include_plain_baseline: bool = True
    task3_corrupt_fraction: float = 0.38
    seed: int = 0


def validate_config(config: ExperimentConfig):
    """Reject inconsistent configurations before any compute happens."""
    if config.task not in TASKS:
        raise ValueError(f"unknown task {config.task!r}")
    if config.task == "task1-clean":
        if config.corruption is not None and config.corruption.ratio > 0:
            raise ValueError("task1-clean forbids corruption")
        if config.ratios and any(r > 0 for r in config.ratios):
            raise ValueError("task1-clean forbids nonzero ratios")
    else:
        if config.corruption is None:
            raise ValueError(f"task {config.task} requires a corruption spec")
        allowed = _TASK_KINDS.get(config.task)
        if allowed and config.corruption.kind not in allowed:
            raise ValueError(
                f"task {config.task} requires corruption kind in {allowed}, "
                f"got {config.corruption.kind!r}")
        if config.task == "early-prediction" and not config.corruption.known:
            raise ValueError("early-prediction requires known outlier locations")
        if config.task == "task3-mixed" and config.ratios is not None:
            raise ValueError("task3-mixed does not support a ratio grid")
    if config.ratios is not None:
        if not config.ratios:
            raise ValueError("ratios must be non-empty when given")
        if any(not 0.0 <= r <= 0.8 for r in config.ratios):
            raise ValueError("ratios must lie in [0, 0.8]")
    if not 0.0 <= config.task3_corrupt_fraction <= 1.0:
        raise ValueError("task3_corrupt_fraction must be in [0, 1]")
    if config.duplicate_window < 0:
        raise ValueError("duplicate_window must be >= 0")


@dataclass
class RatioRow:
    """Aggregated metrics of one outlier ratio (pooled over folds)."""

    ratio: float
    accuracy: float
    plain_accuracy: float | None = None
    alt_quality_mean: float | None = None
    alt_quality_any: float | None = None
    correct_replacement: float | None = None


@dataclass
class RuntimeStats:
    nns_calls: int = 0
    train_iterations: int = 0
    wall_seconds: float = 0.0


@dataclass
class ExperimentReport:
    task: str
    seed: int
    class_names: tuple[str, ...]
    rows: list[RatioRow]
    confusion: np.ndarray  # (Y, Y) int counts at the headline (last) ratio
    runtime: RuntimeStats = field(default_factory=RuntimeStats)

    @property
    def headline(self) -> RatioRow:
        return self.rows[-1]

    @property
    def accuracy(self) -> float:
        return self.headline.accuracy

    @property
    def plain_accuracy(self):
        return self.headline.plain_accuracy

    @property
    def correct_replacement(self):
        return self.headline.correct_replacement

    @property
    def alternative_quality(self):
        return self.headline.alt_quality_mean, self.headline.alt_quality_any


def _alt_quality_segments(augmented_actions):
    """Per augmented segment: (accurate fraction, has-accurate flag)."""
    stats = []
    for action in augmented_actions:
        if action.label is None:
            raise ValueError(f"action {action.id!r} has no label")
        for seg in action.segments:
            if not seg.alternatives:
                continue
            flags = []
            for alt in seg.alternatives:
                if alt.source_label is None:
                    raise ValueError(
                        f"alternative in action {action.id!r} is missing its source label")
                flags.append(alt.source_label == action.label)
            stats.append((float(np.mean(flags)), float(any(flags))))
    return stats


def metric_alternative_quality(augmented_actions):
    """(mean accurate-alternative fraction, P(at least one accurate alternative)).

    An alternative is accurate when its source label equals the action's true
    label. Segments without alternatives are skipped; returns (None, None)
    when no segment carries alternatives.
    """
    stats = _alt_quality_segments(augmented_actions)
    if not stats:
        return None, None
    return (float(np.mean([f for f, _ in stats])),
            float(np.mean([a for _, a in stats])))


def metric_correct_replacement(augmented_actions, configurations, truth_masks):
    """Fraction of decoded outlier replacements drawn from the true class.

    Counts segments whose ground-truth mask is set and whose decoded state
    picked an alternative. Returns None (undefined) when no outlier segment
    was replaced, which is distinct from a measured 0.
    """
    replaced = correct = 0
    for action, cfg in zip(augmented_actions, configurations):
        mask = truth_masks[action.id]
        for t, (o, _) in enumerate(cfg.states):
            if mask[t] and o != 0:
                replaced += 1
                alt = action.segments[t].alternatives[o - 1]
                correct += alt.source_label == action.label
    if replaced == 0:
        return None
    return correct / replaced


def _derive_seed(*parts) -> int:
    entropy = [zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def _accuracy_and_confusion(actions, results, class_names):
    index = {name: i for i, name in enumerate(class_names)}
    confusion = np.zeros((len(class_names), len(class_names)), dtype=int)
    hits = 0
    for action, res in zip(actions, results):
        pred = res.predicted_label
        confusion[index[action.label], index[pred]] += 1
        hits += pred == action.label
    return hits / len(actions), confusion


def _corrupt_subset(actions, spec: CorruptionSpec, fraction: float, seed: int,
                    scale: float):
    """Corrupt a seeded fraction of the actions, preserving order."""
    rng = np.random.default_rng(seed)
    n_hit = int(np.floor(fraction * len(actions) + 0.5))
    hit = set(rng.choice(len(actions), size=n_hit, replace=False).tolist())
    chosen = [a for i, a in enumerate(actions) if i in hit]
    truth = {a.id: np.zeros(a.num_segments, dtype=bool) for a in actions}
    if chosen:
        corrupted, sub_truth = inject_corruption(chosen, spec, scale=scale)
        truth.update(sub_truth)
        replaced = dict(zip((a.id for a in chosen), corrupted))
        actions = [replaced.get(a.id, a) for a in actions]
    return list(actions), truth


def run_experiment(config: ExperimentConfig, dataset) -> ExperimentReport:
    """Execute one task end to end and aggregate metrics per outlier ratio."""
    validate_config(config)
    started = time.perf_counter()
    actions = list(dataset)
    check_consistent(actions)
    class_names = class_vocabulary(actions)
    scale = feature_std(actions)

    corruption = config.corruption
    if config.task == "task1-clean" or corruption is None:
        ratios = [0.0]
    elif config.ratios is not None:
        ratios = list(config.ratios)
    else:
        ratios = [corruption.ratio]

    known = bool(corruption.known) if corruption else False
    options = AugmentOptions(
        exclude_self=True,
        duplicate_window=config.duplicate_window,
        known_mask_mode=known,
        ban_masked_original=(config.task == "early-prediction"))
    test_options = replace(options, exclude_self=False)

    split = replace(config.split, seed=_derive_seed(config.seed, "split"))
    splits = make_splits(actions, split)

    runtime = RuntimeStats()
    per_ratio: dict[float, dict] = {
        r: {"hits": 0, "total": 0, "plain_hits": 0,
            "confusion": np.zeros((len(class_names),) * 2, dtype=int),
            "fractions": [], "replaced": 0, "correct": 0}
        for r in ratios}

    for fold, (train_idx, test_idx) in enumerate(splits):
        fold_train = [actions[i] for i in train_idx]
        fold_test = [actions[i] for i in test_idx]

        if config.task == "task3-mixed":
            spec = replace(corruption, seed=_derive_seed(config.seed, "train", fold))
            fold_train, _ = _corrupt_subset(fold_train, spec,
                                            config.task3_corrupt_fraction,
                                            _derive_seed(config.seed, "pick", fold),
                                            scale)

        index = build_index(fold_train, backend=config.backend)
        aug_train = [augment_action(index, a, options) for a in fold_train]
        aug_params, aug_report = train(aug_train, config.train)
        runtime.train_iterations += aug_report.iterations

        plain_params = None
        if config.include_plain_baseline:
            plain_cfg = replace(config.train, inlier_bias=0.0)
            plain_params, plain_report = train(fold_train, plain_cfg)
            runtime.train_iterations += plain_report.iterations

        for ratio in ratios:
            if ratio == 0.0 or config.task == "task1-clean":
                test_c = fold_test
                truth = {a.id: np.zeros(a.num_segments, dtype=bool) for a in fold_test}
            elif config.task == "task3-mixed":
                spec = replace(corruption, seed=_derive_seed(config.seed, "test", fold))
                test_c, truth = _corrupt_subset(fold_test, spec,
                                                config.task3_corrupt_fraction,
                                                _derive_seed(config.seed, "tpick", fold),
                                                scale)
            else:
                spec = replace(corruption, ratio=ratio,
                               seed=_derive_seed(config.seed, "corrupt", fold,
                                                 int(round(ratio * 1000))))
                test_c, truth = inject_corruption(fold_test, spec, scale=scale)

            aug_test = [augment_action(index, a, test_options) for a in test_c]
            results = [class_posterior(a, aug_params, decode=True) for a in aug_test]
            _, confusion = _accuracy_and_confusion(test_c, results, class_names)

            agg = per_ratio[ratio]
            agg["hits"] += int(np.trace(confusion))
            agg["total"] += len(test_c)
            agg["confusion"] += confusion

            agg["fractions"].extend(_alt_quality_segments(aug_test))

            for action, res in zip(aug_test, results):
                mask = truth[action.id]
                for t, (o, _) in enumerate(res.map_config.states):
                    if mask[t] and o != 0:
                        agg["replaced"] += 1
                        agg["correct"] += (action.segments[t].alternatives[o - 1]
                                           .source_label == action.label)

            if plain_params is not None:
                plain_results = [class_posterior(a, plain_params) for a in test_c]
                agg["plain_hits"] += sum(r.predicted_label == a.label
                                         for a, r in zip(test_c, plain_results))

        runtime.nns_calls += index.nns_calls

    rows = []
    for ratio in ratios:
        agg = per_ratio[ratio]
        if agg["fractions"]:
            mean_frac = float(np.mean([f for f, _ in agg["fractions"]]))
            any_frac = float(np.mean([a for _, a in agg["fractions"]]))
        else:
            mean_frac = any_frac = None
        rows.append(RatioRow(
            ratio=ratio,
            accuracy=agg["hits"] / agg["total"],
            plain_accuracy=(agg["plain_hits"] / agg["total"]
                            if config.include_plain_baseline else None),
            alt_quality_mean=mean_frac,
            alt_quality_any=any_frac,
            correct_replacement=(agg["correct"] / agg["replaced"]
                                 if agg["replaced"] else None)))

    headline_confusion = per_ratio[ratios[-1]]["confusion"]
    runtime.wall_seconds = time.perf_counter() - started
    report = ExperimentReport(task=config.task, seed=config.seed,
                              class_names=class_names, rows=rows,
                              confusion=headline_confusion, runtime=runtime)
    return report
