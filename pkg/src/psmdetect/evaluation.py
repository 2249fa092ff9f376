"""Scoring, time-prefix subsets, cross-validation and the timeliness protocol."""

from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata
from sklearn.model_selection import KFold, StratifiedKFold

from .actionlog import ActionLog
from .causal import CausalConfig, VectorTable, causal_vectors
from .classify import (
    NORMAL,
    PSM,
    LabeledSet,
    Prediction,
    Predictions,
    ThresholdRule,
    c2dc_classify,
    knn_classify,
    threshold_classify,
)
from .community import CommunityPartition, build_graph, louvain
from .decay import DAY, DecayConfig, decay_vectors
from .errors import DomainError, UndefinedError, ValidationError

CLASSIFIERS = ("threshold", "knn", "c2dc", "all_psm", "all_normal")


@dataclass(frozen=True)
class ClassifierSpec:
    kind: str = "c2dc"
    k: int = 10
    metric: str = "km"
    rule: ThresholdRule = ThresholdRule()
    seed: int = 0
    weighted: bool = False

    def __post_init__(self) -> None:
        if self.kind not in CLASSIFIERS:
            raise DomainError(f"unknown classifier {self.kind!r}; expected one of {CLASSIFIERS}")
        if self.k < 1:
            raise DomainError(f"k must be >= 1, got {self.k}")

    @property
    def needs_training(self) -> bool:
        return self.kind in ("knn", "c2dc")


@dataclass(frozen=True)
class FeatureSpec:
    """How per-user vectors are computed from a log over an interval."""

    kind: str = "decay"
    theta: int = 100
    phi: float = 0.5
    causal: CausalConfig = CausalConfig()
    decay: DecayConfig = DecayConfig()
    workers: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("decay", "causal"):
            raise DomainError(f"unknown feature kind {self.kind!r}")

    def vectors(self, log: ActionLog, interval: tuple[float, float], cache: dict | None = None) -> VectorTable:
        if self.kind == "causal":
            return causal_vectors(log, self.theta, self.phi, self.causal, interval)
        return decay_vectors(
            log, interval, theta=self.theta, phi=self.phi, causal_config=self.causal,
            config=self.decay, workers=self.workers, cache=cache,
        )


def run_classifier(
    spec: ClassifierSpec,
    queries: VectorTable,
    training: LabeledSet | None = None,
    *,
    partition: CommunityPartition | None = None,
    log: ActionLog | None = None,
) -> Predictions:
    if spec.kind == "threshold":
        return threshold_classify(queries, spec.rule, spec.metric)
    if spec.kind in ("all_psm", "all_normal"):
        label = PSM if spec.kind == "all_psm" else NORMAL
        score = 1.0 if label == PSM else 0.0
        return Predictions([Prediction(u, label, score, spec.kind) for u in queries.users.tolist()])
    if training is None:
        raise DomainError(f"{spec.kind} needs training data")
    if spec.kind == "knn":
        return knn_classify(queries, training, spec.k)
    if partition is None:
        if log is None:
            raise DomainError("c2dc needs a partition or the log to build one")
        partition = louvain(build_graph(log), seed=spec.seed, weighted=spec.weighted)
    return c2dc_classify(queries, training, k=spec.k, partition=partition)


# -- scoring ---------------------------------------------------------------------


@dataclass
class EvaluationReport:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f1: float
    auc: float | None
    positive_class: str = PSM
    folds: list[dict] = field(default_factory=list)
    fold_variance: dict[str, float] = field(default_factory=dict)
    class_ratio: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_json(self) -> dict:
        out = asdict(self)
        out["confusion"] = {k: out.pop(k) for k in ("tp", "fp", "tn", "fn")}
        out["n"] = self.n
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def metrics_from_counts(tp: int, fp: int, tn: int, fn: int, auc: float | None = None) -> EvaluationReport:
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return EvaluationReport(tp, fp, tn, fn, p, r, f1, auc)


def auc_rank_sum(scores: np.ndarray, positive: np.ndarray) -> float | None:
    """Mann-Whitney AUC with averaged ranks for ties; None when a class is missing."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def score(predictions: Predictions | Sequence[Prediction], truth: Mapping[str, str]) -> EvaluationReport:
    items = list(predictions)
    if not items:
        raise DomainError("cannot score an empty prediction set")
    missing = [p.user for p in items if p.user not in truth]
    if missing:
        raise ValidationError(f"{len(missing)} predicted users have no truth label, e.g. {missing[0]!r}", None)
    actual = np.array([truth[p.user] == PSM for p in items])
    pred = np.array([p.predicted == PSM for p in items])
    tp = int((actual & pred).sum())
    fp = int((~actual & pred).sum())
    tn = int((~actual & ~pred).sum())
    fn = int((actual & ~pred).sum())
    report = metrics_from_counts(tp, fp, tn, fn, auc_rank_sum(np.array([p.score for p in items]), actual))
    report.class_ratio = {PSM: int(actual.sum()), NORMAL: int((~actual).sum())}
    return report


# -- prefix subsets ---------------------------------------------------------------


def prefix_interval(log: ActionLog, fraction: float) -> tuple[float, float]:
    """``[t_min, t_min + fraction * span]`` for a fraction in (0, 1]."""
    if not 0 < fraction <= 1:
        raise DomainError(f"fraction must be in (0, 1], got {fraction}")
    span = log.time_span
    if span is None:
        raise UndefinedError("empty log has no timeline")
    t_min, t_max = span
    return t_min, t_min + fraction * (t_max - t_min)


def prefix_subsets(log: ActionLog, fractions: Sequence[float] = (10, 20, 30, 40, 50)) -> dict[float, ActionLog]:
    """Time-prefix restrictions keyed by percentage."""
    out = {}
    for pct in fractions:
        if not 0 < pct <= 100:
            raise DomainError(f"percentages must be in (0, 100], got {pct}")
        out[pct] = log.restrict(*prefix_interval(log, pct / 100))
    return out


# -- cross-validation ---------------------------------------------------------------


def _splits(y: np.ndarray, folds: int, seed: int, notes: list[str]):
    counts = np.bincount(y.astype(int), minlength=2)
    if counts.min() >= folds:
        return list(StratifiedKFold(folds, shuffle=True, random_state=seed).split(np.zeros(len(y)), y))
    notes.append(
        f"a class has fewer than {folds} members (counts {counts.tolist()}); using unstratified shuffled folds"
    )
    return list(KFold(folds, shuffle=True, random_state=seed).split(np.zeros(len(y))))


def cross_validate(
    vectors: VectorTable,
    labels: Mapping[str, str],
    spec: ClassifierSpec,
    folds: int = 10,
    seed: int = 0,
    *,
    partition: CommunityPartition | None = None,
    log: ActionLog | None = None,
    workers: int = 1,
) -> EvaluationReport:
    """Seeded (stratified when possible) k-fold CV; confusion counts pooled over folds."""
    users = [u for u in vectors.users.tolist() if u in labels]
    if len(users) < folds or folds < 2:
        raise DomainError(f"need at least {max(folds, 2)} labeled users and folds >= 2, got {len(users)} users")
    if spec.kind == "c2dc" and partition is None:
        if log is None:
            raise DomainError("c2dc cross-validation needs a partition or the log")
        partition = louvain(build_graph(log), seed=spec.seed, weighted=spec.weighted)
    table = vectors.subset(users)
    y = np.array([labels[u] == PSM for u in users])
    notes: list[str] = []
    splits = _splits(y, folds, seed, notes)

    def run(fold):
        train_idx, test_idx = fold
        fold_notes = []
        train_users = [users[i] for i in train_idx]
        training = LabeledSet.from_table(table, labels, train_users)
        if spec.needs_training and len(set(training.is_psm.tolist())) < 2:
            fold_notes.append("training fold lacks a class")
        preds = run_classifier(spec, table.subset([users[i] for i in test_idx]), training, partition=partition)
        return preds, fold_notes

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, splits))
    else:
        results = [run(f) for f in splits]

    all_items: list[Prediction] = []
    per_fold = []
    for k, (preds, fold_notes) in enumerate(results):
        for note in fold_notes:
            notes.append(f"fold {k}: {note}")
            warnings.warn(f"fold {k}: {note}", stacklevel=2)
        all_items.extend(preds.items)
        r = score(preds, labels)
        per_fold.append({"fold": k, "precision": r.precision, "recall": r.recall, "f1": r.f1, "auc": r.auc, "n": r.n})

    report = score(all_items, labels)
    report.folds = per_fold
    report.fold_variance = {
        m: float(np.var([f[m] for f in per_fold])) for m in ("precision", "recall", "f1")
    }
    report.warnings = notes
    return report


# -- timeliness -----------------------------------------------------------------------


@dataclass
class TimelinessReport:
    periods: list[tuple[float, float]]
    tp_per_period: list[int]
    fp_per_period: list[int]
    remaining: int
    first_period_psm: int
    remaining_per_period: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "periods": [{"start": _iso(a), "end": _iso(b), "tp": tp, "fp": fp, "remaining": rem}
                        for (a, b), tp, fp, rem in zip(self.periods, self.tp_per_period,
                                                       self.fp_per_period, self.remaining_per_period)],
            "first_period_psm": self.first_period_psm,
            "remaining": self.remaining,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    def write_csv(self, fh) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["period_start", "period_end", "tp", "fp"])
        for (a, b), tp, fp in zip(self.periods, self.tp_per_period, self.fp_per_period):
            writer.writerow([_iso(a), _iso(b), tp, fp])
        writer.writerow(["remaining", self.remaining])


def _iso(t: float) -> str:
    return datetime.fromtimestamp(t, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _stratified_half(users: list[str], labels: Mapping[str, str], fraction: float, rng: np.random.Generator):
    train, test = [], []
    for cls in (PSM, NORMAL):
        group = [u for u in users if labels[u] == cls]
        perm = rng.permutation(len(group))
        n_train = int(round(fraction * len(group)))
        train += [group[i] for i in perm[:n_train]]
        test += [group[i] for i in perm[n_train:]]
    return sorted(train), sorted(test)


def timeliness(
    log: ActionLog,
    truth: Mapping[str, str],
    spec: ClassifierSpec,
    features: FeatureSpec = FeatureSpec(),
    period_length: float = 10 * DAY,
    train_fraction: float = 0.5,
    horizon: float = 0.5,
    seed: int = 0,
) -> TimelinessReport:
    """Rolling re-evaluation of first-period users over consecutive periods.

    Period 1 users are split (seeded, stratified) into training and held-out
    halves. Each later period recomputes vectors on the cumulative prefix, adds
    newly active labeled users to training, and re-scores the held-out PSMs
    still missed. FP counts held-out normals flagged for the first time.
    """
    span = log.time_span
    if span is None:
        raise UndefinedError("empty log")
    t_min, t_max = span
    end = t_min + horizon * (t_max - t_min)
    periods = []
    start = t_min
    while start < end:
        periods.append((start, min(start + period_length, end)))
        start += period_length
    if len(periods) < 2:
        raise DomainError("the evaluated part of the log must span at least two periods")

    rng = np.random.default_rng(seed)
    times = log.time
    first_mask = (times >= periods[0][0]) & (times < periods[0][1])
    first_users = sorted(u for u in log.users[np.unique(log.user[first_mask])].tolist() if u in truth)
    train_users, test_users = _stratified_half(first_users, truth, train_fraction, rng)
    test_set = set(test_users)
    pending = [u for u in test_users if truth[u] == PSM]
    test_normals = [u for u in test_users if truth[u] == NORMAL]
    first_psm = len(pending)
    flagged_normals: set[str] = set()
    train = set(train_users)
    seen = set(first_users)
    cache: dict = {}

    tp_list, fp_list, rem_list = [], [], []
    for p, (a, b) in enumerate(periods):
        if p > 0:
            mask = (times >= a) & (times < b)
            new = sorted(set(log.users[np.unique(log.user[mask])].tolist()) - seen)
            seen.update(new)
            train.update(u for u in new if u in truth and u not in test_set)
        vectors = features.vectors(log, (t_min, b), cache)
        present = set(vectors.users.tolist())
        training = LabeledSet.from_table(vectors, truth, [u for u in sorted(train) if u in present])
        queries = [u for u in pending + test_normals if u in present and u not in flagged_normals]
        if queries and (len(training) or not spec.needs_training):
            partition = None
            if spec.kind == "c2dc":
                prefix = log.restrict(t_min, b)
                partition = louvain(build_graph(prefix), seed=spec.seed, weighted=spec.weighted)
            preds = run_classifier(spec, vectors.subset(queries), training, partition=partition).by_user()
        else:
            preds = {}
        caught = [u for u in pending if u in preds and preds[u].is_psm]
        new_fp = [u for u in test_normals if u not in flagged_normals and u in preds and preds[u].is_psm]
        flagged_normals.update(new_fp)
        pending = [u for u in pending if u not in set(caught)]
        tp_list.append(len(caught))
        fp_list.append(len(new_fp))
        rem_list.append(len(pending))
    return TimelinessReport(periods, tp_list, fp_list, len(pending), first_psm, rem_list)

