"""Threshold, KNN and community-restricted KNN (C2DC) classifiers over metric vectors."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .causal import METRICS, VectorTable
from .community import CommunityPartition, CoPostGraph, louvain
from .errors import DomainError, ParseError, ValidationError

PSM = "PSM"
NORMAL = "normal"
LABELS = (PSM, NORMAL)
_QUERY_CHUNK = 512


@dataclass(frozen=True)
class ThresholdRule:
    km: float = 0.7
    rel: float = 7.0
    nb: float = 0.7
    wnb: float = 0.7

    def __post_init__(self) -> None:
        for m in METRICS:
            if not np.isfinite(getattr(self, m)):
                raise DomainError(f"threshold for {m} must be finite")

    def threshold(self, metric: str) -> float:
        return getattr(self, base_metric(metric))


def base_metric(metric: str) -> str:
    name = metric[3:] if metric.startswith("xi_") else metric
    if name not in METRICS:
        raise DomainError(f"unknown metric {metric!r}; expected one of {METRICS} (optionally xi_-prefixed)")
    return name


@dataclass(frozen=True)
class Prediction:
    user: str
    predicted: str
    score: float
    provenance: str

    @property
    def is_psm(self) -> bool:
        return self.predicted == PSM


@dataclass
class Predictions:
    items: list[Prediction]
    errors: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def by_user(self) -> dict[str, Prediction]:
        return {p.user: p for p in self.items}

    def write_csv(self, fh) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user_id", "predicted", "score", "provenance"])
        for p in self.items:
            writer.writerow([p.user, p.predicted, repr(float(p.score)), p.provenance])

    @classmethod
    def read_csv(cls, path) -> "Predictions":
        items = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[:3] != ["user_id", "predicted", "score"]:
                raise ParseError(f"{path}: expected header user_id,predicted,score[,provenance]", 0)
            for line, row in enumerate(reader, start=1):
                if not row:
                    continue
                try:
                    score = float(row[2])
                except (IndexError, ValueError):
                    raise ParseError(f"{path}: bad row {row!r}", line) from None
                if row[1] not in LABELS or not 0.0 <= score <= 1.0:
                    raise ValidationError(f"{path}: bad label or score in {row!r}", line)
                items.append(Prediction(row[0], row[1], score, row[3] if len(row) > 3 else "external"))
        return cls(items)


# -- labels ---------------------------------------------------------------------


def read_labels(path) -> dict[str, str]:
    labels: dict[str, str] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["user_id", "label"]:
            raise ParseError(f"{path}: expected header user_id,label", 0)
        for line, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != 2 or row[1] not in LABELS:
                raise ValidationError(f"{path}: bad label row {row!r}", line)
            labels[row[0]] = row[1]
    return labels


def write_labels(labels: Mapping[str, str], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["user_id", "label"])
    for u in sorted(labels):
        writer.writerow([u, labels[u]])


@dataclass
class LabeledSet:
    """Training users sorted by id, with imputed features and PSM flags."""

    users: np.ndarray
    features: np.ndarray
    is_psm: np.ndarray

    def __post_init__(self) -> None:
        order = np.argsort(self.users, kind="stable")
        self.users = np.asarray(self.users).astype(str)[order]
        self.features = np.asarray(self.features, dtype=float)[order]
        self.is_psm = np.asarray(self.is_psm, dtype=bool)[order]

    def __len__(self) -> int:
        return len(self.users)

    @classmethod
    def from_table(cls, vectors: VectorTable, labels: Mapping[str, str], users: Iterable[str] | None = None) -> "LabeledSet":
        chosen = list(vectors.users.tolist() if users is None else users)
        chosen = [u for u in chosen if u in labels]
        rows = [vectors.row(u) for u in chosen]
        return cls(
            np.array(chosen, dtype=str),
            vectors.features()[rows].reshape(len(rows), 4),
            np.array([labels[u] == PSM for u in chosen], dtype=bool),
        )


# -- threshold ------------------------------------------------------------------


def threshold_classify(vectors: VectorTable, rule: ThresholdRule = ThresholdRule(), metric: str = "km") -> Predictions:
    """PSM iff the metric reaches the threshold; undefined values are normal with score 0."""
    thr = rule.threshold(metric)
    col = vectors.values[:, METRICS.index(base_metric(metric))]
    items = []
    for user, v in zip(vectors.users.tolist(), col.tolist()):
        if np.isnan(v):
            items.append(Prediction(user, NORMAL, 0.0, f"threshold({metric})"))
            continue
        psm = v >= thr
        if psm:
            score = 1.0
        elif thr > 0:
            score = min(max(v / thr, 0.0), 1.0)
        else:
            score = 0.0
        items.append(Prediction(user, PSM if psm else NORMAL, score, f"threshold({metric})"))
    return Predictions(items)


# -- KNN ------------------------------------------------------------------------


def _knn(queries: np.ndarray, train_x: np.ndarray, train_psm: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """PSM flags and PSM neighbor fractions. Training rows must be in id order."""
    kk = min(k, len(train_x))
    psm = np.empty(len(queries), dtype=bool)
    frac = np.empty(len(queries))
    for lo in range(0, len(queries), _QUERY_CHUNK):
        d = cdist(queries[lo: lo + _QUERY_CHUNK], train_x)
        # stable sort keeps id order among equal distances
        nearest = np.argsort(d, axis=1, kind="stable")[:, :kk]
        hits = train_psm[nearest].sum(axis=1)
        psm[lo: lo + len(d)] = 2 * hits >= kk
        frac[lo: lo + len(d)] = hits / kk
    return psm, frac


def knn_classify(queries: VectorTable, training: LabeledSet, k: int = 10) -> Predictions:
    if len(training) == 0:
        raise DomainError("KNN needs a nonempty training set")
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    psm, frac = _knn(queries.features(), training.features, training.is_psm, k)
    return Predictions(
        [
            Prediction(u, PSM if p else NORMAL, float(f), "knn")
            for u, p, f in zip(queries.users.tolist(), psm.tolist(), frac.tolist())
        ]
    )


def c2dc_classify(
    queries: VectorTable,
    training: LabeledSet,
    graph: CoPostGraph | None = None,
    k: int = 10,
    seed: int = 0,
    *,
    partition: CommunityPartition | None = None,
    weighted: bool = False,
) -> Predictions:
    """KNN restricted to labeled users of the query's own community.

    Louvain runs once (or ``partition`` is reused). A query whose community has
    no labeled users falls back to global KNN; a query outside the graph gets
    an error entry and the batch continues.
    """
    if len(training) == 0:
        raise DomainError("C2DC needs a nonempty training set")
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    if partition is None:
        if graph is None:
            raise DomainError("C2DC needs a co-posting graph or a precomputed partition")
        partition = louvain(graph, seed=seed, weighted=weighted)

    train_comm = np.array(
        [partition.community_of(u) if u in partition else -1 for u in training.users.tolist()], dtype=np.int64
    )
    q_users = queries.users.tolist()
    q_comm = np.array([partition.community_of(u) if u in partition else -1 for u in q_users], dtype=np.int64)
    x = queries.features()
    psm = np.zeros(len(q_users), dtype=bool)
    frac = np.zeros(len(q_users))
    provenance = [""] * len(q_users)
    errors: dict[str, str] = {}

    for c in np.unique(q_comm).tolist():
        rows = np.flatnonzero(q_comm == c)
        if c < 0:
            for r in rows.tolist():
                errors[q_users[r]] = "user is not a vertex of the co-posting graph"
            continue
        cand = np.flatnonzero(train_comm == c)
        if len(cand):
            p, f = _knn(x[rows], training.features[cand], training.is_psm[cand], k)
            tag = f"c2dc({c})"
        else:
            p, f = _knn(x[rows], training.features, training.is_psm, k)
            tag = f"c2dc-fallback({c})"
        psm[rows], frac[rows] = p, f
        for r in rows.tolist():
            provenance[r] = tag

    items = [
        Prediction(u, PSM if psm[r] else NORMAL, float(frac[r]), provenance[r])
        for r, u in enumerate(q_users)
        if u not in errors
    ]
    return Predictions(items, errors)


def classifier_names() -> Sequence[str]:
    return ("threshold", "knn", "c2dc")
