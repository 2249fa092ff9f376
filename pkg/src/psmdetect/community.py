"""Co-posting graph, Louvain communities and the community cohesion t-test."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import sparse, stats
from scipy.spatial.distance import pdist

from .actionlog import ActionLog
from .causal import VectorTable
from .errors import DomainError, UndefinedError


@dataclass
class CoPostGraph:
    """Undirected graph over the users active in a log.

    Vertex ``v`` is user ``users[v]``. Adjacency is CSR, symmetric, with no
    self-loops; ``weights`` holds the number of messages both users posted.
    """

    users: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        self._index = {u: v for v, u in enumerate(self.users.tolist())}

    @property
    def n_vertices(self) -> int:
        return len(self.users)

    @property
    def n_edges(self) -> int:
        return len(self.indices) // 2

    def vertex(self, user: str) -> int:
        try:
            return self._index[user]
        except KeyError:
            raise DomainError(f"user {user!r} is not a vertex of the graph") from None

    def __contains__(self, user: str) -> bool:
        return user in self._index

    def neighbors(self, user: str) -> list[str]:
        v = self.vertex(user)
        return [str(self.users[u]) for u in self.indices[self.indptr[v]: self.indptr[v + 1]]]

    def weight(self, a: str, b: str) -> int:
        va, vb = self.vertex(a), self.vertex(b)
        row = self.indices[self.indptr[va]: self.indptr[va + 1]]
        k = np.searchsorted(row, vb)
        if k < len(row) and row[k] == vb:
            return int(self.weights[self.indptr[va] + k])
        return 0

    def edges(self):
        """``(u, v, weight)`` with ``u < v`` by vertex index."""
        rows = np.repeat(np.arange(self.n_vertices), np.diff(self.indptr))
        upper = rows < self.indices
        for u, v, w in zip(rows[upper].tolist(), self.indices[upper].tolist(), self.weights[upper].tolist()):
            yield str(self.users[u]), str(self.users[v]), int(w)

    def write_edgelist(self, fh) -> None:
        for u, v, w in self.edges():
            fh.write(f"{u} {v} {w}\n")

    def adjacency(self, weighted: bool = False) -> sparse.csr_matrix:
        data = self.weights.astype(float) if weighted else np.ones(len(self.indices))
        n = self.n_vertices
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=(n, n))


def build_graph(log: ActionLog) -> CoPostGraph:
    """Connect every pair of distinct users who posted a common message."""
    active = log.active_users
    remap = np.full(log.n_users, -1, dtype=np.int64)
    remap[active] = np.arange(len(active))
    n = len(active)
    incidence = sparse.csr_matrix(
        (np.ones(len(log), dtype=np.int64), (remap[log.user], log.message)),
        shape=(n, log.n_messages),
    )
    co = (incidence @ incidence.T).tocsr()
    co.setdiag(0)
    co.eliminate_zeros()
    co.sort_indices()
    return CoPostGraph(
        log.users[active],
        co.indptr.astype(np.int64),
        co.indices.astype(np.int64),
        co.data.astype(np.int64),
    )


# -- Louvain -------------------------------------------------------------------


@njit(cache=True)
def _modularity(indptr, indices, weights, comm, n_comm, m2, resolution):
    if m2 == 0:
        return 0.0
    inside = np.zeros(n_comm)
    tot = np.zeros(n_comm)
    for i in range(len(indptr) - 1):
        ci = comm[i]
        for p in range(indptr[i], indptr[i + 1]):
            w = weights[p]
            tot[ci] += w
            if comm[indices[p]] == ci:
                inside[ci] += w
    q = 0.0
    for c in range(n_comm):
        q += inside[c] / m2 - resolution * (tot[c] / m2) ** 2
    return q


@njit(cache=True)
def _local_moving(indptr, indices, weights, order, comm, resolution, max_passes):
    """Greedy node moves until a pass changes nothing. Returns the number of moves."""
    n = len(indptr) - 1
    k = np.zeros(n)
    for i in range(n):
        for p in range(indptr[i], indptr[i + 1]):
            k[i] += weights[p]
    m2 = k.sum()
    tot = np.zeros(n)
    for i in range(n):
        tot[comm[i]] += k[i]
    neigh_w = np.zeros(n)
    touched = np.empty(n, dtype=np.int64)
    mark = np.zeros(n, dtype=np.bool_)
    total_moves = 0
    for _ in range(max_passes):
        moves = 0
        for idx in range(n):
            i = order[idx]
            ci = comm[i]
            n_touched = 0
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                if j == i:
                    continue
                c = comm[j]
                if not mark[c]:
                    mark[c] = True
                    touched[n_touched] = c
                    n_touched += 1
                neigh_w[c] += weights[p]
            tot[ci] -= k[i]
            best = ci
            best_gain = neigh_w[ci] - resolution * tot[ci] * k[i] / m2
            for t in range(n_touched):
                c = touched[t]
                gain = neigh_w[c] - resolution * tot[c] * k[i] / m2
                if gain > best_gain or (gain == best_gain and c < best):
                    best = c
                    best_gain = gain
            tot[best] += k[i]
            comm[i] = best
            if best != ci:
                moves += 1
            for t in range(n_touched):
                c = touched[t]
                neigh_w[c] = 0.0
                mark[c] = False
        total_moves += moves
        if moves == 0:
            break
    return total_moves


def _dense_labels(comm: np.ndarray) -> tuple[np.ndarray, int]:
    """Relabel to 0..k-1 in order of each community's smallest member."""
    _, first, inverse = np.unique(comm, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inverse], len(first)


@dataclass
class CommunityPartition:
    users: np.ndarray
    assignment: np.ndarray
    k: int
    modularity: float
    level_modularity: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._index = {u: v for v, u in enumerate(self.users.tolist())}

    def community_of(self, user: str) -> int:
        try:
            return int(self.assignment[self._index[user]])
        except KeyError:
            raise DomainError(f"user {user!r} is not in the partition") from None

    def __contains__(self, user: str) -> bool:
        return user in self._index

    def members(self) -> list[np.ndarray]:
        order = np.argsort(self.assignment, kind="stable")
        bounds = np.searchsorted(self.assignment[order], np.arange(self.k + 1))
        return [order[bounds[c]: bounds[c + 1]] for c in range(self.k)]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)

    def write_csv(self, fh) -> None:
        fh.write("user_id,community_id\n")
        for u, c in zip(self.users.tolist(), self.assignment.tolist()):
            fh.write(f"{u},{c}\n")

    @classmethod
    def read_csv(cls, path) -> "CommunityPartition":
        users, comm = [], []
        with open(path) as fh:
            next(fh)
            for line in fh:
                if line.strip():
                    u, c = line.rstrip("\n").rsplit(",", 1)
                    users.append(u)
                    comm.append(int(c))
        assignment, k = _dense_labels(np.array(comm, dtype=np.int64))
        return cls(np.array(users, dtype=str), assignment, k, math.nan)


def modularity(graph: CoPostGraph, assignment: np.ndarray, *, weighted: bool = False, resolution: float = 1.0) -> float:
    w = graph.weights.astype(float) if weighted else np.ones(len(graph.indices))
    labels, k = _dense_labels(np.asarray(assignment, dtype=np.int64))
    return float(_modularity(graph.indptr, graph.indices, w, labels, k, w.sum(), resolution))


def louvain(
    graph: CoPostGraph,
    seed: int = 0,
    resolution: float = 1.0,
    *,
    weighted: bool = False,
    max_passes: int = 100,
) -> CommunityPartition:
    """Two-phase Louvain: local moving, then aggregation, until nothing moves.

    Node visiting order is a seeded permutation per level; among equal-gain
    moves the lowest community id wins.
    """
    n = graph.n_vertices
    if n == 0:
        return CommunityPartition(graph.users, np.zeros(0, dtype=np.int64), 0, 0.0)
    rng = np.random.default_rng(seed)
    indptr, indices = graph.indptr, graph.indices
    weights = graph.weights.astype(float) if weighted else np.ones(len(indices))
    m2 = weights.sum()
    membership = np.arange(n, dtype=np.int64)
    levels: list[float] = []
    if m2 == 0:
        return CommunityPartition(graph.users, membership, n, 0.0, [0.0])

    level_indptr, level_indices, level_weights = indptr, indices, weights
    while True:
        size = len(level_indptr) - 1
        comm = np.arange(size, dtype=np.int64)
        order = rng.permutation(size).astype(np.int64)
        moves = _local_moving(level_indptr, level_indices, level_weights, order, comm, resolution, max_passes)
        comm, k = _dense_labels(comm)
        membership = comm[membership]
        levels.append(float(_modularity(indptr, indices, weights, membership, k, m2, resolution)))
        if moves == 0 or k == size:
            break
        rows = np.repeat(np.arange(size), np.diff(level_indptr))
        agg = sparse.csr_matrix(
            (level_weights, (comm[rows], comm[level_indices])), shape=(k, k)
        )
        agg.sum_duplicates()
        agg.sort_indices()
        level_indptr = agg.indptr.astype(np.int64)
        level_indices = agg.indices.astype(np.int64)
        level_weights = agg.data.astype(float)

    membership, k = _dense_labels(membership)
    q = float(_modularity(indptr, indices, weights, membership, k, m2, resolution))
    return CommunityPartition(graph.users, membership, k, q, levels)


# -- cohesion test ---------------------------------------------------------------


@dataclass
class CohesionTestResult:
    v_a: np.ndarray
    v_b: np.ndarray
    t_statistic: float
    df: float
    p_value: float
    reject_at: float

    @property
    def rejected(self) -> bool:
        return self.p_value < self.reject_at

    def to_json(self) -> dict:
        return {
            "n_within": int(len(self.v_a)),
            "n_across": int(len(self.v_b)),
            "mean_within": float(np.mean(self.v_a)),
            "mean_across": float(np.mean(self.v_b)),
            "t_statistic": self.t_statistic,
            "df": self.df,
            "p_value": self.p_value,
            "reject_at": self.reject_at,
            "rejected": self.rejected,
            "alternative": "mean(within) < mean(across)",
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def welch_less(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    """One-sided Welch test of H1: mean(a) < mean(b). Returns ``(t, df, p)``.

    Zero pooled variance is resolved by the sign of the mean difference:
    equal means give ``t = 0, p = 0.5``; otherwise ``t = -/+inf`` and ``p = 0/1``.
    """
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise UndefinedError("Welch test needs at least two observations per sample")
    ma, mb = float(np.mean(a)), float(np.mean(b))
    sa, sb = float(np.var(a, ddof=1)) / na, float(np.var(b, ddof=1)) / nb
    se2 = sa + sb
    diff = ma - mb
    if se2 == 0:
        if diff == 0:
            return 0.0, float(na + nb - 2), 0.5
        return (-math.inf, float(na + nb - 2), 0.0) if diff < 0 else (math.inf, float(na + nb - 2), 1.0)
    t = diff / math.sqrt(se2)
    df = se2**2 / (sa**2 / (na - 1) + sb**2 / (nb - 1))
    return t, df, float(stats.t.cdf(t, df))


def cohesion_test(
    partition: CommunityPartition,
    vectors: VectorTable,
    seed: int = 0,
    reject_at: float = 0.01,
) -> CohesionTestResult:
    """Within-community vs cross-community distances between causality vectors.

    ``v_a`` holds the distance of every within-community pair. ``v_b`` holds,
    for each user, the distance to one user drawn (seeded) from the other
    communities. Undefined vector components count as 0.
    """
    if partition.k < 2:
        raise UndefinedError("cohesion test needs at least two communities")
    missing = [u for u in partition.users.tolist() if u not in vectors._index]
    if missing:
        raise DomainError(f"{len(missing)} partition users have no vector, e.g. {missing[0]!r}")
    x = vectors.features()[[vectors.row(u) for u in partition.users.tolist()]]
    groups = partition.members()
    v_a = np.concatenate([pdist(x[g]) for g in groups if len(g) >= 2] or [np.zeros(0)])

    rng = np.random.default_rng(seed)
    order = np.concatenate(groups)
    sizes = np.array([len(g) for g in groups])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    n = len(order)
    v_b = np.empty(n)
    pos = 0
    for g, s, start in zip(groups, sizes, starts):
        r = rng.integers(0, n - s, size=s)
        r = np.where(r < start, r, r + s)
        v_b[pos: pos + s] = np.linalg.norm(x[g] - x[order[r]], axis=1)
        pos += s
    t, df, p = welch_less(v_a, v_b)
    return CohesionTestResult(v_a, v_b, t, df, p, reject_at)
