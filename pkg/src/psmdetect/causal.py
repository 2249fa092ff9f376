"""Prima facie causality metrics over an action log.

Everything is computed for all users at once by :class:`CausalModel`; the
per-user functions below are thin views over a model cached on the
:class:`~psmdetect.actionlog.CascadeSet`.

Undefined quantities (empty denominators, empty related-user sets) are NaN in
the batch arrays and raise :class:`~psmdetect.errors.UndefinedError` from the
scalar functions. They are never reported as 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .actionlog import ActionLog, CascadeSet
from .errors import DomainError, UndefinedError

METRICS = ("km", "rel", "nb", "wnb")

# bound on the number of (pair, message) probes materialised at once
_PROBE_CHUNK = 4_000_000


@dataclass(frozen=True)
class CausalConfig:
    rho_mode: str = "fixed"
    rho: float = 0.1
    alpha: float = 0.001

    def __post_init__(self) -> None:
        if self.rho_mode not in ("fixed", "computed"):
            raise DomainError(f"rho_mode must be 'fixed' or 'computed', got {self.rho_mode!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise DomainError(f"fixed rho must lie in [0, 1], got {self.rho}")
        if not self.alpha > 0:
            raise DomainError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class PairStats:
    p_ij: float | None
    p_neg_ij: float | None
    support_ij: int
    support_neg: int


def expand_ranges(starts: np.ndarray, ends: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flatten ``[starts[k], ends[k])`` ranges into ``(owner k, position)`` arrays."""
    lens = np.maximum(ends - starts, 0)
    total = int(lens.sum())
    owner = np.repeat(np.arange(len(starts)), lens)
    if total == 0:
        return owner, np.zeros(0, dtype=np.int64)
    offsets = np.arange(total) - np.repeat(np.cumsum(lens) - lens, lens)
    return owner, starts[owner] + offsets


def _group_mean(groups: np.ndarray, values: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(groups, minlength=n)
    sums = np.bincount(groups, weights=values, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return mean, counts


def relative_likelihood(p: np.ndarray, p_neg: np.ndarray, alpha: float) -> np.ndarray:
    """S(i, j) term-wise; NaN where the second branch would divide by zero."""
    out = np.full(len(p), np.nan)
    first = p > p_neg
    out[first] = p[first] / (p_neg[first] + alpha) - 1.0
    second = ~first & (p > 0)
    out[second] = 1.0 - p_neg[second] / p[second]
    return out


def neighborhood_mean(values: Sequence[float]) -> float:
    return float(np.sum(values) / len(values))


def weighted_neighborhood_mean(values: Sequence[float], weights: Sequence[float]) -> float:
    """Weighted mean; equal weights cancel, so the plain mean is returned exactly."""
    w = np.asarray(weights, dtype=float)
    if w.sum() == 0:
        raise UndefinedError("weights sum to zero")
    if np.all(w == w[0]):
        return neighborhood_mean(values)
    return float(np.sum(w * np.asarray(values, dtype=float)) / w.sum())


WeightFn = Callable[["CausalModel"], np.ndarray]


def related_set_size(model: "CausalModel") -> np.ndarray:
    return model.related_count.astype(float)


class CausalModel:
    """All prima facie quantities for one cascade set and configuration.

    Per-user arrays are indexed by the log's interned user index. Related pairs
    ``(pair_src[k], pair_dst[k])`` mean ``pair_dst[k]`` is in R(``pair_src[k]``);
    they are sorted by ``(src, dst)``.
    """

    def __init__(
        self,
        cascades: CascadeSet,
        config: CausalConfig = CausalConfig(),
        weights: WeightFn | None = None,
    ) -> None:
        self.cascades = cascades
        self.config = config
        log = cascades.log
        self.log = log
        n_users = log.n_users

        if config.rho_mode == "fixed":
            self.rho = config.rho
        else:
            self.rho = cascades.n_viral / cascades.n_present if cascades.n_present else math.nan

        key = cascades.is_key
        self.key_count = np.bincount(log.user[key], minlength=n_users)
        self.key_viral_count = np.bincount(log.user[key & cascades.action_viral], minlength=n_users)
        with np.errstate(invalid="ignore", divide="ignore"):
            self.user_rho = np.where(
                self.key_count > 0, self.key_viral_count / np.maximum(self.key_count, 1), np.nan
            )

        if math.isnan(self.rho):
            self.prima_facie = np.zeros(len(log), dtype=bool)
        else:
            self.prima_facie = key & cascades.action_viral & (self.user_rho[log.user] > self.rho)

        self._related_pairs()
        self._pair_counts()
        self._metrics(weights)

    # -- construction ------------------------------------------------------
    def _related_pairs(self) -> None:
        log = self.log
        idx = np.flatnonzero(self.prima_facie)
        n_users = log.n_users
        if len(idx) < 2:
            self.pair_src = np.zeros(0, dtype=np.int64)
            self.pair_dst = np.zeros(0, dtype=np.int64)
        else:
            msg = log.message[idx]
            _, rank = np.unique(log.time[idx], return_inverse=True)
            key = msg * (int(rank.max()) + 2) + rank
            first_later = np.searchsorted(key, key, side="right")
            group_end = np.searchsorted(msg, msg, side="right")
            owner, partner = expand_ranges(first_later, group_end)
            src = log.user[idx[owner]]
            dst = log.user[idx[partner]]
            code = np.unique(src * n_users + dst)
            self.pair_src = code // n_users
            self.pair_dst = code % n_users
        self.related_count = np.bincount(self.pair_src, minlength=n_users)

    def _pair_counts(self) -> None:
        """Count, per related pair, co-posted messages where src strictly precedes dst."""
        log = self.log
        a, b = self.pair_src, self.pair_dst
        n_pairs = len(a)
        self.n_prec = np.zeros(n_pairs, dtype=np.int64)
        self.v_prec = np.zeros(n_pairs, dtype=np.int64)
        if n_pairs:
            deg = log.user_degree
            pivot_is_a = deg[a] <= deg[b]
            pivot = np.where(pivot_is_a, a, b)
            other = np.where(pivot_is_a, b, a)
            n_msg = log.n_messages
            by_user_msg = np.lexsort((log.message, log.user))
            ukey = log.user[by_user_msg] * n_msg + log.message[by_user_msg]
            viral = self.cascades.action_viral
            cum = np.cumsum(deg[pivot])
            cuts = np.searchsorted(cum, np.arange(_PROBE_CHUNK, cum[-1], _PROBE_CHUNK), side="right")
            edges = np.unique(np.concatenate([[0], cuts, [n_pairs]]))
            for lo, hi in zip(edges[:-1].tolist(), edges[1:].tolist()):
                sl = slice(lo, hi)
                p = pivot[sl]
                owner, pos = expand_ranges(log.user_ptr[p], log.user_ptr[p + 1])
                rows = log.user_perm[pos]
                code = other[sl][owner] * n_msg + log.message[rows]
                found_at = np.searchsorted(ukey, code)
                found_at = np.minimum(found_at, len(ukey) - 1)
                found = ukey[found_at] == code
                t_pivot = log.time[rows]
                t_other = log.time[by_user_msg[found_at]]
                src_first = np.where(pivot_is_a[sl][owner], t_pivot < t_other, t_other < t_pivot)
                prec = found & src_first
                self.n_prec[sl] = np.bincount(owner, weights=prec, minlength=hi - lo).astype(np.int64)
                self.v_prec[sl] = np.bincount(
                    owner, weights=prec & viral[rows], minlength=hi - lo
                ).astype(np.int64)
        viral_deg = np.bincount(log.user[self.cascades.action_viral], minlength=log.n_users)
        self.n_neg = log.user_degree[b] - self.n_prec
        self.v_neg = viral_deg[b] - self.v_prec

    def _metrics(self, weights: WeightFn | None) -> None:
        n_users = self.log.n_users
        src, dst = self.pair_src, self.pair_dst
        with np.errstate(invalid="ignore", divide="ignore"):
            p = self.v_prec / np.maximum(self.n_prec, 1)
            p_neg = np.where(self.n_neg > 0, self.v_neg / np.maximum(self.n_neg, 1), np.nan)
        self.p = p
        self.p_neg = p_neg
        usable = self.n_neg > 0

        self.km, km_terms = _group_mean(src[usable], (p - p_neg)[usable], n_users)
        s_terms = relative_likelihood(p[usable], p_neg[usable], self.config.alpha)
        s_ok = ~np.isnan(s_terms)
        self.rel, rel_terms = _group_mean(src[usable][s_ok], s_terms[s_ok], n_users)
        self.km_skipped = self.related_count - km_terms
        self.rel_skipped = self.related_count - rel_terms

        self.weights = (weights or related_set_size)(self)
        has_km = ~np.isnan(self.km[src])
        q_src, q_dst = src[has_km], dst[has_km]
        self.nb, self.q_count = _group_mean(q_dst, self.km[q_src], n_users)
        w = self.weights[q_src]
        w_sum = np.bincount(q_dst, weights=w, minlength=n_users)
        wx_sum = np.bincount(q_dst, weights=w * self.km[q_src], minlength=n_users)
        w_min = np.full(n_users, np.inf)
        w_max = np.full(n_users, -np.inf)
        np.minimum.at(w_min, q_dst, w)
        np.maximum.at(w_max, q_dst, w)
        with np.errstate(invalid="ignore", divide="ignore"):
            wnb = np.where(w_sum != 0, wx_sum / np.where(w_sum != 0, w_sum, 1), np.nan)
        # equal weights cancel; reuse the unweighted mean so the two agree exactly
        same = (self.q_count > 0) & (w_min == w_max) & (w_sum != 0)
        wnb[same] = self.nb[same]
        wnb[self.q_count == 0] = np.nan
        self.wnb = wnb

    # -- queries -----------------------------------------------------------
    def matrix(self) -> np.ndarray:
        return np.column_stack([self.km, self.rel, self.nb, self.wnb])

    def related(self, u: int) -> np.ndarray:
        lo, hi = np.searchsorted(self.pair_src, [u, u + 1])
        return self.pair_dst[lo:hi]

    def predecessors(self, u: int) -> np.ndarray:
        return np.sort(self.pair_src[self.pair_dst == u])


def causal_model(cascades: CascadeSet, config: CausalConfig = CausalConfig()) -> CausalModel:
    """Model for ``cascades`` under ``config``, cached on the cascade set."""
    cache = cascades.__dict__.setdefault("_causal_models", {})
    if config not in cache:
        cache[config] = CausalModel(cascades, config)
    return cache[config]


def _names(log: ActionLog, idx) -> set[str]:
    return {str(log.users[i]) for i in idx}


# -- scalar API --------------------------------------------------------------


def prior_rho(cascades: CascadeSet, config: CausalConfig = CausalConfig()) -> float:
    if config.rho_mode == "fixed":
        return config.rho
    if cascades.n_present == 0:
        raise UndefinedError("prior rho is undefined on an empty message set")
    return cascades.n_viral / cascades.n_present


def user_rho(user: str, cascades: CascadeSet) -> float:
    log = cascades.log
    u = log.user_index(user)
    rows = log.user == u
    if not rows.any():
        raise DomainError(f"user {user!r} has no actions in this log")
    key = cascades.is_key[rows]
    if not key.any():
        raise UndefinedError(f"user {user!r} is never a key user")
    return float(cascades.action_viral[rows][key].sum() / key.sum())


def prima_facie_users(message: str, cascades: CascadeSet, config: CausalConfig = CausalConfig()) -> set[str]:
    log = cascades.log
    m = log.message_index(message)
    lo, hi = log.msg_ptr[m], log.msg_ptr[m + 1]
    if lo == hi:
        raise DomainError(f"message {message!r} has no actions in this log")
    pf = causal_model(cascades, config).prima_facie[lo:hi]
    return _names(log, log.user[lo:hi][pf])


def related_users(user: str, cascades: CascadeSet, config: CausalConfig = CausalConfig()) -> set[str]:
    log = cascades.log
    return _names(log, causal_model(cascades, config).related(log.user_index(user)))


def pair_stats(i: str, j: str, cascades: CascadeSet) -> PairStats:
    """Conditional virality of j's messages with and without i strictly before j."""
    if i == j:
        raise DomainError("pair_stats needs two distinct users")
    log = cascades.log
    ui, uj = log.user_index(i), log.user_index(j)

    def times_of(u: int) -> dict[int, int]:
        rows = log.user_perm[log.user_ptr[u]: log.user_ptr[u + 1]]
        return dict(zip(log.message[rows].tolist(), log.time[rows].tolist()))

    ti, tj = times_of(ui), times_of(uj)
    viral = cascades.viral_mask
    both = [m for m, t in tj.items() if m in ti and ti[m] < t]
    rest = [m for m in tj if not (m in ti and ti[m] < tj[m])]
    n, n_neg = len(both), len(rest)
    return PairStats(
        sum(bool(viral[m]) for m in both) / n if n else None,
        sum(bool(viral[m]) for m in rest) / n_neg if n_neg else None,
        n,
        n_neg,
    )


def _metric(user: str, cascades: CascadeSet, config: CausalConfig, name: str) -> float:
    model = causal_model(cascades, config)
    value = getattr(model, name)[cascades.log.user_index(user)]
    if np.isnan(value):
        raise UndefinedError(f"{name} is undefined for user {user!r}")
    return float(value)


def epsilon_km(user: str, cascades: CascadeSet, config: CausalConfig = CausalConfig()) -> float:
    return _metric(user, cascades, config, "km")


def epsilon_rel(user: str, cascades: CascadeSet, config: CausalConfig = CausalConfig()) -> float:
    return _metric(user, cascades, config, "rel")


def epsilon_nb(user: str, cascades: CascadeSet, config: CausalConfig = CausalConfig()) -> float:
    return _metric(user, cascades, config, "nb")


def epsilon_wnb(
    user: str,
    cascades: CascadeSet,
    config: CausalConfig = CausalConfig(),
    weights: Mapping[str, float] | WeightFn | None = None,
) -> float:
    if weights is None:
        return _metric(user, cascades, config, "wnb")
    model = causal_model(cascades, config)
    log = cascades.log
    q = [i for i in model.predecessors(log.user_index(user)) if not np.isnan(model.km[i])]
    if not q:
        raise UndefinedError(f"wnb is undefined for user {user!r}: Q(j) is empty")
    if callable(weights):
        w = np.asarray(weights(model), dtype=float)[q]
    else:
        w = [float(weights[str(log.users[i])]) for i in q]
    return weighted_neighborhood_mean(model.km[q], w)


# -- vectors -------------------------------------------------------------------


@dataclass(frozen=True)
class CausalityVector:
    user: str
    interval: tuple[float, float]
    km: float | None
    rel: float | None
    nb: float | None
    wnb: float | None

    @property
    def defined_mask(self) -> tuple[bool, bool, bool, bool]:
        return tuple(v is not None for v in (self.km, self.rel, self.nb, self.wnb))

    @property
    def fully_undefined(self) -> bool:
        return not any(self.defined_mask)

    def values(self) -> tuple[float | None, ...]:
        return (self.km, self.rel, self.nb, self.wnb)

    def features(self) -> np.ndarray:
        """Undefined components imputed as 0."""
        return np.array([0.0 if v is None else v for v in self.values()])


@dataclass
class VectorTable:
    """Per-user metric vectors; NaN marks an undefined component."""

    users: np.ndarray
    values: np.ndarray
    interval: tuple[float, float]
    prefix: str = ""
    undefined_windows: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.users = np.asarray(self.users).astype(str)
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.users), 4)
        self._index = {u: k for k, u in enumerate(self.users.tolist())}

    def __len__(self) -> int:
        return len(self.users)

    @property
    def columns(self) -> list[str]:
        return [self.prefix + m for m in METRICS]

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def features(self) -> np.ndarray:
        return np.nan_to_num(self.values, nan=0.0)

    def row(self, user: str) -> int:
        return self._index[user]

    def vector(self, user: str) -> CausalityVector:
        vals = self.values[self._index[user]]
        return CausalityVector(
            user, self.interval, *(None if np.isnan(v) else float(v) for v in vals)
        )

    def subset(self, users: Sequence[str]) -> "VectorTable":
        rows = [self._index[u] for u in users]
        uw = None if self.undefined_windows is None else self.undefined_windows[rows]
        return VectorTable(self.users[rows], self.values[rows], self.interval, self.prefix, uw)

    def write_csv(self, fh) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        cols = self.columns
        writer.writerow(["user_id", *cols, *(f"{c}_defined" for c in cols)])
        for user, vals in zip(self.users.tolist(), self.values):
            writer.writerow(
                [user, *("" if np.isnan(v) else repr(float(v)) for v in vals), *(int(not np.isnan(v)) for v in vals)]
            )

    def to_json(self) -> dict:
        return {
            "interval": list(self.interval),
            "metrics": self.columns,
            "vectors": [
                {
                    "user_id": user,
                    **{c: (None if np.isnan(v) else float(v)) for c, v in zip(self.columns, vals)},
                    "defined_mask": [bool(not np.isnan(v)) for v in vals],
                }
                for user, vals in zip(self.users.tolist(), self.values)
            ],
        }

    @classmethod
    def read_csv(cls, path) -> "VectorTable":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            prefix = header[1][: -len(METRICS[0])]
            users, values = [], []
            for row in reader:
                users.append(row[0])
                values.append([float(v) if v != "" else np.nan for v in row[1:5]])
        return cls(np.array(users, dtype=str), np.array(values, dtype=float).reshape(-1, 4), (math.nan, math.nan), prefix)


def causal_vectors(
    log: ActionLog,
    theta: int = 100,
    phi: float = 0.5,
    config: CausalConfig = CausalConfig(),
    interval: tuple[float, float] | None = None,
) -> VectorTable:
    """Causality vectors for every user active in ``log`` (restricted to ``interval``)."""
    if interval is not None:
        log = log.restrict(*interval)
    else:
        span = log.time_span
        interval = span if span else (math.nan, math.nan)
    model = causal_model(CascadeSet(log, theta, phi), config)
    users = log.active_users
    return VectorTable(log.users[users], model.matrix()[users], tuple(interval))


def causality_vector(
    user: str,
    interval: tuple[float, float],
    cascades: CascadeSet,
    config: CausalConfig = CausalConfig(),
) -> CausalityVector:
    sub = cascades.log.restrict(*interval)
    local = cascades if sub is cascades.log else CascadeSet(sub, cascades.theta, cascades.phi)
    model = causal_model(local, config)
    vals = model.matrix()[sub.user_index(user)]
    return CausalityVector(user, tuple(interval), *(None if np.isnan(v) else float(v) for v in vals))
