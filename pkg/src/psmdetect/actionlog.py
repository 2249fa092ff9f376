"""Action log ingestion, indexing, slicing and cascade extraction.

An action log is a set of ``(user, message, time)`` posting events. Users and
messages are interned to dense indices in sorted-id order, so every index
built here is independent of input row order.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from functools import cached_property
from typing import IO, Iterable, Sequence

import numpy as np

from .errors import DomainError, EmptyLogError, ParseError, ValidationError

FIELDS = ("user_id", "message_id", "timestamp")

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


@dataclass(frozen=True)
class Action:
    user: str
    message: str
    time: int


def parse_timestamp(raw: str) -> int:
    """Integer epoch seconds or an RFC 3339 string, returned as int seconds."""
    raw = raw.strip()
    try:
        return int(raw)
    except ValueError:
        pass
    text = raw[:-1] + "+00:00" if raw.endswith(("Z", "z")) else raw
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return (dt - _EPOCH) // timedelta(seconds=1)


class ActionLog:
    """Immutable, indexed action log.

    Actions are stored in canonical message order: sorted by
    ``(message, time, user)`` over the interned indices. ``user_ptr``/``user_perm``
    give the same actions grouped by user, sorted by ``(time, message)``.
    The user and message vocabularies are shared by every restriction of a log,
    so per-user arrays computed on a slice line up with the parent.
    """

    def __init__(
        self,
        users: np.ndarray,
        messages: np.ndarray,
        user_idx: np.ndarray,
        msg_idx: np.ndarray,
        times: np.ndarray,
        *,
        _sorted: bool = False,
    ) -> None:
        user_idx = np.asarray(user_idx, dtype=np.int64)
        msg_idx = np.asarray(msg_idx, dtype=np.int64)
        times = np.asarray(times, dtype=np.int64)
        if not _sorted:
            order = np.lexsort((user_idx, times, msg_idx))
            user_idx, msg_idx, times = user_idx[order], msg_idx[order], times[order]
        self.users = users
        self.messages = messages
        self.user = user_idx
        self.message = msg_idx
        self.time = times
        for arr in (self.user, self.message, self.time):
            arr.setflags(write=False)
        self.msg_ptr = np.searchsorted(msg_idx, np.arange(len(messages) + 1)).astype(np.int64)
        self.user_perm = np.lexsort((msg_idx, times, user_idx))
        self.user_ptr = np.searchsorted(
            user_idx[self.user_perm], np.arange(len(users) + 1)
        ).astype(np.int64)

    # -- sizes -------------------------------------------------------------
    def __len__(self) -> int:
        return len(self.time)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_messages(self) -> int:
        return len(self.messages)

    @property
    def time_span(self) -> tuple[int, int] | None:
        if len(self.time) == 0:
            return None
        return int(self.time.min()), int(self.time.max())

    @cached_property
    def user_degree(self) -> np.ndarray:
        return np.diff(self.user_ptr)

    @cached_property
    def message_size(self) -> np.ndarray:
        return np.diff(self.msg_ptr)

    @cached_property
    def active_users(self) -> np.ndarray:
        return np.flatnonzero(self.user_degree > 0)

    @cached_property
    def _user_lookup(self) -> dict:
        return {u: i for i, u in enumerate(self.users.tolist())}

    @cached_property
    def _message_lookup(self) -> dict:
        return {m: i for i, m in enumerate(self.messages.tolist())}

    def user_index(self, user: str) -> int:
        try:
            return self._user_lookup[user]
        except KeyError:
            raise DomainError(f"unknown user {user!r}") from None

    def message_index(self, message: str) -> int:
        try:
            return self._message_lookup[message]
        except KeyError:
            raise DomainError(f"unknown message {message!r}") from None

    # -- projections -------------------------------------------------------
    def actions(self) -> list[Action]:
        users, messages = self.users, self.messages
        return [
            Action(str(users[u]), str(messages[m]), int(t))
            for u, m, t in zip(self.user.tolist(), self.message.tolist(), self.time.tolist())
        ]

    def user_actions(self, user: str) -> list[Action]:
        u = self.user_index(user)
        rows = self.user_perm[self.user_ptr[u]: self.user_ptr[u + 1]]
        return [
            Action(str(self.users[u]), str(self.messages[self.message[r]]), int(self.time[r]))
            for r in rows
        ]

    def message_actions(self, message: str) -> list[Action]:
        m = self.message_index(message)
        lo, hi = self.msg_ptr[m], self.msg_ptr[m + 1]
        return [
            Action(str(self.users[self.user[r]]), str(self.messages[m]), int(self.time[r]))
            for r in range(lo, hi)
        ]

    def restrict(self, t_a: float, t_b: float) -> "ActionLog":
        """Actions with ``t_a <= time <= t_b``; vocabularies are kept."""
        if t_a > t_b:
            raise DomainError(f"inverted interval [{t_a}, {t_b}]")
        keep = (self.time >= t_a) & (self.time <= t_b)
        if keep.all():
            return self
        return ActionLog(
            self.users, self.messages, self.user[keep], self.message[keep], self.time[keep],
            _sorted=True,
        )

    def shifted(self, offset: int) -> "ActionLog":
        return ActionLog(
            self.users, self.messages, self.user, self.message, self.time + offset, _sorted=True
        )

    def to_rows(self) -> list[tuple[str, str, int]]:
        return [(a.user, a.message, a.time) for a in self.actions()]

    def write_csv(self, fh: IO[str]) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FIELDS)
        writer.writerows(self.to_rows())

    def write_jsonl(self, fh: IO[str]) -> None:
        for user, message, t in self.to_rows():
            fh.write(json.dumps({"user_id": user, "message_id": message, "timestamp": t}) + "\n")

    def same_actions(self, other: "ActionLog") -> bool:
        return self.to_rows() == other.to_rows()


def from_rows(
    rows: Iterable[tuple[object, object, int]],
    *,
    dedup: bool = True,
    allow_empty: bool = False,
) -> ActionLog:
    """Build an ActionLog from ``(user, message, time)`` triples.

    With ``dedup`` the earliest action per (user, message) survives; without it,
    a repeated pair is a validation error.
    """
    users, messages, times = [], [], []
    for n, (u, m, t) in enumerate(rows, start=1):
        t = int(t)
        if t < 0:
            raise ValidationError(f"line {n}: negative timestamp {t}", line=n)
        users.append(str(u))
        messages.append(str(m))
        times.append(t)
    if not times:
        if not allow_empty:
            raise EmptyLogError("action log is empty")
        return ActionLog(np.array([], dtype=str), np.array([], dtype=str), [], [], [])
    user_vocab, user_idx = np.unique(np.array(users), return_inverse=True)
    msg_vocab, msg_idx = np.unique(np.array(messages), return_inverse=True)
    times_arr = np.array(times, dtype=np.int64)
    user_idx = user_idx.astype(np.int64)
    msg_idx = msg_idx.astype(np.int64)

    order = np.lexsort((times_arr, msg_idx, user_idx))
    pair = user_idx[order] * len(msg_vocab) + msg_idx[order]
    first = np.ones(len(pair), dtype=bool)
    first[1:] = pair[1:] != pair[:-1]
    if not first.all():
        if not dedup:
            dup = order[np.flatnonzero(~first)[0]]
            raise ValidationError(
                f"line {dup + 1}: duplicate action for user {users[dup]!r} "
                f"on message {messages[dup]!r}",
                line=int(dup) + 1,
            )
        keep = order[first]
        user_idx, msg_idx, times_arr = user_idx[keep], msg_idx[keep], times_arr[keep]
    return ActionLog(user_vocab, msg_vocab, user_idx, msg_idx, times_arr)


def _csv_records(text: IO[str]) -> Iterable[tuple[int, dict]]:
    reader = csv.reader(text)
    header = next(reader, None)
    if header is None:
        return
    header = [h.strip() for h in header]
    if tuple(header[:3]) != FIELDS or len(header) != 3:
        raise ParseError(f"line 1: expected header {','.join(FIELDS)}, got {','.join(header)}", line=1)
    for n, row in enumerate(reader, start=1):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 3:
            raise ParseError(f"line {n}: expected 3 fields, got {len(row)}", line=n)
        yield n, dict(zip(FIELDS, row))


def _jsonl_records(text: IO[str]) -> Iterable[tuple[int, dict]]:
    for n, line in enumerate(text, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {n}: invalid JSON ({exc.msg})", line=n) from None
        if not isinstance(rec, dict) or any(k not in rec for k in FIELDS):
            raise ParseError(f"line {n}: record must have keys {', '.join(FIELDS)}", line=n)
        yield n, rec


def parse_action_log(source: bytes | IO[bytes] | IO[str] | str, fmt: str = "csv", dedup: bool = True) -> ActionLog:
    """Parse a CSV or JSONL action log.

    CSV data rows are numbered from 1 (the header is not counted), JSONL lines
    from 1. Errors name the offending line.
    """
    if isinstance(source, bytes):
        text: IO[str] = io.StringIO(source.decode("utf-8"))
    elif isinstance(source, str):
        text = io.StringIO(source)
    elif isinstance(source, io.TextIOBase):
        text = source
    else:
        text = io.TextIOWrapper(source, encoding="utf-8", newline="")
    if fmt == "csv":
        records = _csv_records(text)
    elif fmt == "jsonl":
        records = _jsonl_records(text)
    else:
        raise ValueError(f"unsupported format {fmt!r}")

    rows = []
    for n, rec in records:
        user, message, raw_t = rec["user_id"], rec["message_id"], rec["timestamp"]
        if user is None or message is None or str(user).strip() == "" or str(message).strip() == "":
            raise ParseError(f"line {n}: empty user_id or message_id", line=n)
        try:
            t = raw_t if isinstance(raw_t, int) and not isinstance(raw_t, bool) else parse_timestamp(str(raw_t))
        except ValueError:
            raise ParseError(f"line {n}: bad timestamp {raw_t!r}", line=n) from None
        if t < 0:
            raise ValidationError(f"line {n}: negative timestamp {t}", line=n)
        rows.append((str(user).strip(), str(message).strip(), t))
    if not rows:
        raise EmptyLogError("action log is empty")
    return from_rows(rows, dedup=dedup)


def read_action_log(path, fmt: str | None = None, dedup: bool = True) -> ActionLog:
    path = str(path)
    if fmt is None:
        fmt = "jsonl" if path.endswith((".jsonl", ".ndjson")) else "csv"
    with open(path, "rb") as fh:
        return parse_action_log(fh, fmt, dedup)


# -- cascades ----------------------------------------------------------------


@dataclass(frozen=True)
class Cascade:
    message: str
    participants: tuple[tuple[str, int], ...]

    @property
    def size(self) -> int:
        return len(self.participants)

    @property
    def duration(self) -> int:
        return self.participants[-1][1] - self.participants[0][1]


class CascadeSet:
    """Per-message cascades of a log with virality and key-user flags.

    Flags are stored per action, aligned with the log's canonical order.
    ``later[r]`` counts participants of the same message posting strictly after
    action ``r``.
    """

    def __init__(self, log: ActionLog, theta: int = 100, phi: float = 0.5) -> None:
        if theta < 1:
            raise DomainError(f"theta must be >= 1, got {theta}")
        if not 0.0 < phi < 1.0:
            raise DomainError(f"phi must lie in (0, 1), got {phi}")
        self.log = log
        self.theta = int(theta)
        self.phi = float(phi)
        size = log.message_size
        self.present = size > 0
        self.viral_mask = size >= self.theta
        self.n_present = int(self.present.sum())
        self.n_viral = int(self.viral_mask.sum())

        n = len(log)
        msg_end = log.msg_ptr[1:][log.message] if n else np.zeros(0, dtype=np.int64)
        if n:
            # dense time rank keeps the combined key inside int64
            _, rank = np.unique(log.time, return_inverse=True)
            key = log.message * (int(rank.max()) + 2) + rank
            first_later = np.searchsorted(key, key, side="right")
        else:
            first_later = np.zeros(0, dtype=np.int64)
        self.later = (msg_end - first_later).astype(np.int64)
        self.action_size = size[log.message] if n else np.zeros(0, dtype=np.int64)
        self.is_key = self.action_size * self.phi <= self.later
        self.action_viral = self.viral_mask[log.message] if n else np.zeros(0, dtype=bool)

    @property
    def viral(self) -> set[str]:
        return {str(m) for m in self.log.messages[self.viral_mask]}

    @property
    def messages(self) -> list[str]:
        return [str(m) for m in self.log.messages[self.present]]

    def cascade(self, message: str) -> Cascade:
        log = self.log
        m = log.message_index(message)
        lo, hi = log.msg_ptr[m], log.msg_ptr[m + 1]
        if lo == hi:
            raise DomainError(f"message {message!r} has no actions in this log")
        return Cascade(
            str(log.messages[m]),
            tuple((str(log.users[log.user[r]]), int(log.time[r])) for r in range(lo, hi)),
        )

    @cached_property
    def cascades(self) -> dict[str, Cascade]:
        return {m: self.cascade(m) for m in self.messages}

    def key_users(self, message: str) -> list[str]:
        log = self.log
        m = log.message_index(message)
        lo, hi = log.msg_ptr[m], log.msg_ptr[m + 1]
        return [str(log.users[log.user[r]]) for r in range(lo, hi) if self.is_key[r]]

    def is_viral(self, message: str) -> bool:
        return bool(self.viral_mask[self.log.message_index(message)])


def extract_cascades(log: ActionLog, theta: int = 100, phi: float = 0.5) -> CascadeSet:
    return CascadeSet(log, theta, phi)


def is_key_user(user: str, cascade: Cascade, phi: float) -> bool:
    """True iff ``|A_m| * phi`` is at most the number of strictly later participants."""
    times = [t for u, t in cascade.participants if u == user]
    if not times:
        raise DomainError(f"user {user!r} did not participate in {cascade.message!r}")
    t_u = min(times)
    later = sum(1 for _, t in cascade.participants if t > t_u)
    return cascade.size * phi <= later


def restrict(log: ActionLog, interval: Sequence[float]) -> ActionLog:
    t_a, t_b = interval
    return log.restrict(t_a, t_b)


# -- distribution report ----------------------------------------------------


@dataclass
class LogStats:
    size_histogram: dict[int, int]
    duration_cdf: list[tuple[int, float]]
    per_cascade: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "size_histogram": [[s, c] for s, c in sorted(self.size_histogram.items())],
            "duration_cdf": [[d, p] for d, p in self.duration_cdf],
            "per_cascade": self.per_cascade,
        }


def log_stats(log: ActionLog, cascades: CascadeSet) -> LogStats:
    """Cascade-size histogram, duration CDF and per-cascade participant counts."""
    present = np.flatnonzero(cascades.present)
    if len(present) == 0:
        return LogStats({}, [], [])
    sizes = log.message_size[present]
    lo, hi = log.msg_ptr[present], log.msg_ptr[present + 1] - 1
    durations = log.time[hi] - log.time[lo]
    values, counts = np.unique(sizes, return_counts=True)
    hist = {int(v): int(c) for v, c in zip(values, counts)}
    d_values, d_counts = np.unique(durations, return_counts=True)
    cdf = np.cumsum(d_counts) / len(durations)
    per = [
        {
            "message_id": str(log.messages[m]),
            "size": int(s),
            "duration": int(d),
            "viral": bool(cascades.viral_mask[m]),
        }
        for m, s, d in zip(present, sizes, durations)
    ]
    return LogStats(hist, [(int(d), float(p)) for d, p in zip(d_values, cdf)], per)


def tail_slope(hist: dict[int, int], min_size: int = 1, n_bins: int = 12) -> float:
    """Power-law exponent from a log-log regression of the size histogram.

    Counts are pooled into logarithmic bins and divided by bin width before the
    fit, so sparse large sizes do not flatten the slope. Returns ``a`` for a
    density ``~ s^-a``; NaN when fewer than two bins are populated.
    """
    sizes = np.array(sorted(s for s in hist if s >= min_size), dtype=np.int64)
    if len(sizes) == 0:
        return float("nan")
    counts = np.array([hist[int(s)] for s in sizes], dtype=float)
    edges = np.unique(np.floor(np.logspace(np.log10(sizes[0]), np.log10(sizes[-1] + 1), n_bins + 1)))
    idx = np.searchsorted(edges, sizes, side="right") - 1
    pooled = np.bincount(idx, weights=counts, minlength=len(edges) - 1)[: len(edges) - 1]
    lo, hi = edges[:-1], edges[1:] - 1  # inclusive integer range of each bin
    keep = pooled > 0
    if keep.sum() < 2:
        return float("nan")
    density = pooled[keep] / (hi - lo + 1)[keep]
    centre = np.sqrt(lo * hi)[keep]
    return float(-np.polyfit(np.log(centre), np.log(density), 1)[0])
