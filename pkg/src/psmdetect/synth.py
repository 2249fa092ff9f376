"""Seeded synthetic action logs with planted PSM accounts.

Cascade sizes follow a truncated discrete power law. Users are split into
equal-size groups and PSMs are packed into the first ``psm_groups`` groups.
Each message has a home group. Campaign messages draw a share
``group_affinity`` of their participants from it; other messages draw only
``background_affinity`` from home and the rest uniformly, so tight
communities in the co-posting graph come from coordinated campaigns.

In viral cascades, each key (early) slot is taken by a PSM with probability
``psm_early_bias``. Every other slot goes to a uniformly drawn user, except
that a PSM drawn for a key slot is kept only with probability
``1 - psm_early_bias``: PSMs lead viral cascades and follow in the rest. A
viral cascade is a coordinated campaign, homed in a PSM group, with
probability ``psm_campaigns * psm_early_bias``. With bias 0, PSMs and
normals are statistically identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .actionlog import ActionLog
from .classify import NORMAL, PSM, write_labels
from .errors import ConfigError

DAY = 86_400
EPOCH = 1_451_606_400  # 2016-01-01T00:00:00Z


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 5000
    n_messages: int = 20000
    psm_fraction: float = 0.11
    viral_fraction: float = 0.1
    size_exponent: float = 2.5
    min_size: int = 2
    max_size: int = 300
    psm_early_bias: float = 0.8
    phi: float = 0.5
    time_span: float = 96.0
    min_duration: float = 600.0
    max_duration: float = 2 * DAY
    n_groups: int = 22
    group_affinity: float = 0.95
    psm_groups: int = 3
    psm_concentration: float = 1.0
    psm_campaigns: float = 1.0
    background_affinity: float = 0.2
    start: int = EPOCH
    seed: int = 42

    def __post_init__(self) -> None:
        checks = [
            (self.n_users >= 2, "n_users must be >= 2"),
            (self.n_messages >= 1, "n_messages must be >= 1"),
            (0 < self.psm_fraction < 1, "psm_fraction must be in (0, 1)"),
            (0 < self.viral_fraction <= 1, "viral_fraction must be in (0, 1]"),
            (self.size_exponent > 1, "size_exponent must be > 1"),
            (1 <= self.min_size <= self.max_size, "need 1 <= min_size <= max_size"),
            (self.max_size <= self.n_users, "max_size exceeds n_users: cascades cannot have distinct participants"),
            (0 <= self.psm_early_bias <= 1, "psm_early_bias must be in [0, 1]"),
            (0 < self.phi < 1, "phi must be in (0, 1)"),
            (self.time_span > 0, "time_span must be positive"),
            (0 < self.min_duration <= self.max_duration, "need 0 < min_duration <= max_duration"),
            (self.max_duration < self.time_span * DAY, "max_duration must be shorter than time_span"),
            (1 <= self.n_groups <= self.n_users, "n_groups must be in [1, n_users]"),
            (0 <= self.group_affinity <= 1, "group_affinity must be in [0, 1]"),
            (0 <= self.psm_groups <= self.n_groups, "psm_groups must be in [0, n_groups]"),
            (0 <= self.psm_concentration <= 1, "psm_concentration must be in [0, 1]"),
            (0 <= self.psm_campaigns <= 1, "psm_campaigns must be in [0, 1]"),
            (0 <= self.background_affinity <= 1, "background_affinity must be in [0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.n_psm < 1 or self.n_psm >= self.n_users:
            raise ConfigError(f"psm_fraction {self.psm_fraction} gives {self.n_psm} PSMs out of {self.n_users}")

    @property
    def n_psm(self) -> int:
        # round half up
        return int(math.floor(self.n_users * self.psm_fraction + 0.5))

    def size_pmf(self) -> tuple[np.ndarray, np.ndarray]:
        sizes = np.arange(self.min_size, self.max_size + 1)
        w = sizes.astype(float) ** -self.size_exponent
        return sizes, w / w.sum()

    @property
    def theta(self) -> int:
        """Smallest size whose upper tail probability is at most ``viral_fraction``."""
        sizes, pmf = self.size_pmf()
        tail = np.cumsum(pmf[::-1])[::-1]
        ok = np.flatnonzero(tail <= self.viral_fraction + 1e-12)
        return int(sizes[ok[0]]) if len(ok) else self.max_size + 1


@dataclass
class SynthResult:
    log: ActionLog
    labels: dict[str, str]
    groups: dict[str, int]
    config: SynthConfig

    @property
    def theta(self) -> int:
        return self.config.theta

    def metadata(self) -> dict:
        return {
            "config": asdict(self.config),
            "theta": self.theta,
            "phi": self.config.phi,
            "n_actions": len(self.log),
            "n_psm": sum(1 for v in self.labels.values() if v == PSM),
            "n_users": len(self.labels),
        }

    def write(self, out_dir, fmt: str = "csv") -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "log": out / f"log.{fmt}",
            "labels": out / "labels.csv",
            "metadata": out / "metadata.json",
        }
        with open(paths["log"], "w", newline="") as fh:
            (self.log.write_csv if fmt == "csv" else self.log.write_jsonl)(fh)
        with open(paths["labels"], "w", newline="") as fh:
            write_labels(self.labels, fh)
        paths["metadata"].write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")
        return paths


def _key_slots(size: int, phi: float) -> int:
    # slot r (0-based, distinct times) is key iff phi * size <= size - 1 - r
    last = math.floor(size - 1 - phi * size + 1e-9)
    return max(last + 1, 0)


def generate(config: SynthConfig = SynthConfig()) -> SynthResult:
    c = config
    rng = np.random.default_rng(c.seed)
    n = c.n_users
    width = len(str(n - 1))
    user_ids = np.array([f"u{k:0{width}d}" for k in range(n)])

    group = rng.permutation(np.arange(n) % c.n_groups)
    # PSMs: a share drawn from the first psm_groups groups, the rest from anywhere else
    in_psm_groups = np.flatnonzero(group < c.psm_groups)
    n_conc = min(int(round(c.n_psm * c.psm_concentration)) if c.psm_groups else 0, len(in_psm_groups))
    conc = rng.choice(in_psm_groups, n_conc, replace=False) if n_conc else np.zeros(0, dtype=np.int64)
    rest_pool = np.setdiff1d(np.arange(n), conc)
    rest = rng.choice(rest_pool, c.n_psm - n_conc, replace=False)
    is_psm = np.zeros(n, dtype=bool)
    is_psm[conc] = True
    is_psm[rest] = True

    members = [np.flatnonzero(group == g) for g in range(c.n_groups)]
    psm_members = [m[is_psm[m]] for m in members]
    all_psm = np.flatnonzero(is_psm)

    sizes_support, pmf = c.size_pmf()
    sizes = rng.choice(sizes_support, c.n_messages, p=pmf)
    home = rng.integers(0, c.n_groups, c.n_messages)
    log_lo, log_hi = math.log(c.min_duration), math.log(c.max_duration)
    durations = np.exp(rng.uniform(log_lo, log_hi, c.n_messages))
    span = c.time_span * DAY
    starts = c.start + rng.uniform(0, 1, c.n_messages) * (span - durations)
    theta = c.theta

    total = int(sizes.sum())
    out_user = np.empty(total, dtype=np.int64)
    out_msg = np.empty(total, dtype=np.int64)
    out_time = np.empty(total, dtype=np.int64)
    pos = 0
    for m in range(c.n_messages):
        s = int(sizes[m])
        g = int(home[m])
        n_key = _key_slots(s, c.phi)
        viral = s >= theta
        aff = c.background_affinity
        if viral and c.psm_groups and rng.random() < c.psm_campaigns * c.psm_early_bias:
            g = int(rng.integers(0, c.psm_groups))
            aff = c.group_affinity
        u = rng.random((s, 3))
        used: set[int] = set()
        chosen = np.empty(s, dtype=np.int64)
        for r in range(s):
            key = r < n_key
            if key and viral and u[r, 0] < c.psm_early_bias:
                local = psm_members[g]
                pool = local if len(local) and u[r, 1] < aff else all_psm
                pick = _draw(pool, n, u[r, 2])
                tries = 0
                while pick in used:
                    tries += 1
                    # fall back to the whole population after a few collisions
                    pick = _draw(pool if tries < 8 else None, n, rng.random())
            else:
                # uniform draw; in other key slots a drawn PSM is kept only with
                # probability 1 - bias, so PSMs lead viral cascades and follow
                # elsewhere. Bias 0 is the no-signal null.
                pool = members[g] if u[r, 1] < aff else None
                pick = _draw(pool, n, u[r, 2])
                tries = 0
                while pick in used or (key and is_psm[pick] and tries < 1000 and rng.random() < c.psm_early_bias):
                    tries += 1
                    pick = _draw(pool if tries < 8 else None, n, rng.random())
            used.add(pick)
            chosen[r] = pick
        offsets = np.sort(rng.random(s)) * durations[m]
        out_user[pos: pos + s] = chosen
        out_msg[pos: pos + s] = m
        out_time[pos: pos + s] = np.floor(starts[m] + offsets).astype(np.int64)
        pos += s

    mwidth = len(str(c.n_messages - 1))
    msg_ids = np.array([f"m{k:0{mwidth}d}" for k in range(c.n_messages)])
    log = ActionLog(user_ids, msg_ids, out_user, out_msg, out_time)
    labels = {str(user_ids[k]): (PSM if is_psm[k] else NORMAL) for k in range(n)}
    groups = {str(user_ids[k]): int(group[k]) for k in range(n)}
    return SynthResult(log, labels, groups, c)


def _draw(pool: np.ndarray | None, n: int, u: float) -> int:
    if pool is None:
        return min(int(u * n), n - 1)
    return int(pool[min(int(u * len(pool)), len(pool) - 1)])
