"""Time-decayed causality over sliding windows.

The interval ``[t0, t]`` is cut into windows ``[t' - delta, t']`` at
``t' = t0 + j * delta`` (``j >= 1``, ``t' <= t - delta``); each window's metric
is weighted by ``exp(-sigma * (t - t'))`` and the weighted values are averaged
over the windows where the metric is defined.

Timestamps are seconds; ``sigma`` is per day.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .actionlog import ActionLog, CascadeSet
from .causal import METRICS, CausalConfig, CausalityVector, VectorTable, causal_model
from .errors import DomainError, UndefinedError

DAY = 86_400


@dataclass(frozen=True)
class DecayConfig:
    delta: float = 5 * DAY
    sigma: float = 0.001
    window_grid: str = "paper_exact"
    k_set: tuple[str, ...] = METRICS

    def __post_init__(self) -> None:
        if not self.delta > 0:
            raise DomainError(f"delta must be positive, got {self.delta}")
        if not self.sigma >= 0:
            raise DomainError(f"sigma must be non-negative, got {self.sigma}")
        if self.window_grid not in ("paper_exact", "include_final"):
            raise DomainError(f"unknown window grid {self.window_grid!r}")
        unknown = set(self.k_set) - set(METRICS)
        if unknown or not self.k_set:
            raise DomainError(f"k_set must be a nonempty subset of {METRICS}, got {self.k_set}")


@dataclass(frozen=True)
class WindowSequence:
    t0: float
    t: float
    delta: float
    points: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.points)

    @property
    def windows(self) -> list[tuple[float, float]]:
        return [(p - self.delta, p) for p in self.points]

    def weights(self, sigma: float) -> np.ndarray:
        return np.array([math.exp(-sigma * (self.t - p) / DAY) for p in self.points])


def window_sequence(t0: float, t: float, config: DecayConfig = DecayConfig()) -> WindowSequence:
    """Window end points; an empty sequence when the interval is shorter than 2*delta."""
    if t < t0:
        raise DomainError(f"inverted interval [{t0}, {t}]")
    delta = config.delta
    points = []
    j = 1
    while t0 + j * delta <= t - delta:
        points.append(t0 + j * delta)
        j += 1
    if config.window_grid == "include_final" and t - delta >= t0 and (not points or points[-1] < t):
        points.append(t)
    return WindowSequence(t0, t, delta, tuple(points))


def _window_metrics(log: ActionLog, window: tuple[float, float], theta: int, phi: float, causal_config: CausalConfig) -> np.ndarray:
    sub = log.restrict(*window)
    return causal_model(CascadeSet(sub, theta, phi), causal_config).matrix()


def decayed_mean(per_window: list[np.ndarray], weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted values averaged over the windows where they are defined (non-NaN).

    Returns the averages (NaN where no window is defined) and the defined-window counts.
    """
    total = np.zeros(np.shape(per_window[0]))
    count = np.zeros(np.shape(per_window[0]), dtype=np.int64)
    for w, eps in zip(weights, per_window):
        ok = ~np.isnan(eps)
        total[ok] += w * eps[ok]
        count += ok
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return values, count


@dataclass
class DecayResult:
    values: np.ndarray          # (n_users, 4), NaN = undefined
    defined_windows: np.ndarray  # (n_users, 4)
    n_windows: int


def decay_matrix(
    log: ActionLog,
    interval: tuple[float, float] | None = None,
    *,
    theta: int = 100,
    phi: float = 0.5,
    causal_config: CausalConfig = CausalConfig(),
    config: DecayConfig = DecayConfig(),
    workers: int = 1,
    cache: dict | None = None,
) -> DecayResult:
    """Decayed metrics for every user in the log's vocabulary.

    Windows are evaluated independently (in parallel with ``workers > 1``) and
    reduced in window order, so the result does not depend on scheduling.
    ``cache`` maps windows to their metric matrices and is reused across calls
    on the same log (e.g. growing prefixes that share a start).
    """
    if interval is None:
        span = log.time_span
        if span is None:
            raise UndefinedError("empty log has no interval")
        interval = span
    t0, t = interval
    seq = window_sequence(t0, t, config)
    if not seq:
        raise UndefinedError(
            f"interval [{t0}, {t}] holds no complete window of length {config.delta}"
        )
    weights = seq.weights(config.sigma)

    def run(window):
        if cache is None:
            return _window_metrics(log, window, theta, phi, causal_config)
        key = (window, theta, phi, causal_config)
        if key not in cache:
            cache[key] = _window_metrics(log, window, theta, phi, causal_config)
        return cache[key]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_window = list(pool.map(run, seq.windows))
    else:
        per_window = [run(w) for w in seq.windows]

    values, count = decayed_mean(per_window, weights)
    keep = np.array([m in config.k_set for m in METRICS])
    values[:, ~keep] = np.nan
    return DecayResult(values, count, len(seq))


def decay_vectors(
    log: ActionLog,
    interval: tuple[float, float] | None = None,
    *,
    theta: int = 100,
    phi: float = 0.5,
    causal_config: CausalConfig = CausalConfig(),
    config: DecayConfig = DecayConfig(),
    workers: int = 1,
    cache: dict | None = None,
) -> VectorTable:
    """Decay vectors (``xi_*`` columns) for every user active in the interval."""
    if interval is None:
        interval = log.time_span
    res = decay_matrix(
        log, interval, theta=theta, phi=phi, causal_config=causal_config, config=config, workers=workers,
        cache=cache,
    )
    users = log.restrict(*interval).active_users
    undefined = res.n_windows - res.defined_windows[users]
    return VectorTable(log.users[users], res.values[users], tuple(interval), "xi_", undefined)


def xi(
    user: str,
    k: str,
    interval: tuple[float, float],
    log: ActionLog,
    config: DecayConfig = DecayConfig(),
    causal_config: CausalConfig = CausalConfig(),
    *,
    theta: int = 100,
    phi: float = 0.5,
) -> float:
    if k not in METRICS:
        raise DomainError(f"unknown metric {k!r}")
    u = log.user_index(user)
    res = decay_matrix(log, interval, theta=theta, phi=phi, causal_config=causal_config, config=config)
    value = res.values[u, METRICS.index(k)]
    if np.isnan(value):
        raise UndefinedError(f"xi_{k} is undefined for {user!r}: no window defines it")
    return float(value)


def decay_vector(
    user: str,
    interval: tuple[float, float],
    log: ActionLog,
    config: DecayConfig = DecayConfig(),
    causal_config: CausalConfig = CausalConfig(),
    *,
    theta: int = 100,
    phi: float = 0.5,
) -> CausalityVector:
    u = log.user_index(user)
    res = decay_matrix(log, interval, theta=theta, phi=phi, causal_config=causal_config, config=config)
    vals = res.values[u]
    return CausalityVector(user, tuple(interval), *(None if np.isnan(v) else float(v) for v in vals))
