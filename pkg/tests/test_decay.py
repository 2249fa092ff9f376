import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psmdetect.actionlog import from_rows
from psmdetect.causal import CausalConfig, causal_vectors
from psmdetect.decay import (
    DAY,
    DecayConfig,
    decay_matrix,
    decay_vector,
    decay_vectors,
    decayed_mean,
    window_sequence,
    xi,
)
from psmdetect.errors import DomainError, UndefinedError

from conftest import T1_ROWS, random_rows
from oracle import oracle_windows, oracle_xi

COMPUTED = CausalConfig(rho_mode="computed")
FIVE_DAYS = DecayConfig(delta=5 * DAY, sigma=0.001)


def test_window_sequence_examples():
    seq = window_sequence(0, 10 * DAY, FIVE_DAYS)
    assert seq.points == (5 * DAY,)
    assert seq.windows == [(0, 5 * DAY)]
    cfg = DecayConfig(delta=5)
    seq = window_sequence(0, 20, cfg)
    assert seq.points == (5, 10, 15)
    assert seq.windows == [(0, 5), (5, 10), (10, 15)]
    assert len(window_sequence(0, 9, cfg)) == 0


def test_window_sequence_include_final():
    cfg = DecayConfig(delta=5, window_grid="include_final")
    assert window_sequence(0, 20, cfg).points == (5, 10, 15, 20)
    assert window_sequence(0, 9, cfg).points == (9,)
    assert window_sequence(0, 4, cfg).points == ()


def test_config_validation():
    with pytest.raises(DomainError):
        DecayConfig(delta=0)
    with pytest.raises(DomainError):
        DecayConfig(sigma=-1)
    with pytest.raises(DomainError):
        DecayConfig(k_set=("km", "bogus"))


def test_t1_single_window():
    log = from_rows(T1_ROWS)
    interval = (0, 10 * DAY)
    got = xi("i", "km", interval, log, FIVE_DAYS, COMPUTED, theta=3, phi=0.5)
    assert got == pytest.approx(math.exp(-0.005) * 0.5, abs=1e-12)
    assert got == pytest.approx(0.4975056, abs=1e-6)
    v = decay_vector("i", interval, log, FIVE_DAYS, COMPUTED, theta=3, phi=0.5)
    rel = 1 / 0.501 - 1
    assert v.km == pytest.approx(0.497506, abs=1e-6)
    assert v.rel == pytest.approx(math.exp(-0.005) * rel, abs=1e-12)
    assert v.nb is None and v.wnb is None


def test_two_window_average():
    eps = [np.array([0.4]), np.array([0.8])]
    weights = np.array([math.exp(-0.1 * 10), math.exp(-0.1 * 5)])
    values, count = decayed_mean(eps, weights)
    assert values[0] == pytest.approx((math.exp(-1) * 0.4 + math.exp(-0.5) * 0.8) / 2, abs=1e-15)
    assert values[0] == pytest.approx(0.316188, abs=1e-6)
    assert count[0] == 2


def test_undefined_windows_excluded():
    eps = [np.array([np.nan, 0.5]), np.array([0.8, np.nan])]
    values, count = decayed_mean(eps, np.array([0.5, 1.0]))
    assert values.tolist() == [0.8, 0.25]
    assert count.tolist() == [1, 1]


def test_sigma_zero_is_plain_mean():
    eps = [np.array([0.1]), np.array([0.7]), np.array([np.nan])]
    values, _ = decayed_mean(eps, np.ones(3))
    assert values[0] == pytest.approx(0.4)


def test_reduction_to_causal_vector():
    log = from_rows(T1_ROWS)
    cfg = DecayConfig(delta=4, sigma=0.0)
    got = decay_vectors(log, (0, 8), theta=3, phi=0.5, causal_config=COMPUTED, config=cfg)
    plain = causal_vectors(log, theta=3, phi=0.5, config=COMPUTED)
    assert np.array_equal(got.values, plain.values, equal_nan=True)


@pytest.mark.parametrize("seed", range(50))
def test_reduction_random_logs(seed):
    # one window spanning the whole log, no decay: the plain causality vector, bit for bit
    rng = random.Random(seed)
    rows = random_rows(rng, max_time=40)
    rows.append(("u0", "m0", 0))
    rows.append(("u1", "m0", 41))
    log = from_rows(rows)
    lo, hi = int(log.time.min()), int(log.time.max())
    span = hi - lo
    cfg = DecayConfig(delta=span, sigma=0.0)
    assert [tuple(w) for w in window_sequence(lo, lo + 2 * span, cfg).windows] == [(lo, hi)]
    got = decay_matrix(log, (lo, lo + 2 * span), theta=2, phi=0.5, causal_config=COMPUTED, config=cfg)
    plain = causal_vectors(log, theta=2, phi=0.5, config=COMPUTED)
    assert got.values.tobytes() == plain.values.tobytes()


@pytest.mark.parametrize("seed", range(50))
def test_weights_bounds_random(seed):
    rng = random.Random(seed)
    delta = rng.randint(1, 10 * DAY)
    t0 = rng.randint(0, 10**9)
    seq = window_sequence(t0, t0 + rng.randint(3, 60) * delta, DecayConfig(delta=delta))
    w = seq.weights(rng.choice([1e-6, 0.001, 0.05, 1.0]))
    assert ((w > 0) & (w <= 1)).all()
    assert (np.diff(w) >= 0).all()


def test_empty_interval_all_undefined():
    log = from_rows(T1_ROWS)
    v = decay_vector("i", (100, 200), log, DecayConfig(delta=10), COMPUTED, theta=3, phi=0.5)
    assert v.fully_undefined
    with pytest.raises(UndefinedError):
        xi("i", "km", (0, 9), log, DecayConfig(delta=5), theta=3, phi=0.5)


def test_weights_bounds():
    seq = window_sequence(0, 100 * DAY, FIVE_DAYS)
    w = seq.weights(0.05)
    assert ((w > 0) & (w <= 1)).all()
    assert (np.diff(w) > 0).all()


def test_workers_do_not_change_result():
    rng = random.Random(5)
    rows = [(f"u{rng.randrange(30)}", f"m{rng.randrange(60)}", rng.randint(0, 40 * DAY)) for _ in range(1500)]
    log = from_rows(rows)
    a = decay_matrix(log, theta=5, phi=0.5, config=FIVE_DAYS, workers=1)
    b = decay_matrix(log, theta=5, phi=0.5, config=FIVE_DAYS, workers=4)
    assert np.array_equal(a.values, b.values, equal_nan=True)
    assert a.values.tobytes() == b.values.tobytes()


@pytest.mark.parametrize("seed", range(50))
def test_oracle_random_logs(seed):
    rng = random.Random(seed)
    rows = random_rows(rng, max_time=40)
    delta = rng.choice([5, 8, 10])
    sigma = rng.choice([0.0, 0.001, 1000.0])
    cfg = DecayConfig(delta=delta, sigma=sigma)
    t0, t = 0, 40
    assert list(window_sequence(t0, t, cfg).points) == oracle_windows(t0, t, delta)
    log = from_rows(rows)
    res = decay_matrix(log, (t0, t), theta=2, phi=0.5, causal_config=COMPUTED, config=cfg)
    for u in sorted({r[0] for r in rows}):
        ui = log.user_index(u)
        for col, k in enumerate(("km", "rel", "nb", "wnb")):
            want = oracle_xi(rows, u, k, t0, t, delta, sigma, 2, 0.5, rho_mode="computed")
            got = res.values[ui, col]
            if math.isnan(want):
                assert math.isnan(got)
            else:
                assert got == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("seed", range(50))
def test_shift_invariance(seed):
    rng = random.Random(seed)
    log = from_rows(random_rows(rng, max_time=40))
    cfg = DecayConfig(delta=7, sigma=0.5 * DAY)
    a = decay_matrix(log, (0, 40), theta=2, phi=0.5, config=cfg)
    b = decay_matrix(log.shifted(12345), (12345, 12385), theta=2, phi=0.5, config=cfg)
    assert np.allclose(a.values, b.values, equal_nan=True, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 10**5), st.integers(1, 50))
def test_window_sequence_properties(t0, delta, n):
    t = t0 + n * delta + delta // 2
    seq = window_sequence(t0, t, DecayConfig(delta=delta))
    for lo, hi in seq.windows:
        assert t0 <= lo and hi <= t
    assert all(b > a for a, b in zip(seq.points, seq.points[1:]))
    if seq.points:
        assert max(seq.points) <= t - delta
    assert len(seq) == max((t - t0) // delta - 1, 0)
