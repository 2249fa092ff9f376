import io
import json
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from psmdetect.actionlog import (
    CascadeSet,
    extract_cascades,
    from_rows,
    is_key_user,
    log_stats,
    parse_action_log,
    parse_timestamp,
    restrict,
)
from psmdetect.errors import DomainError, EmptyLogError, ParseError, ValidationError

from conftest import random_rows


def csv_bytes(rows):
    lines = ["user_id,message_id,timestamp"] + [f"{u},{m},{t}" for u, m, t in rows]
    return ("\n".join(lines) + "\n").encode()


def serialize(log):
    buf = io.StringIO()
    log.write_csv(buf)
    return buf.getvalue()


def test_dedup_keeps_earliest():
    log = parse_action_log(csv_bytes([("i", "m1", 1), ("j", "m1", 2), ("i", "m1", 5)]))
    assert len(log) == 2
    assert ("i", "m1", 1) in log.to_rows()
    assert ("i", "m1", 5) not in log.to_rows()


def test_duplicates_rejected_without_dedup():
    with pytest.raises(ValidationError) as exc:
        parse_action_log(csv_bytes([("i", "m1", 1), ("i", "m1", 5)]), dedup=False)
    assert exc.value.line == 2


def test_t1_counts(t1_log):
    # hand count of the fixture listing: 4+3+3+2+2 rows over users i, j, k, l
    assert len(t1_log) == 14
    assert len(t1_log.active_users) == 4
    assert t1_log.n_messages == 5


def test_negative_timestamp_names_line():
    with pytest.raises(ValidationError) as exc:
        parse_action_log(b"user_id,message_id,timestamp\ni,m1,-4\n")
    assert exc.value.line == 1
    assert "line 1" in str(exc.value)


def test_malformed_record_names_line():
    with pytest.raises(ParseError) as exc:
        parse_action_log(b"user_id,message_id,timestamp\ni,m1,3\nj,m1\n")
    assert exc.value.line == 2
    with pytest.raises(ParseError) as exc:
        parse_action_log(b"user_id,message_id,timestamp\ni,m1,yesterday\n")
    assert exc.value.line == 1


def test_empty_input():
    with pytest.raises(EmptyLogError):
        parse_action_log(b"")
    with pytest.raises(EmptyLogError):
        parse_action_log(b"user_id,message_id,timestamp\n")


def test_bad_header():
    with pytest.raises(ParseError):
        parse_action_log(b"user,message,time\ni,m1,3\n")


def test_jsonl_matches_csv():
    rows = [("a", "x", 5), ("b", "x", 3), ("a", "y", 9)]
    jsonl = "".join(json.dumps({"user_id": u, "message_id": m, "timestamp": t}) + "\n" for u, m, t in rows)
    assert parse_action_log(jsonl.encode(), "jsonl").same_actions(parse_action_log(csv_bytes(rows)))
    with pytest.raises(ParseError) as exc:
        parse_action_log(b'{"user_id": "a", "message_id": "x", "timestamp": 1}\n{"user_id": "a"}\n', "jsonl")
    assert exc.value.line == 2


def test_rfc3339_timestamps():
    assert parse_timestamp("1970-01-01T00:01:00Z") == 60
    assert parse_timestamp("2016-02-22T00:00:00+00:00") == 1456099200
    assert parse_timestamp("2016-02-22T01:00:00+01:00") == 1456099200
    assert parse_timestamp("1456099200") == 1456099200
    log = parse_action_log(b"user_id,message_id,timestamp\na,x,1970-01-01T00:00:10Z\n")
    assert log.to_rows() == [("a", "x", 10)]


def test_extract_cascades_t1(t1):
    assert len(t1.cascades) == 5
    assert t1.viral == {"m1", "m2", "m3"}
    sizes = {m: c.size for m, c in t1.cascades.items()}
    assert sizes == {"m1": 4, "m2": 3, "m3": 3, "m4": 2, "m5": 2}
    assert t1.cascades["m1"].duration == 3


def test_theta_one_all_viral(t1_log):
    assert extract_cascades(t1_log, theta=1, phi=0.5).viral == set(f"m{k}" for k in range(1, 6))


def test_default_thresholds_accepted(t1_log):
    cs = extract_cascades(t1_log, theta=100, phi=0.5)
    assert cs.theta == 100 and cs.phi == 0.5 and cs.viral == set()


@pytest.mark.parametrize("theta,phi", [(0, 0.5), (3, 0.0), (3, 1.0)])
def test_cascade_preconditions(t1_log, theta, phi):
    with pytest.raises(DomainError):
        CascadeSet(t1_log, theta, phi)


def test_key_users_t1(t1):
    m1 = t1.cascades["m1"]
    assert is_key_user("i", m1, 0.5)
    assert not is_key_user("k", m1, 0.5)
    assert not is_key_user("j", t1.cascades["m2"], 0.5)
    for c in t1.cascades.values():
        assert not is_key_user(c.participants[-1][0], c, 0.5)
    with pytest.raises(DomainError):
        is_key_user("l", t1.cascades["m2"], 0.5)
    expected = {"m1": {"i", "j"}, "m2": {"i"}, "m3": {"j"}, "m4": {"k"}, "m5": {"l"}}
    assert {m: set(t1.key_users(m)) for m in expected} == expected


def test_key_user_flags_match_scalar(t1):
    for m, c in t1.cascades.items():
        assert set(t1.key_users(m)) == {u for u, _ in c.participants if is_key_user(u, c, t1.phi)}


def test_ties_never_precede():
    log = from_rows([("a", "x", 1), ("b", "x", 1), ("c", "x", 2)])
    cs = CascadeSet(log, theta=1, phi=0.5)
    c = cs.cascades["x"]
    assert [u for u, _ in c.participants] == ["a", "b", "c"]
    # a and b tie: each has exactly one strictly later participant
    assert cs.later.tolist() == [1, 1, 0]
    # 3 * 0.5 = 1.5 > 1, so neither tied participant is a key user
    assert cs.key_users("x") == []
    assert set(CascadeSet(log, 1, 0.3).key_users("x")) == {"a", "b"}


def test_restrict(t1_log):
    assert restrict(t1_log, (0, math.inf)).same_actions(t1_log)
    sub = restrict(t1_log, (1, 2))
    assert len(sub) == 10  # two actions at times 1 and 2 in each of the five messages
    assert all(1 <= t <= 2 for _, _, t in sub.to_rows())
    empty = restrict(t1_log, (100, 200))
    assert len(empty) == 0
    assert CascadeSet(empty, 3, 0.5).cascades == {}
    with pytest.raises(DomainError):
        restrict(t1_log, (5, 1))


def test_log_stats_t1(t1_log, t1):
    stats = log_stats(t1_log, t1)
    assert stats.size_histogram == {2: 2, 3: 2, 4: 1}
    assert stats.duration_cdf[-1][1] == 1.0
    assert len(stats.per_cascade) == 5
    doc = stats.to_json()
    assert set(doc) == {"size_histogram", "duration_cdf", "per_cascade"}


def test_log_stats_empty(t1_log):
    empty = t1_log.restrict(100, 200)
    stats = log_stats(empty, CascadeSet(empty, 3, 0.5))
    assert stats.size_histogram == {} and stats.duration_cdf == [] and stats.per_cascade == []


def test_index_consistency(t1_log):
    users = [a for u in t1_log.users for a in t1_log.user_actions(str(u))]
    msgs = [a for m in t1_log.messages for a in t1_log.message_actions(str(m))]
    assert len(users) == len(msgs) == len(t1_log)
    assert sorted(users, key=lambda a: (a.user, a.message)) == sorted(msgs, key=lambda a: (a.user, a.message))


# -- invariants ---------------------------------------------------------------

rows_strategy = st.lists(
    st.tuples(st.sampled_from("abcdefgh"), st.sampled_from(["m1", "m2", "m3", "m4", "m5"]), st.integers(0, 20)),
    min_size=1,
    max_size=40,
)


@settings(max_examples=50, deadline=None)
@given(rows_strategy)
def test_dedup_idempotent(rows):
    log = parse_action_log(csv_bytes(rows))
    again = parse_action_log(serialize(log).encode())
    assert serialize(again) == serialize(log)
    assert (again.user_ptr == log.user_ptr).all() and (again.msg_ptr == log.msg_ptr).all()


@settings(max_examples=50, deadline=None)
@given(rows_strategy, st.randoms(use_true_random=False))
def test_canonical_ordering(rows, rnd):
    shuffled = rows[:]
    rnd.shuffle(shuffled)
    a, b = from_rows(rows), from_rows(shuffled)
    assert serialize(a) == serialize(b)
    ca, cb = CascadeSet(a, 2, 0.5), CascadeSet(b, 2, 0.5)
    assert repr(sorted(ca.cascades.items())) == repr(sorted(cb.cascades.items()))


@settings(max_examples=50, deadline=None)
@given(rows_strategy)
def test_key_user_count_bound(rows):
    cs = CascadeSet(from_rows(rows), 2, 0.5)
    for m, c in cs.cascades.items():
        assert len(cs.key_users(m)) <= math.ceil(c.size / 2)
        assert c.size >= 1 and c.duration >= 0
        keys = [(t, u) for u, t in c.participants]
        assert keys == sorted(keys)


@settings(max_examples=50, deadline=None)
@given(rows_strategy, st.integers(0, 20), st.integers(0, 20), st.integers(0, 20), st.integers(0, 20))
def test_restrict_composes(rows, a1, b1, a2, b2):
    log = from_rows(rows)
    a1, b1 = min(a1, b1), max(a1, b1)
    a2, b2 = min(a2, b2), max(a2, b2)
    twice = log.restrict(a1, b1).restrict(a2, b2)
    lo, hi = max(a1, a2), min(b1, b2)
    if lo <= hi:
        assert twice.same_actions(log.restrict(lo, hi))
    else:
        assert len(twice) == 0


@settings(max_examples=50, deadline=None)
@given(rows_strategy, st.integers(1, 6), st.integers(1, 6))
def test_viral_monotone(rows, t1_, t2_):
    lo, hi = min(t1_, t2_), max(t1_, t2_)
    log = from_rows(rows)
    assert CascadeSet(log, hi, 0.5).viral <= CascadeSet(log, lo, 0.5).viral


@pytest.mark.parametrize("seed", range(50))
def test_invariants_random_seeds(seed):
    rng = random.Random(seed)
    rows = random_rows(rng)
    log = from_rows(rows)
    cs = CascadeSet(log, 2, 0.5)
    assert len(log.user_perm) == len(log) == int(log.msg_ptr[-1]) == int(log.user_ptr[-1])
    assert (log.time >= 0).all()
    pairs = {(u, m) for u, m, _ in log.to_rows()}
    assert len(pairs) == len(log)
    for m in cs.viral:
        assert cs.cascades[m].size >= 2
