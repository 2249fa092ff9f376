import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from psmdetect.actionlog import CascadeSet, from_rows  # noqa: E402

# m1: i,j,k,l  m2: i,j,k  m3: j,k,l  m4: k,j  m5: l,k
T1_ROWS = [
    ("i", "m1", 1), ("j", "m1", 2), ("k", "m1", 3), ("l", "m1", 4),
    ("i", "m2", 1), ("j", "m2", 2), ("k", "m2", 3),
    ("j", "m3", 1), ("k", "m3", 2), ("l", "m3", 3),
    ("k", "m4", 1), ("j", "m4", 2),
    ("l", "m5", 1), ("k", "m5", 2),
]


@pytest.fixture
def t1_log():
    return from_rows(T1_ROWS)


@pytest.fixture
def t1(t1_log):
    return CascadeSet(t1_log, theta=3, phi=0.5)


def random_rows(rng: random.Random, max_users=8, max_messages=15, max_actions=40, max_time=30):
    n_users = rng.randint(2, max_users)
    n_msgs = rng.randint(1, max_messages)
    n_actions = rng.randint(1, max_actions)
    return [
        (f"u{rng.randrange(n_users)}", f"m{rng.randrange(n_msgs)}", rng.randint(0, max_time))
        for _ in range(n_actions)
    ]
