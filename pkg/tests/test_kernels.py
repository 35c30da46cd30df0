import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from outlierbft import kernels
from outlierbft._kernels_py import pbft_round as py_round
from outlierbft.consensus import pbft_quorum
from outlierbft.ledger import digest
from outlierbft.netsim import pbft_events


def quorum_size(n):
    return pbft_quorum(n)[1]


def make_case(n, seed, learners=True):
    rng = np.random.default_rng(seed)
    pp = rng.uniform(1.0, 5.0, n)
    prep = rng.uniform(1.0, 5.0, (n, n))
    com = rng.uniform(1.0, 5.0, (n, n))
    role = rng.choice([0, 0, 0, 1, 2, 3] if learners else [0, 0, 0, 2, 3], size=n).astype(np.int64)
    role[0] = 0
    trusted = (role != 1).astype(np.int64)
    q = 2 * ((int(trusted.sum()) - 1) // 3) + 1
    return pp, 0.01, prep, com, role, trusted, q, 50.0


def run_events(case):
    pp, v, prep, com, role, trusted, q, deadline = case
    ids = [f"p{i:02d}" for i in range(len(role))]
    return pbft_events(1, digest(b"blk"), ids, role, trusted, q, pp, v, prep, com, deadline)


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@given(st.integers(1, 24), st.integers(0, 2 ** 32 - 1))
def test_compiled_matches_python(n, seed):
    case = make_case(n, seed)
    a, b = py_round(*case), kernels.pbft_round(*case)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@given(st.integers(1, 16), st.integers(0, 2 ** 32 - 1))
def test_event_engine_matches_kernel(n, seed):
    case = make_case(n, seed)
    prepared, committed = kernels.pbft_round(*case)
    ep, ec, _ = run_events(case)
    assert np.array_equal(prepared, ep)
    assert np.array_equal(committed, ec)


@given(st.integers(4, 16), st.integers(0, 2 ** 32 - 1))
def test_no_divergent_honest_commits(n, seed):
    case = make_case(n, seed, learners=False)
    _, _, states = run_events(case)
    role = case[4]
    decided = {st.decision.digest for j, st in states.items() if role[j] == 0 and st.decision and st.decision.committed}
    assert decided <= {digest(b"blk")}


def test_all_honest_commit_when_timely():
    n = 7
    case = (np.zeros(n), 0.0, np.ones((n, n)), np.ones((n, n)), np.zeros(n, np.int64),
            np.ones(n, np.int64), quorum_size(n), 10.0)
    prepared, committed = kernels.pbft_round(*case)
    assert np.all(prepared == 1.0) and np.all(committed == 2.0)


@pytest.mark.parametrize("silent,commits", [(3, True), (4, False)])
def test_silent_boundary_at_ten_peers(silent, commits):
    n = 10
    role = np.zeros(n, np.int64)
    role[n - silent:] = 2
    case = (np.zeros(n), 0.0, np.ones((n, n)), np.ones((n, n)), role, np.ones(n, np.int64),
            quorum_size(n), 10.0)
    _, committed = kernels.pbft_round(*case)
    honest = committed[role == 0]
    assert np.all(np.isfinite(honest)) if commits else np.all(np.isinf(honest))


def test_deadline_cuts_late_votes():
    n = 4
    case = (np.zeros(n), 0.0, np.full((n, n), 3.0), np.full((n, n), 3.0), np.zeros(n, np.int64),
            np.ones(n, np.int64), quorum_size(n), 5.0)
    prepared, committed = kernels.pbft_round(*case)
    assert np.all(prepared == 3.0)
    assert all(math.isinf(c) for c in committed)
