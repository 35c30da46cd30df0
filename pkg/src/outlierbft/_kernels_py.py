"""Pure-Python reference for the compiled PBFT round kernel.

Roles: 0 honest active replica, 1 honest learner (its org is excluded, it
listens but never votes), 2 silent Byzantine, 3 equivocating Byzantine.
An equivocator's votes reach even-indexed receivers with the block digest;
odd-indexed receivers get a conflicting pair, which they discard.
"""
from __future__ import annotations

import math

import numpy as np

INF = math.inf


def _qth(values: list[float], q: int) -> float:
    if q < 1 or len(values) < q:
        return INF
    values.sort()
    return values[q - 1]


def pbft_round(pp_arrival, validate_cost, prep_delay, commit_delay, role, trusted, quorum, deadline):
    """Prepared and committed times of every replica for one block.

    ``pp_arrival[j]`` is when replica j receives the PrePrepare; it votes at
    ``pp_arrival[j] + validate_cost``.  ``prep_delay[i, j]`` and
    ``commit_delay[i, j]`` are link delays from i to j (self-delivery is
    instant).  Times after ``deadline`` are never reached and come back as
    ``inf``.  Returns ``(prepared, committed)`` float arrays.
    """
    pp = [float(x) for x in pp_arrival]
    role = [int(r) for r in role]
    trusted = [bool(t) for t in trusted]
    pd = np.asarray(prep_delay, dtype=float).tolist()
    cd = np.asarray(commit_delay, dtype=float).tolist()
    n = len(role)
    v = float(validate_cost)
    q = int(quorum)
    deadline = float(deadline)
    send = [pp[i] + v for i in range(n)]
    prepared = [INF] * n
    committed = [INF] * n

    for j in range(n):
        if role[j] > 1:
            continue
        arr = []
        for i in range(n):
            if not trusted[i]:
                continue
            if role[i] == 0 or (role[i] == 3 and j % 2 == 0):
                t = send[i] if i == j else send[i] + pd[i][j]
                if t <= deadline:
                    arr.append(t)
        t = max(send[j], _qth(arr, q))
        if t <= deadline:
            prepared[j] = t

    for j in range(n):
        if role[j] > 1 or prepared[j] == INF:
            continue
        arr = []
        for i in range(n):
            if not trusted[i]:
                continue
            if role[i] == 0 and prepared[i] != INF:
                t = prepared[i] if i == j else prepared[i] + cd[i][j]
            elif role[i] == 3 and j % 2 == 0:
                t = send[i] + cd[i][j]
            else:
                continue
            if t <= deadline:
                arr.append(t)
        t = max(prepared[j], _qth(arr, q))
        if t <= deadline:
            committed[j] = t

    return np.array(prepared), np.array(committed)


def count_commits(committed, role) -> int:
    return sum(1 for c, r in zip(committed, role) if r == 0 and c != INF)
