"""Independent reference implementations shared by the test suites."""

from __future__ import annotations


def brute_force_flood(adj, initiator, max_tx, n_slots, listening, relaying):
    """Slot-by-slot unroll written with plain loops over neighbour lists."""
    n = len(adj)
    first = [None] * n
    sent = [[] for _ in range(n)]
    for s in range(n_slots):
        senders = []
        for v in range(n):
            if v == initiator:
                if s < max_tx:
                    senders.append(v)
            elif first[v] is not None and relaying[v] and first[v] < s <= first[v] + max_tx:
                senders.append(v)
        for v in senders:
            sent[v].append(s)
        for v in range(n):
            if v == initiator or first[v] is not None or v in senders or not listening[v]:
                continue
            if any(adj[u][v] for u in senders):
                first[v] = s
    return [-1 if f is None else f for f in first], sent
