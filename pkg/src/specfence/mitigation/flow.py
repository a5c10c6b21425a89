"""Minimum edge cuts and the iterative heuristic directed multicut.

Edge weights are non-negative rationals.  Capacities are scaled to exact
integers as ``weight * M + 1`` with ``M`` larger than the edge count, so a
minimum cut has least total weight first and, among those, fewest edges;
zero-weight edges are thus free in weight but not chosen gratuitously.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from fractions import Fraction


class MulticutError(Exception):
    """A computed cut leaves some source connected to its sink."""


@dataclass(frozen=True)
class CutSet:
    edges: frozenset
    total_weight: Fraction

    @staticmethod
    def of(edges, weights: dict) -> "CutSet":
        edges = frozenset(edges)
        return CutSet(edges, sum((weights[e] for e in edges), Fraction(0)))


_SINK = object()


def _capacities(weights: dict) -> dict:
    if not weights:
        return {}
    lcd = 1
    for w in weights.values():
        lcd = lcd * Fraction(w).denominator // math.gcd(lcd, Fraction(w).denominator)
    big = len(weights) + 1
    return {e: int(Fraction(w) * lcd) * big + 1 for e, w in weights.items()}


def _reaches(adj: dict, s, t) -> bool:
    seen = {s}
    work = deque([s])
    while work:
        n = work.popleft()
        for m in adj.get(n, ()):
            if m == t:
                return True
            if m not in seen:
                seen.add(m)
                work.append(m)
    return False


def separated(edges, removed, s, t) -> bool:
    """Whether every path of at least one edge from ``s`` to ``t`` uses a
    removed edge."""
    adj: dict = {}
    for (u, v) in edges:
        if (u, v) not in removed:
            adj.setdefault(u, []).append(v)
    return not _reaches(adj, s, t)


def max_flow_min_cut(weights: dict, s, t, removed=frozenset()) -> CutSet:
    """Minimum s-t edge cut by Edmonds-Karp.

    ``weights`` maps edges ``(u, v)`` to weights; edges in ``removed`` are
    treated as absent.  When ``s == t`` the cut separates ``s`` from itself,
    i.e. breaks every cycle through it.
    """
    live = {e: w for e, w in weights.items() if e not in removed}
    cap0 = _capacities(live)
    # residual capacities over a graph whose sink is a copy of t
    target = _SINK
    cap: dict = {}
    adj: dict = {}
    orig: dict = {}
    for (u, v), c in cap0.items():
        vv = target if v == t else v
        key = (u, vv)
        cap[key] = cap.get(key, 0) + c
        orig.setdefault(key, []).append((u, v))
        adj.setdefault(u, set()).add(vv)
        adj.setdefault(vv, set()).add(u)
        cap.setdefault((vv, u), 0)
    if s not in adj:
        return CutSet(frozenset(), Fraction(0))
    while True:
        parent = {s: None}
        work = deque([s])
        while work and target not in parent:
            n = work.popleft()
            for m in adj.get(n, ()):
                if m not in parent and cap[(n, m)] > 0:
                    parent[m] = n
                    work.append(m)
        if target not in parent:
            break
        path = []
        m = target
        while parent[m] is not None:
            path.append((parent[m], m))
            m = parent[m]
        f = min(cap[e] for e in path)
        for (a, b) in path:
            cap[(a, b)] -= f
            cap[(b, a)] += f
    side = set(parent)
    cut = set()
    for key, es in orig.items():
        u, vv = key
        if u in side and vv not in side:
            cut.update(es)
    return CutSet.of(cut, weights)


def multicut(weights: dict, pairs, max_rounds: int = 64) -> CutSet:
    """Heuristic minimum directed multicut.

    Each pair's cut is recomputed with every other pair's current cut edges
    removed, round after round, until a round changes nothing.  If a global
    cut state repeats, the union of independent per-pair cuts is used
    instead.  The result is always validated.
    """
    pairs = sorted(set(pairs), key=repr)
    per: dict = {p: frozenset() for p in pairs}
    seen_states: set = set()
    converged = False
    for _ in range(max_rounds):
        changed = False
        for p in pairs:
            others = frozenset().union(*(per[q] for q in pairs if q != p))
            if separated(weights, others, *p):
                new = frozenset()
            else:
                new = max_flow_min_cut(weights, p[0], p[1], removed=others).edges
            if new != per[p]:
                per[p] = new
                changed = True
        if not changed:
            converged = True
            break
        state = tuple(per[p] for p in pairs)
        if state in seen_states:
            break
        seen_states.add(state)
    if converged:
        cut = frozenset().union(*per.values()) if per else frozenset()
    else:
        cut = frozenset().union(*(max_flow_min_cut(weights, *p).edges for p in pairs)) if pairs else frozenset()
    for p in pairs:
        if not separated(weights, cut, *p):
            raise MulticutError(f"pair {p} not separated by the cut")
    return CutSet.of(cut, weights)
