"""Transient control-flow graphs of single procedures."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from fractions import Fraction

from ..cts import Procedure
from ..isa import Call, Lfence, Program, Ret, succs


def immediate_dominators(nodes, succ_of, root) -> dict:
    """Iterative dominator computation (Cooper, Harvey and Kennedy).

    Returns ``node -> immediate dominator`` for every node reachable from
    ``root``; the root maps to itself.
    """
    order = []
    seen = {root}
    stack = [(root, iter(succ_of(root)))]
    while stack:
        node, it = stack[-1]
        nxt = next((s for s in it if s in nodes and s not in seen), None)
        if nxt is None:
            order.append(node)
            stack.pop()
        else:
            seen.add(nxt)
            stack.append((nxt, iter(succ_of(nxt))))
    rpo = order[::-1]
    index = {n: i for i, n in enumerate(rpo)}
    preds: dict = {n: [] for n in rpo}
    for n in rpo:
        for s in succ_of(n):
            if s in index:
                preds[s].append(n)
    idom = {root: root}

    def intersect(a, b):
        while a != b:
            while index[a] > index[b]:
                a = idom[a]
            while index[b] > index[a]:
                b = idom[b]
        return a

    changed = True
    while changed:
        changed = False
        for n in rpo[1:]:
            done = [p for p in preds[n] if p in idom]
            if not done:
                continue
            new = done[0]
            for p in done[1:]:
                new = intersect(p, new)
            if idom.get(n) != new:
                idom[n] = new
                changed = True
    return idom


def dominator_depths(idom: dict, root) -> dict:
    """Depth in the dominator tree, with the root at depth 1."""
    depth = {root: 1}
    for n in idom:
        chain = []
        while n not in depth:
            chain.append(n)
            n = idom[n]
        d = depth[n]
        for m in reversed(chain):
            d += 1
            depth[m] = d
    return depth


def dominates(idom: dict, a, b) -> bool:
    while True:
        if a == b:
            return True
        parent = idom.get(b)
        if parent is None or parent == b:
            return False
        b = parent


def natural_loops(nodes, succ_of, idom) -> dict:
    """Header -> body of the natural loop(s) closed by back edges into it."""
    preds: dict = {n: set() for n in nodes}
    for n in nodes:
        for s in succ_of(n):
            if s in preds:
                preds[s].add(n)
    loops: dict = {}
    for u in nodes:
        if u not in idom:
            continue
        for h in succ_of(u):
            if h in idom and dominates(idom, h, u):
                body = loops.setdefault(h, {h})
                work = [u]
                while work:
                    m = work.pop()
                    if m not in body:
                        body.add(m)
                        work.extend(preds[m])
    return loops


def loop_depths(nodes, succ_of, root) -> dict:
    idom = immediate_dominators(nodes, succ_of, root)
    loops = natural_loops(nodes, succ_of, idom)
    return {n: sum(1 for body in loops.values() if n in body) for n in nodes}


@dataclass
class Tcfg:
    proc: Procedure
    nodes: frozenset
    edges: dict  # (u, v) -> Fraction weight
    enter: frozenset
    exit: frozenset
    loop_depth: dict
    dom_depth: dict

    def successors(self, u) -> list:
        return [v for (a, v) in self.edges if a == u]

    def adjacency(self, removed=frozenset()) -> dict:
        adj: dict = {n: [] for n in self.nodes}
        for (u, v) in self.edges:
            if (u, v) not in removed:
                adj[u].append(v)
        return adj

    def reachable(self, src, removed=frozenset(), adj=None) -> set:
        """Nodes reachable from ``src`` by paths of at least one edge."""
        adj = adj if adj is not None else self.adjacency(removed)
        seen: set = set()
        work = deque(adj[src])
        while work:
            n = work.popleft()
            if n not in seen:
                seen.add(n)
                work.extend(adj[n])
        return seen

    def reaches(self, src, dst) -> bool:
        return dst in self.reachable(src)

    @property
    def total_weight(self) -> Fraction:
        return sum(self.edges.values(), Fraction(0))


def _ordinary_succs(prog: Program, body: frozenset):
    """Intraprocedural control flow with calls returning normally."""

    def succ_of(a):
        return [s for s in succs(a, prog.instrs[a]) if s in body]

    return succ_of


def tsuccs(prog: Program, addr: int, enter: frozenset) -> tuple:
    ins = prog.instrs[addr]
    if isinstance(ins, (Call, Ret)):
        return tuple(sorted(enter))
    if isinstance(ins, Lfence):
        return ()
    return succs(addr, ins)


def build_tcfg(proc: Procedure, prog: Program) -> Tcfg:
    body = proc.body
    enter = frozenset(
        a for a in body
        if a == proc.entry or (a - 1 in body and isinstance(prog.instrs[a - 1], Call))
    )
    exits = frozenset(a for a in body if isinstance(prog.instrs[a], (Call, Ret)))
    succ_of = _ordinary_succs(prog, body)
    idom = immediate_dominators(body, succ_of, proc.entry)
    ddepth = dominator_depths(idom, proc.entry)
    loops = natural_loops(body, succ_of, idom)
    ldepth = {n: sum(1 for b in loops.values() if n in b) for n in body}
    edges: dict = {}
    for u in sorted(body):
        for v in tsuccs(prog, u, enter):
            if v in body:
                edges[(u, v)] = Fraction(ldepth[v], ddepth.get(v, 1))
    return Tcfg(proc, frozenset(body), edges, enter, exits, ldepth, ddepth)
