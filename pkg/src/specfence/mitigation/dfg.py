"""Static data-flow graph of a procedure over (register, instruction) nodes."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from ..isa import SP, ZR, Div, Ld, Op, Program, St, writes
from .tcfg import Tcfg, tsuccs

NOOP = "no-op"
REG = "register-dep"
STACK = "stack-dep"


@dataclass
class StaticDfg:
    registers: tuple
    edges: dict = field(default_factory=dict)  # node -> {(node, kind)}

    def add(self, src, dst, kind: str) -> None:
        self.edges.setdefault(src, set()).add((dst, kind))

    def reach(self, start) -> set:
        """Nodes reachable from ``start`` (``start`` included)."""
        seen = {start}
        work = deque([start])
        while work:
            n = work.popleft()
            for m, _ in self.edges.get(n, ()):
                if m not in seen:
                    seen.add(m)
                    work.append(m)
        return seen

    def static_dep(self, src, dst) -> bool:
        return dst in self.reach(src)

    def edge_kinds(self, src, dst) -> set:
        return {k for m, k in self.edges.get(src, ()) if m == dst}


def build_static_dfg(prog: Program, tcfg: Tcfg) -> StaticDfg:
    body = tcfg.nodes
    regs = (SP,) + prog.gprs
    g = StaticDfg(regs)
    for a in sorted(body):
        ins = prog.instrs[a]
        w = writes(ins)
        for b in tsuccs(prog, a, tcfg.enter):
            if b not in body:
                continue
            for r in regs:
                if r != w:
                    g.add((r, a), (r, b), NOOP)
        if a + 1 in body:
            if isinstance(ins, Op):
                for r in ins.inputs:
                    if r != ZR:
                        g.add((r, a), (ins.dst, a + 1), REG)
            elif isinstance(ins, Div):
                for r in (ins.a, ins.b):
                    if r != ZR:
                        g.add((r, a), (ins.dst, a + 1), REG)
    stores = [a for a in body if isinstance(prog.instrs[a], St) and prog.instrs[a].base == SP]
    loads = [a for a in body if isinstance(prog.instrs[a], Ld) and prog.instrs[a].base == SP]
    for i in stores:
        st = prog.instrs[i]
        if st.src == ZR:
            continue
        for j in loads:
            ld = prog.instrs[j]
            if ld.disp == st.disp and j + 1 in body:
                g.add((st.src, i), (ld.dst, j + 1), STACK)
    return g
