"""Sequential-preservation comparisons between a program and its mitigation."""

from __future__ import annotations

from specfence.isa import SP, Ld, St
from specfence.semantics import data_memory, sequential_trace


def observations(prog):
    """Non-eps observations of the sequential trace, as strings."""
    tr = sequential_trace(prog)
    return [str(s.obs) for s in tr.steps if s.obs.kind != "eps"], tr


def exact_preserved(src, out) -> tuple:
    """(observations equal, final memory on the input's addresses equal)."""
    oa, ta = observations(src)
    ob, tb = observations(out)
    ma = data_memory(src, ta.final)
    mb = data_memory(out, tb.final)
    return oa == ob, all(ma[a] == mb.get(a) for a in ma)


def _projected(prog, origin):
    tr = sequential_trace(prog)
    out = []
    for s in tr.steps:
        if s.obs.kind == "eps" or origin[s.addr] is None:
            continue
        ins = prog.instrs[s.addr]
        if s.obs.kind == "call":
            v = s.obs.values[0]
            tgt = origin[v.value] if 0 <= v.value < len(origin) else ("bad", v.value)
            out.append(("call", tgt, v.label))
        elif isinstance(ins, (Ld, St)) and ins.base == SP:
            out.append((s.obs.kind, "sp", ins.disp, s.obs.values[0].label))
        else:
            out.append((s.obs.kind, tuple(s.obs.values)))
    return out, tr


def preserved_modulo_relocation(src, out, origin) -> tuple:
    """Compare observations of original instructions with code and stack
    addresses factored out, and final memory on original globals."""
    pa, ta = _projected(src, tuple(range(len(src.instrs))))
    pb, tb = _projected(out, origin)
    ma = data_memory(src, ta.final)
    mb = data_memory(out, tb.final)
    stack = src.stack_addrs()
    mem_ok = all(ma[a] == mb.get(a) for a in ma if a not in stack)
    return pa == pb, mem_ok
