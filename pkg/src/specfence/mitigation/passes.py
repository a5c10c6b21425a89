"""The program transformations: fences, private stacks, register cleaning,
stack initialization, straight-line-speculation fences and the
fence-after-every-branch baseline."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from ..cts import Procedure, call_targets, partition_procedures
from ..isa import (
    PUB, SP, ZR, Bnz, Call, Endbr, Jmp, LabeledValue, Ld, Lfence, Op, PrivateStack, Program,
    Ret, St, ZERO, succs,
)
from .dfg import build_static_dfg
from .flow import CutSet, multicut
from .pairs import generate_pairs
from .rewrite import Rewriter
from .tcfg import build_tcfg


class PassError(Exception):
    pass


@dataclass
class ProcedurePlan:
    """Fence-insertion analysis of one procedure."""

    proc: Procedure
    tcfg: object
    dfg: object
    pairs: set
    cut: CutSet


@dataclass
class PassResult:
    program: Program
    origin: tuple  # new address -> address in the input, None when inserted
    plans: list = field(default_factory=list)
    inserted: int = 0
    details: dict = field(default_factory=dict)


def _procedures(prog: Program):
    procs, report = partition_procedures(prog)
    if not report.ok:
        raise PassError(f"program is not partitioned into procedures: {report.violations[0].message}")
    return procs


def _finish(rw: Rewriter, plans=None) -> PassResult:
    prog, origin = rw.build()
    return PassResult(prog, origin, plans or [], sum(1 for o in origin if o is None))


def _is_sp_op(ins, opcode: str, k: int) -> bool:
    return isinstance(ins, Op) and ins.opcode == opcode and ins.dst == SP and ins.operands == (SP, k)


def _anchor(prog: Program, proc: Procedure) -> int:
    """A no-fallthrough instruction of ``proc`` after which a block may sit."""
    for a in sorted(proc.body, reverse=True):
        if isinstance(prog.instrs[a], (Ret, Jmp)):
            return a
    raise PassError(f"procedure {proc.name} has no RET or JMP to anchor a trampoline")


# --- fence insertion ---------------------------------------------------------


def plan_fences(prog: Program, variant: str = "core") -> list:
    plans = []
    for proc in _procedures(prog):
        tcfg = build_tcfg(proc, prog)
        dfg = build_static_dfg(prog, tcfg)
        pairs = generate_pairs(prog, tcfg, dfg, variant)
        st = {(p.source, p.sink) for p in pairs}
        cut = multicut(tcfg.edges, st) if st else CutSet(frozenset(), 0)
        plans.append(ProcedurePlan(proc, tcfg, dfg, pairs, cut))
    return plans


def materialize_cut(rw: Rewriter, prog: Program, proc: Procedure, edge) -> None:
    """Make every transient path along ``edge`` pass an LFENCE."""
    u, v = edge
    src = prog.instrs[u]
    if isinstance(src, (Call, Ret)):
        if isinstance(prog.instrs[v], Endbr):
            # an indirect-branch target must stay an ENDBR
            rw.insert_once(("after", v), v + 1, [Lfence()], redirect=False)
        else:
            rw.insert_once(("before", v), v, [Lfence()], redirect=False)
    elif v == u + 1 and not isinstance(src, Jmp):
        rw.insert_once(("before", v), v, [Lfence()], redirect=False)
    else:
        tok = rw.trampoline(_anchor(prog, proc), [Lfence()], v)
        rw.retarget(u, tok)


def insert_fences(prog: Program, variant: str = "core") -> PassResult:
    plans = plan_fences(prog, variant)
    rw = Rewriter(prog)
    for plan in plans:
        for edge in sorted(plan.cut.edges):
            materialize_cut(rw, prog, plan.proc, edge)
    return _finish(rw, plans)


# --- function-private stacks -------------------------------------------------


RECURSIVE_DEPTH = 4


def recursive_procedures(prog: Program, procs) -> set:
    """Names of procedures that may sequentially call themselves, directly or
    through other procedures (unresolved calls may reach any procedure)."""
    owner = {p.entry: p.name for p in procs}
    calls = call_targets(prog, procs)
    graph = {p.name: set() for p in procs}
    for p in procs:
        for a in p.body:
            graph[p.name].update(owner[t] for t in calls.get(a, ()))
    out = set()
    for name in graph:
        seen, work = set(), list(graph[name])
        while work:
            n = work.pop()
            if n == name:
                out.add(name)
                break
            if n not in seen:
                seen.add(n)
                work.extend(graph[n])
    return out


def default_depths(prog: Program, procs) -> dict:
    """Frames per private stack: one for a procedure that never has two live
    activations, a few for possibly recursive ones."""
    rec = recursive_procedures(prog, procs)
    return {p.name: RECURSIVE_DEPTH if p.name in rec else 1 for p in procs}


def fps_layout(prog: Program, procs, depth=None) -> dict:
    """Place a PSP word and a private stack per procedure above all mapped
    data, each stack followed by its unmapped underflow region.

    ``depth`` is a frame count for every procedure, a per-procedure dict, or
    None for :func:`default_depths`.
    """
    if depth is None:
        depth = default_depths(prog, procs)
    if isinstance(depth, int):
        depth = {p.name: depth for p in procs}
    if any(d < 1 for d in depth.values()):
        raise PassError("private stack depth must be a positive number of frames")
    nxt = max(list(prog.data) + [s.base + s.size for s in prog.stacks] + [-1]) + 1
    psps = {}
    for p in procs:
        psps[p.name] = nxt
        nxt += 1
    out = {}
    for p in procs:
        nxt += 1  # unmapped guard word below the stack
        base = nxt
        end = base + depth[p.name] * p.frame
        out[p.name] = PrivateStack(base, end, p.frame, psps[p.name])
        nxt = end + max(p.frame, 1)
    if nxt > (1 << prog.word_width):
        raise PassError(
            f"private stacks need {nxt} data addresses but the word width allows {1 << prog.word_width}"
        )
    return out


def fps_transform(prog: Program, depth=None) -> PassResult:
    procs = _procedures(prog)
    layout = fps_layout(prog, procs, depth)
    rw = Rewriter(prog)
    data = dict(prog.data)
    symbols = dict(prog.symbols)
    for p in procs:
        ps = layout[p.name]
        k = p.frame
        data[ps.psp] = LabeledValue(ps.end, PUB)
        for a in range(ps.base, ps.end):
            data[a] = ZERO
        symbols[f"psp.{p.name}"] = (ps.psp, 1)
        if ps.end > ps.base:
            symbols[f"stack.{p.name}"] = (ps.base, ps.end - ps.base)
        load = Ld(ZR, ps.psp, SP)
        save = St(ZR, ps.psp, SP)
        body = sorted(p.body)
        allocs = [a for a in body if _is_sp_op(prog.instrs[a], "SUB", k)] if k else []
        frees = [a for a in body if _is_sp_op(prog.instrs[a], "ADD", k)] if k else []
        if allocs:
            for a in allocs:
                rw.insert_before(a, [load])
                rw.insert_after(a, [Op("MAX", SP, (SP, ps.base)), save])
        else:
            rw.insert_after(p.entry, [load, Op("MAX", SP, (SP, ps.base)), save])
        for a in body:
            if isinstance(prog.instrs[a], Call):
                rw.insert_after(a, [load])
        if frees:
            for a in frees:
                rw.insert_after(a, [Op("MIN", SP, (SP, ps.end)), save])
        else:
            for a in body:
                if isinstance(prog.instrs[a], Ret):
                    rw.insert_before(a, [Op("MIN", SP, (SP, ps.end)), save])
    res = _finish(rw)
    stacks = dict(prog.private_stacks)
    stacks.update(layout)
    res.program = dataclasses.replace(res.program, data=data, symbols=symbols, private_stacks=stacks)
    return res


# --- register cleaning and stack initialization -----------------------------


def register_cleaning(prog: Program) -> PassResult:
    rw = Rewriter(prog)
    zeroed = {}
    for a, ins in enumerate(prog.instrs):
        if not isinstance(ins, (Call, Ret)):
            continue
        if a not in prog.calling_convention:
            raise PassError(f"no calling-convention entry for the {ins.mnemonic} at {a}")
        keep = set(prog.calling_convention[a])
        if isinstance(ins, Call):
            keep.add(ins.src)
        zero = [Op("MOV", r, (ZR,)) for r in prog.gprs if r not in keep]
        if zero:
            rw.insert_before(a, zero)
            zeroed[a] = tuple(z.dst for z in zero)
    res = _finish(rw)
    res.details["zeroed"] = zeroed
    return res


def stack_init_transform(prog: Program) -> PassResult:
    rw = Rewriter(prog)
    for p in _procedures(prog):
        if not p.frame:
            continue
        for a in sorted(p.body):
            if _is_sp_op(prog.instrs[a], "SUB", p.frame):
                rw.insert_after(a, [St(SP, d, ZR) for d in range(p.frame)])
    return _finish(rw)


def sls_fences(prog: Program) -> PassResult:
    rw = Rewriter(prog)
    for a, ins in enumerate(prog.instrs):
        if isinstance(ins, Jmp):
            rw.insert_after(a, [Lfence()])
    return _finish(rw)


def intel_lfence(prog: Program) -> PassResult:
    """Baseline: an LFENCE at the start of both successors of every BNZ."""
    rw = Rewriter(prog)
    for a, ins in enumerate(prog.instrs):
        if isinstance(ins, Bnz):
            for t in succs(a, ins):
                rw.insert_once(("entry", t), t, [Lfence()], redirect=True)
    return _finish(rw)
