"""Speculative operational semantics and bounded trace exploration.

A configuration is ``(regs, dmem, spec, cs, transient)``.  ``regs`` is a tuple
aligned with :func:`register_names` (PC, SP, then the general registers),
``dmem`` is aligned with the program's sorted data addresses, ``spec`` is the
ordered speculative store list of ``(address, LabeledValue)`` pairs and ``cs``
the call stack of return addresses.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

from .isa import (
    PUB,
    SEC,
    ZERO,
    ZR,
    Bnz,
    Call,
    CodeRef,
    Div,
    Endbr,
    Jmp,
    LabeledValue,
    Ld,
    Lfence,
    Op,
    Program,
    Ret,
    St,
    join,
)

SEQ_KIND = "seq"
T_KIND = "transient"


@dataclass(frozen=True)
class HardwareMode:
    stl: bool = True
    psf: bool = False
    sls: bool = False

    @classmethod
    def parse(cls, text: str) -> "HardwareMode":
        """Parse ``stl|nostl,psf|nopsf,sls|nosls`` (any subset, any order)."""
        kw = {}
        for tok in filter(None, (t.strip().lower() for t in text.split(","))):
            neg = tok.startswith("no")
            name = tok[2:] if neg else tok
            if name not in ("stl", "psf", "sls"):
                raise ValueError(f"unknown hardware flag {tok!r}")
            kw[name] = not neg
        return cls(**kw)

    def __str__(self) -> str:
        return ",".join(
            ("" if on else "no") + n for n, on in (("stl", self.stl), ("psf", self.psf), ("sls", self.sls))
        )


CORE = HardwareMode()


class Observation(NamedTuple):
    kind: str  # eps, bnz, call, ld, st, div
    values: tuple = ()

    @property
    def is_secret(self) -> bool:
        return any(v.label is SEC for v in self.values)

    def __str__(self) -> str:
        if self.kind == "eps":
            return "eps"
        return f"{self.kind} {' '.join(str(v) for v in self.values)}"


EPS = Observation("eps")


class Configuration(NamedTuple):
    regs: tuple
    dmem: tuple
    spec: tuple
    cs: tuple
    transient: bool

    @property
    def pc(self) -> int:
        return self.regs[0].value


def register_names(prog: Program) -> tuple:
    return ("pc", "sp") + prog.gprs


def reg_index(prog: Program) -> dict:
    return {r: i for i, r in enumerate(register_names(prog))}


def read_reg(cfg: Configuration, ridx: dict, reg: str) -> LabeledValue:
    if reg == ZR:
        return ZERO
    return cfg.regs[ridx[reg]]


def initial_configuration(prog: Program, overrides: dict | None = None) -> Configuration:
    """Initial configuration from the program's policy.

    ``overrides`` maps data addresses to replacement values (labels are kept).
    """
    ridx = reg_index(prog)
    regs = [ZERO] * len(ridx)
    regs[0] = LabeledValue(entry_point(prog), PUB)
    regs[1] = LabeledValue(prog.sp_init & prog.mask, PUB)
    dmem = []
    for a in sorted(prog.data):
        lv = prog.data[a]
        if overrides and a in overrides:
            lv = LabeledValue(overrides[a] & prog.mask, lv.label)
        dmem.append(lv)
    return Configuration(tuple(regs), tuple(dmem), (), (), False)


def entry_point(prog: Program) -> int:
    for p in prog.procs:
        if p.name == "main":
            return p.entry
    return 0


# --- transition functions ---------------------------------------------------


class Successor(NamedTuple):
    """One transition.  ``source`` describes where a loaded value came from:
    None (not a load), "init" (data memory), or the index into ``spec``."""

    config: Configuration
    obs: Observation
    kind: str
    source: object = None
    sls: bool = False


class _Ctx:
    """Per-program lookup tables shared by all steps."""

    def __init__(self, prog: Program):
        self.prog = prog
        self.ridx = reg_index(prog)
        self.aidx = prog.addr_index
        self.mask = prog.mask
        self.endbrs = prog.endbrs()
        self.post_calls = prog.post_call_sites()
        self.ninstr = len(prog.instrs)


_CTX_CACHE: dict = {}


def _ctx(prog: Program) -> _Ctx:
    c = _CTX_CACHE.get(id(prog))
    if c is None or c.prog is not prog:
        c = _Ctx(prog)
        if len(_CTX_CACHE) > 256:
            _CTX_CACHE.clear()
        _CTX_CACHE[id(prog)] = c
    return c


def _with_reg(cfg: Configuration, ctx: _Ctx, pc: int, reg: str | None, val) -> tuple:
    regs = list(cfg.regs)
    regs[0] = LabeledValue(pc, PUB)
    if reg is not None:
        regs[ctx.ridx[reg]] = val
    return tuple(regs)


def _operand(cfg, ctx, o) -> LabeledValue:
    if isinstance(o, str):
        return read_reg(cfg, ctx.ridx, o)
    if isinstance(o, CodeRef):
        return LabeledValue(o.addr & ctx.mask, PUB)
    return LabeledValue(o & ctx.mask, PUB)


def eval_op(opcode: str, vals: list, mask: int) -> LabeledValue:
    nums = [v.value for v in vals]
    label = join(*(v.label for v in vals)) if vals else PUB
    if opcode in ("MOV", "CONST"):
        r = nums[0]
    elif opcode == "ADD":
        r = sum(nums)
    elif opcode == "SUB":
        r = nums[0] - sum(nums[1:])
    elif opcode == "MUL":
        r = 1
        for n in nums:
            r *= n
    elif opcode == "XOR":
        r = 0
        for n in nums:
            r ^= n
    elif opcode == "AND":
        r = mask
        for n in nums:
            r &= n
    elif opcode == "OR":
        r = 0
        for n in nums:
            r |= n
    elif opcode == "MAX":
        r = max(nums)
    elif opcode == "MIN":
        r = min(nums)
    else:
        raise ValueError(f"unknown opcode {opcode}")
    return LabeledValue(r & mask, label)


def _memory_view(cfg: Configuration, ctx: _Ctx, addr: int):
    """Sequential value at a mapped address and its source."""
    for k in range(len(cfg.spec) - 1, -1, -1):
        a, v = cfg.spec[k]
        if a == addr:
            return v, k
    return cfg.dmem[ctx.aidx[addr]], "init"


def successors(cfg: Configuration, prog: Program, mode: HardwareMode = CORE) -> list:
    """The sequential successor followed by all transient successors.

    The order is fixed so that a successor index replays a trace.
    """
    ctx = _ctx(prog)
    pc = cfg.pc
    if not 0 <= pc < ctx.ninstr:
        return [Successor(cfg, EPS, SEQ_KIND)]
    ins = prog.instrs[pc]
    out: list = []

    def trans(regs, **kw):
        return cfg._replace(regs=regs, transient=True, **kw)

    if isinstance(ins, Bnz):
        v = read_reg(cfg, ctx.ridx, ins.src)
        obs = Observation("bnz", (v,))
        c = v.value != 0
        seq_pc = pc + 1 + (ins.disp if c else 0)
        t_pc = pc + 1 + (0 if c else ins.disp)
        out.append(Successor(cfg._replace(regs=_with_reg(cfg, ctx, seq_pc, None, None)), obs, SEQ_KIND))
        out.append(Successor(trans(_with_reg(cfg, ctx, t_pc, None, None)), obs, T_KIND))
        return out

    if isinstance(ins, Call):
        v = read_reg(cfg, ctx.ridx, ins.src)
        obs = Observation("call", (v,))
        target = v.value
        cs = cfg.cs + (pc + 1,)
        if 0 <= target < ctx.ninstr and isinstance(prog.instrs[target], Endbr):
            out.append(Successor(cfg._replace(regs=_with_reg(cfg, ctx, target, None, None), cs=cs), obs, SEQ_KIND))
        else:
            out.append(Successor(cfg, obs, SEQ_KIND))
        for e in ctx.endbrs:
            if e != target:
                out.append(Successor(trans(_with_reg(cfg, ctx, e, None, None), cs=cs), obs, T_KIND))
        if mode.sls:
            out.append(Successor(trans(_with_reg(cfg, ctx, pc + 1, None, None)), obs, T_KIND, sls=True))
        return out

    if isinstance(ins, Ret):
        if not cfg.cs:
            out.append(Successor(cfg, EPS, SEQ_KIND))
        else:
            ret = cfg.cs[-1]
            cs = cfg.cs[:-1]
            out.append(Successor(cfg._replace(regs=_with_reg(cfg, ctx, ret, None, None), cs=cs), EPS, SEQ_KIND))
            for p in ctx.post_calls:
                if p != ret:
                    out.append(Successor(trans(_with_reg(cfg, ctx, p, None, None), cs=cs), EPS, T_KIND))
        if mode.sls:
            out.append(Successor(trans(_with_reg(cfg, ctx, pc + 1, None, None)), EPS, T_KIND, sls=True))
        return out

    if isinstance(ins, Jmp):
        out.append(Successor(cfg._replace(regs=_with_reg(cfg, ctx, pc + 1 + ins.disp, None, None)), EPS, SEQ_KIND))
        if mode.sls:
            out.append(Successor(trans(_with_reg(cfg, ctx, pc + 1, None, None)), EPS, T_KIND, sls=True))
        return out

    if isinstance(ins, Endbr):
        out.append(Successor(cfg._replace(regs=_with_reg(cfg, ctx, pc + 1, None, None)), EPS, SEQ_KIND))
        return out

    if isinstance(ins, Lfence):
        if cfg.transient:
            out.append(Successor(cfg, EPS, SEQ_KIND))
        else:
            dmem = list(cfg.dmem)
            for a, v in cfg.spec:
                dmem[ctx.aidx[a]] = v
            out.append(
                Successor(
                    cfg._replace(regs=_with_reg(cfg, ctx, pc + 1, None, None), dmem=tuple(dmem), spec=()),
                    EPS,
                    SEQ_KIND,
                )
            )
        return out

    if isinstance(ins, Op):
        vals = [_operand(cfg, ctx, o) for o in ins.operands]
        res = eval_op(ins.opcode, vals, ctx.mask)
        out.append(Successor(cfg._replace(regs=_with_reg(cfg, ctx, pc + 1, ins.dst, res)), EPS, SEQ_KIND))
        return out

    if isinstance(ins, Div):
        a = read_reg(cfg, ctx.ridx, ins.a)
        b = read_reg(cfg, ctx.ridx, ins.b)
        q = a.value // b.value if b.value else 0
        res = LabeledValue(q & ctx.mask, join(a.label, b.label))
        obs = Observation("div", (a, b))
        out.append(Successor(cfg._replace(regs=_with_reg(cfg, ctx, pc + 1, ins.dst, res)), obs, SEQ_KIND))
        return out

    if isinstance(ins, St):
        base = read_reg(cfg, ctx.ridx, ins.base)
        al = LabeledValue((base.value + ins.disp) & ctx.mask, base.label)
        obs = Observation("st", (al,))
        addr = al.value
        if addr in ctx.aidx:
            v = read_reg(cfg, ctx.ridx, ins.src)
            out.append(
                Successor(
                    cfg._replace(regs=_with_reg(cfg, ctx, pc + 1, None, None), spec=cfg.spec + ((addr, v),)),
                    obs,
                    SEQ_KIND,
                )
            )
        else:
            out.append(Successor(cfg, obs, SEQ_KIND))
            out.append(Successor(trans(_with_reg(cfg, ctx, pc + 1, None, None)), obs, T_KIND))
        return out

    if isinstance(ins, Ld):
        base = read_reg(cfg, ctx.ridx, ins.base)
        al = LabeledValue((base.value + ins.disp) & ctx.mask, base.label)
        obs = Observation("ld", (al,))
        addr = al.value
        if addr not in ctx.aidx:
            out.append(Successor(cfg, obs, SEQ_KIND))
            out.append(Successor(trans(_with_reg(cfg, ctx, pc + 1, ins.dst, ZERO)), obs, T_KIND, "init"))
            return out
        v_seq, src_seq = _memory_view(cfg, ctx, addr)
        out.append(
            Successor(cfg._replace(regs=_with_reg(cfg, ctx, pc + 1, ins.dst, v_seq)), obs, SEQ_KIND, src_seq)
        )
        if mode.psf:
            for v, src in _psf_values(cfg, ctx, addr, v_seq):
                out.append(Successor(trans(_with_reg(cfg, ctx, pc + 1, ins.dst, v)), obs, T_KIND, src))
        elif mode.stl:
            d = cfg.dmem[ctx.aidx[addr]]
            out.append(Successor(trans(_with_reg(cfg, ctx, pc + 1, ins.dst, d)), obs, T_KIND, "init"))
            for k, (a, v) in enumerate(cfg.spec):
                if a == addr:
                    out.append(Successor(trans(_with_reg(cfg, ctx, pc + 1, ins.dst, v)), obs, T_KIND, k))
        return out

    raise TypeError(f"unknown instruction {ins!r}")


def _psf_values(cfg: Configuration, ctx: _Ctx, addr: int, v_seq: LabeledValue) -> list:
    """Distinct candidate values under predictive store forwarding, each with
    the most recent source that supplies it."""
    cand: dict = {}
    cand[cfg.dmem[ctx.aidx[addr]]] = "init"
    for k, (_, v) in enumerate(cfg.spec):
        cand[v] = k
    cand.pop(v_seq, None)
    return list(cand.items())


def step_sequential(cfg: Configuration, prog: Program) -> tuple:
    """The unique sequential successor and its observation."""
    s = successors(cfg, prog, HardwareMode(stl=False))[0]
    return s.config, s.obs


def step_transient(cfg: Configuration, prog: Program, mode: HardwareMode = CORE) -> list:
    """All transient (configuration, observation) pairs."""
    return [(s.config, s.obs) for s in successors(cfg, prog, mode) if s.kind == T_KIND]


def is_halt(s: Successor, pre: Configuration) -> bool:
    return s.kind == SEQ_KIND and s.config == pre


# --- traces -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StepRecord:
    index: int
    pre: Configuration
    post: Configuration
    addr: int
    obs: Observation
    kind: str
    provenance: object = None  # None, "init", or the step index of the store
    choice: int = 0
    sls: bool = False

    @property
    def halted(self) -> bool:
        return self.kind == SEQ_KIND and self.pre == self.post


@dataclass(frozen=True)
class Trace:
    steps: tuple
    status: str  # "halt", "bound", or "pruned"

    @property
    def final(self) -> Configuration:
        return self.steps[-1].post if self.steps else None

    @property
    def choices(self) -> tuple:
        return tuple(s.choice for s in self.steps)

    def observations(self) -> tuple:
        return tuple(s.obs for s in self.steps)


@dataclass
class ExplorationLimits:
    max_steps: int | None = 200
    max_traces: int | None = None
    memo: bool = True


@dataclass
class Coverage:
    traces: int = 0
    length_bound_hits: int = 0
    pruned: int = 0
    widened: int = 0
    trace_limit_hit: bool = False
    initial_configs: int = 1
    inputs_enumerated: bool = False

    @property
    def complete(self) -> bool:
        return self.length_bound_hits == 0 and not self.trace_limit_hit

    def as_dict(self) -> dict:
        return {
            "traces": self.traces,
            "length_bound_hits": self.length_bound_hits,
            "memo_pruned": self.pruned,
            "widened": self.widened,
            "trace_limit_hit": self.trace_limit_hit,
            "initial_configs": self.initial_configs,
            "inputs_enumerated": self.inputs_enumerated,
            "complete": self.complete,
        }


class _PathState:
    """Provenance side tables along the current DFS path."""

    __slots__ = ("spec_src", "dmem_src")

    def __init__(self, spec_src: tuple, dmem_src: dict):
        self.spec_src = spec_src
        self.dmem_src = dmem_src


def _advance(pre: Configuration, s: Successor, state: _PathState, step_index: int, aidx, prog) -> tuple:
    """Translate a successor's source to a step index and update side tables."""
    prov = None
    if s.source is not None:
        if s.source == "init":
            a = _ea(pre, prog.instrs[pre.pc], prog)
            prov = state.dmem_src.get(a, "init") if a in aidx else "init"
        else:
            prov = state.spec_src[s.source]
    spec_src = state.spec_src
    dmem_src = state.dmem_src
    post = s.config
    if len(post.spec) > len(pre.spec):
        spec_src = spec_src + (step_index,)
    elif not post.spec and pre.spec and s.kind == SEQ_KIND and post != pre:
        dmem_src = dict(dmem_src)
        for (a, _), src in zip(pre.spec, spec_src):
            dmem_src[a] = src
        spec_src = ()
    return prov, _PathState(spec_src, dmem_src)


def _ea(cfg: Configuration, ins, prog: Program) -> int:
    base = read_reg(cfg, _ctx(prog).ridx, ins.base)
    return (base.value + ins.disp) & prog.mask


def memo_key(cfg: Configuration, mode: HardwareMode) -> tuple:
    """Key under which futures of a configuration are interchangeable.

    Once execution is transient no rule drains the store list, and a RET with
    a non-empty call stack continues at every post-call site whatever the
    stack holds.  So only the set of pending stores (or, without forwarding,
    the latest store per address) and the stack depth matter.  A deeper stack
    only adds behaviours, so the depth is returned separately for a dominance
    check.
    """
    if not cfg.transient:
        return cfg, 0
    if mode.stl or mode.psf:
        spec = frozenset(cfg.spec)
    else:
        latest = {}
        for a, v in cfg.spec:
            latest[a] = v
        spec = tuple(sorted(latest.items()))
    return (cfg.regs, cfg.dmem, spec), len(cfg.cs)


def explore(
    prog: Program,
    limits: ExplorationLimits | None = None,
    mode: HardwareMode = CORE,
    init: Configuration | None = None,
    coverage: Coverage | None = None,
) -> Iterator[Trace]:
    """Depth-first enumeration of bounded traces from one initial configuration.

    A branch ends at a halt (its self-loop step included), at the length bound,
    or when memoization finds an equivalent configuration already expanded
    with at least as much remaining budget and call-stack depth.

    With memoization on, a transient configuration that repeats an ancestor
    on the current path with a strictly deeper call stack can pump that
    stack without limit.  Its stack is then widened to the full step bound
    (padding with its own top entry), so everything reachable under any
    pumping depth is explored once.  Widened traces are real executions up
    to the number of pumping rounds, but cannot be rebuilt by ``replay``.
    Statistics go to ``coverage``.
    """
    limits = limits or ExplorationLimits()
    cov = coverage if coverage is not None else Coverage()
    cfg0 = init if init is not None else initial_configuration(prog)
    aidx = prog.addr_index
    bound = limits.max_steps
    seen: dict = {}
    onpath: dict = {}
    path: list = []
    # each frame holds a node's configuration, side tables, pending successors
    # and its memo key while on the path
    frames: list = []

    def open_frame(cfg, state, depth):
        key = None
        if limits.memo:
            key, cslen = memo_key(cfg, mode)
            if cfg.transient and bound is not None:
                cslen = min(cslen, bound - depth)
            prev = seen.get(key)
            if prev is None:
                seen[key] = [(depth, cslen)]
            else:
                for d0, l0 in prev:
                    if d0 <= depth and l0 >= cslen:
                        return "pruned"
                prev[:] = [(d0, l0) for d0, l0 in prev if not (d0 >= depth and l0 <= cslen)]
                prev.append((depth, cslen))
        if bound is not None and depth >= bound:
            return "bound"
        succ = successors(cfg, prog, mode)
        entry = None
        if key is not None and cfg.transient:
            entry = (key, len(cfg.cs))
            onpath.setdefault(key, []).append(len(cfg.cs))
        frames.append([cfg, state, succ, 0, entry])
        return None

    def widen(cfg):
        key, cslen = memo_key(cfg, mode)
        depths = onpath.get(key)
        if not depths or min(depths) >= cslen or cslen >= bound:
            return cfg
        cov.widened += 1
        return cfg._replace(cs=(cfg.cs[-1],) * bound)

    def emit(status):
        cov.traces += 1
        if status == "bound":
            cov.length_bound_hits += 1
        elif status == "pruned":
            cov.pruned += 1
        return Trace(tuple(path), status)

    status = open_frame(cfg0, _PathState((), {}), 0)
    if status is not None:
        yield emit(status)
        return
    while frames:
        if limits.max_traces is not None and cov.traces >= limits.max_traces:
            cov.trace_limit_hit = True
            return
        top = frames[-1]
        cfg, state, succ, k, _ = top
        if k >= len(succ):
            frames.pop()
            if top[4] is not None:
                onpath[top[4][0]].pop()
            if path:
                path.pop()
            continue
        top[3] = k + 1
        s = succ[k]
        if limits.memo and bound is not None and s.config.transient and s.config.cs:
            wide = widen(s.config)
            if wide is not s.config:
                s = s._replace(config=wide)
        depth = len(path)
        prov, nstate = _advance(cfg, s, state, depth, aidx, prog)
        rec = StepRecord(depth, cfg, s.config, cfg.pc, s.obs, s.kind, prov, k, s.sls)
        path.append(rec)
        if rec.halted:
            yield emit("halt")
            path.pop()
            continue
        status = open_frame(s.config, nstate, depth + 1)
        if status is not None:
            yield emit(status)
            path.pop()
    return


def input_assignments(prog: Program, enumerate_inputs: bool) -> list:
    """Initial-memory overrides to sweep: one empty override unless inputs are
    enumerated, in which case every value combination of the PUB inputs."""
    if not enumerate_inputs or not prog.inputs:
        return [None]
    addrs = sorted(prog.inputs)
    rng = range(1 << prog.word_width)
    return [dict(zip(addrs, vals)) for vals in itertools.product(rng, repeat=len(addrs))]


def explore_all(
    prog: Program,
    limits: ExplorationLimits | None = None,
    mode: HardwareMode = CORE,
    enumerate_inputs: bool = False,
    coverage: Coverage | None = None,
) -> Iterator[Trace]:
    """Explore from every initial configuration selected by the input sweep."""
    cov = coverage if coverage is not None else Coverage()
    assigns = input_assignments(prog, enumerate_inputs)
    cov.initial_configs = len(assigns)
    cov.inputs_enumerated = enumerate_inputs and bool(prog.inputs)
    for ov in assigns:
        yield from explore(prog, limits, mode, initial_configuration(prog, ov), cov)
        if cov.trace_limit_hit:
            return


def sequential_trace(prog: Program, max_steps: int = 10_000, init: Configuration | None = None) -> Trace:
    """The unique sequential trace, ending at the first halt."""
    cfg = init if init is not None else initial_configuration(prog)
    aidx = prog.addr_index
    state = _PathState((), {})
    steps = []
    for i in range(max_steps):
        s = successors(cfg, prog, HardwareMode(stl=False))[0]
        prov, state = _advance(cfg, s, state, i, aidx, prog)
        rec = StepRecord(i, cfg, s.config, cfg.pc, s.obs, s.kind, prov, 0)
        steps.append(rec)
        if rec.halted:
            return Trace(tuple(steps), "halt")
        cfg = s.config
    return Trace(tuple(steps), "bound")


def replay(prog: Program, choices, mode: HardwareMode = CORE, init: Configuration | None = None) -> Trace:
    """Rebuild a trace from its successor indices."""
    cfg = init if init is not None else initial_configuration(prog)
    aidx = prog.addr_index
    state = _PathState((), {})
    steps = []
    for i, k in enumerate(choices):
        succ = successors(cfg, prog, mode)
        s = succ[k]
        prov, state = _advance(cfg, s, state, i, aidx, prog)
        steps.append(StepRecord(i, cfg, s.config, cfg.pc, s.obs, s.kind, prov, k, s.sls))
        cfg = s.config
    status = "halt" if steps and steps[-1].halted else "bound"
    return Trace(tuple(steps), status)


def data_memory(prog: Program, cfg: Configuration, drain: bool = True) -> dict:
    """Address -> value view of data memory, with pending stores applied."""
    mem = {a: cfg.dmem[i] for a, i in prog.addr_index.items()}
    if drain:
        for a, v in cfg.spec:
            mem[a] = v
    return mem
