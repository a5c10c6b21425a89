"""Dynamic data-flow graphs, taint primitives and the bounded SCT checker."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .cts import Procedure, SecurityTyping, proc_of
from .isa import SEC, SP, ZR, Call, Div, Jmp, Ld, Op, Program, Ret, St, sensitive_operands, writes
from .semantics import (
    CORE,
    Coverage,
    ExplorationLimits,
    HardwareMode,
    StepRecord,
    Trace,
    explore,
    initial_configuration,
    input_assignments,
    reg_index,
)

CORE_CLASSES = frozenset({"NCAL", "NCAS", "STKL", "NARG"})


def permitted_classes(mode: HardwareMode) -> frozenset:
    classes = set(CORE_CLASSES)
    if mode.psf:
        classes -= {"NCAL", "NCAS", "STKL"}
        classes.add("LOAD")
    if mode.sls:
        classes.add("LINE")
    return frozenset(classes)


class ClassificationError(Exception):
    """A taint primitive matched no class permitted by the hardware mode."""


class CorollaryError(Exception):
    """A secret observation has no taint-primitive ancestor."""


# --- dynamic DFG ------------------------------------------------------------

NOOP = "no-op"
REG = "register"
MEM = "memory"


def modified_register(prog: Program, rec: StepRecord) -> str | None:
    """Register (other than PC) written by a step, if any."""
    if rec.halted or not 0 <= rec.addr < len(prog.instrs):
        return None
    return writes(prog.instrs[rec.addr])


def step_in_edges(prog: Program, trace_steps, i: int, reg: str) -> list:
    """Direct predecessors of node ``(reg, i + 1)`` as ``(reg, step, kind)``."""
    rec = trace_steps[i]
    w = modified_register(prog, rec)
    if reg != w:
        return [(reg, i, NOOP)]
    ins = prog.instrs[rec.addr]
    if isinstance(ins, Op):
        return [(r, i, REG) for r in ins.inputs if r != ZR]
    if isinstance(ins, Div):
        return [(r, i, REG) for r in (ins.a, ins.b) if r != ZR]
    if isinstance(ins, Ld) and isinstance(rec.provenance, int):
        j = rec.provenance
        src = prog.instrs[trace_steps[j].addr].src
        return [(src, j, MEM)] if src != ZR else []
    return []


@dataclass
class DynDfg:
    """Edges of a trace's dynamic DFG; nodes are ``(register, step)``."""

    registers: tuple
    length: int
    edges: list

    def preds(self) -> dict:
        out: dict = {}
        for u, v, _ in self.edges:
            out.setdefault(v, []).append(u)
        return out

    def depends(self, src, dst) -> bool:
        """Whether ``dst`` is dynamic-dependent on ``src``."""
        preds = self.preds()
        seen = {dst}
        work = [dst]
        while work:
            n = work.pop()
            if n == src:
                return True
            for p in preds.get(n, ()):
                if p not in seen and p[1] >= src[1]:
                    seen.add(p)
                    work.append(p)
        return False


def build_dynamic_dfg(prog: Program, trace: Trace) -> DynDfg:
    regs = (SP,) + prog.gprs
    edges = []
    steps = trace.steps
    for i in range(len(steps)):
        for r in regs:
            for (pr, j, kind) in step_in_edges(prog, steps, i, r):
                edges.append(((pr, j), (r, i + 1), kind))
    return DynDfg(regs, len(steps) + 1, edges)


# --- taint primitives -------------------------------------------------------


@dataclass(frozen=True)
class TaintFinding:
    step: int
    addr: int
    cls: str
    register: str
    transient: bool = True

    def as_dict(self) -> dict:
        return {"step": self.step, "addr": self.addr, "class": self.cls, "register": self.register}


class _StepInfo:
    __slots__ = ("reach", "findings")

    def __init__(self, reach: frozenset, findings: tuple):
        self.reach = reach  # registers at step i+1 dependent on some violation
        self.findings = findings


class TaintAnalyzer:
    """Incremental violation-reach and taint-primitive computation.

    Traces produced by one exploration share step records along common
    prefixes, so results are cached per record.
    """

    def __init__(self, prog: Program, typing: SecurityTyping, mode: HardwareMode = CORE, strict: bool = True):
        self.prog = prog
        self.typing = typing
        self.mode = mode
        self.strict = strict
        self.ridx = reg_index(prog)
        self.regs = (SP,) + prog.gprs
        self.permitted = permitted_classes(mode)
        self._cache: dict = {}
        self._init_reach: dict = {}

    def violations(self, cfg) -> frozenset:
        """Registers violating their security type in a configuration."""
        pc = cfg.pc
        if not 0 <= pc < len(self.prog.instrs):
            return frozenset()
        out = []
        for r in self.regs:
            if cfg.regs[self.ridx[r]].label is SEC and self.typing.reg(pc, r) is not SEC:
                out.append(r)
        return frozenset(out)

    def _reach_before(self, steps, i: int) -> frozenset:
        if i == 0:
            cfg = steps[0].pre
            key = cfg
            r = self._init_reach.get(key)
            if r is None:
                r = self.violations(cfg)
                self._init_reach[key] = r
            return r
        return self.info(steps, i - 1).reach

    def info(self, steps, i: int) -> _StepInfo:
        rec = steps[i]
        got = self._cache.get(rec)
        if got is not None:
            return got
        # make sure the prefix is analysed first (iteratively, to bound recursion)
        k = i
        while k > 0 and steps[k - 1] not in self._cache:
            k -= 1
        for j in range(k, i):
            self._compute(steps, j)
        return self._compute(steps, i)

    def _reach_at(self, steps, j: int) -> frozenset:
        """Registers at step j (pre-configuration) dependent on a violation."""
        return self._reach_before(steps, j)

    def _compute(self, steps, i: int) -> _StepInfo:
        rec = steps[i]
        before = self._reach_before(steps, i)
        viol = self.violations(rec.post)
        reach = set()
        findings = []
        for r in self.regs:
            preds = step_in_edges(self.prog, steps, i, r)
            dep = any(pr in self._reach_at(steps, j) for pr, j, _ in preds)
            if dep:
                reach.add(r)
            elif r in viol:
                reach.add(r)
                findings.append(TaintFinding(i, rec.addr, self.classify(steps, i, r), r, rec.post.transient))
            if r in viol:
                reach.add(r)
        info = _StepInfo(frozenset(reach), tuple(findings))
        self._cache[rec] = info
        return info

    def classify(self, steps, i: int, reg: str) -> str:
        rec = steps[i]
        prog = self.prog
        ins = prog.instrs[rec.addr] if 0 <= rec.addr < len(prog.instrs) else None
        cls = None
        if rec.sls:
            cls = "LINE"
        elif reg != modified_register(prog, rec):
            if isinstance(ins, (Call, Ret)):
                cls = "NARG"
        elif isinstance(ins, Ld):
            if self.mode.psf:
                cls = "LOAD"
            elif ins.base == SP:
                cls = "STKL"
            elif ins.base != ZR:
                cls = "NCAL"
            elif isinstance(rec.provenance, int):
                src = steps[rec.provenance]
                sins = prog.instrs[src.addr]
                if isinstance(sins, St) and not sins.is_ca and src.post.transient:
                    cls = "NCAS"
        if cls is None or cls not in self.permitted or not rec.post.transient:
            msg = (
                f"taint primitive at step {i} (instruction {rec.addr}, register {reg}) "
                f"matches no class permitted under mode {self.mode}"
            )
            spi = self.ridx[SP]
            if any(not prog.sp_in_bounds(st.pre.regs[spi].value) for st in steps[: i + 1]):
                msg += "; the stack pointer left the stack region earlier on this path (WF.3 breached transiently)"
            if self.strict:
                raise ClassificationError(msg)
            return "UNCLASSIFIED"
        return cls

    def findings(self, trace: Trace) -> list:
        steps = trace.steps
        out = []
        for i in range(len(steps)):
            out.extend(self.info(steps, i).findings)
        return out

    def ancestors_findings(self, trace: Trace, reg: str, step: int) -> list:
        """Taint findings whose output register reaches ``(reg, step)``,
        most recent first."""
        steps = trace.steps
        by_node = {}
        for i in range(min(step, len(steps))):
            for f in self.info(steps, i).findings:
                by_node[(f.register, f.step + 1)] = f
        seen = {(reg, step)}
        work = [(reg, step)]
        hits = []
        while work:
            r, k = work.pop()
            if (r, k) in by_node:
                hits.append(by_node[(r, k)])
            if k == 0:
                continue
            for pr, j, _ in step_in_edges(self.prog, steps, k - 1, r):
                node = (pr, j)
                if node not in seen:
                    seen.add(node)
                    work.append(node)
        hits.sort(key=lambda f: -f.step)
        return hits


def classify_taint_primitives(prog: Program, trace: Trace, typing: SecurityTyping,
                              mode: HardwareMode = CORE, strict: bool = True) -> list:
    return TaintAnalyzer(prog, typing, mode, strict).findings(trace)


# --- SCT checking -----------------------------------------------------------


@dataclass
class Witness:
    choices: tuple
    inputs: dict | None
    step: int
    addr: int
    observation: str
    operand: str
    findings: list
    trace: Trace | None = None

    def as_dict(self) -> dict:
        return {
            "choices": list(self.choices),
            "inputs": {str(k): v for k, v in sorted((self.inputs or {}).items())},
            "step": self.step,
            "addr": self.addr,
            "observation": self.observation,
            "operand": self.operand,
            "findings": [f.as_dict() for f in self.findings],
        }


@dataclass
class SctVerdict:
    status: str  # "secure-within-bound" or "violation"
    witnesses: list
    coverage: Coverage
    finding_counts: Counter
    mode: HardwareMode
    secret_observations: int = 0
    # classes of the taint primitives behind any secret observation
    leak_classes: frozenset = frozenset()

    @property
    def secure(self) -> bool:
        return self.status == "secure-within-bound"

    def classes(self) -> set:
        return {c for c, n in self.finding_counts.items() if n}

    def witness_classes(self) -> set:
        return {f.cls for w in self.witnesses for f in w.findings}

    def as_dict(self) -> dict:
        return {
            "status": self.status,
            "mode": str(self.mode),
            "secret_observations": self.secret_observations,
            "finding_counts": dict(sorted(self.finding_counts.items())),
            "leak_classes": sorted(self.leak_classes),
            "coverage": self.coverage.as_dict(),
            "witnesses": [w.as_dict() for w in self.witnesses],
        }


def check_sct(
    prog: Program,
    typing: SecurityTyping,
    limits: ExplorationLimits | None = None,
    mode: HardwareMode = CORE,
    enumerate_inputs: bool = False,
    max_witnesses: int = 8,
    strict: bool = True,
    keep_traces: bool = True,
) -> SctVerdict:
    """Explore every bounded trace and report secret observations.

    Each secret observation is traced back through the dynamic DFG to the
    taint primitives it depends on; a secret observation without one raises
    :class:`CorollaryError`.
    """
    limits = limits or ExplorationLimits()
    cov = Coverage()
    analyzer = TaintAnalyzer(prog, typing, mode, strict)
    counts: Counter = Counter()
    counted: set = set()
    witnesses = []
    leaks: set = set()
    n_secret = 0
    assigns = input_assignments(prog, enumerate_inputs)
    cov.initial_configs = len(assigns)
    cov.inputs_enumerated = enumerate_inputs and bool(prog.inputs)
    for ov in assigns:
        init = initial_configuration(prog, ov)
        for tr in explore(prog, limits, mode, init, cov):
            steps = tr.steps
            for i, rec in enumerate(steps):
                info = analyzer.info(steps, i)
                if rec not in counted:
                    counted.add(rec)
                    for f in info.findings:
                        counts[f.cls] += 1
                    if rec.obs.is_secret:
                        n_secret += 1
                        w = _witness(prog, analyzer, tr, i, ov, keep_traces)
                        leaks.update(f.cls for f in w.findings)
                        if len(witnesses) < max_witnesses:
                            witnesses.append(w)
        if cov.trace_limit_hit:
            break
    status = "violation" if n_secret else "secure-within-bound"
    return SctVerdict(status, witnesses, cov, counts, mode, n_secret, frozenset(leaks))


def _witness(prog, analyzer: TaintAnalyzer, tr: Trace, i: int, ov, keep: bool) -> Witness:
    rec = tr.steps[i]
    ins = prog.instrs[rec.addr]
    ridx = analyzer.ridx
    operand = None
    for r in sensitive_operands(ins):
        if r != ZR and rec.pre.regs[ridx[r]].label is SEC:
            operand = r
            break
    if operand is None:
        raise CorollaryError(f"secret observation at step {i} has no secret sensitive operand")
    found = analyzer.ancestors_findings(tr, operand, i)
    if not found:
        raise CorollaryError(
            f"secret observation {rec.obs} at step {i} (instruction {rec.addr}) has no taint-primitive ancestor"
        )
    prefix = Trace(tr.steps[: i + 1], "bound")
    return Witness(prefix.choices, ov, i, rec.addr, str(rec.obs), operand, found, prefix if keep else None)


def all_findings(prog: Program, typing: SecurityTyping, limits: ExplorationLimits | None = None,
                 mode: HardwareMode = CORE, strict: bool = False) -> Counter:
    """Taint-primitive counts by class over a full bounded exploration."""
    return check_sct(prog, typing, limits, mode, strict=strict, max_witnesses=0).finding_counts


def explain(prog: Program, verdict: SctVerdict) -> str:
    """Human-readable narrative of each witness."""
    from .isa import format_instruction

    lines = []
    if verdict.secure:
        lines.append("no secret observation within the exploration bound")
        return "\n".join(lines)
    for k, w in enumerate(verdict.witnesses):
        ins = prog.instrs[w.addr]
        lines.append(
            f"witness {k}: step {w.step} executes {format_instruction(w.addr, ins)} at {w.addr} "
            f"and exposes {w.observation} through {w.operand}"
        )
        for f in w.findings:
            fins = prog.instrs[f.addr]
            lines.append(
                f"  depends on {f.cls} taint primitive at step {f.step}: "
                f"{format_instruction(f.addr, fins)} at {f.addr} leaves a secret in public {f.register}"
            )
        lines.append(f"  replay choices: {' '.join(map(str, w.choices))}")
    return "\n".join(lines)
