"""Static constant-time discipline: procedures, well-formedness and typing."""

from __future__ import annotations

from dataclasses import dataclass, field

from .isa import (
    PUB,
    SEC,
    SP,
    ZR,
    Bnz,
    Call,
    CodeRef,
    Div,
    Endbr,
    Jmp,
    Label,
    Ld,
    Lfence,
    Op,
    Program,
    Ret,
    St,
    is_gpr,
    join,
    sensitive_operands,
    succs,
    writes,
)
from .semantics import (
    Configuration,
    data_memory,
    initial_configuration,
    input_assignments,
    read_reg,
    reg_index,
    sequential_trace,
)


@dataclass(frozen=True)
class Procedure:
    name: str
    entry: int
    body: frozenset
    frame: int


@dataclass
class Violation:
    rule: str
    addr: int | None
    message: str
    step: int | None = None

    def as_dict(self) -> dict:
        d = {"rule": self.rule, "addr": self.addr, "message": self.message}
        if self.step is not None:
            d["step"] = self.step
        return d


@dataclass
class CtsReport:
    violations: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return "fail" if self.violations else "pass"

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, rule, addr, message, step=None):
        self.violations.append(Violation(rule, addr, message, step))

    def extend(self, other: "CtsReport"):
        self.violations.extend(other.violations)
        self.notes.extend(n for n in other.notes if n not in self.notes)

    def rules(self) -> set:
        return {v.rule for v in self.violations}

    def as_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "violations": [v.as_dict() for v in self.violations],
            "notes": list(self.notes),
        }


class CtsError(Exception):
    """Raised when a program does not satisfy the static constant-time discipline."""

    def __init__(self, report: CtsReport):
        self.report = report
        first = report.violations[0] if report.violations else None
        msg = f"{first.rule} at {first.addr}: {first.message}" if first else "CTS check failed"
        super().__init__(msg)


# --- procedures -------------------------------------------------------------


def _closure(prog: Program, entry: int) -> set:
    seen = set()
    work = [entry]
    n = len(prog.instrs)
    while work:
        a = work.pop()
        if a in seen or not 0 <= a < n:
            continue
        seen.add(a)
        ins = prog.instrs[a]
        work.extend(succs(a, ins))
        # a barrier right after a JMP is reached only by straight-line
        # speculation but still belongs to the jumping procedure
        if isinstance(ins, Jmp) and a + 1 < n and isinstance(prog.instrs[a + 1], Lfence):
            work.append(a + 1)
    return seen


def _frame_guess(prog: Program, body) -> int:
    for a in sorted(body):
        ins = prog.instrs[a]
        if (
            isinstance(ins, Op)
            and ins.opcode == "SUB"
            and ins.dst == SP
            and len(ins.operands) == 2
            and ins.operands[0] == SP
            and isinstance(ins.operands[1], int)
        ):
            return ins.operands[1]
    return 0


def partition_procedures(prog: Program) -> tuple:
    """Split the program into procedures; returns ``(procedures, report)``."""
    report = CtsReport()
    n = len(prog.instrs)
    declared = prog.proc_by_entry()
    entries = list(prog.endbrs())
    procs = []
    owner: dict = {}
    for e in entries:
        body = _closure(prog, e)
        out = [a for ins_a in body for a in succs(ins_a, prog.instrs[ins_a]) if not 0 <= a < n]
        if out:
            report.add("WF.1", e, f"procedure at {e} falls off the instruction memory")
        other = [a for a in body if a != e and isinstance(prog.instrs[a], Endbr)]
        if other:
            report.add("WF.1", e, f"procedure at {e} reaches another ENDBR at {other[0]}")
        for a in body:
            if a in owner:
                report.add("WF.1", a, f"instruction {a} belongs to procedures at {owner[a]} and {e}")
            owner[a] = e
        if e in declared:
            name, frame = declared[e].name, declared[e].frame
        else:
            name = prog.labels.get(e, f"proc{e}")
            frame = _frame_guess(prog, body)
        procs.append(Procedure(name, e, frozenset(body), frame))
    for d in declared:
        if d not in entries:
            report.add("WF.1", d, f"declared procedure at {d} does not start with ENDBR")
    orphans = sorted(set(range(n)) - set(owner))
    if orphans:
        report.add("WF.1", orphans[0], f"instructions {orphans} belong to no procedure")
    names = [p.name for p in procs]
    if len(set(names)) != len(names):
        report.add("WF.1", None, "duplicate procedure names")
    return tuple(procs), report


def proc_of(procs) -> dict:
    return {a: p for p in procs for a in p.body}


# --- well-formedness --------------------------------------------------------


def _sp_write_ok(ins, proc: Procedure, prog: Program) -> bool:
    """SP may only change by frame (de)allocation or private-stack plumbing."""
    if isinstance(ins, Op):
        ops = ins.operands
        if ins.opcode in ("SUB", "ADD") and ops == (SP, proc.frame):
            return True
        if ins.opcode in ("MAX", "MIN") and len(ops) == 2 and ops[0] == SP and isinstance(ops[1], int):
            return True
        return False
    if isinstance(ins, Ld):
        ps = prog.private_stacks.get(proc.name)
        return ins.base == ZR and ps is not None and ins.disp == ps.psp
    return False


def check_wf(prog: Program, procs, enumerate_inputs: bool = False) -> CtsReport:
    report = CtsReport()
    stack_addrs = prog.stack_addrs()
    for ps in prog.private_stacks.values():
        stack_addrs |= frozenset(a for a in range(ps.base, ps.end) if a in prog.data)
    owner = proc_of(procs)
    for a, ins in enumerate(prog.instrs):
        if isinstance(ins, (Call, Ret)) and a not in prog.calling_convention:
            report.add("WF.2", a, f"{ins.mnemonic} at {a} has no calling-convention entry")
        if isinstance(ins, (Ld, St)) and ins.base == ZR:
            addr = ins.disp & prog.mask
            if addr in stack_addrs:
                report.add("WF.3", a, f"CA global access at {a} touches stack address {addr}")
        p = owner.get(a)
        if p is None:
            continue
        if isinstance(ins, (Ld, St)) and ins.base == SP and not 0 <= ins.disp < p.frame:
            report.add("WF.3", a, f"stack offset {ins.disp} outside frame of size {p.frame}")
        if writes(ins) == SP and not _sp_write_ok(ins, p, prog):
            report.add("WF.3", a, f"unexpected stack pointer update at {a}")
    for a in stack_addrs:
        v = prog.data.get(a)
        if v is None or v.value != 0 or v.label is not PUB:
            report.add("WF.3", None, f"stack address {a} is not zero-initialised and public")
            break
    for ov in input_assignments(prog, enumerate_inputs):
        tr = sequential_trace(prog, init=initial_configuration(prog, ov))
        ridx = reg_index(prog)
        for st in tr.steps:
            sp = st.pre.regs[ridx[SP]]
            if sp.label is SEC:
                report.add("WF.3", st.addr, "stack pointer holds a secret", st.index)
                break
            if prog.stacks or prog.private_stacks:
                if not prog.sp_in_bounds(sp.value):
                    report.add("WF.3", st.addr, f"stack pointer {sp.value} outside the data stack", st.index)
                    break
        last = tr.steps[-1] if tr.steps else None
        if last is not None and last.halted and 0 <= last.addr < len(prog.instrs):
            ins = prog.instrs[last.addr]
            if isinstance(ins, (Ld, St)):
                report.add("WF.5", last.addr, f"sequential access to unmapped address", last.index)
    report.notes.append(
        "dynamic WF checks cover the sequential trace"
        + (" of every enumerated input" if enumerate_inputs and prog.inputs else " of the policy's initial configuration")
    )
    return report


# --- typing -----------------------------------------------------------------


@dataclass
class SecurityTyping:
    tau_glob: dict  # address -> Label
    tau_stk: dict  # (procedure name, offset) -> Label
    tau_reg: dict  # instruction address -> {register: Label}

    def reg(self, addr: int, reg: str) -> Label:
        if reg in (ZR, "pc"):
            return PUB
        regs = self.tau_reg.get(addr)
        if regs is None:
            return PUB
        return regs.get(reg, PUB)

    def glob(self, addr: int) -> Label:
        return self.tau_glob.get(addr, PUB)

    def stk(self, proc: str, off: int) -> Label:
        return self.tau_stk.get((proc, off), PUB)

    def as_dict(self) -> dict:
        return {
            "glob": {str(a): l.name for a, l in sorted(self.tau_glob.items())},
            "stack": {f"{p}+{d}": l.name for (p, d), l in sorted(self.tau_stk.items())},
            "regs": {
                str(a): {r: l.name for r, l in sorted(regs.items()) if l is SEC}
                for a, regs in sorted(self.tau_reg.items())
            },
        }


class TypingError(Exception):
    pass


def _join_maps(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = join(out.get(k, PUB), v)
    return out


ANY = "any"


def _const_flow(prog: Program, proc: Procedure) -> dict:
    """Per-instruction map of registers holding known code addresses."""
    state_in: dict = {proc.entry: {}}
    work = [proc.entry]
    while work:
        a = work.pop()
        st = dict(state_in[a])
        ins = prog.instrs[a]
        if isinstance(ins, Op):
            if ins.opcode in ("MOV", "CONST") and len(ins.operands) == 1:
                o = ins.operands[0]
                if isinstance(o, CodeRef):
                    st[ins.dst] = frozenset({o.addr})
                elif isinstance(o, str) and o in st:
                    st[ins.dst] = st[o]
                else:
                    st.pop(ins.dst, None)
            else:
                st.pop(ins.dst, None)
        elif isinstance(ins, (Ld, Div)):
            st.pop(ins.dst, None)
        elif isinstance(ins, Call):
            st = {}
        for s in succs(a, ins):
            if s not in proc.body:
                continue
            old = state_in.get(s)
            if old is None:
                new = st
            else:
                new = {r: old[r] | st[r] for r in old.keys() & st.keys()}
            if old != new:
                state_in[s] = new
                work.append(s)
    return state_in


def call_targets(prog: Program, procs) -> dict:
    """CALL address -> entries it may sequentially reach (resolved when the
    target register is a known code address on every path)."""
    entries = {p.entry for p in procs}
    out = {}
    for p in procs:
        flow = _const_flow(prog, p)
        for a in p.body:
            ins = prog.instrs[a]
            if isinstance(ins, Call):
                known = flow.get(a, {}).get(ins.src)
                if known is not None:
                    out[a] = frozenset(t for t in known if t in entries)
                else:
                    out[a] = frozenset(entries)
    return out


def _nca_load_label(prog: Program, ins: Ld, tau_glob: dict, any_secret: bool) -> Label:
    if isinstance(ins.annot, Label):
        return ins.annot
    if isinstance(ins.annot, tuple):
        lab = PUB
        for name in ins.annot:
            base, size = prog.symbols[name]
            for i in range(size):
                a = base + i
                lab = join(lab, tau_glob.get(a, prog.data[a].label if a in prog.data else PUB))
        return lab
    return SEC if any_secret else PUB


def infer_security_typing(prog: Program, procs) -> SecurityTyping:
    """Least typing closed under the load, store, operation, no-op and
    call/return rules, found by a global forward fixed point."""
    regs_all = (SP,) + prog.gprs
    any_secret = any(v.label is SEC for v in prog.data.values())
    mg = set()
    for ins in prog.instrs:
        if isinstance(ins, (Ld, St)) and ins.base == ZR:
            mg.add(ins.disp & prog.mask)
    tau_glob = {a: (prog.data[a].label if a in prog.data else PUB) for a in mg}
    tau_stk: dict = {}
    by_entry = {p.entry: p for p in procs}
    targets = call_targets(prog, procs)
    callers: dict = {p.entry: [] for p in procs}
    for c, ts in targets.items():
        for t in ts:
            callers[t].append(c)
    owner = proc_of(procs)
    rets = {p.entry: [a for a in p.body if isinstance(prog.instrs[a], Ret)] for p in procs}
    tau_reg: dict = {a: {} for a in range(len(prog.instrs))}

    def get(a, r):
        return tau_reg[a].get(r, PUB)

    def raise_to(a, st: dict) -> bool:
        cur = tau_reg[a]
        changed = False
        for r, l in st.items():
            if l is SEC and cur.get(r, PUB) is PUB:
                cur[r] = SEC
                changed = True
        return changed

    changed = True
    rounds = 0
    while changed:
        rounds += 1
        if rounds > 10_000:
            raise TypingError("typing inference did not converge")
        changed = False
        for p in procs:
            # entry: join over the register types at sequential call sites
            entry = {}
            for c in callers.get(p.entry, ()):
                entry = _join_maps(entry, tau_reg[c])
            entry.pop(SP, None)
            if raise_to(p.entry, entry):
                changed = True
            work = sorted(p.body)
            while work:
                a = work.pop()
                ins = prog.instrs[a]
                st = dict(tau_reg[a])
                if isinstance(ins, Op):
                    st[ins.dst] = join(*(get(a, r) if r != ZR else PUB for r in ins.inputs)) if ins.inputs else PUB
                elif isinstance(ins, Div):
                    st[ins.dst] = join(get(a, ins.a) if ins.a != ZR else PUB, get(a, ins.b) if ins.b != ZR else PUB)
                elif isinstance(ins, Ld):
                    if ins.base == ZR:
                        lab = tau_glob.get(ins.disp & prog.mask, PUB)
                    elif ins.base == SP:
                        lab = tau_stk.get((p.name, ins.disp), PUB)
                    else:
                        lab = _nca_load_label(prog, ins, tau_glob, any_secret)
                    st[ins.dst] = lab
                elif isinstance(ins, St):
                    src = get(a, ins.src) if ins.src != ZR else PUB
                    if src is SEC:
                        if ins.base == ZR:
                            key = ins.disp & prog.mask
                            if tau_glob.get(key, PUB) is PUB:
                                tau_glob[key] = SEC
                                changed = True
                        elif ins.base == SP:
                            key = (p.name, ins.disp)
                            if tau_stk.get(key, PUB) is PUB:
                                tau_stk[key] = SEC
                                changed = True
                elif isinstance(ins, Call):
                    for t in targets.get(a, ()):
                        for r in rets.get(t, ()):
                            st = _join_maps(st, tau_reg[r])
                for s in succs(a, ins):
                    if s in p.body and raise_to(s, st):
                        work.append(s)
                        changed = True
    for a in tau_reg:
        if tau_reg[a].get(SP, PUB) is SEC:
            raise TypingError(f"stack pointer becomes secret at {a}")
    full = {}
    for a in range(len(prog.instrs)):
        full[a] = {r: tau_reg[a].get(r, PUB) for r in regs_all}
    return SecurityTyping(tau_glob, tau_stk, full)


def check_typ(prog: Program, procs, typing: SecurityTyping, enumerate_inputs: bool = False,
              max_steps: int = 10_000) -> CtsReport:
    report = CtsReport()
    owner = proc_of(procs)
    for a, ins in enumerate(prog.instrs):
        p = owner.get(a)
        if p is None:
            continue
        for r in sensitive_operands(ins):
            if typing.reg(a, r) is SEC:
                report.add("TYP.2", a, f"sensitive operand {r} of {ins.mnemonic} is secretly typed")
        if typing.reg(a, SP) is SEC:
            report.add("TYP.6", a, "stack pointer secretly typed")
        if isinstance(ins, (Call, Ret)):
            for r in sorted(prog.calling_convention.get(a, ())):
                if typing.reg(a, r) is SEC:
                    report.add("TYP.9", a, f"argument register {r} of {ins.mnemonic} is secretly typed")
        if isinstance(ins, (Ld, St)) and ins.base in (ZR, SP):
            slot = (
                typing.glob(ins.disp & prog.mask) if ins.base == ZR else typing.stk(p.name, ins.disp)
            )
            if isinstance(ins, St) and slot is PUB and ins.src != ZR and typing.reg(a, ins.src) is SEC:
                report.add("TYP.4", a, f"secret {ins.src} stored to a public slot")
            if isinstance(ins, Ld) and slot is SEC and a + 1 in p.body and typing.reg(a + 1, ins.dst) is PUB:
                report.add("TYP.3", a, f"load of a secret slot into public {ins.dst}")
        if isinstance(ins, Op):
            ins_lab = join(*(typing.reg(a, r) for r in ins.inputs)) if ins.inputs else PUB
            if a + 1 in p.body and ins_lab is SEC and typing.reg(a + 1, ins.dst) is PUB:
                report.add("TYP.7", a, f"output {ins.dst} public but an input is secret")
        if not isinstance(ins, Call):
            w = writes(ins)
            for s in succs(a, ins):
                if s not in p.body:
                    continue
                for r in (SP,) + prog.gprs:
                    if r != w and typing.reg(a, r) is SEC and typing.reg(s, r) is PUB:
                        report.add("TYP.8", a, f"type of unmodified {r} drops from {a} to {s}")
    for addr, lab in typing.tau_glob.items():
        if lab is PUB and addr in prog.data and prog.data[addr].label is SEC:
            report.add("TYP.5", None, f"public global {addr} holds a secret initially")
    _check_typ_dynamic(prog, owner, typing, report, enumerate_inputs, max_steps)
    return report


def _check_typ_dynamic(prog, owner, typing, report, enumerate_inputs, max_steps):
    ridx = reg_index(prog)
    gprs = prog.gprs
    for ov in input_assignments(prog, enumerate_inputs):
        tr = sequential_trace(prog, max_steps, initial_configuration(prog, ov))
        typ1 = False
        for st in tr.steps:
            if st.obs.is_secret:
                report.add("CT", st.addr, f"sequential observation {st.obs} is secret", st.index)
            if typ1:
                continue
            p = owner.get(st.addr)
            if p is None:
                continue
            cfg = st.pre
            for r in gprs:
                if cfg.regs[ridx[r]].label is SEC and typing.reg(st.addr, r) is PUB:
                    report.add("TYP.1", st.addr, f"public register {r} holds a secret", st.index)
                    typ1 = True
                    break
            ins = prog.instrs[st.addr]
            if not typ1 and isinstance(ins, (Ld, St)) and ins.base in (ZR, SP) and not st.halted:
                slot = (
                    typing.glob(ins.disp & prog.mask) if ins.base == ZR else typing.stk(p.name, ins.disp)
                )
                if slot is PUB:
                    if isinstance(ins, St):
                        val = read_reg(cfg, ridx, ins.src)
                    else:
                        val = st.post.regs[ridx[ins.dst]] if ins.dst != ZR else None
                    if val is not None and val.label is SEC:
                        report.add("TYP.1", st.addr, "secret moved through a public memory slot", st.index)
                        typ1 = True
    mode = "every enumerated PUB input" if enumerate_inputs and prog.inputs else "the policy's initial configuration"
    report.notes.append(f"TYP.1 and CT checked on the sequential trace of {mode}")


def check_cts(prog: Program, enumerate_inputs: bool = False):
    """Run every check; returns ``(report, procedures, typing)``.

    ``typing`` is None when partitioning or inference fails.
    """
    procs, report = partition_procedures(prog)
    if not report.ok:
        return report, procs, None
    report.extend(check_wf(prog, procs, enumerate_inputs))
    try:
        typing = infer_security_typing(prog, procs)
    except TypingError as e:
        report.add("TYP.6", None, str(e))
        return report, procs, None
    report.extend(check_typ(prog, procs, typing, enumerate_inputs))
    report.notes.append(
        "non-argument registers at a procedure entry are typed by joining their types at resolved call sites"
    )
    return report, procs, typing
