"""Abstract speculative ISA: labels, instructions, programs and their text form.

The text format is line oriented::

    ; comment
    .width 8
    .data key SEC = 7
    .data tbl PUB = 0, 0, 0, 0
    .stack size=8
    .args ret0 =
    .proc main frame=1
        ENDBR
        SUB sp, sp, 1
        LD [zr+key], r1
        ST [sp+0], r1
        ADD sp, sp, 1
    ret0: RET
    .endproc

Registers are spelled ``r0``..``rN``, ``sp`` and ``zr``.  Branch targets and
immediates may name code labels; memory displacements may name data symbols
(``[zr+tbl+2]``).  A non-constant-address load may carry a type annotation
(``{PUB}``, ``{SEC}`` or ``{sym1,sym2}``) stating what it may read.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple, Union


class Label(IntEnum):
    PUB = 0
    SEC = 1

    def join(self, other: "Label") -> "Label":
        return Label(max(self, other))


PUB = Label.PUB
SEC = Label.SEC


def join(*labels: Label) -> Label:
    return SEC if SEC in labels else PUB


class LabeledValue(NamedTuple):
    value: int
    label: Label

    def __str__(self) -> str:
        return f"{self.value}_{self.label.name}"


ZERO = LabeledValue(0, PUB)

SP = "sp"
PC = "pc"
ZR = "zr"

OPCODES = ("MOV", "ADD", "SUB", "XOR", "AND", "OR", "MUL", "MAX", "MIN", "CONST")


def gpr(i: int) -> str:
    return f"r{i}"


def is_gpr(reg: str) -> bool:
    return reg.startswith("r") and reg[1:].isdigit()


class ISAError(Exception):
    """Raised for malformed programs."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class CodeRef:
    """An immediate holding an instruction address (e.g. a call target)."""

    addr: int


Operand = Union[str, int, CodeRef]


# --- instructions ---------------------------------------------------------


@dataclass(frozen=True)
class Jmp:
    disp: int

    @property
    def mnemonic(self) -> str:
        return "JMP"


@dataclass(frozen=True)
class Bnz:
    src: str
    disp: int

    @property
    def mnemonic(self) -> str:
        return "BNZ"


@dataclass(frozen=True)
class Call:
    src: str

    @property
    def mnemonic(self) -> str:
        return "CALL"


@dataclass(frozen=True)
class Ret:
    @property
    def mnemonic(self) -> str:
        return "RET"


@dataclass(frozen=True)
class Endbr:
    @property
    def mnemonic(self) -> str:
        return "ENDBR"


@dataclass(frozen=True)
class Lfence:
    @property
    def mnemonic(self) -> str:
        return "LFENCE"


@dataclass(frozen=True)
class Ld:
    base: str
    disp: int
    dst: str
    # None, a Label, or a tuple of data symbol names the load may alias
    annot: Union[None, Label, tuple] = None

    @property
    def mnemonic(self) -> str:
        return "LD"

    @property
    def is_ca(self) -> bool:
        return self.base in (ZR, SP)


@dataclass(frozen=True)
class St:
    base: str
    disp: int
    src: str

    @property
    def mnemonic(self) -> str:
        return "ST"

    @property
    def is_ca(self) -> bool:
        return self.base in (ZR, SP)


@dataclass(frozen=True)
class Op:
    opcode: str
    dst: str
    operands: tuple

    @property
    def mnemonic(self) -> str:
        return self.opcode

    @property
    def inputs(self) -> tuple:
        """Register operands (immediates excluded)."""
        return tuple(o for o in self.operands if isinstance(o, str))


@dataclass(frozen=True)
class Div:
    dst: str
    a: str
    b: str

    @property
    def mnemonic(self) -> str:
        return "DIV"


Instruction = Union[Jmp, Bnz, Call, Ret, Endbr, Lfence, Ld, St, Op, Div]


def writes(instr: Instruction) -> str | None:
    """The general register (or SP) an instruction writes, if any."""
    if isinstance(instr, (Ld, Op, Div)):
        return instr.dst
    return None


def reads(instr: Instruction) -> tuple:
    if isinstance(instr, Bnz):
        return (instr.src,)
    if isinstance(instr, Call):
        return (instr.src,)
    if isinstance(instr, Ld):
        return (instr.base,)
    if isinstance(instr, St):
        return (instr.base, instr.src)
    if isinstance(instr, Op):
        return instr.inputs
    if isinstance(instr, Div):
        return (instr.a, instr.b)
    return ()


DEFAULT_TRANSMITTERS = frozenset({"BNZ", "CALL", "LD", "ST", "DIV"})


def sensitive_operands(instr: Instruction, transmitters=DEFAULT_TRANSMITTERS) -> tuple:
    """Registers whose values a transmitter exposes."""
    kind = instr.mnemonic if not isinstance(instr, Op) else "OP"
    if kind not in transmitters:
        return ()
    if isinstance(instr, (Bnz, Call)):
        return (instr.src,)
    if isinstance(instr, (Ld, St)):
        return (instr.base,)
    if isinstance(instr, Div):
        return (instr.a, instr.b)
    return ()


def branch_targets(addr: int, instr: Instruction) -> tuple:
    if isinstance(instr, Jmp):
        return (addr + 1 + instr.disp,)
    if isinstance(instr, Bnz):
        return (addr + 1 + instr.disp,)
    return ()


def succs(addr: int, instr: Instruction) -> tuple:
    """Intraprocedural successors."""
    if isinstance(instr, Ret):
        return ()
    if isinstance(instr, Bnz):
        taken = addr + 1 + instr.disp
        return (addr + 1,) if taken == addr + 1 else (addr + 1, taken)
    if isinstance(instr, Jmp):
        return (addr + 1 + instr.disp,)
    return (addr + 1,)


# --- programs ---------------------------------------------------------------


@dataclass(frozen=True)
class ProcDecl:
    name: str
    entry: int
    frame: int = 0


@dataclass(frozen=True)
class StackRegion:
    name: str
    base: int
    size: int


@dataclass(frozen=True)
class PrivateStack:
    """Per-procedure stack layout added by the private-stack pass."""

    base: int
    end: int
    frame: int
    psp: int

    def contains(self, addr: int) -> bool:
        """Whether a stack pointer value lies in the usable or underflow region."""
        return self.base <= addr <= self.end + self.frame


@dataclass(frozen=True, eq=False)
class Program:
    instrs: tuple
    data: dict  # address -> initial LabeledValue (every mapped data address)
    word_width: int = 16
    num_gprs: int = 8
    symbols: dict = field(default_factory=dict)  # name -> (address, size)
    stacks: tuple = ()  # StackRegion; the first one is the shared stack
    calling_convention: dict = field(default_factory=dict)  # addr -> frozenset
    procs: tuple = ()  # ProcDecl
    inputs: frozenset = frozenset()  # data addresses swept by input enumeration
    private_stacks: dict = field(default_factory=dict)  # proc name -> PrivateStack
    labels: dict = field(default_factory=dict)  # addr -> name; cosmetic

    def __post_init__(self):
        object.__setattr__(self, "_addr_index", None)

    # structural identity ignores cosmetic code labels
    def _key(self):
        return (
            self.instrs,
            tuple(sorted(self.data.items())),
            self.word_width,
            self.num_gprs,
            tuple(sorted(self.symbols.items())),
            self.stacks,
            tuple(sorted((a, tuple(sorted(r))) for a, r in self.calling_convention.items())),
            tuple(sorted(self.procs, key=lambda p: p.entry)),
            tuple(sorted(self.inputs)),
            tuple(sorted(self.private_stacks.items())),
        )

    def __eq__(self, other):
        if not isinstance(other, Program):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    @property
    def mask(self) -> int:
        return (1 << self.word_width) - 1

    @property
    def gprs(self) -> tuple:
        return tuple(gpr(i) for i in range(self.num_gprs))

    @property
    def data_addrs(self) -> tuple:
        idx = self.addr_index
        return tuple(idx)

    @property
    def addr_index(self) -> dict:
        """Sorted data addresses mapped to dense indices."""
        if self._addr_index is None:
            object.__setattr__(
                self, "_addr_index", {a: i for i, a in enumerate(sorted(self.data))}
            )
        return self._addr_index

    @property
    def sp_init(self) -> int:
        if not self.stacks:
            return 0
        s = self.stacks[0]
        return s.base + s.size

    def stack_addrs(self) -> frozenset:
        out = set()
        for s in self.stacks:
            out.update(range(s.base, s.base + s.size))
        return frozenset(out)

    def sp_in_bounds(self, sp: int) -> bool:
        """Whether SP lies in the data stack (frame-end pointers included)."""
        for s in self.stacks:
            if s.base <= sp <= s.base + s.size:
                return True
        return any(ps.contains(sp) for ps in self.private_stacks.values())

    def endbrs(self) -> tuple:
        return tuple(a for a, i in enumerate(self.instrs) if isinstance(i, Endbr))

    def post_call_sites(self) -> tuple:
        return tuple(a + 1 for a, i in enumerate(self.instrs) if isinstance(i, Call))

    def proc_by_entry(self) -> dict:
        return {p.entry: p for p in self.procs}

    def symbol_at(self, addr: int) -> str | None:
        for name, (a, _) in self.symbols.items():
            if a == addr:
                return name
        return None


# --- parsing ----------------------------------------------------------------

_LABEL_RE = re.compile(r"^([A-Za-z_.$][\w.$]*)\s*:\s*(.*)$")
_MEM_RE = re.compile(r"^\[\s*([A-Za-z]\w*)\s*(?:([+-])\s*(.+?))?\s*\]$")
_IDENT_RE = re.compile(r"^[A-Za-z_.$][\w.$]*$")


def _parse_int(tok: str) -> int | None:
    try:
        return int(tok, 0)
    except ValueError:
        return None


class _Parser:
    def __init__(self, text: str, word_width: int | None = None):
        self.text = text
        self.fixed_width = word_width
        self.word_width = 16 if word_width is None else word_width
        self.num_gprs = 8
        self.raw = []  # (lineno, mnemonic, operand string, annotation)
        self.code_labels: dict[str, int] = {}
        self.label_lines: dict[str, int] = {}
        self.data_decls = []  # (lineno, name, label, values, addr or None)
        self.stack_decls = []  # (lineno, name, size, addr or None)
        self.args_decls = []  # (lineno, label, regs)
        self.proc_decls = []  # (lineno, name, frame, first index, end index)
        self.input_decls = []  # (lineno, name)
        self.privstack_decls = []  # (lineno, name, base, end, frame, psp)

    def parse(self) -> Program:
        open_proc = None
        for lineno, line in enumerate(self.text.splitlines(), 1):
            line = line.split(";", 1)[0].strip()
            if not line:
                continue
            if line.startswith("."):
                if line == ".endproc":
                    if open_proc is None:
                        raise ISAError(".endproc without .proc", lineno)
                    self.proc_decls.append((*open_proc, len(self.raw)))
                    open_proc = None
                    continue
                if line.startswith(".proc"):
                    if open_proc is not None:
                        raise ISAError("nested .proc", lineno)
                    open_proc = self._proc(line, lineno)
                    pname = open_proc[1]
                    if pname in self.code_labels:
                        raise ISAError(f"duplicate label {pname!r}", lineno)
                    self.code_labels[pname] = len(self.raw)
                    self.label_lines[pname] = lineno
                    continue
                if not line.split()[0].endswith(":"):
                    self._directive(line, lineno)
                    continue
            while True:
                m = _LABEL_RE.match(line)
                if not m:
                    break
                name = m.group(1)
                if name in self.code_labels:
                    raise ISAError(f"duplicate label {name!r}", lineno)
                self.code_labels[name] = len(self.raw)
                self.label_lines[name] = lineno
                line = m.group(2).strip()
            if not line:
                continue
            self._instruction_line(line, lineno)
        if open_proc is not None:
            raise ISAError(f"unterminated .proc {open_proc[1]!r}", open_proc[0])
        return self._build()

    # directives
    def _directive(self, line: str, lineno: int):
        parts = line.split(None, 1)
        name, rest = parts[0], (parts[1] if len(parts) > 1 else "")
        if name == ".width":
            w = _parse_int(rest.strip())
            if w is None or not 2 <= w <= 64:
                raise ISAError(f"bad word width {rest!r}", lineno)
            if self.fixed_width is None:
                self.word_width = w
        elif name == ".gprs":
            n = _parse_int(rest.strip())
            if n is None or n < 1:
                raise ISAError(f"bad register count {rest!r}", lineno)
            self.num_gprs = n
        elif name == ".data":
            self._data(rest, lineno)
        elif name == ".stack":
            self._stack(rest, lineno)
        elif name == ".args":
            if "=" not in rest:
                raise ISAError("expected '.args <label> = regs'", lineno)
            lbl, regs = rest.split("=", 1)
            regs = [r.strip() for r in regs.split(",") if r.strip()]
            self.args_decls.append((lineno, lbl.strip(), regs))
        elif name == ".input":
            self.input_decls.append((lineno, rest.strip()))
        elif name == ".privstack":
            self._privstack(rest, lineno)
        else:
            raise ISAError(f"unknown directive {name!r}", lineno)

    def _proc(self, line: str, lineno: int):
        toks = line.split()
        if len(toks) < 2:
            raise ISAError("expected '.proc <name> frame=<k>'", lineno)
        frame = 0
        for t in toks[2:]:
            if t.startswith("frame="):
                frame = _parse_int(t[6:])
                if frame is None or frame < 0:
                    raise ISAError(f"bad frame size {t!r}", lineno)
            else:
                raise ISAError(f"unexpected {t!r}", lineno)
        return (lineno, toks[1], frame, len(self.raw))

    def _data(self, rest: str, lineno: int):
        addr = None
        if "@" in rest:
            rest, at = rest.rsplit("@", 1)
            addr = _parse_int(at.strip())
            if addr is None:
                raise ISAError(f"bad address {at!r}", lineno)
        m = re.match(r"^([A-Za-z_.$][\w.$]*)\s+(PUB|SEC)\s*=\s*(.*)$", rest.strip())
        if not m:
            raise ISAError("expected '.data <name> <PUB|SEC> = <int>[, ...]'", lineno)
        vals = []
        for tok in m.group(3).split(","):
            v = _parse_int(tok.strip())
            if v is None:
                raise ISAError(f"bad value {tok.strip()!r}", lineno)
            vals.append(v)
        self.data_decls.append((lineno, m.group(1), Label[m.group(2)], vals, addr))

    def _stack(self, rest: str, lineno: int):
        addr = None
        if "@" in rest:
            rest, at = rest.rsplit("@", 1)
            addr = _parse_int(at.strip())
            if addr is None:
                raise ISAError(f"bad address {at!r}", lineno)
        toks = rest.split()
        name = "stack"
        size = None
        for t in toks:
            if t.startswith("size="):
                size = _parse_int(t[5:])
            else:
                name = t
        if size is None or size < 0:
            raise ISAError("expected '.stack [name] size=<n>'", lineno)
        self.stack_decls.append((lineno, name, size, addr))

    def _privstack(self, rest: str, lineno: int):
        toks = rest.split()
        if not toks:
            raise ISAError("expected '.privstack <proc> base= end= frame= psp='", lineno)
        kv = {}
        for t in toks[1:]:
            if "=" not in t:
                raise ISAError(f"unexpected {t!r}", lineno)
            k, v = t.split("=", 1)
            kv[k] = v
        try:
            vals = [kv[k] for k in ("base", "end", "frame", "psp")]
        except KeyError as e:
            raise ISAError(f"missing {e.args[0]}= in .privstack", lineno) from None
        self.privstack_decls.append((lineno, toks[0], *vals))

    # instructions
    def _instruction_line(self, line: str, lineno: int):
        annot = None
        m = re.search(r"\{([^}]*)\}\s*$", line)
        if m:
            annot = m.group(1).strip()
            line = line[: m.start()].strip()
        parts = line.split(None, 1)
        mnem = parts[0].upper()
        ops = parts[1] if len(parts) > 1 else ""
        if annot is not None and mnem != "LD":
            raise ISAError("type annotations are only allowed on LD", lineno)
        self.raw.append((lineno, mnem, ops, annot))

    # resolution
    def _build(self) -> Program:
        mask = (1 << self.word_width) - 1
        symbols: dict[str, tuple[int, int]] = {}
        data: dict[int, LabeledValue] = {}

        def claim(addr, size, lineno, what):
            for a in range(addr, addr + size):
                if a > mask:
                    raise ISAError(f"{what} exceeds the {self.word_width}-bit address space", lineno)
                if a in data:
                    raise ISAError(f"{what} overlaps address {a}", lineno)

        next_free = 0
        for lineno, name, label, vals, addr in self.data_decls:
            if name in symbols or name in self.code_labels:
                raise ISAError(f"duplicate symbol {name!r}", lineno)
            base = next_free if addr is None else addr
            claim(base, len(vals), lineno, f"data {name!r}")
            for i, v in enumerate(vals):
                data[base + i] = LabeledValue(v & mask, label)
            symbols[name] = (base, len(vals))
            next_free = max(next_free, base + len(vals))
        stacks = []
        for lineno, name, size, addr in self.stack_decls:
            if name in symbols or name in self.code_labels:
                raise ISAError(f"duplicate symbol {name!r}", lineno)
            base = next_free if addr is None else addr
            claim(base, size, lineno, f"stack {name!r}")
            for a in range(base, base + size):
                data[a] = ZERO
            stacks.append(StackRegion(name, base, size))
            symbols[name] = (base, size)
            next_free = max(next_free, base + size)

        labels = {}
        for name, addr in self.code_labels.items():
            labels.setdefault(addr, name)

        instrs = []
        for idx, (lineno, mnem, ops, annot) in enumerate(self.raw):
            instrs.append(self._resolve(idx, lineno, mnem, ops, annot, symbols))

        procs = []
        for lineno, name, frame, start, end in self.proc_decls:
            if start >= end:
                raise ISAError(f"empty procedure {name!r}", lineno)
            if name in symbols:
                raise ISAError(f"duplicate symbol {name!r}", lineno)
            labels.setdefault(start, name)
            if labels.get(start) != name:
                # keep the procedure name as the primary label of its entry
                labels[start] = name
            procs.append(ProcDecl(name, start, frame))
        proc_names = {p.name: p.entry for p in procs}

        cc = {}
        for lineno, lbl, regs in self.args_decls:
            addr = self.code_labels.get(lbl, proc_names.get(lbl))
            if addr is None:
                raise ISAError(f"undefined label {lbl!r}", lineno)
            if not isinstance(instrs[addr], (Call, Ret)):
                raise ISAError(f".args label {lbl!r} is not a CALL or RET", lineno)
            for r in regs:
                if not is_gpr(r) or int(r[1:]) >= self.num_gprs:
                    raise ISAError(f"bad argument register {r!r}", lineno)
            if addr in cc:
                raise ISAError(f"duplicate .args for {lbl!r}", lineno)
            cc[addr] = frozenset(regs)

        inputs = set()
        for lineno, name in self.input_decls:
            if name not in symbols:
                raise ISAError(f"undefined symbol {name!r}", lineno)
            a, size = symbols[name]
            for i in range(size):
                if data[a + i].label is not PUB:
                    raise ISAError(f"input {name!r} must be PUB", lineno)
                inputs.add(a + i)

        private = {}
        for lineno, name, *vals in self.privstack_decls:
            nums = [self._value(v, symbols, lineno) for v in vals]
            private[name] = PrivateStack(*nums)

        return Program(
            instrs=tuple(instrs),
            data=data,
            word_width=self.word_width,
            num_gprs=self.num_gprs,
            symbols=symbols,
            stacks=tuple(stacks),
            calling_convention=cc,
            procs=tuple(procs),
            inputs=frozenset(inputs),
            private_stacks=private,
            labels=labels,
        )

    def _reg(self, tok: str, lineno: int, *, dst=False) -> str:
        tok = tok.strip().lower()
        if tok in (SP, ZR):
            if dst and tok == ZR:
                raise ISAError("zr cannot be written", lineno)
            return tok
        if tok == PC:
            raise ISAError("pc is not an operand", lineno)
        if is_gpr(tok):
            if int(tok[1:]) >= self.num_gprs:
                raise ISAError(f"register {tok} out of range (have {self.num_gprs})", lineno)
            return tok
        raise ISAError(f"expected a register, got {tok!r}", lineno)

    def _value(self, expr: str, symbols, lineno: int) -> int:
        """Integer, data symbol, or symbol +/- integer."""
        expr = expr.strip()
        v = _parse_int(expr)
        if v is not None:
            return v
        m = re.match(r"^([A-Za-z_.$][\w.$]*)\s*(?:([+-])\s*(\w+))?$", expr)
        if not m:
            raise ISAError(f"bad expression {expr!r}", lineno)
        name = m.group(1)
        if name not in symbols:
            raise ISAError(f"undefined symbol {name!r}", lineno)
        base = symbols[name][0]
        if m.group(2):
            off = _parse_int(m.group(3))
            if off is None:
                raise ISAError(f"bad offset {m.group(3)!r}", lineno)
            base = base + off if m.group(2) == "+" else base - off
        return base

    def _target(self, tok: str, idx: int, lineno: int) -> int:
        tok = tok.strip()
        v = _parse_int(tok)
        if v is not None:
            return v
        if tok not in self.code_labels:
            raise ISAError(f"undefined label {tok!r}", lineno)
        return self.code_labels[tok] - idx - 1

    def _mem(self, tok: str, symbols, lineno: int):
        m = _MEM_RE.match(tok.strip())
        if not m:
            raise ISAError(f"bad memory operand {tok!r}", lineno)
        base = self._reg(m.group(1), lineno)
        disp = 0
        if m.group(2):
            disp = self._value(m.group(3), symbols, lineno)
            if m.group(2) == "-":
                disp = -disp
        return base, disp

    def _split(self, ops: str) -> list:
        out, depth, cur = [], 0, ""
        for ch in ops:
            if ch == "[":
                depth += 1
            elif ch == "]":
                depth -= 1
            if ch == "," and depth == 0:
                out.append(cur.strip())
                cur = ""
            else:
                cur += ch
        if cur.strip():
            out.append(cur.strip())
        return out

    def _resolve(self, idx, lineno, mnem, ops, annot, symbols) -> Instruction:
        args = self._split(ops)

        def need(n):
            if len(args) != n:
                raise ISAError(f"{mnem} takes {n} operand(s), got {len(args)}", lineno)

        if mnem == "JMP":
            need(1)
            return Jmp(self._target(args[0], idx, lineno))
        if mnem == "BNZ":
            need(2)
            return Bnz(self._reg(args[0], lineno), self._target(args[1], idx, lineno))
        if mnem == "CALL":
            need(1)
            return Call(self._reg(args[0], lineno))
        if mnem in ("RET", "ENDBR", "LFENCE"):
            need(0)
            return {"RET": Ret, "ENDBR": Endbr, "LFENCE": Lfence}[mnem]()
        if mnem == "LD":
            need(2)
            base, disp = self._mem(args[0], symbols, lineno)
            dst = self._reg(args[1], lineno, dst=True)
            return Ld(base, disp, dst, self._annot(annot, symbols, lineno))
        if mnem == "ST":
            need(2)
            base, disp = self._mem(args[0], symbols, lineno)
            return St(base, disp, self._reg(args[1], lineno))
        if mnem == "DIV":
            need(3)
            return Div(
                self._reg(args[0], lineno, dst=True),
                self._reg(args[1], lineno),
                self._reg(args[2], lineno),
            )
        if mnem in OPCODES:
            if not args:
                raise ISAError(f"{mnem} needs a destination", lineno)
            dst = self._reg(args[0], lineno, dst=True)
            operands = tuple(self._operand(a, symbols, lineno) for a in args[1:])
            if mnem == "CONST":
                if len(operands) != 1 or isinstance(operands[0], str):
                    raise ISAError("CONST takes one immediate", lineno)
            elif mnem == "MOV":
                if len(operands) != 1:
                    raise ISAError("MOV takes one source", lineno)
            elif len(operands) < 2:
                raise ISAError(f"{mnem} takes at least two sources", lineno)
            return Op(mnem, dst, operands)
        raise ISAError(f"unknown opcode {mnem!r}", lineno)

    def _operand(self, tok: str, symbols, lineno: int) -> Operand:
        t = tok.strip()
        low = t.lower()
        if low in (SP, ZR) or (is_gpr(low)):
            return self._reg(low, lineno)
        if low == PC:
            raise ISAError("pc is not an operand", lineno)
        v = _parse_int(t)
        if v is not None:
            return v
        if t in self.code_labels:
            return CodeRef(self.code_labels[t])
        return self._value(t, symbols, lineno)

    def _annot(self, annot, symbols, lineno):
        if annot is None:
            return None
        if annot in ("PUB", "SEC"):
            return Label[annot]
        names = tuple(n.strip() for n in annot.split(",") if n.strip())
        for n in names:
            if n not in symbols:
                raise ISAError(f"undefined symbol {n!r} in annotation", lineno)
        return names


def parse_program(text: str, word_width: int | None = None) -> Program:
    """Parse the textual program format; raises ISAError with a line number.

    ``word_width`` overrides any ``.width`` directive.
    """
    if word_width is not None and not 2 <= word_width <= 64:
        raise ISAError(f"bad word width {word_width}")
    return _Parser(text, word_width).parse()


# --- printing ---------------------------------------------------------------


def _code_names(prog: Program) -> dict:
    names = dict(prog.labels)
    for p in prog.procs:
        names[p.entry] = p.name
    used = set(names.values()) | set(prog.symbols)
    needed = set()
    for a, ins in enumerate(prog.instrs):
        needed.update(branch_targets(a, ins))
        if isinstance(ins, Op):
            needed.update(o.addr for o in ins.operands if isinstance(o, CodeRef))
    needed.update(prog.calling_convention)
    for a in sorted(needed):
        if a not in names:
            n, k = f"L{a}", 0
            while n in used:
                k += 1
                n = f"L{a}_{k}"
            names[a] = n
            used.add(n)
    return names


def _fmt_mem(base: str, disp: int, syms: dict | None = None) -> str:
    if syms and base != SP and disp in syms:
        return f"[{base}+{syms[disp]}]"
    if disp == 0:
        return f"[{base}]"
    return f"[{base}{'+' if disp > 0 else '-'}{abs(disp)}]"


def format_instruction(addr: int, ins: Instruction, names: dict | None = None, syms: dict | None = None) -> str:
    """One instruction in text form.  ``names`` maps code addresses to labels
    and ``syms`` data addresses to symbol names."""
    names = names or {}

    def tgt(a):
        return names.get(a, str(a - addr - 1))

    if isinstance(ins, Jmp):
        return f"JMP {tgt(addr + 1 + ins.disp)}"
    if isinstance(ins, Bnz):
        return f"BNZ {ins.src}, {tgt(addr + 1 + ins.disp)}"
    if isinstance(ins, Call):
        return f"CALL {ins.src}"
    if isinstance(ins, (Ret, Endbr, Lfence)):
        return ins.mnemonic
    if isinstance(ins, Ld):
        s = f"LD {_fmt_mem(ins.base, ins.disp, syms)}, {ins.dst}"
        if isinstance(ins.annot, Label):
            s += f" {{{ins.annot.name}}}"
        elif ins.annot:
            s += " {" + ",".join(ins.annot) + "}"
        return s
    if isinstance(ins, St):
        return f"ST {_fmt_mem(ins.base, ins.disp, syms)}, {ins.src}"
    if isinstance(ins, Div):
        return f"DIV {ins.dst}, {ins.a}, {ins.b}"
    if isinstance(ins, Op):
        ops = []
        for o in ins.operands:
            if isinstance(o, CodeRef):
                ops.append(names.get(o.addr, str(o.addr)))
            else:
                ops.append(str(o))
        return f"{ins.opcode} {', '.join([ins.dst, *ops])}"
    raise TypeError(ins)


def print_program(prog: Program) -> str:
    """Render a program in the text format; parse_program inverts this."""
    names = _code_names(prog)
    syms = {}
    for name, (addr, size) in sorted(prog.symbols.items(), key=lambda kv: (kv[1], kv[0])):
        if size:
            syms.setdefault(addr, name)
    out = []
    if prog.word_width != 16:
        out.append(f".width {prog.word_width}")
    if prog.num_gprs != 8:
        out.append(f".gprs {prog.num_gprs}")
    stack_names = {s.name for s in prog.stacks}
    for name, (addr, size) in sorted(prog.symbols.items(), key=lambda kv: kv[1]):
        if name in stack_names:
            continue
        vals = [prog.data[addr + i] for i in range(size)]
        labels = {v.label for v in vals}
        if len(labels) > 1:
            raise ISAError(f"data {name!r} mixes labels")
        lab = vals[0].label.name if vals else "PUB"
        out.append(f".data {name} {lab} = {', '.join(str(v.value) for v in vals)} @ {addr}")
    for s in prog.stacks:
        out.append(f".stack {s.name} size={s.size} @ {s.base}")
    for a in sorted(prog.inputs):
        sym = prog.symbol_at(a)
        if sym is None or prog.symbols[sym][1] != 1:
            raise ISAError(f"input address {a} is not a one-word symbol")
        out.append(f".input {sym}")
    for pname, ps in sorted(prog.private_stacks.items()):
        out.append(
            f".privstack {pname} base={ps.base} end={ps.end} frame={ps.frame} psp={ps.psp}"
        )
    for a, regs in sorted(prog.calling_convention.items()):
        out.append(f".args {names[a]} = {', '.join(sorted(regs, key=lambda r: int(r[1:])))}".rstrip())
    by_entry = prog.proc_by_entry()
    ends = {}
    starts = sorted(by_entry)
    for i, s in enumerate(starts):
        ends[s] = starts[i + 1] if i + 1 < len(starts) else len(prog.instrs)
    open_end = None
    for a, ins in enumerate(prog.instrs):
        if open_end == a:
            out.append(".endproc")
            open_end = None
        if a in by_entry:
            p = by_entry[a]
            out.append(f".proc {p.name} frame={p.frame}")
            open_end = ends[a]
        text = format_instruction(a, ins, names, syms)
        if a in names and not (a in by_entry and names[a] == by_entry[a].name):
            out.append(f"{names[a]}: {text}")
        else:
            out.append(f"    {text}")
    if open_end is not None:
        out.append(".endproc")
    return "\n".join(out) + "\n"
