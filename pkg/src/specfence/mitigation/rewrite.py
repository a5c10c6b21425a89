"""Instruction insertion with consistent re-indexing.

Passes describe edits against the addresses of the program they receive;
:meth:`Rewriter.build` lays out the new code once and rewrites branch
displacements, code-address constants, calling-convention keys and
procedure entries to match.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from ..isa import Bnz, CodeRef, Jmp, Op, Program, ProcDecl


@dataclass(frozen=True)
class Goto:
    """A JMP in inserted code whose target is resolved at layout time.

    ``target`` is an old address or a trampoline token from
    :meth:`Rewriter.trampoline`.
    """

    target: object


@dataclass(frozen=True)
class _Token:
    n: int


class Rewriter:
    def __init__(self, prog: Program):
        self.prog = prog
        n = len(prog.instrs)
        # per old address: code only reached by falling through from addr-1,
        # then code every entry to addr passes
        self._plain: list[list] = [[] for _ in range(n + 1)]
        self._entry: list[list] = [[] for _ in range(n + 1)]
        self._tramps: list = []
        self._retarget: dict = {}
        self._placed: set = set()

    # -- edit requests ----------------------------------------------------------

    def insert_before(self, addr: int, instrs, redirect: bool = True) -> None:
        """Place ``instrs`` right before the instruction at ``addr``.

        With ``redirect`` every branch, call target or fallthrough into
        ``addr`` runs the new code; without it only the fallthrough from
        ``addr - 1`` does.
        """
        (self._entry if redirect else self._plain)[addr].extend(instrs)

    def insert_after(self, addr: int, instrs) -> None:
        self.insert_before(addr + 1, instrs, redirect=False)

    def insert_once(self, key, addr: int, instrs, redirect: bool = True) -> bool:
        """``insert_before`` unless an edit under the same key was made."""
        if key in self._placed:
            return False
        self._placed.add(key)
        self.insert_before(addr, instrs, redirect)
        return True

    def trampoline(self, anchor: int, instrs, target: int) -> _Token:
        """A block ``instrs; JMP target`` placed after ``anchor``, which
        must not fall through."""
        tok = _Token(len(self._tramps))
        self._tramps.append((anchor, tuple(instrs) + (Goto(target),)))
        return tok

    def retarget(self, addr: int, target) -> None:
        """Point the branch at ``addr`` to another old address or token."""
        self._retarget[addr] = target

    # -- layout -------------------------------------------------------------------

    def build(self) -> tuple[Program, tuple]:
        """The rewritten program and, per new address, the old address it
        came from (``None`` for inserted code)."""
        prog = self.prog
        n = len(prog.instrs)
        tramp_at: dict = {}
        for k, (anchor, block) in enumerate(self._tramps):
            tramp_at.setdefault(anchor + 1, []).append((k, block))
        cells: list = []  # (instr, origin)
        entry_of: dict = {}
        orig_at: dict = {}
        tok_at: dict = {}
        for a in range(n + 1):
            for k, block in tramp_at.get(a, ()):
                tok_at[k] = len(cells)
                cells.extend((i, None) for i in block)
            cells.extend((i, None) for i in self._plain[a])
            entry_of[a] = len(cells)
            cells.extend((i, None) for i in self._entry[a])
            if a < n:
                orig_at[a] = len(cells)
                cells.append((prog.instrs[a], a))

        def resolve(t) -> int:
            if isinstance(t, _Token):
                return tok_at[t.n]
            return entry_of[t]

        def code_ref(v):
            return CodeRef(resolve(v.addr)) if isinstance(v, CodeRef) else v

        out = []
        origin = []
        for new, (ins, old) in enumerate(cells):
            if isinstance(ins, Goto):
                ins = Jmp(resolve(ins.target) - new - 1)
            elif old is not None and isinstance(ins, (Jmp, Bnz)):
                tgt = self._retarget.get(old, old + 1 + ins.disp)
                ins = dataclasses.replace(ins, disp=resolve(tgt) - new - 1)
            elif isinstance(ins, Op) and any(isinstance(o, CodeRef) for o in ins.operands):
                ins = dataclasses.replace(ins, operands=tuple(code_ref(o) for o in ins.operands))
            out.append(ins)
            origin.append(old)
        newprog = dataclasses.replace(
            prog,
            instrs=tuple(out),
            calling_convention={orig_at[a]: regs for a, regs in prog.calling_convention.items()},
            procs=tuple(ProcDecl(p.name, orig_at[p.entry], p.frame) for p in prog.procs),
            labels={orig_at[a]: name for a, name in prog.labels.items() if a in orig_at},
        )
        return newprog, tuple(origin)


def compose_origins(first: tuple, second: tuple) -> tuple:
    """Origin map of two successive rewrites."""
    return tuple(None if o is None else first[o] for o in second)
