"""Source-sink pairs that the fence pass must separate."""

from __future__ import annotations

from dataclasses import dataclass

from ..isa import SP, ZR, Call, Ld, Program, Ret, St, sensitive_operands
from .dfg import StaticDfg
from .tcfg import Tcfg

NCAL_XMIT = "NCAL-XMIT"
NCAL_ARG = "NCAL-ARG"
NCAL_GLOB = "NCAL-GLOB"
NCAS_CAL = "NCAS-CAL"
NCAS_CTRL = "NCAS-CTRL"
CALL_XMIT = "CALL-XMIT"

VARIANT_KINDS = {
    "core": frozenset({NCAL_XMIT, NCAL_ARG, NCAL_GLOB, NCAS_CAL, NCAS_CTRL}),
    "sls": frozenset({NCAL_XMIT, NCAL_ARG, NCAL_GLOB, NCAS_CAL, NCAS_CTRL}),
    "psf": frozenset({NCAL_XMIT, NCAL_ARG}),
    # stores still forward to younger loads with STL disabled, so NCAS pairs stay
    "nostl": frozenset({NCAL_XMIT, NCAL_ARG, NCAL_GLOB, NCAS_CAL, NCAS_CTRL, CALL_XMIT}),
}


@dataclass(frozen=True, order=True)
class SourceSinkPair:
    source: int
    sink: int
    kind: str


def _dependents(prog: Program, dfg: StaticDfg, body, load_addr: int):
    """Nodes static-dependent on the output of the load at ``load_addr``."""
    dst = prog.instrs[load_addr].dst
    if load_addr + 1 not in body or dst == ZR:
        return set()
    return dfg.reach((dst, load_addr + 1))


def _load_sinks(prog: Program, dfg: StaticDfg, body, src: int, kinds, out: set) -> None:
    for r, j in _dependents(prog, dfg, body, src):
        ins = prog.instrs[j]
        if NCAL_XMIT in kinds and r in sensitive_operands(ins):
            out.add(SourceSinkPair(src, j, NCAL_XMIT))
        if NCAL_ARG in kinds and isinstance(ins, (Call, Ret)) and r in prog.calling_convention.get(j, ()):
            out.add(SourceSinkPair(src, j, NCAL_ARG))
        if NCAL_GLOB in kinds and isinstance(ins, St) and ins.base == ZR and ins.src == r:
            out.add(SourceSinkPair(src, j, NCAL_GLOB))


def generate_pairs(prog: Program, tcfg: Tcfg, dfg: StaticDfg, variant: str = "core") -> set:
    kinds = VARIANT_KINDS[variant]
    body = tcfg.nodes
    addrs = sorted(body)
    ins_at = {a: prog.instrs[a] for a in addrs}
    out: set = set()
    all_loads = variant == "psf"
    for a in addrs:
        ins = ins_at[a]
        if isinstance(ins, Ld) and (all_loads or not ins.is_ca):
            _load_sinks(prog, dfg, body, a, kinds, out)
    nca_stores = [a for a in addrs if isinstance(ins_at[a], St) and not ins_at[a].is_ca]
    if NCAS_CAL in kinds:
        ca_loads = [a for a in addrs if isinstance(ins_at[a], Ld) and ins_at[a].is_ca]
        out.update(SourceSinkPair(s, j, NCAS_CAL) for s in nca_stores for j in ca_loads)
    if NCAS_CTRL in kinds:
        ctrl = [a for a in addrs if isinstance(ins_at[a], (Call, Ret))]
        out.update(SourceSinkPair(s, j, NCAS_CTRL) for s in nca_stores for j in ctrl)
    if CALL_XMIT in kinds:
        calls = [a for a in addrs if isinstance(ins_at[a], Call)]
        xmits = set()
        for k in addrs:
            ins = ins_at[k]
            if isinstance(ins, Ld) and ins.base == SP:
                for r, j in _dependents(prog, dfg, body, k):
                    if r in sensitive_operands(ins_at[j]):
                        xmits.add(j)
        out.update(SourceSinkPair(c, j, CALL_XMIT) for c in calls for j in xmits)
    return out
