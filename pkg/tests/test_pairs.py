from collections import Counter

from specfence import corpus
from specfence.cts import partition_procedures
from specfence.isa import parse_program
from specfence.mitigation import build_static_dfg, build_tcfg, generate_pairs
from specfence.mitigation.pairs import (
    CALL_XMIT, NCAL_ARG, NCAL_GLOB, NCAL_XMIT, NCAS_CAL, NCAS_CTRL,
)


def pairs_of(prog, variant="core", proc=0):
    procs, report = partition_procedures(prog)
    assert report.ok, report.as_dict()
    t = build_tcfg(procs[proc], prog)
    return generate_pairs(prog, t, build_static_dfg(prog, t), variant)


def kinds(pairs):
    return Counter(p.kind for p in pairs)


def test_ncal_gadget_has_one_xmit_pair():
    prog = corpus.load("ncal")
    ps = [p for p in pairs_of(prog) if p.kind == NCAL_XMIT]
    assert len(ps) == 1
    src, sink = prog.instrs[ps[0].source], prog.instrs[ps[0].sink]
    assert not src.is_ca and sink.base == src.dst


def test_two_stores_three_loads_make_six_pairs():
    src = """
.data g PUB = 0, 0, 0
.data t PUB = 0, 0, 0, 0, 0, 0, 0, 0
.args r =
    ENDBR
    ST [r1+t], r2
    ST [r1+t], r3
    LD [zr+g], r4
    LD [zr+g+1], r4
    LD [zr+g+2], r4
r:  RET
"""
    k = kinds(pairs_of(parse_program(src)))
    assert k[NCAS_CAL] == 6
    assert k[NCAS_CTRL] == 2  # each store also reaches the RET


def test_no_nca_accesses_no_pairs():
    src = ".data g PUB = 0\n.args r =\nENDBR\nLD [zr+g], r1\nADD r2, r1, 1\nST [zr+g], r2\nr: RET\n"
    assert pairs_of(parse_program(src)) == set()


def test_ncal_arg_and_glob():
    src = """
.data t PUB = 0, 0
.data g PUB = 0
.args c = r2
.args r =
.args q =
    ENDBR
    LD [r1+t], r2 {t}
    ST [zr+g], r2
    CONST r1, f
c:  CALL r1
r:  RET
f:  ENDBR
q:  RET
"""
    k = kinds(pairs_of(parse_program(src)))
    assert k[NCAL_GLOB] == 1 and k[NCAL_ARG] == 1
    assert k[NCAL_XMIT] == 0


def test_variants_select_kinds():
    prog = corpus.load("stkl")
    assert not {p.kind for p in pairs_of(prog, "psf")} - {NCAL_XMIT, NCAL_ARG}
    core = pairs_of(prog, "core")
    assert not any(p.kind == CALL_XMIT for p in core)


def test_call_xmit_under_nostl():
    src = """
.stack size=4
.data t PUB = 0, 0
.args c =
.args r =
.args q =
.proc main frame=1
    ENDBR
    SUB sp, sp, 1
    CONST r1, f
c:  CALL r1
    LD [sp+0], r2
    LD [r2+t], r3
    ADD sp, sp, 1
r:  RET
.endproc
.proc f frame=0
    ENDBR
q:  RET
.endproc
"""
    prog = parse_program(src)
    ps = [p for p in pairs_of(prog, "nostl") if p.kind == CALL_XMIT]
    assert [(p.source, p.sink) for p in ps] == [(3, 5)]
    assert not any(p.kind == CALL_XMIT for p in pairs_of(prog, "core"))


def test_psf_treats_ca_loads_as_sources():
    src = ".data k PUB = 0\n.data t PUB = 0, 0\n.args r =\nENDBR\nLD [zr+k], r1\nLD [r1+t], r2\nr: RET\n"
    prog = parse_program(src)
    assert pairs_of(prog, "core") == set()
    assert kinds(pairs_of(prog, "psf"))[NCAL_XMIT] == 1
