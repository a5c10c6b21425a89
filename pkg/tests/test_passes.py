import pytest

from specfence import corpus
from specfence.cts import partition_procedures, proc_of
from specfence.isa import SP, Call, Ld, Lfence, Op, Ret, St, parse_program, print_program
from specfence.mitigation import (
    PassError, build_tcfg, fps_transform, insert_fences, intel_lfence, register_cleaning, sls_fences,
    stack_init_transform,
)
from specfence.mitigation.passes import default_depths, fps_layout, plan_fences, recursive_procedures
from specfence.semantics import ExplorationLimits, explore, reg_index

FRAMED = """
.width 8
.stack size=8
.args c = r1
.args r =
.proc foo frame=2
    ENDBR
    SUB sp, sp, 2
    CONST r1, foo
c:  CALL r1
    LD [sp+0], r2
    ADD sp, sp, 2
r:  RET
.endproc
"""


# --- fence insertion -----------------------------------------------------------------


def test_no_pairs_leaves_program_unchanged():
    prog = parse_program(".data g PUB = 0\n.args r =\nENDBR\nLD [zr+g], r1\nBNZ r1, r\nST [zr+g], r1\nr: RET\n")
    res = insert_fences(prog)
    assert res.program == prog and res.inserted == 0


def _blocked(prog, sources, sinks):
    procs, report = partition_procedures(prog)
    assert report.ok
    owner = proc_of(procs)
    for s in sources:
        t = build_tcfg(owner[s], prog)
        reach = t.reachable(s)
        for j in sinks:
            if j in t.nodes:
                assert j not in reach, (s, j)


@pytest.mark.parametrize("variant", ["core", "nostl", "sls"])
def test_ncas_gadget_fenced_on_every_path(variant):
    res = insert_fences(corpus.load("ncas"), variant)
    out = res.program
    assert any(isinstance(i, Lfence) for i in out.instrs)
    stores = [a for a, i in enumerate(out.instrs) if isinstance(i, St) and not i.is_ca]
    sinks = [a for a, i in enumerate(out.instrs)
             if (isinstance(i, Ld) and i.is_ca) or isinstance(i, (Call, Ret))]
    assert stores and sinks
    _blocked(out, stores, sinks)


def test_every_cut_separates_its_pairs_after_materialisation():
    for name in corpus.names():
        prog = corpus.load(name)
        res = insert_fences(prog)
        back = {}
        for new, old in enumerate(res.origin):
            if old is not None:
                back[old] = new
        for plan in res.plans:
            for p in plan.pairs:
                _blocked(res.program, [back[p.source]], [back[p.sink]])


def test_loop_benchmark_fences_outside_the_loop():
    prog = corpus.load(corpus.LOOP_BENCHMARK)
    (plan,) = [p for p in plan_fences(prog) if p.pairs]
    for (u, v) in plan.cut.edges:
        assert plan.tcfg.loop_depth[v] == 0
    assert plan.cut.total_weight == 0


def test_intel_baseline_fences_both_branch_successors():
    prog = parse_program(".args r =\nENDBR\nBNZ r1, t\nADD r2, r2, 1\nt: ADD r3, r3, 1\nr: RET\n")
    out = intel_lfence(prog).program
    assert sum(isinstance(i, Lfence) for i in out.instrs) == 2
    bnz = next(a for a, i in enumerate(out.instrs) if i.mnemonic == "BNZ")
    assert isinstance(out.instrs[bnz + 1], Lfence)
    assert isinstance(out.instrs[bnz + 1 + out.instrs[bnz].disp], Lfence)


def test_sls_fence_after_every_jump():
    prog = corpus.load("ncal")
    out = sls_fences(prog).program
    for a, i in enumerate(out.instrs):
        if i.mnemonic == "JMP":
            assert isinstance(out.instrs[a + 1], Lfence)


# --- function-private stacks ------------------------------------------------------------


def test_framed_procedure_fps_output():
    res = fps_transform(parse_program(FRAMED))
    out = res.program
    assert len(out.instrs) == 13
    assert res.origin == (0, None, 1, None, None, 2, 3, None, 4, 5, None, None, 6)
    ps = out.private_stacks["foo"]
    load, save = Ld("zr", ps.psp, SP), St("zr", ps.psp, SP)
    assert out.instrs[1] == load and out.instrs[7] == load
    assert out.instrs[3] == Op("MAX", SP, (SP, ps.base)) and out.instrs[4] == save
    assert out.instrs[10] == Op("MIN", SP, (SP, ps.end)) and out.instrs[11] == save
    # foo calls itself, so it gets several frames
    assert ps.end - ps.base == 4 * 2
    assert out.data[ps.psp].value == ps.end


def test_frameless_procedure_still_gets_plumbing():
    prog = parse_program(".stack size=2\n.args r =\n.proc m frame=0\nENDBR\nADD r1, r1, 1\nr: RET\n.endproc\n")
    out = fps_transform(prog).program
    ps = out.private_stacks["m"]
    assert ps.base == ps.end
    assert [i.mnemonic for i in out.instrs] == ["ENDBR", "LD", "MAX", "ST", "ADD", "MIN", "ST", "RET"]


def test_depths():
    framed = parse_program(FRAMED)
    procs, _ = partition_procedures(framed)
    assert recursive_procedures(framed, procs) == {"foo"}
    stkl = corpus.load("stkl")
    procs, _ = partition_procedures(stkl)
    assert set(default_depths(stkl, procs).values()) == {1}
    layout = fps_layout(stkl, procs, 3)
    assert all(ps.end - ps.base == 3 * ps.frame for ps in layout.values())
    with pytest.raises(PassError):
        fps_layout(stkl, procs, 0)


def test_private_stacks_are_disjoint():
    out = fps_transform(corpus.load("mp_mix")).program
    regions = sorted((ps.base - 1, ps.end + ps.frame) for ps in out.private_stacks.values())
    for (a0, a1), (b0, _) in zip(regions, regions[1:]):
        assert a1 <= b0


def test_stack_accesses_stay_in_own_private_stack():
    from specfence.mitigation import serberus_pipeline

    prog = serberus_pipeline(corpus.load("stkl"), "core").program
    procs, _ = partition_procedures(prog)
    owner = proc_of(procs)
    ridx = reg_index(prog)
    regions = {n: range(ps.base, ps.end + ps.frame) for n, ps in prog.private_stacks.items()}
    seen = 0
    for tr in explore(prog, ExplorationLimits(max_steps=200)):
        for s in tr.steps:
            ins = prog.instrs[s.addr] if 0 <= s.addr < len(prog.instrs) else None
            if isinstance(ins, (Ld, St)) and ins.base == SP and not s.halted:
                seen += 1
                addr = (s.pre.regs[ridx[SP]].value + ins.disp) & prog.mask
                name = owner[s.addr].name
                assert addr in regions[name]
                for other, r in regions.items():
                    if other != name:
                        assert addr not in r
    assert seen


# --- register cleaning and stack initialisation ----------------------------------------


def test_register_cleaning_zeroes_the_rest():
    prog = parse_program(".gprs 4\n.args c = r2\n.args r = r0, r1, r2, r3\n.args q =\n"
                         "ENDBR\nCONST r1, f\nc: CALL r1\nr: RET\nf: ENDBR\nq: RET\n")
    res = register_cleaning(prog)
    out = res.program
    # r0 is never an argument, so it is zeroed too
    assert res.details["zeroed"][2] == ("r0", "r3")
    assert 3 not in res.details["zeroed"]
    assert res.details["zeroed"][5] == ("r0", "r1", "r2", "r3")
    assert [i.mnemonic for i in out.instrs[:5]] == ["ENDBR", "CONST", "MOV", "MOV", "CALL"]


def test_register_cleaning_requires_calling_convention():
    prog = parse_program("ENDBR\nRET\n")
    with pytest.raises(PassError):
        register_cleaning(prog)


def test_stack_init_zeroes_each_frame_word():
    src = ".stack size=4\n.args r =\n.proc m frame=2\nENDBR\nSUB sp, sp, 2\nADD sp, sp, 2\nr: RET\n.endproc\n"
    out = stack_init_transform(parse_program(src)).program
    assert out.instrs[2:4] == (St(SP, 0, "zr"), St(SP, 1, "zr"))
    zero = ".stack size=4\n.args r =\n.proc m frame=0\nENDBR\nr: RET\n.endproc\n"
    prog = parse_program(zero)
    assert stack_init_transform(prog).program == prog


def test_passes_round_trip_through_text():
    for fn in (insert_fences, fps_transform, register_cleaning, sls_fences, intel_lfence):
        out = fn(corpus.load("ncas")).program
        assert parse_program(print_program(out)) == out
