import random

import pytest
from hypothesis import given, settings, strategies as st

from asp_oracle import enumerate_traces
from randprog import random_program
from specfence import corpus
from specfence.isa import (
    PUB, SEC, Bnz, Call, Endbr, LabeledValue, Ld, Lfence, Op, ProcDecl, Program, Ret, St, parse_program,
)
from specfence.semantics import (
    CORE, SEQ_KIND, T_KIND, Coverage, ExplorationLimits, HardwareMode, data_memory, eval_op, explore,
    initial_configuration, memo_key, replay, sequential_trace, step_sequential, step_transient, successors,
)


def lv(v, label=PUB):
    return LabeledValue(v, label)


def prog_of(instrs, data=None, width=8):
    return Program(tuple(instrs), data or {}, width, 4, procs=(ProcDecl("main", 0, 0),))


def cfg_with(prog, regs=None, spec=(), transient=False, pc=0):
    cfg = initial_configuration(prog)
    r = list(cfg.regs)
    r[0] = lv(pc)
    names = ("pc", "sp") + prog.gprs
    for k, v in (regs or {}).items():
        r[names.index(k)] = v
    return cfg._replace(regs=tuple(r), spec=tuple(spec), transient=transient)


def reg(cfg, prog, name):
    return cfg.regs[(("pc", "sp") + prog.gprs).index(name)]


# --- sequential rules --------------------------------------------------------


def test_bnz_not_taken_sequentially():
    p = prog_of([Bnz("r1", 3), Ret(), Ret(), Ret(), Ret()])
    c = cfg_with(p, {"r1": lv(0)})
    post, obs = step_sequential(c, p)
    assert post.pc == 1
    assert obs.kind == "bnz" and obs.values == (lv(0),)


def test_store_then_load_forwards_and_memory_waits_for_fence():
    p = prog_of([St("zr", 0, "r1"), Ld("zr", 0, "r2"), Lfence(), Ret()], {0: lv(0)})
    c = cfg_with(p, {"r1": lv(5, SEC)})
    c1, _ = step_sequential(c, p)
    assert c1.spec == ((0, lv(5, SEC)),) and c1.dmem == (lv(0),)
    c2, _ = step_sequential(c1, p)
    assert reg(c2, p, "r2") == lv(5, SEC)
    assert c2.dmem == (lv(0),)
    c3, _ = step_sequential(c2, p)
    assert c3.dmem == (lv(5, SEC),) and c3.spec == ()


def test_lfence_drains_store_list():
    p = prog_of([Lfence(), Ret()], {0: lv(1)})
    c = cfg_with(p, spec=[(0, lv(5, SEC))])
    post, _ = step_sequential(c, p)
    assert post.dmem == (lv(5, SEC),) and post.spec == ()


def test_halted_configuration_has_a_single_self_loop():
    p = prog_of([Ret()])
    c = cfg_with(p, pc=7)
    succ = successors(c, p)
    assert len(succ) == 1 and succ[0].config == c and succ[0].obs.kind == "eps"


def test_eval_op_masks_and_joins():
    assert eval_op("ADD", [lv(250), lv(10, SEC)], 255) == lv(4, SEC)
    assert eval_op("SUB", [lv(1), lv(2)], 255) == lv(255)
    assert eval_op("AND", [lv(6), lv(3)], 255) == lv(2)
    assert eval_op("MAX", [lv(6), lv(3)], 255) == lv(6)
    assert eval_op("MIN", [lv(6), lv(3)], 255) == lv(3)


def test_div_by_zero_is_zero_and_observed():
    p = parse_program("ENDBR\nDIV r1, r2, r3\nRET\n")
    c = cfg_with(p, {"r2": lv(7, SEC)}, pc=1)
    post, obs = step_sequential(c, p)
    assert reg(post, p, "r1") == lv(0, SEC)
    assert obs.kind == "div" and obs.values == (lv(7, SEC), lv(0))


# --- transient rules ---------------------------------------------------------


def test_load_reads_memory_or_any_same_address_store():
    p = prog_of([Ld("zr", 0, "r1"), Ret()], {0: lv(1), 1: lv(0)})
    c = cfg_with(p, spec=[(0, lv(2)), (1, lv(9)), (0, lv(3, SEC))])
    vals = {reg(t, p, "r1") for t, _ in step_transient(c, p)}
    assert vals == {lv(1), lv(2), lv(3, SEC)}
    succ = successors(c, p)
    assert [s.kind for s in succ] == [SEQ_KIND] + [T_KIND] * 3
    # the sequential read takes the most recent same-address store
    assert reg(succ[0].config, p, "r1") == lv(3, SEC) and succ[0].source == 2


def test_psf_reads_any_pending_store_value():
    p = prog_of([Ld("zr", 0, "r1"), Ret()], {0: lv(1), 1: lv(0)})
    c = cfg_with(p, spec=[(1, lv(9, SEC))])
    vals = {reg(t, p, "r1") for t, _ in step_transient(c, p, HardwareMode(psf=True))}
    assert vals == {lv(9, SEC)}  # the sequential value (1) is excluded
    assert step_transient(c, p, HardwareMode(stl=False)) == []


def test_bnz_mispredicts_the_other_way():
    p = prog_of([Bnz("r1", 3), Ret(), Ret(), Ret(), Ret()])
    c = cfg_with(p, {"r1": lv(1, SEC)})
    trans = step_transient(c, p)
    assert len(trans) == 1
    t, obs = trans[0]
    assert t.pc == 1 and t.transient and obs.values == (lv(1, SEC),)


def test_call_mispredicts_to_every_other_endbr():
    instrs = [Endbr()] + [Lfence()] * 9
    for e in (10, 20, 30):
        instrs += [Endbr()] + [Ret()] * 9
    instrs[5] = Call("r1")
    p = prog_of(instrs, width=8)
    c = cfg_with(p, {"r1": lv(10)}, pc=5)
    succ = successors(c, p)
    assert succ[0].config.pc == 10 and succ[0].config.cs == (6,)
    trans = sorted(t.pc for t, _ in step_transient(c, p))
    assert trans == [0, 20, 30]  # the entry ENDBR at 0 counts too
    assert all(t.cs == (6,) for t, _ in step_transient(c, p))


def test_ret_mispredicts_to_other_post_call_sites():
    p = parse_program(
        ".args a =\n.args b =\n.args c =\nENDBR\nCONST r1, f\na: CALL r1\nb: CALL r1\nRET\n"
        "f: ENDBR\nc: RET\n"
    )
    c = initial_configuration(p)
    for _ in range(4):
        c, _ = step_sequential(c, p)
    assert c.pc == 6 and c.cs == (3,)
    succ = successors(c, p)
    assert succ[0].config.pc == 3
    assert [s.config.pc for s in succ[1:]] == [4]


def test_ret_on_empty_stack_halts_without_speculation():
    p = parse_program(".args r =\nENDBR\nr: RET\n")
    c = cfg_with(p, pc=1)
    succ = successors(c, p)
    assert len(succ) == 1 and succ[0].config == c


def test_transient_lfence_halts():
    p = prog_of([Lfence(), Ret()])
    c = cfg_with(p, transient=True)
    succ = successors(c, p)
    assert len(succ) == 1 and succ[0].config == c


def test_unmapped_accesses():
    p = prog_of([Ld("zr", 9, "r1"), St("zr", 9, "r2"), Ret()], {0: lv(0)})
    c = cfg_with(p, {"r1": lv(4, SEC)})
    succ = successors(c, p)
    assert succ[0].config == c  # sequential fault halts
    assert reg(succ[1].config, p, "r1") == lv(0) and succ[1].config.transient
    c2 = cfg_with(p, pc=1)
    succ = successors(c2, p)
    assert succ[0].config == c2 and succ[1].config.pc == 2 and succ[1].config.spec == ()


def test_sls_adds_fall_through():
    p = prog_of([Op("CONST", "r1", (0,)), Ret(), Ret()])
    c = cfg_with(p, pc=1)
    assert len(successors(c, p, HardwareMode(sls=True))) == 2
    s = successors(c, p, HardwareMode(sls=True))[1]
    assert s.sls and s.config.pc == 2 and s.config.transient


# --- exploration -------------------------------------------------------------


def test_straight_line_program_has_one_trace():
    p = parse_program(".args r =\nENDBR\nADD r1, r1, 1\nr: RET\n")
    traces = list(explore(p))
    assert len(traces) == 1 and traces[0].status == "halt"


def test_single_branch_gives_two_traces():
    p = parse_program(".args r =\nENDBR\nBNZ r1, r\nr: RET\n")
    traces = list(explore(p, ExplorationLimits(memo=False)))
    assert len(traces) == 2


def test_ncal_gadget_has_secret_load_observation():
    p = corpus.load("ncal")
    assert any(
        s.obs.kind == "ld" and s.obs.is_secret for tr in explore(p) for s in tr.steps
    )


def test_sequential_trace_matches_explorer_seq_path():
    p = corpus.load("ncal")
    seq = sequential_trace(p)
    assert seq.status == "halt"
    assert all(s.kind == SEQ_KIND and not s.post.transient for s in seq.steps)
    assert data_memory(p, seq.final)[p.symbols["tmp"][0]] == lv(5, SEC)


def test_replay_rebuilds_traces():
    p = corpus.load("stl")
    for tr in explore(p, ExplorationLimits(memo=False, max_steps=40)):
        again = replay(p, tr.choices)
        assert [s.post for s in again.steps] == [s.post for s in tr.steps]


def test_coverage_counts_bound_hits():
    p = parse_program(".args r =\nloop: ENDBR\nJMP loop\nr: RET\n")
    cov = Coverage()
    list(explore(p, ExplorationLimits(max_steps=5, memo=False), CORE, None, cov))
    assert cov.length_bound_hits == 1 and not cov.complete
    cov = Coverage()
    list(explore(p, ExplorationLimits(max_steps=5), CORE, None, cov))
    assert cov.complete  # the loop state repeats and is pruned


def test_trace_limit():
    p = corpus.load("narg")
    cov = Coverage()
    n = len(list(explore(p, ExplorationLimits(max_traces=3), CORE, None, cov)))
    assert n == 3 and cov.trace_limit_hit and not cov.complete


def test_memo_key_ignores_stack_contents_when_transient():
    p = corpus.load("narg")
    c = initial_configuration(p)._replace(transient=True, cs=(3, 7), spec=((1, lv(2)), (1, lv(2))))
    d = c._replace(cs=(5, 5), spec=((1, lv(2)),))
    assert memo_key(c, CORE) == memo_key(d, CORE)
    assert memo_key(c._replace(transient=False), CORE) != memo_key(d._replace(transient=False), CORE)


# --- independent oracle --------------------------------------------------------


def _explorer_set(prog, bound, mode):
    from test_acceptance import explorer_traces

    return explorer_traces(prog, bound, mode)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 12), calls=st.booleans(),
       mode=st.sampled_from([{}, {"psf": True}, {"stl": False}, {"sls": True}]))
def test_explorer_equals_brute_force(seed, n, calls, mode):
    prog = random_program(random.Random(seed), n, width=4, calls=calls)
    assert _explorer_set(prog, 9, HardwareMode(**mode)) == enumerate_traces(prog, 9, **mode)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 12), calls=st.booleans())
def test_memoized_exploration_sees_every_event(seed, n, calls):
    prog = random_program(random.Random(seed), n, width=4, calls=calls)

    def events(memo):
        lim = ExplorationLimits(max_steps=10, memo=memo)
        return {(s.addr, s.obs, s.post.transient) for tr in explore(prog, lim) for s in tr.steps}

    assert events(True) == events(False)


@pytest.mark.parametrize("text", ["stl", "nostl,psf", "sls,nostl", ""])
def test_mode_parse_round_trip(text):
    m = HardwareMode.parse(text)
    assert HardwareMode.parse(str(m)) == m


def test_mode_parse_rejects_unknown():
    with pytest.raises(ValueError):
        HardwareMode.parse("stl,foo")
