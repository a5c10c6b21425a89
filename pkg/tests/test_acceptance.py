"""Acceptance criteria, each run at its stated tolerance.

Every test records a one-line PASS/FAIL result; the lines are printed as
they happen and again in the terminal summary.
"""

from __future__ import annotations

import itertools
import random
import time
from fractions import Fraction

import pytest

from acc_report import record
from asp_oracle import enumerate_traces
from randprog import random_program
from seqpres import exact_preserved, preserved_modulo_relocation
from specfence import corpus
from specfence.cts import check_cts, partition_procedures
from specfence.analysis import check_sct
from specfence.isa import Lfence
from specfence.mitigation import build_tcfg, intel_lfence, serberus_pipeline
from specfence.mitigation.flow import separated
from specfence.mitigation.passes import plan_fences
from specfence.mitigation.tcfg import immediate_dominators, natural_loops, _ordinary_succs
from specfence.semantics import (
    SEQ_KIND, ExplorationLimits, HardwareMode, explore, initial_configuration, successors,
)

GADGET_STEPS = 200
CORPUS_STEPS = 500


def _verify(prog, mode, steps):
    report, _, typing = check_cts(prog)
    assert report.ok, report.as_dict()
    return check_sct(prog, typing, ExplorationLimits(max_steps=steps), mode, strict=True)


# 1 -------------------------------------------------------------------------


def test_1_gadget_flip():
    lines = []
    ok = True
    for name, cls in corpus.GADGETS.items():
        prog = corpus.load(name)
        pre = _verify(prog, HardwareMode(), GADGET_STEPS)
        pre_ok = (not pre.secure) and cls in pre.leak_classes and cls in pre.witness_classes()
        t0 = time.perf_counter()
        res = serberus_pipeline(prog, "core")
        post = _verify(res.program, res.mode, GADGET_STEPS)
        secs = time.perf_counter() - t0
        post_ok = (
            post.secure and post.coverage.complete and res.program.word_width <= 8 and secs < 60
        )
        ok &= pre_ok and post_ok
        lines.append(
            f"{name}: pre {pre.status} {sorted(pre.leak_classes)} (want {cls}); "
            f"post {post.status} complete={post.coverage.complete} {secs:.2f}s"
        )
    record("1", ok, "; ".join(lines))
    assert ok


# 2 -------------------------------------------------------------------------


def test_2_per_pass_guarantees():
    names = corpus.names()
    assert len(names) >= 10
    multi = [n for n in names if len(partition_procedures(corpus.load(n))[0]) >= 2]
    assert set(corpus.GADGETS) <= set(names) and len(multi) >= 2
    bad = []
    for name in names:
        res = serberus_pipeline(corpus.load(name), "core")
        checks = {"fence": "NCAS", "fps": "STKL", "clean": "NARG"}
        for stage, cls in checks.items():
            v = _verify(res.stages[stage], res.mode, CORPUS_STEPS)
            if not v.coverage.complete or v.finding_counts.get(cls, 0):
                bad.append(f"{name}/{stage}: {cls}={v.finding_counts.get(cls, 0)} complete={v.coverage.complete}")
        v = _verify(res.program, res.mode, CORPUS_STEPS)
        if not v.coverage.complete or v.secret_observations:
            bad.append(f"{name}/final: SEC observations={v.secret_observations} complete={v.coverage.complete}")
    ok = not bad
    record("2", ok, f"{len(names)} programs ({len(multi)} multi-procedure); " + ("; ".join(bad) or "no violations"))
    assert ok


# 3 -------------------------------------------------------------------------


def _sample_trace(prog, rng, max_steps=80):
    cfg = initial_configuration(prog)
    pcs = []
    for _ in range(max_steps):
        succ = successors(cfg, prog, HardwareMode())
        s = rng.choice(succ)
        pcs.append((cfg.pc, cfg.transient))
        if s.kind == SEQ_KIND and s.config == cfg:
            break
        cfg = s.config
    return pcs


def test_3_tcfg_completeness():
    rng = random.Random(2024)
    programs = [corpus.load(n) for n in corpus.names()]
    programs += [serberus_pipeline(p, "core").program for p in list(programs)]
    traces = pairs = 0
    counter = []
    per_prog = 1000 // len(programs) + 1
    for prog in programs:
        procs, _ = partition_procedures(prog)
        owner = {a: p.name for p in procs for a in p.body}
        reach = {}
        for p in procs:
            t = build_tcfg(p, prog)
            reach[p.name] = {a: t.reachable(a) for a in p.body}
        for _ in range(per_prog):
            traces += 1
            seen = [a for a, tr in _sample_trace(prog, rng) if tr and a in owner]
            for i, a in enumerate(seen):
                for b in seen[i + 1:]:
                    if owner[a] == owner[b]:
                        pairs += 1
                        if b not in reach[owner[a]][a]:
                            counter.append((a, b))
    ok = traces >= 1000 and not counter
    record("3", ok, f"{traces} traces, {pairs} transient same-procedure pairs, {len(counter)} counterexamples")
    assert ok


# 4 -------------------------------------------------------------------------


def _brute_multicut(weights, pairs):
    edges = sorted(weights)
    best = None
    for k in range(len(edges) + 1):
        for sub in itertools.combinations(edges, k):
            w = sum((weights[e] for e in sub), Fraction(0))
            if best is not None and w >= best:
                continue
            if all(separated(edges, set(sub), s, t) for s, t in pairs):
                best = w
    return best


def test_4_multicut():
    invalid, worse, checked, procs = [], [], 0, 0
    for variant in ("core", "psf", "nostl", "sls"):
        for name in corpus.names():
            for plan in plan_fences(corpus.load(name), variant):
                procs += 1
                st = {(p.source, p.sink) for p in plan.pairs}
                edges = plan.tcfg.edges
                if not all(separated(edges, plan.cut.edges, s, t) for s, t in st):
                    invalid.append(f"{variant}/{name}/{plan.proc.name}")
                if st and len(edges) <= 12:
                    checked += 1
                    opt = _brute_multicut(edges, st)
                    if plan.cut.total_weight > 2 * opt:
                        worse.append(f"{variant}/{name}/{plan.proc.name}: {plan.cut.total_weight} vs {opt}")
    ok = not invalid and not worse
    record("4", ok, f"{procs} procedures valid={not invalid}; {checked} with pairs and <= 12 edges, "
                    f"{len(worse)} beyond 2x optimum")
    assert ok


# 5 -------------------------------------------------------------------------


def _fences_in_loops(prog):
    procs, report = partition_procedures(prog)
    assert report.ok
    count = 0
    for p in procs:
        succ_of = _ordinary_succs(prog, p.body)
        idom = immediate_dominators(p.body, succ_of, p.entry)
        for body in natural_loops(p.body, succ_of, idom).values():
            count += sum(isinstance(prog.instrs[a], Lfence) for a in body)
    return count


def test_5_loop_placement():
    prog = corpus.load(corpus.LOOP_BENCHMARK)
    core = serberus_pipeline(prog, "core")
    base = intel_lfence(prog)
    n_core, n_base = _fences_in_loops(core.program), _fences_in_loops(base.program)
    secure = _verify(core.program, core.mode, GADGET_STEPS).secure
    ok = n_core == 0 and n_base >= 1 and secure
    record("5", ok, f"core: {n_core} LFENCEs in loops ({core.fences()} total, output secure={secure}); "
                    f"intel baseline: {n_base} in loops")
    assert ok


# 6 -------------------------------------------------------------------------


def test_6_variant_boundaries():
    psf_mode, nostl_mode, sls_mode = HardwareMode(psf=True), HardwareMode(stl=False), HardwareMode(sls=True)
    ncal = corpus.load("ncal")
    core_out = serberus_pipeline(ncal, "core").program
    v = _verify(core_out, psf_mode, GADGET_STEPS)
    a = (not v.secure) and "LOAD" in v.leak_classes
    psf_out = serberus_pipeline(ncal, "psf").program
    b = _verify(psf_out, psf_mode, GADGET_STEPS).secure
    nostl_pass, nostl_fail_stl, sls_pass = [], [], []
    for name in corpus.GADGETS:
        prog = corpus.load(name)
        out = serberus_pipeline(prog, "nostl").program
        vn = _verify(out, nostl_mode, GADGET_STEPS)
        nostl_pass.append(vn.secure and vn.coverage.complete)
        vs = _verify(out, HardwareMode(), GADGET_STEPS)
        if not vs.secure:
            nostl_fail_stl.append(name)
        out = serberus_pipeline(prog, "sls").program
        vl = _verify(out, sls_mode, GADGET_STEPS)
        sls_pass.append(vl.secure and vl.coverage.complete)
    c = all(nostl_pass) and bool(nostl_fail_stl)
    d = all(sls_pass)
    ok = a and b and c and d
    record("6", ok, f"core ncal under psf leaks via LOAD={a}; psf output passes under psf={b}; "
                    f"nostl passes under nostl={all(nostl_pass)}, fails with STL on {nostl_fail_stl}; "
                    f"sls passes under sls={d}")
    assert ok


# 7 -------------------------------------------------------------------------


def _canon(cfg):
    regs = tuple((v.value, int(v.label)) for v in cfg.regs)
    mem = tuple((v.value, int(v.label)) for v in cfg.dmem)
    spec = tuple((a, (v.value, int(v.label))) for a, v in cfg.spec)
    return (regs, mem, spec, tuple(cfg.cs), cfg.transient)


def explorer_traces(prog, bound, mode):
    out = set()
    for tr in explore(prog, ExplorationLimits(max_steps=bound, memo=False), mode):
        steps = tuple(
            ("seq" if s.kind == SEQ_KIND else "transient",
             (s.obs.kind, tuple((v.value, int(v.label)) for v in s.obs.values)),
             _canon(s.post))
            for s in tr.steps
        )
        out.add((steps, tr.status))
    return out


MODES = ({}, {"psf": True}, {"stl": False}, {"sls": True})


def test_7_oracle_equivalence():
    mismatches = []
    total = 0
    programs = 0
    for seed in range(250):
        rng = random.Random(seed)
        prog = random_program(rng, rng.randint(4, 12), width=4, calls=seed % 2 == 1)
        programs += 1
        for mk in MODES:
            want = enumerate_traces(prog, 10, **mk)
            got = explorer_traces(prog, 10, HardwareMode(**mk))
            total += len(want)
            if want != got:
                mismatches.append((seed, mk))
    ok = not mismatches
    record("7", ok, f"{programs} programs x {len(MODES)} modes, {total} traces, {len(mismatches)} mismatches")
    assert ok


# 8 -------------------------------------------------------------------------


def test_8_sequential_preservation():
    bad = []
    for name in corpus.names():
        prog = corpus.load(name)
        res = serberus_pipeline(prog, "core")
        obs_eq, mem_eq = exact_preserved(prog, res.program)
        if not (obs_eq and mem_eq):
            bad.append(f"{name}(obs={obs_eq},mem={mem_eq})")
    ok = not bad
    record("8", ok, f"exact equality fails on {len(bad)}/{len(corpus.names())} programs: {' '.join(bad)}"
           if bad else "all programs preserved exactly")
    assert ok, "private-stack plumbing and relocation change the sequential observations; see notes"


@pytest.mark.parametrize("variant", ["core", "psf", "nostl", "sls"])
def test_8_preservation_modulo_relocation(variant):
    bad = []
    for name in corpus.names():
        prog = corpus.load(name)
        res = serberus_pipeline(prog, variant)
        obs_eq, mem_eq = preserved_modulo_relocation(prog, res.program, res.origin)
        if not (obs_eq and mem_eq):
            bad.append(name)
    record(f"8 (modulo relocation, {variant})", not bad, f"differs on {bad}" if bad else "all programs preserved")
    assert not bad
