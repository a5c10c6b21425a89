"""Command-line driver: check, mitigate, verify and explain programs.

Exit status is 0 for pass/secure, 1 for a violation or failed check and 2
for usage, input or resource errors (including an exploration that hit its
bounds without finding a violation).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import corpus
from .analysis import ClassificationError, CorollaryError, check_sct, explain
from .cts import check_cts
from .isa import ISAError, parse_program, print_program
from .mitigation import VARIANTS, VERIFY_MODE, PassError, PipelineError, serberus_pipeline
from .mitigation.flow import MulticutError
from .semantics import ExplorationLimits, HardwareMode

SCHEMA = "specfence/1"

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_ERROR = 2

DEMO_MAX_STEPS = 500


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--variant", choices=VARIANTS, default=None,
                        help="mitigation variant; also selects the hardware mode it targets")
    common.add_argument("--mode", default=None,
                        help="hardware mode overrides, e.g. nostl,psf or sls")
    common.add_argument("--max-steps", type=int, default=None, help="per-trace step bound")
    common.add_argument("--max-traces", type=int, default=None, help="stop after this many traces")
    common.add_argument("--enumerate-inputs", action="store_true",
                        help="sweep every value of the declared input words")
    common.add_argument("--word-width", type=int, default=None, help="override the program's .width")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--out", default=None, help="write output here instead of stdout")

    prog_args = argparse.ArgumentParser(add_help=False)
    prog_args.add_argument("input", nargs="?", help="program file (or a corpus name)")
    prog_args.add_argument("--stdin", action="store_true", help="read the program from stdin")

    p = argparse.ArgumentParser(prog="specfence", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("check-cts", parents=[common, prog_args], help="well-formedness and typing report")
    m = sub.add_parser("mitigate", parents=[common, prog_args], help="apply a mitigation pipeline")
    m.add_argument("--report", default=None, help="also write the JSON pass report to this path")
    m.add_argument("--fps-depth", type=int, default=None,
                   help="frames per private stack (default: 1, or 4 for recursive procedures)")
    sub.add_parser("verify-sct", parents=[common, prog_args], help="bounded speculative constant-time check")
    sub.add_parser("explain", parents=[common, prog_args], help="narrate each leak witness")
    sub.add_parser("demo", parents=[common], help="pre/post mitigation table over the built-in corpus")
    return p


def _read_program(args):
    if args.stdin:
        text, where = sys.stdin.read(), "<stdin>"
    elif args.input is None:
        raise UsageError("give a program path or --stdin")
    else:
        path = Path(args.input)
        if path.exists():
            text, where = path.read_text(), str(path)
        elif args.input in corpus.names():
            text, where = corpus.source(args.input), f"corpus:{args.input}"
        else:
            raise UsageError(f"no such file: {args.input}")
    try:
        return parse_program(text, args.word_width), where
    except ISAError as e:
        raise UsageError(f"{where}: {e}") from e


def _mode(args, warn) -> HardwareMode:
    implied = VERIFY_MODE[args.variant] if args.variant else HardwareMode()
    if args.mode is None:
        return implied
    try:
        mode = HardwareMode.parse(args.mode)
    except ValueError as e:
        raise UsageError(str(e)) from e
    if args.variant and mode != implied:
        warn(f"warning: --mode {mode} overrides the {implied} mode that variant {args.variant} targets")
    return mode


def _limits(args, default_steps=None) -> ExplorationLimits:
    kw = {}
    steps = args.max_steps if args.max_steps is not None else default_steps
    if steps is not None:
        if steps < 1:
            raise UsageError("--max-steps must be positive")
        kw["max_steps"] = steps
    if args.max_traces is not None:
        if args.max_traces < 1:
            raise UsageError("--max-traces must be positive")
        kw["max_traces"] = args.max_traces
    return ExplorationLimits(**kw)


def _verify(prog, args, mode, limits, max_witnesses=8):
    """Returns (exit code, payload, verdict or None)."""
    report, _, typing = check_cts(prog, args.enumerate_inputs)
    if typing is None:
        return EXIT_FAIL, {"status": "cts-fail", "cts": report.as_dict()}, None
    verdict = check_sct(prog, typing, limits, mode, args.enumerate_inputs, max_witnesses, strict=True)
    payload = verdict.as_dict()
    if not verdict.secure:
        code = EXIT_FAIL
    elif not verdict.coverage.complete:
        payload["status"] = "incomplete"
        code = EXIT_ERROR
    else:
        code = EXIT_OK
    return code, payload, verdict


def _cmd_check_cts(args, out, warn):
    prog, where = _read_program(args)
    report, procs, typing = check_cts(prog, args.enumerate_inputs)
    if args.json:
        d = {"schema": SCHEMA, "command": "check-cts", "input": where, **report.as_dict()}
        d["procedures"] = [p.name for p in procs] if procs else []
        out(json.dumps(d, indent=2, sort_keys=True))
    else:
        out(f"{where}: CTS {report.verdict}")
        for v in report.violations:
            at = "" if v.addr is None else f" at {v.addr}"
            out(f"  {v.rule}{at}: {v.message}")
        for n in report.notes:
            out(f"  note: {n}")
    return EXIT_OK if report.ok else EXIT_FAIL


def _cmd_mitigate(args, out, warn):
    prog, where = _read_program(args)
    variant = args.variant or "core"
    if args.mode is not None:
        warn("warning: --mode has no effect on mitigate")
    try:
        res = serberus_pipeline(prog, variant, fps_depth=args.fps_depth, enumerate_inputs=args.enumerate_inputs)
    except PipelineError as e:
        if args.json:
            out(json.dumps({"schema": SCHEMA, "command": "mitigate", "input": where, "status": "cts-fail",
                            "cts": e.report.as_dict()}, indent=2, sort_keys=True))
        else:
            warn(f"{where}: {e}")
        return EXIT_FAIL
    except (PassError, MulticutError) as e:
        raise UsageError(f"{where}: {e}") from e
    text = print_program(res.program)
    report = {"schema": SCHEMA, "command": "mitigate", "input": where, **res.report()}
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if args.json:
        out(json.dumps({**report, "program": text}, indent=2, sort_keys=True))
    else:
        out(text.rstrip("\n"))
    return EXIT_OK


def _cmd_verify(args, out, warn):
    prog, where = _read_program(args)
    mode = _mode(args, warn)
    code, payload, verdict = _verify(prog, args, mode, _limits(args))
    if args.json:
        out(json.dumps({"schema": SCHEMA, "command": "verify-sct", "input": where, **payload},
                       indent=2, sort_keys=True))
        return code
    out(f"{where}: {payload['status']} under {mode}")
    if verdict is None:
        for v in payload["cts"]["violations"]:
            out(f"  {v['rule']}: {v['message']}")
        return code
    cov = verdict.coverage
    out(f"  traces {cov.traces}, complete {cov.complete}, length-bound hits {cov.length_bound_hits}")
    if verdict.finding_counts:
        counts = ", ".join(f"{c} {n}" for c, n in sorted(verdict.finding_counts.items()))
        out(f"  taint primitives: {counts}")
    for w in verdict.witnesses:
        classes = ", ".join(sorted({f.cls for f in w.findings}))
        out(f"  witness: {w.observation} at {w.addr} (step {w.step}) via {classes}")
    return code


def _cmd_explain(args, out, warn):
    prog, where = _read_program(args)
    mode = _mode(args, warn)
    code, payload, verdict = _verify(prog, args, mode, _limits(args))
    if verdict is None:
        out(f"{where}: program fails the CTS checks; nothing to explain")
        return code
    if args.json:
        out(json.dumps({"schema": SCHEMA, "command": "explain", "input": where,
                        "narrative": explain(prog, verdict).splitlines(), **payload},
                       indent=2, sort_keys=True))
    else:
        out(f"{where} under {mode}:")
        out(explain(prog, verdict))
    return code


def _cmd_demo(args, out, warn):
    variant = args.variant or "core"
    rows = []
    ok = True
    for name in corpus.names():
        prog = corpus.load(name)
        t0 = time.perf_counter()
        pre_code, pre, _ = _verify(prog, args, VERIFY_MODE[variant], _limits(args, DEMO_MAX_STEPS), 1)
        res = serberus_pipeline(prog, variant)
        post_code, post, _ = _verify(res.program, args, res.mode, _limits(args, DEMO_MAX_STEPS), 1)
        expected = corpus.GADGETS.get(name)
        pre_classes = sorted(pre.get("leak_classes", ()))
        if expected is not None and (pre_code != EXIT_FAIL or expected not in pre_classes):
            ok = False
        if post_code != EXIT_OK:
            ok = False
        rows.append({
            "program": name,
            "gadget": expected,
            "pre": {"exit": pre_code, "status": pre["status"], "leak_classes": pre_classes},
            "post": {"exit": post_code, "status": post["status"], "fences": res.fences(),
                     "complete": post.get("coverage", {}).get("complete")},
            "seconds": round(time.perf_counter() - t0, 2) if not args.json else None,
        })
    if args.json:
        for r in rows:
            del r["seconds"]
        out(json.dumps({"schema": SCHEMA, "command": "demo", "variant": variant, "ok": ok, "rows": rows},
                       indent=2, sort_keys=True))
    else:
        out(f"{'program':<10} {'gadget':<6} {'pre':<24} {'leak':<10} {'post':<24} {'fences':>6} {'secs':>6}")
        for r in rows:
            out(f"{r['program']:<10} {r['gadget'] or '-':<6} "
                f"{r['pre']['status'] + ' (' + str(r['pre']['exit']) + ')':<24} "
                f"{','.join(r['pre']['leak_classes']) or '-':<10} "
                f"{r['post']['status'] + ' (' + str(r['post']['exit']) + ')':<24} "
                f"{r['post']['fences']:>6} {r['seconds']:>6}")
        out("all gadgets flip and every output verifies" if ok else "demo FAILED")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "check-cts": _cmd_check_cts,
    "mitigate": _cmd_mitigate,
    "verify-sct": _cmd_verify,
    "explain": _cmd_explain,
    "demo": _cmd_demo,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_ERROR
    lines = []
    warn = lambda msg: print(msg, file=sys.stderr)  # noqa: E731
    try:
        code = COMMANDS[args.command](args, lines.append, warn)
    except UsageError as e:
        warn(f"error: {e}")
        return EXIT_ERROR
    except (OSError, ClassificationError, CorollaryError, MemoryError, RecursionError) as e:
        warn(f"error: {e}")
        return EXIT_ERROR
    text = "\n".join(lines) + ("\n" if lines else "")
    try:
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
    except OSError as e:
        warn(f"error: {e}")
        return EXIT_ERROR
    return code


if __name__ == "__main__":
    sys.exit(main())
