"""The full mitigation pipeline and its variants."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from ..cts import CtsReport, check_cts
from ..isa import Program
from ..semantics import HardwareMode
from . import passes
from .rewrite import compose_origins

VARIANTS = ("core", "psf", "nostl", "sls")

# hardware mode each variant's output is meant to run under
VERIFY_MODE = {
    "core": HardwareMode(),
    "psf": HardwareMode(psf=True),
    "nostl": HardwareMode(stl=False),
    "sls": HardwareMode(sls=True),
}


class PipelineError(Exception):
    """The input does not satisfy the static constant-time discipline."""

    def __init__(self, report: CtsReport):
        self.report = report
        first = report.violations[0] if report.violations else None
        detail = f": {first.rule} {first.message}" if first else ""
        super().__init__(f"input fails CTS checks{detail}")


@dataclass
class PipelineResult:
    variant: str
    program: Program
    origin: tuple
    stages: dict = field(default_factory=dict)  # stage name -> Program
    plans: list = field(default_factory=list)
    cts: CtsReport | None = None
    zeroed: dict = field(default_factory=dict)  # input CALL/RET address -> registers zeroed

    @property
    def mode(self) -> HardwareMode:
        return VERIFY_MODE[self.variant]

    def fences(self) -> int:
        from ..isa import Lfence

        return sum(isinstance(i, Lfence) for i in self.program.instrs)

    def report(self) -> dict:
        """Pass report: pairs by kind and cut edges per procedure, fences,
        private-stack layout and registers zeroed."""
        procs = []
        for plan in self.plans:
            kinds = Counter(p.kind for p in plan.pairs)
            procs.append({
                "procedure": plan.proc.name,
                "pairs": dict(sorted(kinds.items())),
                "tcfg_edges": len(plan.tcfg.edges),
                "cut": [
                    {"edge": [u, v], "weight": str(plan.tcfg.edges[(u, v)])}
                    for (u, v) in sorted(plan.cut.edges)
                ],
                "cut_weight": str(plan.cut.total_weight),
            })
        stacks = {
            name: {"base": ps.base, "end": ps.end, "frame": ps.frame, "psp": ps.psp}
            for name, ps in sorted(self.program.private_stacks.items())
        }
        return {
            "variant": self.variant,
            "verify_mode": str(self.mode),
            "stages": list(self.stages),
            "procedures": procs,
            "fences": self.fences(),
            "private_stacks": stacks,
            "registers_zeroed": {str(a): list(rs) for a, rs in sorted(self.zeroed.items())},
            "length": {"input": len(self.stages["input"].instrs), "output": len(self.program.instrs)},
        }


def _stages(variant: str, fps_depth):
    fence = ("fence", lambda p: passes.insert_fences(p, variant))
    clean = ("clean", passes.register_cleaning)
    if variant == "core":
        return [fence, ("fps", lambda p: passes.fps_transform(p, fps_depth)), clean]
    if variant == "sls":
        return [fence, ("fps", lambda p: passes.fps_transform(p, fps_depth)), clean, ("sls", passes.sls_fences)]
    if variant == "nostl":
        return [fence, ("stackinit", passes.stack_init_transform), clean]
    if variant == "psf":
        return [fence, clean]
    raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")


def serberus_pipeline(
    prog: Program,
    variant: str = "core",
    fps_depth=None,
    check: bool = True,
    enumerate_inputs: bool = False,
) -> PipelineResult:
    """Mitigate a program that passes the CTS checks.

    Raises :class:`PipelineError` (with the report attached) when the input
    does not pass, unless ``check`` is false.  ``fps_depth`` is passed to
    :func:`passes.fps_layout`.
    """
    stages = _stages(variant, fps_depth)
    report = None
    if check:
        report, _, _ = check_cts(prog, enumerate_inputs)
        if not report.ok:
            raise PipelineError(report)
    origin = tuple(range(len(prog.instrs)))
    cur = prog
    result = PipelineResult(variant, prog, origin, {"input": prog}, cts=report)
    for name, fn in stages:
        res = fn(cur)
        if "zeroed" in res.details:
            # addresses of the stage input, mapped back to the pipeline input
            result.zeroed = {origin[a]: rs for a, rs in res.details["zeroed"].items() if origin[a] is not None}
        origin = compose_origins(origin, res.origin)
        cur = res.program
        result.stages[name] = cur
        if res.plans:
            result.plans = res.plans
    result.program = cur
    result.origin = origin
    return result
