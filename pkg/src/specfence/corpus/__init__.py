"""Bundled example programs.

``GADGETS`` maps each leak gadget to the taint-primitive class its
pre-mitigation violation is attributed to.  ``MULTI_PROCEDURE`` lists the
programs with more than one procedure.
"""

from __future__ import annotations

from importlib import resources

from ..isa import Program, parse_program

GADGETS = {
    "ncal": "NCAL",
    "ncas": "NCAS",
    "stkl": "STKL",
    "narg": "NARG",
    "stl": "NCAS",
}

MULTI_PROCEDURE = ("stkl", "narg", "mp_lookup", "mp_mix", "allpub")

# the loop benchmark: one pair resolvable outside its single loop
LOOP_BENCHMARK = "loop"


def names() -> list[str]:
    return sorted(
        p.name[:-4] for p in resources.files(__package__).iterdir() if p.name.endswith(".asm")
    )


def source(name: str) -> str:
    return resources.files(__package__).joinpath(f"{name}.asm").read_text()


def load(name: str) -> Program:
    return parse_program(source(name))


def load_all() -> dict[str, Program]:
    return {n: load(n) for n in names()}
