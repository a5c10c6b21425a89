"""Fence insertion, function-private stacks, register cleaning and the
pipelines built from them."""

from .flow import CutSet, MulticutError, max_flow_min_cut, multicut
from .pairs import SourceSinkPair, generate_pairs
from .passes import (
    PassError, PassResult, fps_transform, insert_fences, intel_lfence, register_cleaning,
    sls_fences, stack_init_transform,
)
from .pipeline import VARIANTS, VERIFY_MODE, PipelineError, PipelineResult, serberus_pipeline
from .tcfg import Tcfg, build_tcfg
from .dfg import StaticDfg, build_static_dfg

__all__ = [
    "CutSet", "MulticutError", "max_flow_min_cut", "multicut", "SourceSinkPair", "generate_pairs",
    "PassError", "PassResult", "fps_transform", "insert_fences", "intel_lfence",
    "register_cleaning", "sls_fences", "stack_init_transform", "VARIANTS", "VERIFY_MODE",
    "PipelineError", "PipelineResult", "serberus_pipeline", "Tcfg", "build_tcfg", "StaticDfg",
    "build_static_dfg",
]
