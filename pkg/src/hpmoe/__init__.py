"""Static heterogeneous taskflow compiler and multi-rank simulator for MoE-FFN layers."""

from .compiler import CompileOptions, CompiledTaskflow, check_compiled, compile_moe, compile_swiglu_add
from .cost import CostModel
from .graph import ODG, OperatorKind, ShapeConfig, build_backward_moe_ffn, build_forward_moe_ffn
from .propagation import propagate
from .routing import RoutingPlan, balanced_plan, natural_plan
from .sim import SimMetrics, simulate

__all__ = [
    "CompileOptions", "CompiledTaskflow", "CostModel", "ODG", "OperatorKind", "RoutingPlan",
    "ShapeConfig", "SimMetrics", "balanced_plan", "build_backward_moe_ffn",
    "build_forward_moe_ffn", "check_compiled", "compile_moe", "compile_swiglu_add",
    "natural_plan", "propagate", "simulate",
]
