"""Closed-form behavioural stand-in for circuit simulation."""

from .evaluate import (
    apply_stage,
    evaluate_module,
    evaluate_system,
    evaluate_system_array,
    module_order,
    simulate_batch,
    simulate_transient,
    system_trace,
)
from .testbench import builtin_path, content_hash, load_testbench, save_testbench
from .types import (
    Binding,
    ModuleSpec,
    Param,
    ParameterSpace,
    PerturbationSpec,
    Port,
    SpecEntry,
    SpecSet,
    TestbenchSpec,
    Waveform,
)

__all__ = [
    "Binding", "ModuleSpec", "Param", "ParameterSpace", "PerturbationSpec", "Port", "SpecEntry", "SpecSet",
    "TestbenchSpec", "Waveform", "apply_stage", "builtin_path", "content_hash", "evaluate_module",
    "evaluate_system", "evaluate_system_array", "load_testbench", "module_order", "save_testbench",
    "simulate_batch", "simulate_transient", "system_trace",
]
