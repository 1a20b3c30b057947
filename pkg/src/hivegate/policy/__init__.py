"""Adaptation policies: host API, sandboxed programs, bindings, and engine."""

from .builtins import NATIVE_POLICIES, NativePolicy, ResolutionLadder, Rung
from .engine import (
    PolicyBinding,
    PolicyEngine,
    Trigger,
    dedupe_bindings,
    load_builtin_program,
    validate_binding,
)
from .host import (
    DEFAULT_STEP_BUDGET,
    ExecutionContext,
    ExecutionReport,
    MessageHandle,
    QueueHandle,
    TriggerHandle,
)
from .interp import SandboxedProgram

__all__ = [
    "NATIVE_POLICIES",
    "NativePolicy",
    "ResolutionLadder",
    "Rung",
    "PolicyBinding",
    "PolicyEngine",
    "Trigger",
    "dedupe_bindings",
    "load_builtin_program",
    "validate_binding",
    "DEFAULT_STEP_BUDGET",
    "ExecutionContext",
    "ExecutionReport",
    "MessageHandle",
    "QueueHandle",
    "TriggerHandle",
    "SandboxedProgram",
]
