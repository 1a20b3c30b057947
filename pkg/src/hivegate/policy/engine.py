"""Policy bindings and the execution engine.

A binding ties one adaptation program (a built-in name or sandboxed program
source) to a route-key glob and a trigger direction. Programs execute only as
messages arrive: with zero arrivals there are zero executions. Program faults
never reach the data path; the triggering message proceeds and the error is
counted and logged.
"""

from __future__ import annotations

import fnmatch
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional, Union

from ..errors import BudgetExceeded, ProgramError
from ..messages import Direction, Message
from ..queues import QueueManager, RouteQueue
from .builtins import NATIVE_POLICIES, NativePolicy
from .host import DEFAULT_STEP_BUDGET, ExecutionContext, ExecutionReport
from .interp import SandboxedProgram

log = logging.getLogger("hivegate.policy")


def load_builtin_program(name: str) -> SandboxedProgram:
    """Load one of the packaged program-source fixtures by bare name."""
    from importlib.resources import files

    text = files("hivegate.policy").joinpath("programs", f"{name}.pol").read_text()
    return SandboxedProgram(text, name=f"{name}.pol")


class Trigger(Enum):
    ON_REQUEST = "on_request"
    ON_RESPONSE = "on_response"

    @classmethod
    def for_kind(cls, kind: Direction) -> "Trigger":
        return cls.ON_REQUEST if kind is Direction.REQUEST else cls.ON_RESPONSE


Program = Union[NativePolicy, SandboxedProgram]


@dataclass
class PolicyBinding:
    """One adaptation program bound to a route pattern and trigger."""

    route_pattern: str
    trigger: Trigger
    program: Program
    notify_endpoints: tuple[str, ...] = ()
    transform_endpoint: Optional[str] = None
    params: dict = field(default_factory=dict)
    active_from_ms: int = 0
    source_name: str = ""

    def matches(self, route_key: str) -> bool:
        return fnmatch.fnmatchcase(route_key, self.route_pattern)

    def program_name(self) -> str:
        return getattr(self.program, "name", "<anonymous>")


def validate_binding(binding: PolicyBinding) -> list[str]:
    """Load-time checks. A program that calls transform without an endpoint,
    or notify without endpoints, must fail before any traffic flows."""
    problems = []
    program = binding.program
    if getattr(program, "uses_transform", False) and not binding.transform_endpoint:
        problems.append(
            f"policy {binding.route_pattern!r}/{binding.trigger.value}: program "
            f"{binding.program_name()!r} calls transform but no transform_endpoint is registered"
        )
    if getattr(program, "uses_notify", False) and not binding.notify_endpoints:
        problems.append(
            f"policy {binding.route_pattern!r}/{binding.trigger.value}: program "
            f"{binding.program_name()!r} calls notify but no notify_endpoints are registered"
        )
    if isinstance(program, SandboxedProgram) and binding.trigger.value not in program.entry_points():
        problems.append(
            f"policy {binding.route_pattern!r}/{binding.trigger.value}: program "
            f"{binding.program_name()!r} defines no {binding.trigger.value} entry point"
        )
    return problems


def dedupe_bindings(bindings: Iterable[PolicyBinding]) -> tuple[list[PolicyBinding], list[str]]:
    """Exactly one program per (route_pattern, trigger); later wins with a warning."""
    chosen: dict[tuple[str, Trigger], PolicyBinding] = {}
    warnings = []
    for binding in bindings:
        key = (binding.route_pattern, binding.trigger)
        if key in chosen:
            warnings.append(
                f"policy {binding.route_pattern!r}/{binding.trigger.value} replaces an earlier binding"
            )
        chosen[key] = binding
    return list(chosen.values()), warnings


class PolicyEngine:
    """Matches arriving messages to bindings and runs their programs."""

    def __init__(
        self,
        manager: QueueManager,
        bindings: Iterable[PolicyBinding] = (),
        *,
        budget: int = DEFAULT_STEP_BUDGET,
        resolve_destination: Optional[Callable[[str], bool]] = None,
    ) -> None:
        self.manager = manager
        self.budget = budget
        self.resolve_destination = resolve_destination
        self.counters = {"executions": 0, "program_errors": 0, "budget_exceeded": 0}
        self._bindings: list[PolicyBinding] = list(bindings)
        self._swap_lock = threading.Lock()
        manager.engine = self

    @property
    def bindings(self) -> list[PolicyBinding]:
        return list(self._bindings)

    def swap_bindings(self, bindings: Iterable[PolicyBinding]) -> None:
        """Atomically replace the binding set; in-flight executions keep the
        binding object they started with."""
        with self._swap_lock:
            self._bindings = list(bindings)

    def match(self, route_key: str, trigger: Trigger) -> Optional[PolicyBinding]:
        for binding in self._bindings:
            if binding.trigger is trigger and binding.matches(route_key):
                return binding
        return None

    # -- execution ------------------------------------------------------------------

    def on_message(self, m: Message, q: RouteQueue, now_ms: int) -> Optional[ExecutionReport]:
        """Run the binding matching an arriving message. Called with the
        owning queue's exclusion held."""
        trigger = Trigger.for_kind(m.kind)
        binding = self.match(m.route.key, trigger)
        if binding is None or now_ms < binding.active_from_ms:
            return None
        ctx = ExecutionContext(
            self.manager,
            m,
            q,
            binding,
            now_ms,
            budget=self.budget,
            resolve_destination=self.resolve_destination,
        )
        return self.execute(binding, ctx)

    def execute(self, binding: PolicyBinding, ctx: ExecutionContext) -> ExecutionReport:
        """Run a program to completion or budget exhaustion, failing open."""
        self.counters["executions"] += 1
        try:
            binding.program.run(binding.trigger.value, ctx.trigger_handle(), binding.params, ctx)
        except BudgetExceeded as exc:
            self.counters["budget_exceeded"] += 1
            ctx.report.error = f"budget_exceeded: {exc}"
            log.warning(
                "policy %s on %s message %s: %s",
                binding.program_name(), ctx.queue.key, ctx.message.id, exc,
            )
        except ProgramError as exc:
            self.counters["program_errors"] += 1
            ctx.report.error = f"program_error: {exc}"
            log.warning(
                "policy %s on %s message %s: %s",
                binding.program_name(), ctx.queue.key, ctx.message.id, exc,
            )
        except Exception as exc:  # native policy fault: same fail-open treatment
            self.counters["program_errors"] += 1
            ctx.report.error = f"program_error: {type(exc).__name__}: {exc}"
            log.warning(
                "policy %s on %s message %s failed: %s",
                binding.program_name(), ctx.queue.key, ctx.message.id, exc,
            )
        finally:
            ctx.close()
        return ctx.report
