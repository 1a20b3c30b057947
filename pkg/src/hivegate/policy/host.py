"""Host interface exposed to adaptation programs.

Programs see queues and messages through handle objects whose method surface
mirrors the in-network scripting interface: queue introspection (length,
avgLatency, observedBW, TCPMetrics, messages), message introspection (size,
age, dst, header, bytes), in-place adaptations (drop, insert, moveToFront,
moveToBack, redirect) and asynchronous callbacks (transform, notify).

Handles are valid only for the duration of one execution; using one after the
program returns raises. All mutations go through the owning queue's exclusion,
and callbacks are buffered so the dispatcher sees them only after that
exclusion is released.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from ..callbacks import TRANSFORM_ARGS_HEADER, CallbackJob, CallbackKind
from ..errors import BudgetExceeded, ProgramError, QueueFull, StaleHandleError
from ..messages import Direction, Message, MessageState
from ..queues import MutationResult, RouteQueue

log = logging.getLogger("hivegate.policy")

DEFAULT_STEP_BUDGET = 100_000


@dataclass
class ExecutionReport:
    """What one program execution did: applied mutations, issued callbacks."""

    binding_pattern: str = ""
    mutations: list[tuple] = field(default_factory=list)
    callbacks_issued: int = 0
    steps_used: int = 0
    error: Optional[str] = None
    callback_jobs: list[CallbackJob] = field(default_factory=list)

    def log_mutation(self, op: str, message_id: int, detail: Any, changed: bool) -> None:
        self.mutations.append((op, message_id, detail, bool(changed)))


class ExecutionContext:
    """Per-execution capability carrier.

    Mutation helpers take the target queue's exclusion one at a time; the
    trigger queue's lock (held by the enqueue pipeline) is released for the
    duration of a cross-queue operation so no two queue locks nest.
    """

    def __init__(
        self,
        manager,
        message: Message,
        queue: RouteQueue,
        binding,
        now_ms: int,
        *,
        budget: int = DEFAULT_STEP_BUDGET,
        resolve_destination: Optional[Callable[[str], bool]] = None,
    ) -> None:
        self.manager = manager
        self.message = message
        self.queue = queue
        self.binding = binding
        self.start_ms = now_ms
        self.budget = budget
        self.resolve_destination = resolve_destination
        self.steps = 0
        self.closed = False
        self.report = ExecutionReport(binding_pattern=getattr(binding, "route_pattern", ""))

    # -- lifecycle ------------------------------------------------------------

    def close(self) -> None:
        self.closed = True
        self.report.steps_used = self.steps

    def check_open(self) -> None:
        if self.closed:
            raise StaleHandleError("handle used outside its execution context")

    def charge(self, n: int = 1) -> None:
        self.steps += n
        if self.steps > self.budget:
            raise BudgetExceeded(f"step budget of {self.budget} exhausted")

    def epoch_ms(self) -> int:
        return self.manager.clock.now_ms()

    @contextmanager
    def locked(self, q: RouteQueue):
        if q is self.queue:
            yield
            return
        released = False
        try:
            self.queue.lock.release()
            released = True
        except RuntimeError:
            pass
        try:
            with q.lock:
                yield
        finally:
            if released:
                self.queue.lock.acquire()

    def buffer_job(self, job: CallbackJob) -> None:
        self.report.callback_jobs.append(job)
        self.report.callbacks_issued += 1

    def manager_counter(self, name: str) -> None:
        counters = getattr(self.manager, "counters", None)
        if counters is not None:
            counters[name] = counters.get(name, 0) + 1

    def trigger_handle(self) -> "TriggerHandle":
        return TriggerHandle(self, self.message, self.queue)


class JsonView:
    """Read-only accessor over a message's JSON payload."""

    __slots__ = ("_ctx", "_doc")

    def __init__(self, ctx: ExecutionContext, doc: Any) -> None:
        self._ctx = ctx
        self._doc = doc

    def get(self, path: str) -> Any:
        self._ctx.check_open()
        self._ctx.charge()
        doc = self._doc
        for part in str(path).split("."):
            if isinstance(doc, dict) and part in doc:
                doc = doc[part]
            else:
                return None
        return doc

    def getString(self, path: str) -> Optional[str]:
        value = self.get(path)
        return None if value is None else str(value)

    def getNum(self, path: str) -> Optional[float]:
        value = self.get(path)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return None
        return value


class HeadersView:
    """Header accessor with the pseudo-fields path, host, and dst."""

    __slots__ = ("_ctx", "_handle")

    def __init__(self, ctx: ExecutionContext, handle: "MessageHandle") -> None:
        self._ctx = ctx
        self._handle = handle

    def get(self, name: str) -> Optional[str]:
        return self._handle.header(name)

    def replace(self, name: str, value: str) -> bool:
        return self._handle.replaceHeader(name, value)


class QueueHandle:
    """Program-facing view of one route queue."""

    __slots__ = ("_ctx", "_q")

    def __init__(self, ctx: ExecutionContext, q: RouteQueue) -> None:
        self._ctx = ctx
        self._q = q

    def _check(self) -> None:
        self._ctx.check_open()
        self._ctx.charge()

    def route(self) -> str:
        self._check()
        return self._q.key

    def length(self) -> int:
        self._check()
        return len(self._q.items)

    def avgLatency(self) -> float:
        """Weighted moving average of request/response round trips, in ms.

        Reads 0.0 before the first sample; check latencySamples() to tell the
        two apart.
        """
        self._check()
        return self._q.metrics.avg_latency_ms

    def latencySamples(self) -> int:
        self._check()
        return self._q.metrics.latency_samples

    def observedBW(self) -> float:
        """Bytes per second forwarded from this queue over the trailing window."""
        self._check()
        with self._ctx.locked(self._q):
            return self._q.metrics.observed_bw(self._ctx.epoch_ms(), len(self._q.items) > 0)

    def TCPMetrics(self, name: str) -> Optional[float]:
        self._check()
        return self._q.metrics.transport().get(name)

    def messages(self) -> list["MessageHandle"]:
        self._check()
        with self._ctx.locked(self._q):
            items = list(self._q.items)
        ctx = self._ctx
        ctx.charge(len(items))
        return [MessageHandle(ctx, m, self._q) for m in items]

    # listing aliases
    getBW = observedBW
    getItem = messages

    def __repr__(self) -> str:
        return f"<QueueHandle {self._q.key}>"


class MessageHandle:
    """Program-facing view of one queued message."""

    __slots__ = ("_ctx", "_m", "_q")

    def __init__(self, ctx: ExecutionContext, m: Message, q: RouteQueue) -> None:
        self._ctx = ctx
        self._m = m
        self._q = q

    def _check(self) -> None:
        self._ctx.check_open()
        self._ctx.charge()

    # -- introspection -----------------------------------------------------------

    def size(self) -> int:
        self._check()
        return self._m.size()

    def age(self) -> int:
        self._check()
        return self._m.age_ms(self._ctx.epoch_ms())

    def dst(self) -> str:
        self._check()
        return self._m.route.destination if self._m.route else ""

    def header(self, name: Optional[str] = None):
        self._check()
        if name is None:
            return HeadersView(self._ctx, self)
        low = str(name).lower()
        if low == "path":
            return self._m.target
        if low == "dst":
            return self.dst()
        if low == "host":
            return self._m.headers.get("Host") or self.dst()
        return self._m.headers.get(name)

    def bytes(self, i: int, j: int) -> bytes:
        self._check()
        payload = self._m.payload
        if not (0 <= i <= j <= len(payload)):
            raise ProgramError(f"bytes({i}, {j}) out of range for payload of {len(payload)}")
        return payload[i:j]

    def json(self) -> JsonView:
        self._check()
        return JsonView(self._ctx, self._m.json())

    def json_field(self, path: str) -> Any:
        self._check()
        return self._m.json_field(path)

    def TCPMetrics(self, name: str) -> Optional[float]:
        # Per-message transport metrics report the owning flow's latest snapshot.
        self._check()
        return self._q.metrics.transport().get(name)

    def id(self) -> int:
        self._check()
        return self._m.id

    def copy(self) -> "MessageHandle":
        self._check()
        clone = self._m.copy(self._ctx.manager.next_id())
        return MessageHandle(self._ctx, clone, self._q)

    # -- mutations ----------------------------------------------------------------

    def replaceHeader(self, name: str, value) -> bool:
        self._check()
        with self._ctx.locked(self._q):
            idx = self._q.index_of(self._m)
            if idx is None or not self._q.in_window(idx):
                self._ctx.report.log_mutation("replace_header", self._m.id, name, False)
                return False
            if str(name).lower() == "path":
                self._m.target = str(value)
            else:
                self._m.set_header(str(name), str(value))
        self._ctx.report.log_mutation("replace_header", self._m.id, (name, str(value)), True)
        return True

    def drop(self) -> int:
        """Drop this message. Returns the new queue length, or the old length
        when the message already left the mutable window."""
        self._check()
        with self._ctx.locked(self._q):
            idx = self._q.index_of(self._m)
            if idx is None:
                result = MutationResult(False, len(self._q.items), "invalid_index")
            else:
                result = self._q.drop(idx, self._ctx.epoch_ms())
        self._ctx.report.log_mutation("drop", self._m.id, None, result.changed)
        return result.length

    def insert(self, other: "MessageHandle") -> int:
        """Insert `other`'s message immediately after this one."""
        self._check()
        new_m = other._m if isinstance(other, MessageHandle) else other
        with self._ctx.locked(self._q):
            idx = self._q.index_of(self._m)
            if idx is None:
                result = MutationResult(False, len(self._q.items), "invalid_index")
            else:
                result = self._q.insert(idx, new_m, self._ctx.epoch_ms())
        self._ctx.report.log_mutation("insert", self._m.id, new_m.id, result.changed)
        return result.length

    def moveToFront(self) -> bool:
        self._check()
        with self._ctx.locked(self._q):
            idx = self._q.index_of(self._m)
            result = self._q.move_to_front(idx) if idx is not None else MutationResult(False, len(self._q.items), "invalid_index")
        self._ctx.report.log_mutation("move_to_front", self._m.id, None, result.changed)
        return result.changed

    def moveToBack(self) -> bool:
        self._check()
        with self._ctx.locked(self._q):
            idx = self._q.index_of(self._m)
            result = self._q.move_to_back(idx) if idx is not None else MutationResult(False, len(self._q.items), "invalid_index")
        self._ctx.report.log_mutation("move_to_back", self._m.id, None, result.changed)
        return result.changed

    # listing aliases
    pushFront = moveToFront
    pushBack = moveToBack
    getAge = age
    getHeader = header

    def redirect(self, destination: str) -> bool:
        """Rewrite the destination and migrate to the new route's queue."""
        self._check()
        destination = str(destination)
        m = self._m
        if m.route is not None and destination == m.route.destination:
            self._ctx.report.log_mutation("redirect", m.id, destination, False)
            return True  # idempotent self-redirect
        resolver = self._ctx.resolve_destination
        if resolver is not None and not resolver(destination):
            self._ctx.manager_counter("redirect_unknown_destination")
            self._ctx.report.log_mutation("redirect", m.id, destination, False)
            return False
        with self._ctx.locked(self._q):
            idx = self._q.index_of(m)
            if idx is None:
                self._ctx.report.log_mutation("redirect", m.id, destination, False)
                return False
            removed, result = self._q.remove_for_redirect(idx)
            if removed is None:
                self._ctx.report.log_mutation("redirect", m.id, destination, False)
                return False
        m.route = m.route.with_destination(destination)
        m.set_header("Host", destination)
        target = self._ctx.manager.queue_for(m.route)
        now = self._ctx.epoch_ms()
        try:
            with self._ctx.locked(target):
                target.accept_migrated(m, now)
        except QueueFull:
            m.transition(MessageState.DROPPED)
            self._ctx.report.log_mutation("redirect", m.id, destination, False)
            return False
        self._q = target
        self._ctx.manager.signal(target)
        self._ctx.report.log_mutation("redirect", m.id, destination, True)
        return True

    def transform(self, args: str) -> bool:
        """Asynchronously rewrite the payload via the registered endpoint.

        Marks the message in progress immediately; the forwarder skips it
        until the endpoint's response payload is swapped in.
        """
        self._check()
        endpoint = getattr(self._ctx.binding, "transform_endpoint", None)
        if not endpoint:
            raise ProgramError("transform called but binding has no transform endpoint")
        m = self._m
        with self._ctx.locked(self._q):
            idx = self._q.index_of(m)
            if idx is None or not self._q.in_window(idx) or m.state is MessageState.IN_PROGRESS:
                self._ctx.report.log_mutation("transform", m.id, args, False)
                return False
            m.transition(MessageState.IN_PROGRESS)
            payload = m.payload
            key = self._q.key
        timeout = getattr(self._ctx.manager, "transform_timeout_ms", 5000)
        self._ctx.buffer_job(
            CallbackJob(
                CallbackKind.TRANSFORM,
                endpoint,
                payload,
                headers={TRANSFORM_ARGS_HEADER: str(args)},
                message_ref=(key, m.id),
                deadline_ms=self._ctx.epoch_ms() + timeout,
                timeout_ms=timeout,
            )
        )
        self._ctx.report.log_mutation("transform", m.id, str(args), True)
        return True

    def __repr__(self) -> str:
        return f"<MessageHandle #{self._m.id}>"


class TriggerHandle(MessageHandle):
    """Handle bound to the triggering message; adds queue iteration, the clock,
    and the notify callback."""

    __slots__ = ()

    def queues(self) -> list[QueueHandle]:
        self._check()
        ctx = self._ctx
        return [QueueHandle(ctx, q) for q in ctx.manager.all_queues()]

    Queues = queues

    def queue(self) -> QueueHandle:
        self._check()
        return QueueHandle(self._ctx, self._ctx.queue)

    def epoch(self) -> int:
        self._check()
        return self._ctx.epoch_ms()

    def notify(self, metrics) -> bool:
        self._check()
        endpoints = getattr(self._ctx.binding, "notify_endpoints", ()) or ()
        if not endpoints:
            raise ProgramError("notify called but binding has no notify endpoints")
        body = str(metrics).encode("utf-8")
        timeout = getattr(self._ctx.manager, "notify_timeout_ms", 2000)
        for endpoint in endpoints:
            self._ctx.buffer_job(
                CallbackJob(CallbackKind.NOTIFY, endpoint, body, timeout_ms=timeout)
            )
        self._ctx.report.log_mutation("notify", self._m.id, str(metrics), True)
        return True
