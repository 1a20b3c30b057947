"""Route queues: per-flow mutable message buffers with token-bucket egress.

One RouteQueue exists per configured (source, destination, direction) flow,
plus a default pair for unmatched routes. All queue state is guarded by a
per-queue lock; enqueue, policy execution, and forwarding serialize on it.
Cross-queue operations never hold two queue locks at once.

Mutations apply only to the mutable window between the immutable head margin
(leading in-progress items) and tail margin (items still settling after
enqueue). Attempts outside the window fail without modifying the queue.
"""

from __future__ import annotations

import fnmatch
import itertools
import math
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Optional

from .clock import Clock
from .errors import QueueFull
from .http1 import DEFAULT_MAX_PAYLOAD
from .messages import Direction, Message, MessageState, Route
from .metrics import QueueMetrics

DEFAULT_MAX_LENGTH = 10_000
MIN_TIMER_MS = 1  # timer floor: the forwarder never sleeps for less
BURST_WINDOW_S = 0.1

TRANSFORM_TIMEOUT_MS = 5_000
NOTIFY_TIMEOUT_MS = 2_000


class TokenBucket:
    """Byte-granularity token bucket. rate is in KB/s; None means unlimited.

    Refill is computed lazily at each use and saturates at the capacity. The
    default capacity covers a 100 ms burst or one maximum-size message,
    whichever is larger, so the largest admissible message can always
    eventually be forwarded.
    """

    __slots__ = ("rate_kb_per_s", "capacity_bytes", "tokens_bytes", "last_refill", "_explicit_capacity", "_max_message")

    def __init__(
        self,
        rate_kb_per_s: Optional[float] = None,
        capacity_bytes: Optional[int] = None,
        max_message_bytes: int = DEFAULT_MAX_PAYLOAD,
        now_ms: int = 0,
    ) -> None:
        self._max_message = int(max_message_bytes)
        self._explicit_capacity = capacity_bytes
        self.rate_kb_per_s = None
        self.capacity_bytes = 0
        self.tokens_bytes = 0.0
        self.last_refill = now_ms
        self.set_rate(rate_kb_per_s, capacity_bytes=capacity_bytes, now_ms=now_ms)

    @property
    def unlimited(self) -> bool:
        return self.rate_kb_per_s is None

    @property
    def bytes_per_s(self) -> float:
        return 0.0 if self.rate_kb_per_s is None else self.rate_kb_per_s * 1024.0

    def set_rate(
        self,
        rate_kb_per_s: Optional[float],
        *,
        capacity_bytes: Optional[int] = None,
        now_ms: int = 0,
    ) -> None:
        if rate_kb_per_s is not None and rate_kb_per_s < 0:
            raise ValueError("rate must be non-negative")
        self.refill(now_ms)
        self.rate_kb_per_s = rate_kb_per_s
        if capacity_bytes is not None:
            self._explicit_capacity = capacity_bytes
        if self._explicit_capacity is not None:
            self.capacity_bytes = int(self._explicit_capacity)
        elif rate_kb_per_s is None:
            self.capacity_bytes = self._max_message
        else:
            self.capacity_bytes = int(max(rate_kb_per_s * 1024.0 * BURST_WINDOW_S, self._max_message))
        self.tokens_bytes = min(self.tokens_bytes, float(self.capacity_bytes))
        self.last_refill = now_ms

    def refill(self, now_ms: int) -> None:
        if self.rate_kb_per_s is None:
            self.last_refill = now_ms
            return
        elapsed_s = max(0, now_ms - self.last_refill) / 1000.0
        self.tokens_bytes = min(
            float(self.capacity_bytes), self.tokens_bytes + self.bytes_per_s * elapsed_s
        )
        self.last_refill = now_ms

    def try_debit(self, size: int, now_ms: int) -> bool:
        self.refill(now_ms)
        if self.rate_kb_per_s is None:
            return True
        if self.tokens_bytes >= size:
            self.tokens_bytes -= size
            return True
        return False

    def wakeup_at(self, size: int, now_ms: int) -> Optional[int]:
        """Time at which tokens will cover `size`, or None if they never will."""
        if self.rate_kb_per_s is None:
            return now_ms
        if self.bytes_per_s <= 0 or size > self.capacity_bytes:
            return None
        deficit = size - self.tokens_bytes
        if deficit <= 0:
            return now_ms + MIN_TIMER_MS
        wait_ms = math.ceil(deficit / self.bytes_per_s * 1000.0)
        return now_ms + max(MIN_TIMER_MS, wait_ms)


class NotReadyReason(Enum):
    EMPTY = "empty"
    INSUFFICIENT_TOKENS = "insufficient_tokens"
    ALL_IN_PROGRESS = "all_in_progress"


@dataclass(frozen=True)
class NotReady:
    reason: NotReadyReason
    wakeup_at: Optional[int] = None


@dataclass(frozen=True)
class MutationResult:
    changed: bool
    length: int
    error: Optional[str] = None  # "out_of_window" | "invalid_index" when unchanged

    @property
    def unchanged(self) -> bool:
        return not self.changed


@dataclass
class QueueSpec:
    """Configuration template applied to queues whose route key matches."""

    route_pattern: str
    rate_kb_per_s: Optional[float] = None
    max_length: int = DEFAULT_MAX_LENGTH
    bw_window_ms: int = 350
    bucket_capacity_bytes: Optional[int] = None

    def matches(self, route_key: str) -> bool:
        return fnmatch.fnmatchcase(route_key, self.route_pattern)


class RouteQueue:
    """Ordered, mutable container of messages for one flow."""

    def __init__(
        self,
        route: Optional[Route],
        direction: Direction,
        *,
        max_length: int = DEFAULT_MAX_LENGTH,
        bucket: Optional[TokenBucket] = None,
        metrics: Optional[QueueMetrics] = None,
        events: Optional[Callable[..., None]] = None,
        is_default: bool = False,
    ) -> None:
        self.route = route
        self.direction = direction
        self.is_default = is_default
        self.items: list[Message] = []
        self.lock = threading.RLock()
        self.cv = threading.Condition(self.lock)
        self.max_length = max_length
        self.bucket = bucket if bucket is not None else TokenBucket()
        self.metrics = metrics if metrics is not None else QueueMetrics()
        self._settling = 0
        self._events = events

    @property
    def key(self) -> str:
        if self.route is not None:
            return self.route.key
        return f"default:{self.direction.value}"

    # -- margins ---------------------------------------------------------------

    @property
    def head_margin(self) -> int:
        n = 0
        for m in self.items:
            if m.state is MessageState.IN_PROGRESS:
                n += 1
            else:
                break
        return n

    @property
    def tail_margin(self) -> int:
        return self._settling

    def _window(self) -> tuple[int, int]:
        """Half-open index range policies may mutate."""
        return self.head_margin, len(self.items) - self._settling

    def in_window(self, idx: int) -> bool:
        lo, hi = self._window()
        return lo <= idx < hi

    # -- enqueue / settle --------------------------------------------------------

    def enqueue(self, m: Message, now_ms: int) -> int:
        """Append in arrival order. The new item is part of the tail margin
        (immutable to policies) until the enqueue pipeline, including any
        triggered policy run, completes and settles it."""
        if len(self.items) >= self.max_length:
            raise QueueFull(f"queue {self.key} at max length {self.max_length}")
        if self.route is not None and not self.is_default and m.route != self.route:
            raise ValueError(f"message route {m.route} does not match queue {self.key}")
        m.mark_enqueued(now_ms)
        self.items.append(m)
        self._settling += 1
        self._emit("enqueued", queue=self, message=m, at=now_ms)
        return len(self.items)

    def settle_all(self) -> None:
        self._settling = 0

    # -- forwarding ---------------------------------------------------------------

    def dequeue_ready(self, now_ms: int):
        """First non-in-progress item if the bucket covers its size.

        On success the item leaves the queue in state Forwarding and its size
        is debited and recorded. Otherwise a NotReady explains why, with a
        wakeup time when more tokens will do the job.
        """
        limit = len(self.items) - self._settling
        candidate = None
        idx = -1
        for i in range(limit):
            if self.items[i].state is not MessageState.IN_PROGRESS:
                candidate = self.items[i]
                idx = i
                break
        if candidate is None:
            if not self.items:
                return NotReady(NotReadyReason.EMPTY)
            return NotReady(NotReadyReason.ALL_IN_PROGRESS)
        size = candidate.size()
        if not self.bucket.try_debit(size, now_ms):
            return NotReady(NotReadyReason.INSUFFICIENT_TOKENS, self.bucket.wakeup_at(size, now_ms))
        self.items.pop(idx)
        candidate.transition(MessageState.FORWARDING)
        if size > 0:
            self.metrics.record_forward(size, now_ms)
        else:
            self.metrics.last_progress = now_ms
        return candidate

    # -- mutations (policy context holds the lock) -----------------------------------

    def drop(self, idx: int, now_ms: int) -> MutationResult:
        check = self._check_index(idx)
        if check is not None:
            return check
        m = self.items.pop(idx)
        m.transition(MessageState.DROPPED)
        self._emit("dropped", queue=self, message=m, at=now_ms)
        return MutationResult(True, len(self.items))

    def insert(self, idx: int, m: Message, now_ms: int) -> MutationResult:
        check = self._check_index(idx)
        if check is not None:
            return check
        m.mark_enqueued(now_ms)
        pos = min(idx + 1, len(self.items) - self._settling)
        self.items.insert(pos, m)
        self._emit("enqueued", queue=self, message=m, at=now_ms)
        return MutationResult(True, len(self.items))

    def move_to_front(self, idx: int) -> MutationResult:
        check = self._check_index(idx)
        if check is not None:
            return check
        m = self.items.pop(idx)
        self.items.insert(self.head_margin, m)
        return MutationResult(True, len(self.items))

    def move_to_back(self, idx: int) -> MutationResult:
        check = self._check_index(idx)
        if check is not None:
            return check
        m = self.items.pop(idx)
        self.items.insert(len(self.items) - self._settling, m)
        return MutationResult(True, len(self.items))

    def remove_for_redirect(self, idx: int) -> tuple[Optional[Message], MutationResult]:
        check = self._check_index(idx)
        if check is not None:
            return None, check
        m = self.items.pop(idx)
        return m, MutationResult(True, len(self.items))

    def accept_migrated(self, m: Message, now_ms: int) -> int:
        """Append a message redirected from another queue, before the tail margin."""
        if len(self.items) >= self.max_length:
            raise QueueFull(f"queue {self.key} at max length {self.max_length}")
        self.items.insert(len(self.items) - self._settling, m)
        self._emit("migrated", queue=self, message=m, at=now_ms)
        return len(self.items)

    def _check_index(self, idx: int) -> Optional[MutationResult]:
        if not 0 <= idx < len(self.items):
            return MutationResult(False, len(self.items), "invalid_index")
        if not self.in_window(idx):
            return MutationResult(False, len(self.items), "out_of_window")
        return None

    # -- lookup -----------------------------------------------------------------

    def index_of(self, m: Message) -> Optional[int]:
        for i, item in enumerate(self.items):
            if item is m:
                return i
        return None

    def find_by_id(self, message_id: int) -> Optional[Message]:
        for item in self.items:
            if item.id == message_id:
                return item
        return None

    def __len__(self) -> int:
        return len(self.items)

    def _emit(self, kind: str, **fields: Any) -> None:
        if self._events is not None:
            self._events(kind, **fields)


class QueueManager:
    """Owns every route queue, the enqueue pipeline, and transform completion."""

    def __init__(
        self,
        clock: Clock,
        specs: Iterable[QueueSpec] = (),
        *,
        default_max_length: int = DEFAULT_MAX_LENGTH,
        max_message_bytes: int = DEFAULT_MAX_PAYLOAD,
    ) -> None:
        self.clock = clock
        self.specs = list(specs)
        self.max_message_bytes = max_message_bytes
        self.default_max_length = default_max_length
        self.engine: Any = None  # policy engine, attached after construction
        self.dispatcher: Any = None  # callback dispatcher
        self.driver: Any = None  # forwarding driver (threads or sim loop)
        self.observers: list[Callable[..., None]] = []
        self.counters = {
            "transforms_completed": 0,
            "transforms_reverted": 0,
            "transforms_discarded": 0,
        }
        self._ids = itertools.count(1)
        self._id_lock = threading.Lock()
        self._queues: dict[str, RouteQueue] = {}
        self._registry_lock = threading.Lock()
        self._pattern_rates: dict[str, Optional[float]] = {}
        self._defaults = {
            Direction.REQUEST: self._make_default(Direction.REQUEST),
            Direction.RESPONSE: self._make_default(Direction.RESPONSE),
        }

    # -- construction helpers ------------------------------------------------------

    def _make_default(self, direction: Direction) -> RouteQueue:
        return RouteQueue(
            None,
            direction,
            max_length=self.default_max_length,
            bucket=TokenBucket(None, max_message_bytes=self.max_message_bytes),
            events=self._emit,
            is_default=True,
        )

    def next_id(self) -> int:
        with self._id_lock:
            return next(self._ids)

    def _emit(self, kind: str, **fields: Any) -> None:
        for observer in self.observers:
            observer(kind, **fields)

    # -- queue registry ---------------------------------------------------------------

    def queue_for(self, route: Route) -> RouteQueue:
        key = route.key
        q = self._queues.get(key)
        if q is not None:
            return q
        with self._registry_lock:
            q = self._queues.get(key)
            if q is not None:
                return q
            for spec in self.specs:
                if spec.matches(key):
                    q = RouteQueue(
                        route,
                        route.direction,
                        max_length=spec.max_length,
                        bucket=TokenBucket(
                            spec.rate_kb_per_s,
                            capacity_bytes=spec.bucket_capacity_bytes,
                            max_message_bytes=self.max_message_bytes,
                            now_ms=self.clock.now_ms(),
                        ),
                        metrics=QueueMetrics(window_ms=spec.bw_window_ms),
                        events=self._emit,
                    )
                    break
            else:
                return self._defaults[route.direction]
            for pattern, rate in self._pattern_rates.items():
                if fnmatch.fnmatchcase(key, pattern):
                    q.bucket.set_rate(rate, now_ms=self.clock.now_ms())
            self._queues[key] = q
            if self.driver is not None:
                self.driver.register(q)
            return q

    def find_queue(self, key: str) -> Optional[RouteQueue]:
        if key.startswith("default:"):
            return self._defaults[Direction(key.split(":", 1)[1])]
        return self._queues.get(key)

    def all_queues(self) -> list[RouteQueue]:
        qs = list(self._queues.values())
        qs.extend(self._defaults.values())
        return qs

    # -- data path ---------------------------------------------------------------------

    def submit(self, m: Message, *, now_ms: Optional[int] = None):
        """Enqueue one assembled message and run its matching policy.

        The enqueue and the policy execution happen under the owning queue's
        exclusion; callbacks issued by the policy are dispatched only after
        the exclusion is released. Returns the ExecutionReport, or None when
        no policy matched.
        """
        now = self.clock.now_ms() if now_ms is None else now_ms
        q = self.queue_for(m.route)
        report = None
        q.lock.acquire()
        try:
            q.enqueue(m, now)
            q.settle_all()
            if self.engine is not None:
                report = self.engine.on_message(m, q, now)
        finally:
            q.lock.release()
        self.signal(q)
        if report is not None and report.callback_jobs and self.dispatcher is not None:
            for job in report.callback_jobs:
                self.dispatcher.submit(job)
        return report

    def signal(self, q: RouteQueue) -> None:
        if self.driver is not None:
            self.driver.signal(q)

    def set_rate_limit(self, route: Route, rate_kb_per_s: Optional[float]) -> None:
        if rate_kb_per_s is not None and rate_kb_per_s < 0:
            raise ValueError("rate must be non-negative")
        q = self.queue_for(route)
        with q.lock:
            q.bucket.set_rate(rate_kb_per_s, now_ms=self.clock.now_ms())
        self.signal(q)

    def apply_rate_pattern(self, pattern: str, rate_kb_per_s: Optional[float]) -> None:
        """Rate-limit every queue whose key matches, now and at creation time."""
        self._pattern_rates[pattern] = rate_kb_per_s
        now = self.clock.now_ms()
        for q in self.all_queues():
            if fnmatch.fnmatchcase(q.key, pattern):
                with q.lock:
                    q.bucket.set_rate(rate_kb_per_s, now_ms=now)
                self.signal(q)

    # -- transform completion (called from the callback dispatcher) ---------------------

    def complete_transform(self, message_ref: tuple[str, int], new_payload: bytes) -> bool:
        q, m = self._locate(message_ref)
        if q is None:
            self.counters["transforms_discarded"] += 1
            return False
        with q.lock:
            if m.state is not MessageState.IN_PROGRESS:
                self.counters["transforms_discarded"] += 1
                return False
            m.set_payload(new_payload)
            m.transition(MessageState.QUEUED)
            self.counters["transforms_completed"] += 1
        self.signal(q)
        return True

    def revert_transform(self, message_ref: tuple[str, int]) -> bool:
        q, m = self._locate(message_ref)
        if q is None:
            self.counters["transforms_discarded"] += 1
            return False
        with q.lock:
            if m.state is not MessageState.IN_PROGRESS:
                self.counters["transforms_discarded"] += 1
                return False
            m.transition(MessageState.QUEUED)
            self.counters["transforms_reverted"] += 1
        self.signal(q)
        return True

    def _locate(self, message_ref: tuple[str, int]):
        key, mid = message_ref
        q = self.find_queue(key)
        if q is not None:
            with q.lock:
                m = q.find_by_id(mid)
            if m is not None:
                return q, m
        for other in self.all_queues():
            with other.lock:
                m = other.find_by_id(mid)
            if m is not None:
                return other, m
        return None, None

    # -- admin -----------------------------------------------------------------------

    def metrics_lines(self) -> list[str]:
        """One line per route: `route_key observed_bw avg_latency_ms length`."""
        now = self.clock.now_ms()
        lines = []
        for q in self.all_queues():
            with q.lock:
                snap = q.metrics.snapshot(now, len(q.items))
            lines.append(f"{q.key} {snap.observed_bw_bytes_per_s:.1f} {snap.avg_latency_ms:.1f} {snap.length}")
        return lines
