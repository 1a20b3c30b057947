"""Messages, routes, headers, and lifecycle state for proxied HTTP traffic."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Iterator, Optional


class Direction(str, Enum):
    REQUEST = "request"
    RESPONSE = "response"


@dataclass(frozen=True)
class Route:
    """One (source, destination, direction) flow.

    Routes compare equal iff all three fields match; direction is fixed at
    construction.
    """

    source: str
    destination: str
    direction: Direction

    def __post_init__(self) -> None:
        if self.source == self.destination:
            raise ValueError(f"route source and destination must differ: {self.source!r}")
        if not isinstance(self.direction, Direction):
            object.__setattr__(self, "direction", Direction(self.direction))

    @property
    def key(self) -> str:
        return f"{self.source}->{self.destination}:{self.direction.value}"

    def with_destination(self, destination: str) -> "Route":
        return Route(self.source, destination, self.direction)


class MessageState(Enum):
    ASSEMBLING = "assembling"
    QUEUED = "queued"
    IN_PROGRESS = "in_progress"
    FORWARDING = "forwarding"
    FORWARDED = "forwarded"
    DROPPED = "dropped"


# Legal lifecycle: Assembling -> Queued -> (InProgress -> Queued)* -> Forwarding
# -> Forwarded, or any pre-Forwarding state -> Dropped.
_TRANSITIONS = {
    MessageState.ASSEMBLING: {MessageState.QUEUED, MessageState.DROPPED},
    MessageState.QUEUED: {MessageState.IN_PROGRESS, MessageState.FORWARDING, MessageState.DROPPED},
    MessageState.IN_PROGRESS: {MessageState.QUEUED, MessageState.DROPPED},
    MessageState.FORWARDING: {MessageState.FORWARDED},
    MessageState.FORWARDED: set(),
    MessageState.DROPPED: set(),
}

_IMMUTABLE_STATES = (MessageState.FORWARDING, MessageState.FORWARDED)


class Headers:
    """Ordered multimap of header name -> value.

    Lookups are case-insensitive; the original casing and insertion order are
    preserved for serialization.
    """

    __slots__ = ("_items",)

    def __init__(self, items: Iterable[tuple[str, str]] = ()) -> None:
        self._items: list[tuple[str, str]] = [(str(n), str(v)) for n, v in items]

    def get(self, name: str) -> Optional[str]:
        low = name.lower()
        for n, v in self._items:
            if n.lower() == low:
                return v
        return None

    def get_all(self, name: str) -> list[str]:
        low = name.lower()
        return [v for n, v in self._items if n.lower() == low]

    def has(self, name: str) -> bool:
        return self.get(name) is not None

    def add(self, name: str, value: str) -> None:
        self._items.append((str(name), str(value)))

    def set(self, name: str, value: str) -> None:
        """Replace the first occurrence in place, drop the rest, append if absent."""
        low = name.lower()
        replaced = False
        kept: list[tuple[str, str]] = []
        for n, v in self._items:
            if n.lower() == low:
                if not replaced:
                    kept.append((n, str(value)))
                    replaced = True
            else:
                kept.append((n, v))
        if not replaced:
            kept.append((str(name), str(value)))
        self._items = kept

    def remove(self, name: str) -> None:
        low = name.lower()
        self._items = [(n, v) for n, v in self._items if n.lower() != low]

    def items(self) -> list[tuple[str, str]]:
        return list(self._items)

    def copy(self) -> "Headers":
        return Headers(self._items)

    def canonical(self) -> tuple[tuple[str, str], ...]:
        """Lowercased names, order preserved. Used for equivalence checks."""
        return tuple((n.lower(), v) for n, v in self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[tuple[str, str]]:
        return iter(self._items)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Headers):
            return NotImplemented
        return self.canonical() == other.canonical()

    def __repr__(self) -> str:
        return f"Headers({self._items!r})"


class Message:
    """One fully assembled HTTP request or response.

    Once a message reaches Forwarding, its headers and payload are immutable.
    If a Content-Length header is present it always equals the payload length;
    this is re-established after every payload swap.
    """

    __slots__ = (
        "id",
        "kind",
        "method",
        "target",
        "status",
        "reason",
        "route",
        "headers",
        "_payload",
        "created_time",
        "enqueue_time",
        "state",
        "original_size",
        "opaque",
        "_json_cache",
        "_json_parsed",
    )

    def __init__(
        self,
        id: int,
        kind: Direction,
        *,
        method: Optional[str] = None,
        target: Optional[str] = None,
        status: Optional[int] = None,
        reason: Optional[str] = None,
        headers: Optional[Headers] = None,
        payload: bytes = b"",
        route: Optional[Route] = None,
        created_time: Optional[int] = None,
    ) -> None:
        self.id = id
        self.kind = Direction(kind)
        self.method = method
        self.target = target
        self.status = status
        self.reason = reason
        self.route = route
        self.headers = headers if headers is not None else Headers()
        self._payload = bytes(payload)
        self.created_time = created_time
        self.enqueue_time: Optional[int] = None
        self.state = MessageState.ASSEMBLING
        self.original_size: Optional[int] = None
        self.opaque: Any = None  # transport context (e.g. originating connection)
        self._json_cache: Any = None
        self._json_parsed = False
        self._sync_content_length()

    # -- payload ----------------------------------------------------------

    @property
    def payload(self) -> bytes:
        return self._payload

    def size(self) -> int:
        return len(self._payload)

    def set_payload(self, data: bytes) -> None:
        self._assert_mutable()
        self._payload = bytes(data)
        self._json_parsed = False
        self._json_cache = None
        self._sync_content_length()

    def _sync_content_length(self) -> None:
        # Keep Content-Length truthful whenever the header exists or a body does.
        if self.headers.has("Content-Length") or self._payload:
            self.headers.set("Content-Length", str(len(self._payload)))

    # -- headers ----------------------------------------------------------

    def header(self, name: str) -> Optional[str]:
        return self.headers.get(name)

    def set_header(self, name: str, value: str) -> None:
        self._assert_mutable()
        self.headers.set(name, value)
        if name.lower() == "content-length":
            self._sync_content_length()

    def _assert_mutable(self) -> None:
        if self.state in _IMMUTABLE_STATES:
            raise ValueError(f"message {self.id} is immutable in state {self.state.value}")

    # -- JSON body access --------------------------------------------------

    def json(self) -> Any:
        """Parsed JSON document, or None when the payload is not JSON."""
        if not self._json_parsed:
            self._json_parsed = True
            try:
                self._json_cache = json.loads(self._payload.decode("utf-8"))
            except (ValueError, UnicodeDecodeError):
                self._json_cache = None
        return self._json_cache

    def json_field(self, path: str) -> Any:
        """Value at a dotted path into the JSON body, or None when absent."""
        doc = self.json()
        for part in path.split("."):
            if isinstance(doc, dict) and part in doc:
                doc = doc[part]
            else:
                return None
        return doc

    # -- lifecycle ---------------------------------------------------------

    def transition(self, new_state: MessageState) -> None:
        if new_state not in _TRANSITIONS[self.state]:
            raise ValueError(f"illegal transition {self.state.value} -> {new_state.value}")
        self.state = new_state

    def mark_enqueued(self, now_ms: int) -> None:
        if self.state is MessageState.ASSEMBLING:
            self.transition(MessageState.QUEUED)
        if self.enqueue_time is None:
            self.enqueue_time = now_ms
        if self.original_size is None:
            self.original_size = len(self._payload)

    def age_ms(self, now_ms: int) -> int:
        if self.enqueue_time is None:
            return 0
        return int(now_ms - self.enqueue_time)

    # -- misc ---------------------------------------------------------------

    def copy(self, new_id: int) -> "Message":
        m = Message(
            new_id,
            self.kind,
            method=self.method,
            target=self.target,
            status=self.status,
            reason=self.reason,
            headers=self.headers.copy(),
            payload=self._payload,
            route=self.route,
            created_time=self.created_time,
        )
        m.state = MessageState.QUEUED
        return m

    def start_line(self) -> str:
        if self.kind is Direction.REQUEST:
            return f"{self.method} {self.target} HTTP/1.1"
        return f"HTTP/1.1 {self.status} {self.reason or ''}".rstrip()

    def __repr__(self) -> str:
        route = self.route.key if self.route else "?"
        return f"<Message #{self.id} {self.start_line()!r} {self.state.value} {route} {self.size()}B>"


def age(m: Message, now_ms: int) -> int:
    """Milliseconds the message has spent queued, truncated to ms."""
    return m.age_ms(now_ms)
