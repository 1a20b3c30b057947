"""HTTP/1.1 framing: assemble byte streams into messages and serialize back out.

Only Content-Length delimited bodies are supported; chunked transfer encoding
is rejected because it removes the deterministic per-message boundary the
queues rely on. Framing state is per connection and single threaded.
"""

from __future__ import annotations

import itertools
import re
from typing import Callable, Optional

from .errors import BodyTooLarge, MalformedFraming
from .messages import Direction, Headers, Message

DEFAULT_MAX_PAYLOAD = 64 * 1024 * 1024  # bytes, configurable per FramingState
MAX_HEADER_BLOCK = 64 * 1024

_TOKEN_RE = re.compile(r"^[!#$%&'*+\-.^_`|~0-9A-Za-z]+$")
_CRLF = b"\r\n"

_fallback_ids = itertools.count(1)


class _PendingHead:
    __slots__ = ("kind", "method", "target", "status", "reason", "headers", "body_len")

    def __init__(self, kind, method, target, status, reason, headers, body_len):
        self.kind = kind
        self.method = method
        self.target = target
        self.status = status
        self.reason = reason
        self.headers = headers
        self.body_len = body_len


class FramingState:
    """Incremental parser for one connection's byte stream.

    Feed fragments in stream order; complete messages are emitted exactly when
    a full request or response has been consumed, leftover bytes stay buffered.
    """

    def __init__(
        self,
        *,
        max_payload: int = DEFAULT_MAX_PAYLOAD,
        id_source: Optional[Callable[[], int]] = None,
    ) -> None:
        self.max_payload = max_payload
        self._id_source = id_source or (lambda: next(_fallback_ids))
        self._buf = bytearray()
        self._pending: Optional[_PendingHead] = None

    @property
    def buffered(self) -> int:
        return len(self._buf) + (self._pending.body_len if self._pending else 0)

    def feed(self, fragment: bytes) -> list[Message]:
        self._buf += fragment
        out: list[Message] = []
        while True:
            if self._pending is None:
                idx = self._buf.find(b"\r\n\r\n")
                if idx < 0:
                    if len(self._buf) > MAX_HEADER_BLOCK:
                        raise MalformedFraming("header block exceeds 64 KiB")
                    break
                head = bytes(self._buf[: idx + 2])
                del self._buf[: idx + 4]
                self._pending = self._parse_head(head)
            if len(self._buf) < self._pending.body_len:
                break
            body = bytes(self._buf[: self._pending.body_len])
            del self._buf[: self._pending.body_len]
            out.append(self._build(self._pending, body))
            self._pending = None
        return out

    def _parse_head(self, head: bytes) -> _PendingHead:
        try:
            text = head.decode("latin-1")
        except UnicodeDecodeError as exc:  # pragma: no cover - latin-1 never fails
            raise MalformedFraming("undecodable header block") from exc
        lines = text.split("\r\n")
        if not lines or not lines[-1] == "":
            lines = [ln for ln in lines if ln != ""] + [""]
        start = lines[0]
        headers = Headers()
        for line in lines[1:]:
            if line == "":
                continue
            if line[0] in " \t":
                raise MalformedFraming("obsolete header folding is not accepted")
            name, sep, value = line.partition(":")
            if not sep or not _TOKEN_RE.match(name):
                raise MalformedFraming(f"bad header field line: {line!r}")
            headers.add(name, value.strip(" \t"))

        if headers.has("Transfer-Encoding"):
            raise MalformedFraming("chunked transfer encoding is not supported")

        body_len = self._body_length(headers)

        if start.startswith("HTTP/"):
            kind = Direction.RESPONSE
            parts = start.split(" ", 2)
            if len(parts) < 2 or parts[0] != "HTTP/1.1" or not parts[1].isdigit() or len(parts[1]) != 3:
                raise MalformedFraming(f"bad status line: {start!r}")
            status = int(parts[1])
            reason = parts[2] if len(parts) == 3 else ""
            return _PendingHead(kind, None, None, status, reason, headers, body_len)

        parts = start.split(" ")
        if len(parts) != 3 or parts[2] != "HTTP/1.1" or not _TOKEN_RE.match(parts[0]) or not parts[1]:
            raise MalformedFraming(f"bad request line: {start!r}")
        return _PendingHead(Direction.REQUEST, parts[0], parts[1], None, None, headers, body_len)

    def _body_length(self, headers: Headers) -> int:
        values = headers.get_all("Content-Length")
        if not values:
            return 0
        if len(set(values)) > 1:
            raise MalformedFraming("conflicting Content-Length values")
        raw = values[0]
        if not raw.isdigit():
            raise MalformedFraming(f"non-numeric Content-Length: {raw!r}")
        length = int(raw)
        if length > self.max_payload:
            raise BodyTooLarge(f"declared body of {length} bytes exceeds limit {self.max_payload}")
        return length

    def _build(self, head: _PendingHead, body: bytes) -> Message:
        return Message(
            self._id_source(),
            head.kind,
            method=head.method,
            target=head.target,
            status=head.status,
            reason=head.reason,
            headers=head.headers,
            payload=body,
        )


def assemble(fragment: bytes, state: FramingState) -> tuple[list[Message], FramingState]:
    """Consume one stream fragment, returning completed messages and the state."""
    return state.feed(fragment), state


def wire_bytes(m: Message) -> bytes:
    """Serialize without the Forwarding-state precondition (internal use)."""
    head = [m.start_line()]
    headers = m.headers.copy()
    if m.payload or headers.has("Content-Length"):
        headers.set("Content-Length", str(len(m.payload)))
    for name, value in headers.items():
        head.append(f"{name}: {value}")
    return ("\r\n".join(head) + "\r\n\r\n").encode("latin-1") + m.payload


def serialize(m: Message) -> bytes:
    """Emit valid HTTP/1.1 bytes for a message that is being forwarded."""
    from .messages import MessageState

    if m.state is not MessageState.FORWARDING:
        raise ValueError(f"serialize requires state=forwarding, got {m.state.value}")
    return wire_bytes(m)
