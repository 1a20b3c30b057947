import itertools

import pytest

from hivegate.messages import Direction, Headers, Message, MessageState, Route


class FakeClock:
    """Manual clock for unit tests."""

    def __init__(self, start_ms: int = 0):
        self.t = start_ms

    def now_ms(self) -> int:
        return self.t

    def advance(self, dt_ms: int) -> None:
        self.t += dt_ms


@pytest.fixture
def clock():
    return FakeClock()


_ids = itertools.count(1000)


def make_message(
    payload=b"",
    *,
    kind=Direction.REQUEST,
    method="POST",
    target="/x",
    status=200,
    reason="OK",
    headers=None,
    route=None,
    created=0,
):
    hdrs = Headers(headers or [])
    if kind == Direction.REQUEST:
        m = Message(next(_ids), Direction.REQUEST, method=method, target=target,
                    headers=hdrs, payload=payload, route=route, created_time=created)
    else:
        m = Message(next(_ids), Direction.RESPONSE, status=status, reason=reason,
                    headers=hdrs, payload=payload, route=route, created_time=created)
    return m


def queued(payload=b"x", **kw):
    m = make_message(payload, **kw)
    m.transition(MessageState.QUEUED)
    return m


@pytest.fixture
def route():
    return Route("camera", "cloud-detector.local", Direction.REQUEST)
