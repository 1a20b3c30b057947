"""Clock abstraction so the live daemon and the harness share one code path."""

from __future__ import annotations

import time
from typing import Protocol


class Clock(Protocol):
    def now_ms(self) -> int:
        """Current time in whole milliseconds."""
        ...


class SystemClock:
    """Monotonic wall clock, origin at construction."""

    def __init__(self) -> None:
        self._origin = time.monotonic()

    def now_ms(self) -> int:
        return int((time.monotonic() - self._origin) * 1000)
