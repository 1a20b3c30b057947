"""Per-queue metric surface: observed bandwidth, latency EWMA, transport stats.

Observed bandwidth is the byte volume forwarded from one queue over a trailing
window. A reading of zero means the route is stalled: either nothing was ever
forwarded, or a full window elapsed with pending messages and no progress.
An idle queue that is simply caught up keeps reporting its last active rate,
so "no demand" is never confused with "disconnected".
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

DEFAULT_WINDOW_MS = 350
DEFAULT_EWMA_ALPHA = 0.3

TRANSPORT_FIELDS = ("mean_rtt_ms", "cwnd_bytes", "inflight_packets")


@dataclass(frozen=True)
class TransportMetrics:
    """Transport-level statistics. Absent values stay None, never 0."""

    mean_rtt_ms: Optional[float] = None
    cwnd_bytes: Optional[int] = None
    inflight_packets: Optional[int] = None

    def get(self, name: str) -> Optional[float]:
        if name not in TRANSPORT_FIELDS:
            raise KeyError(f"unknown transport metric {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class MetricsSnapshot:
    """Copy-out view handed to policies; reads never block forwarding."""

    observed_bw_bytes_per_s: float
    avg_latency_ms: float
    latency_samples: int
    length: int
    last_progress: Optional[int]
    transport: TransportMetrics


# Provider hook: the live daemon samples socket statistics, the harness injects
# synthetic values. Returning None for a field reports it as unavailable.
TransportProvider = Callable[[], TransportMetrics]


class QueueMetrics:
    """Bandwidth and latency bookkeeping for one route queue.

    Updated under the owning queue's exclusion; `snapshot` is rebuilt on each
    update so other threads can read it without taking the lock.
    """

    __slots__ = (
        "window_ms",
        "alpha",
        "last_progress",
        "_forwards",
        "_ewma",
        "_samples",
        "_ever_forwarded",
        "_idle_rate",
        "transport_provider",
    )

    def __init__(
        self,
        window_ms: int = DEFAULT_WINDOW_MS,
        alpha: float = DEFAULT_EWMA_ALPHA,
        transport_provider: Optional[TransportProvider] = None,
    ) -> None:
        self.window_ms = int(window_ms)
        self.alpha = float(alpha)
        self.last_progress: Optional[int] = None
        self._forwards: deque[tuple[int, int]] = deque()  # (at_ms, bytes)
        self._ewma: Optional[float] = None
        self._samples = 0
        self._ever_forwarded = False
        self._idle_rate = 0.0
        self.transport_provider = transport_provider

    # -- updates -------------------------------------------------------------

    def record_forward(self, nbytes: int, at_ms: int) -> None:
        if nbytes <= 0:
            raise ValueError("record_forward requires a positive byte count")
        self._forwards.append((at_ms, nbytes))
        self.last_progress = at_ms
        self._ever_forwarded = True
        self._prune(at_ms)
        self._idle_rate = self._window_sum() * 1000.0 / self.window_ms

    def record_latency(self, rtt_ms: float) -> None:
        if rtt_ms < 0:
            raise ValueError("negative latency sample")
        if self._ewma is None:
            self._ewma = float(rtt_ms)
        else:
            self._ewma = self.alpha * rtt_ms + (1.0 - self.alpha) * self._ewma
        self._samples += 1

    # -- reads ----------------------------------------------------------------

    def observed_bw(self, now_ms: int, queue_nonempty: bool) -> float:
        """Bytes per second forwarded over the trailing window."""
        self._prune(now_ms)
        total = self._window_sum()
        if total > 0:
            return total * 1000.0 / self.window_ms
        if not self._ever_forwarded:
            return 0.0
        if queue_nonempty:
            return 0.0
        return self._idle_rate

    @property
    def avg_latency_ms(self) -> float:
        return self._ewma if self._ewma is not None else 0.0

    @property
    def latency_samples(self) -> int:
        return self._samples

    def transport(self) -> TransportMetrics:
        if self.transport_provider is None:
            return TransportMetrics()
        return self.transport_provider()

    def snapshot(self, now_ms: int, length: int) -> MetricsSnapshot:
        return MetricsSnapshot(
            observed_bw_bytes_per_s=self.observed_bw(now_ms, length > 0),
            avg_latency_ms=self.avg_latency_ms,
            latency_samples=self._samples,
            length=length,
            last_progress=self.last_progress,
            transport=self.transport(),
        )

    # -- internals --------------------------------------------------------------

    def _prune(self, now_ms: int) -> None:
        horizon = now_ms - self.window_ms
        fw = self._forwards
        while fw and fw[0][0] < horizon:
            fw.popleft()

    def _window_sum(self) -> int:
        return sum(b for _, b in self._forwards)
