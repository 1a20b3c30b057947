"""Asynchronous notify and transform callbacks over HTTP.

Callback I/O runs off the data path. Notify jobs are fire-and-forget; a
transform job marks its message in-progress at issue time and, on completion,
swaps the returned body in as the new payload. Failure or timeout reverts the
message to its original payload. Every transform job therefore terminates in
exactly one of {completed, reverted, discarded}.
"""

from __future__ import annotations

import http.client
import logging
import queue as queue_mod
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional
from urllib.parse import urlparse

log = logging.getLogger("hivegate.callbacks")

TRANSFORM_ARGS_HEADER = "X-Transform-Args"
DEFAULT_TRANSFORM_TIMEOUT_MS = 5_000
DEFAULT_NOTIFY_TIMEOUT_MS = 2_000


class CallbackKind(Enum):
    NOTIFY = "notify"
    TRANSFORM = "transform"


@dataclass
class CallbackJob:
    kind: CallbackKind
    endpoint: str
    body: bytes
    headers: dict = field(default_factory=dict)
    message_ref: Optional[tuple[str, int]] = None  # (queue key, message id)
    deadline_ms: Optional[int] = None
    timeout_ms: int = DEFAULT_TRANSFORM_TIMEOUT_MS
    attempt: int = 0

    def __post_init__(self) -> None:
        if self.kind is CallbackKind.TRANSFORM and self.message_ref is None:
            raise ValueError("transform jobs must carry a message_ref")
        if self.kind is CallbackKind.NOTIFY and self.message_ref is not None:
            raise ValueError("notify jobs never carry a message_ref")


class DispatchCounters:
    """Shared failure/success accounting for a dispatcher."""

    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.notify_sent = 0
        self.notify_failed = 0
        self.transform_completed = 0
        self.transform_failed = 0

    def bump(self, name: str) -> None:
        with self.lock:
            setattr(self, name, getattr(self, name) + 1)


class ThreadedDispatcher:
    """Worker-thread dispatcher used by the live daemon.

    Transform completions re-acquire the owning queue's exclusion via the
    queue manager to apply results.
    """

    def __init__(self, manager, workers: int = 4, retries: int = 0) -> None:
        self.manager = manager
        self.retries = retries
        self.counters = DispatchCounters()
        self._jobs: queue_mod.Queue = queue_mod.Queue()
        self._threads: list[threading.Thread] = []
        self._running = False
        self._workers = workers

    def start(self) -> None:
        self._running = True
        for i in range(self._workers):
            t = threading.Thread(target=self._worker, name=f"hivegate-cb-{i}", daemon=True)
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        self._running = False
        for _ in self._threads:
            self._jobs.put(None)
        for t in self._threads:
            t.join(timeout=2)

    def submit(self, job: CallbackJob) -> None:
        self._jobs.put(job)

    def _worker(self) -> None:
        while True:
            job = self._jobs.get()
            if job is None:
                return
            try:
                self._run_job(job)
            except Exception:  # pragma: no cover - defensive, never kills the worker
                log.exception("callback worker fault")

    def _run_job(self, job: CallbackJob) -> None:
        status, body = None, b""
        for attempt in range(self.retries + 1):
            job.attempt = attempt
            try:
                status, body = self._post(job)
                break
            except OSError as exc:
                log.warning("callback to %s failed: %s", job.endpoint, exc)
        if job.kind is CallbackKind.NOTIFY:
            if status is not None and status < 400:
                self.counters.bump("notify_sent")
            else:
                self.counters.bump("notify_failed")
            return
        if status == 200:
            self.manager.complete_transform(job.message_ref, body)
            self.counters.bump("transform_completed")
        else:
            self.manager.revert_transform(job.message_ref)
            self.counters.bump("transform_failed")

    def _post(self, job: CallbackJob) -> tuple[int, bytes]:
        parsed = urlparse(job.endpoint)
        if parsed.scheme not in ("http", ""):
            raise OSError(f"unsupported callback scheme {parsed.scheme!r}")
        host = parsed.hostname or "127.0.0.1"
        port = parsed.port or 80
        path = parsed.path or "/"
        conn = http.client.HTTPConnection(host, port, timeout=job.timeout_ms / 1000.0)
        try:
            headers = dict(job.headers)
            headers.setdefault("Content-Length", str(len(job.body)))
            conn.request("POST", path, body=job.body, headers=headers)
            resp = conn.getresponse()
            return resp.status, resp.read()
        finally:
            conn.close()
