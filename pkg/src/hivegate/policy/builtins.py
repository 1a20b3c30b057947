"""Built-in adaptation policies, registered by name.

These are the native twins of the program-source fixtures under
`policy/programs/`; both forms must produce identical mutation sequences on
identical replays. Thresholds and resolution ladders come from binding params,
never from code, so scenario files can scale them uniformly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Optional

from ..errors import ProgramError
from .host import TriggerHandle

_LABEL_NUM = re.compile(r"(\d+)")


@dataclass(frozen=True)
class Rung:
    label: str
    nominal_bytes: int

    @property
    def pixels(self) -> int:
        match = _LABEL_NUM.search(self.label)
        if not match:
            raise ValueError(f"resolution label {self.label!r} has no numeric part")
        return int(match.group(1))


class ResolutionLadder:
    """Ordered resolution rungs with strictly increasing nominal chunk sizes."""

    def __init__(self, rungs: Iterable[Rung]) -> None:
        self.rungs = sorted(rungs, key=lambda r: r.nominal_bytes)
        labels = [r.label for r in self.rungs]
        if len(set(labels)) != len(labels):
            raise ValueError("resolution labels must be unique")
        sizes = [r.nominal_bytes for r in self.rungs]
        if any(b >= a for a, b in zip(sizes[1:], sizes)):
            raise ValueError("nominal chunk sizes must be strictly increasing")
        if not self.rungs:
            raise ValueError("ladder needs at least one rung")

    @classmethod
    def from_params(cls, value) -> "ResolutionLadder":
        rungs = []
        for entry in value:
            if isinstance(entry, dict):
                rungs.append(Rung(str(entry["label"]), int(entry["bytes"])))
            else:
                label, nbytes = entry
                rungs.append(Rung(str(label), int(nbytes)))
        return cls(rungs)

    def lowest(self) -> Rung:
        return self.rungs[0]

    def by_label(self, label: str) -> Optional[Rung]:
        for rung in self.rungs:
            if rung.label == label:
                return rung
        return None

    def best_for(self, bw_bytes_per_s: float, budget_s: float) -> Rung:
        """Largest rung whose predicted transfer time fits the budget; the
        lowest rung when none does."""
        feasible = self.lowest()
        for rung in self.rungs:
            if rung.nominal_bytes / bw_bytes_per_s <= budget_s:
                feasible = rung
        return feasible


def _ladder(params: dict) -> ResolutionLadder:
    value = params.get("ladder")
    if not value:
        raise ProgramError("policy requires a 'ladder' param")
    return ResolutionLadder.from_params(value)


def _label_pixels(label: str) -> int:
    match = _LABEL_NUM.search(str(label))
    if not match:
        raise ProgramError(f"cannot read resolution from {label!r}")
    return int(match.group(1))


# -- the five reference policies ---------------------------------------------------


def traffic_monitor(h: TriggerHandle, params: dict) -> None:
    """Redirect to the edge on disconnection, downsample on low bandwidth,
    and notify the source when bandwidth drops well below what is required."""
    required = float(params["required_bw"])
    edge = params.get("edge_name", "edge-detector")
    low_res = params.get("low_res", "180p")
    for q in h.queues():
        if "cloud" in q.route():
            bw = q.observedBW()
            if bw == 0:
                h.redirect(edge)
            elif bw < required:
                h.transform(low_res)
            if bw < required / 2:
                h.notify(bw)


def load_shed(h: TriggerHandle, params: dict) -> None:
    """Pre-emptively filter non-view events under latency pressure and drop
    messages that have already missed their deadline."""
    filt_thrd = float(params.get("filt_thrd", 0.5))
    late_thrd = float(params.get("late_thrd", 1.0))
    epoch = h.epoch()
    for q in h.queues():
        filtering = q.avgLatency() / 1000.0 > filt_thrd
        for m in q.messages():
            if filtering:
                event_type = m.json_field("event_type")
                if event_type is not None and event_type != "view":
                    m.drop()
                    continue
            event_time = m.json_field("event_time")
            if event_time is not None and (epoch - event_time) / 1000.0 > late_thrd:
                m.drop()


def fifo_lifo(h: TriggerHandle, params: dict) -> None:
    """Serve newest-first while a backlog exists, oldest-first otherwise."""
    if h.queue().length() > 1:
        h.moveToFront()
    else:
        h.moveToBack()


def chunk_rewrite(h: TriggerHandle, params: dict) -> None:
    """Overwrite a chunk request's path with the resolution the most recent
    bandwidth estimate supports. Downsample freely; upsample only when the
    prediction at least doubles the requested resolution."""
    ladder = _ladder(params)
    duration_s = float(params.get("chunk_duration_s", 4.0))
    hdr = h.header()
    bw_est = hdr.get("bw-est")
    path = hdr.get("path")
    if bw_est is None or path is None or "/" not in path:
        return
    bw = float(bw_est)
    if bw <= 0:
        return
    curr_label, chunk = path.split("/", 1)
    pred = ladder.best_for(bw, duration_s)
    curr_pixels = _label_pixels(curr_label)
    if pred.pixels < curr_pixels:
        hdr.replace("path", pred.label + "/" + chunk)
    elif pred.pixels > curr_pixels * 2:
        hdr.replace("path", pred.label + "/" + chunk)


def deadline_downsample(h: TriggerHandle, params: dict) -> None:
    """Downsample queued chunks whose estimated transmission time exceeds the
    predicted transmission time, or whose age exceeds the chunk duration."""
    ladder = _ladder(params)
    q = h.queue()
    bw = q.observedBW()
    if bw <= 0:
        return
    for m in q.messages():
        ptt = m.header("ptt")
        dur = m.header("duration")
        if ptt is None or dur is None:
            continue
        size = m.size()
        ett = size / bw
        if ett > float(ptt) or m.age() / 1000.0 > float(dur):
            target = ladder.best_for(bw, float(ptt))
            if size > target.nominal_bytes:
                m.transform(target.label)


# -- trivial policies used by the micro-benchmarks ------------------------------------


def empty(h: TriggerHandle, params: dict) -> None:
    pass


def iterate(h: TriggerHandle, params: dict) -> None:
    for q in h.queues():
        for m in q.messages():
            m.size()


@dataclass(frozen=True)
class NativePolicy:
    """Registry entry for a built-in policy."""

    name: str
    fn: object
    uses_transform: bool = False
    uses_notify: bool = False

    def entry_points(self) -> set[str]:
        return {"on_request", "on_response"}

    def run(self, entry: str, handle: TriggerHandle, params: dict, ctx) -> None:
        self.fn(handle, params)


NATIVE_POLICIES: dict[str, NativePolicy] = {
    p.name: p
    for p in (
        NativePolicy("traffic_monitor", traffic_monitor, uses_transform=True, uses_notify=True),
        NativePolicy("load_shed", load_shed),
        NativePolicy("fifo_lifo", fifo_lifo),
        NativePolicy("chunk_rewrite", chunk_rewrite),
        NativePolicy("deadline_downsample", deadline_downsample, uses_transform=True),
        NativePolicy("empty", empty),
        NativePolicy("iterate", iterate),
    )
}
