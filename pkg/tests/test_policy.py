"""Policy engine: execution semantics, host API, callbacks, fail-open."""

import pytest

from hivegate.callbacks import CallbackKind
from hivegate.errors import ProgramError
from hivegate.messages import Direction, MessageState, Route
from hivegate.policy import (
    NATIVE_POLICIES,
    PolicyBinding,
    PolicyEngine,
    SandboxedProgram,
    Trigger,
    dedupe_bindings,
    validate_binding,
)
from hivegate.queues import QueueManager, QueueSpec
from tests.conftest import FakeClock, make_message, queued

UPSTREAMS = {"cloud-detector.local", "edge-detector", "worker", "b", "sink"}


class CapturingDispatcher:
    def __init__(self):
        self.jobs = []

    def submit(self, job):
        self.jobs.append(job)


def build_env(bindings=(), budget=100_000, specs=None):
    clock = FakeClock()
    mgr = QueueManager(clock, specs if specs is not None else [QueueSpec("*")], max_message_bytes=1 << 20)
    disp = CapturingDispatcher()
    mgr.dispatcher = disp
    eng = PolicyEngine(mgr, bindings, budget=budget, resolve_destination=lambda d: d in UPSTREAMS)
    return clock, mgr, eng, disp


def script_binding(source, pattern="*", trigger=Trigger.ON_REQUEST, **kw):
    return PolicyBinding(pattern, trigger, SandboxedProgram(source), **kw)


def submit(mgr, payload=b"data", route=None, headers=None, kind=Direction.REQUEST):
    route = route or Route("camera", "cloud-detector.local", Direction.REQUEST)
    m = queued(payload, route=route, headers=headers or [], kind=kind)
    report = mgr.submit(m)
    return m, report


# -- execution basics ---------------------------------------------------------------


def test_empty_program_is_identity():
    clock, mgr, eng, disp = build_env([script_binding("def on_request(h):\n    pass\n")])
    m, report = submit(mgr)
    assert report.error is None
    assert report.mutations == []
    assert report.callbacks_issued == 0
    q = mgr.queue_for(m.route)
    assert q.items == [m]  # message proceeds unmodified


def test_no_binding_means_no_execution():
    clock, mgr, eng, disp = build_env([])
    m, report = submit(mgr)
    assert report is None


def test_program_error_fails_open():
    src = "def on_request(h):\n    x = 1 / 0\n"
    clock, mgr, eng, disp = build_env([script_binding(src)])
    m, report = submit(mgr)
    assert report.error.startswith("program_error")
    assert eng.counters["program_errors"] == 1
    assert mgr.queue_for(m.route).items == [m]


def test_infinite_loop_hits_budget_and_fails_open():
    src = "def on_request(h):\n    while True:\n        pass\n"
    clock, mgr, eng, disp = build_env([script_binding(src)], budget=5_000)
    m, report = submit(mgr)
    assert report.error.startswith("budget_exceeded")
    assert report.steps_used >= 5_000
    assert mgr.queue_for(m.route).items == [m]


def test_trigger_direction_filters_bindings():
    src = "def on_response(h):\n    h.drop()\n"
    binding = script_binding(src, trigger=Trigger.ON_RESPONSE)
    clock, mgr, eng, disp = build_env([binding])
    m, report = submit(mgr)  # a request: the response binding must not run
    assert report is None
    resp_route = Route("cloud-detector.local", "camera", Direction.RESPONSE)
    m2, report2 = submit(mgr, route=resp_route, kind=Direction.RESPONSE)
    assert report2 is not None
    assert ("drop", m2.id, None, True) in report2.mutations


def test_active_from_delays_binding():
    src = "def on_request(h):\n    h.drop()\n"
    clock, mgr, eng, disp = build_env([script_binding(src, active_from_ms=1_000)])
    m, report = submit(mgr)
    assert report is None
    clock.advance(1_000)
    m2, report2 = submit(mgr)
    assert report2 is not None


def test_executions_are_arrival_coupled():
    clock, mgr, eng, disp = build_env([script_binding("def on_request(h):\n    pass\n")])
    clock.advance(60_000)  # plenty of time, zero arrivals
    assert eng.counters["executions"] == 0
    submit(mgr)
    assert eng.counters["executions"] == 1


# -- queue / message inspection -----------------------------------------------------


def test_queue_inspect_fresh_queue():
    src = (
        "def on_request(h):\n"
        "    q = h.queue()\n"
        "    h.notify(str(q.length()) + ',' + str(q.observedBW()) + ',' +\n"
        "             str(q.avgLatency()) + ',' + str(q.latencySamples()))\n"
    )
    binding = script_binding(src, notify_endpoints=("http://127.0.0.1:1/sink",))
    clock, mgr, eng, disp = build_env([binding])
    m, report = submit(mgr)
    body = report.callback_jobs[0].body.decode()
    # Length includes the trigger itself; bandwidth 0, latency 0 with 0 samples.
    assert body == "1,0.0,0.0,0"


def test_route_key_pattern_matching_in_program():
    src = (
        "def on_request(h):\n"
        "    found = 0\n"
        "    for q in h.queues():\n"
        "        if \"cloud\" in q.route():\n"
        "            found = found + 1\n"
        "    if found == 0:\n"
        "        h.drop()\n"
    )
    clock, mgr, eng, disp = build_env([script_binding(src)])
    m, report = submit(mgr)
    # the cloud queue exists, so the drop branch must not fire
    assert report.mutations == []


def test_message_inspect_json_and_bytes_and_headers():
    src = (
        "def on_request(h):\n"
        "    kind = h.json_field(\"event_type\")\n"
        "    t = h.json_field(\"event_time\")\n"
        "    empty = h.bytes(0, 0)\n"
        "    res = h.header(\"resolution\")\n"
        "    h.notify(str(kind) + '|' + str(t) + '|' + str(len(empty)) + '|' + str(res))\n"
    )
    binding = script_binding(src, notify_endpoints=("http://127.0.0.1:1/s",))
    clock, mgr, eng, disp = build_env([binding])
    payload = b'{"event_type":"click","event_time":1000}'
    m, report = submit(mgr, payload=payload, headers=[("Resolution", "1080p")])
    assert report.callback_jobs[0].body == b"click|1000|0|1080p"


def test_json_view_accessors():
    src = (
        "def on_request(h):\n"
        "    doc = h.json()\n"
        "    h.notify(str(doc.getString(\"event_type\")) + '|' + str(doc.getNum(\"event_time\")))\n"
    )
    binding = script_binding(src, notify_endpoints=("http://e/",))
    clock, mgr, eng, disp = build_env([binding])
    m, report = submit(mgr, payload=b'{"event_type":"view","event_time":7}')
    assert report.callback_jobs[0].body == b"view|7"


def test_non_json_payload_is_absent_not_fault():
    src = (
        "def on_request(h):\n"
        "    if h.json_field(\"x\") is None:\n"
        "        h.drop()\n"
    )
    clock, mgr, eng, disp = build_env([script_binding(src)])
    m, report = submit(mgr, payload=b"\x00\x01 not json")
    assert report.error is None
    assert ("drop", m.id, None, True) in report.mutations


def test_bytes_range_error_is_program_error():
    src = "def on_request(h):\n    h.bytes(5, 2)\n"
    clock, mgr, eng, disp = build_env([script_binding(src)])
    m, report = submit(mgr, payload=b"abc")
    assert report.error.startswith("program_error")


# -- mutations through the context ------------------------------------------------------


def test_drop_returns_new_length():
    src = "def on_request(h):\n    n = h.drop()\n    h.notify(n)\n"
    binding = script_binding(src, notify_endpoints=("http://e/",))
    clock, mgr, eng, disp = build_env([binding])
    m, report = submit(mgr)
    assert report.callback_jobs[0].body == b"0"
    assert m.state is MessageState.DROPPED


def test_insert_copy_lands_after_current():
    src = "def on_request(h):\n    h.insert(h.copy())\n"
    clock, mgr, eng, disp = build_env([script_binding(src)])
    m, report = submit(mgr)
    q = mgr.queue_for(m.route)
    assert len(q.items) == 2
    assert q.items[0] is m
    assert q.items[1].payload == m.payload
    assert q.items[1].id != m.id


def test_move_to_back_index():
    src = "def on_request(h):\n    h.moveToBack()\n"
    clock, mgr, eng, disp = build_env([script_binding(src)])
    route = Route("camera", "cloud-detector.local", Direction.REQUEST)
    first, _ = submit(mgr, payload=b"first", route=route)
    second, _ = submit(mgr, payload=b"second", route=route)
    q = mgr.queue_for(route)
    assert q.items[-1] is second


def test_fifo_lifo_moves_trigger_to_front_of_mutable_region():
    binding = PolicyBinding("*", Trigger.ON_REQUEST, NATIVE_POLICIES["fifo_lifo"])
    clock, mgr, eng, disp = build_env([binding])
    route = Route("sensor", "worker", Direction.REQUEST)
    a, _ = submit(mgr, payload=b"a", route=route)
    b, _ = submit(mgr, payload=b"b", route=route)
    c, _ = submit(mgr, payload=b"c", route=route)
    q = mgr.queue_for(route)
    # a arrived on an empty queue (FIFO); b and c jumped the line (LIFO).
    assert [m.payload for m in q.items] == [b"c", b"b", b"a"]


# -- redirect -----------------------------------------------------------------------


def redirect_env(bw_zero=True):
    src = "def on_request(h):\n    h.redirect(\"edge-detector\")\n"
    return build_env([script_binding(src)])


def test_redirect_moves_message_and_rewrites_host():
    clock, mgr, eng, disp = redirect_env()
    m, report = submit(mgr, headers=[("Host", "cloud-detector.local")])
    assert ("redirect", m.id, "edge-detector", True) in report.mutations
    assert m.route.destination == "edge-detector"
    assert m.header("Host") == "edge-detector"
    edge_q = mgr.queue_for(Route("camera", "edge-detector", Direction.REQUEST))
    assert edge_q.items == [m]
    old_q = mgr.queue_for(Route("camera", "cloud-detector.local", Direction.REQUEST))
    assert old_q.items == []


def test_redirect_to_current_destination_is_noop_ack():
    src = "def on_request(h):\n    h.redirect(\"cloud-detector.local\")\n"
    clock, mgr, eng, disp = build_env([script_binding(src)])
    m, report = submit(mgr)
    assert report.error is None
    assert mgr.queue_for(m.route).items == [m]


def test_redirect_unknown_destination_unchanged_and_counted():
    src = "def on_request(h):\n    h.redirect(\"nowhere\")\n"
    clock, mgr, eng, disp = build_env([script_binding(src)])
    m, report = submit(mgr)
    assert ("redirect", m.id, "nowhere", False) in report.mutations
    assert m.route.destination == "cloud-detector.local"
    assert mgr.counters.get("redirect_unknown_destination") == 1


def test_redirect_of_forwarding_message_unchanged():
    # A handle whose message already left the queue must not migrate it.
    clock, mgr, eng, disp = build_env([])
    route = Route("camera", "cloud-detector.local", Direction.REQUEST)
    m, _ = submit(mgr, route=route)
    q = mgr.queue_for(route)
    got = q.dequeue_ready(0)
    assert got is m  # now Forwarding, out of the queue
    from hivegate.policy.host import ExecutionContext, TriggerHandle

    binding = PolicyBinding("*", Trigger.ON_REQUEST, NATIVE_POLICIES["empty"])
    ctx = ExecutionContext(mgr, m, q, binding, 0, resolve_destination=lambda d: True)
    with q.lock:
        handle = TriggerHandle(ctx, m, q)
        assert handle.redirect("edge-detector") is False
    assert m.route.destination == "cloud-detector.local"


# -- transform lifecycle ----------------------------------------------------------------


def transform_env():
    src = "def on_request(h):\n    h.transform(\"180p\")\n"
    binding = script_binding(src, transform_endpoint="http://127.0.0.1:1/t")
    return build_env([binding])


def test_transform_marks_in_progress_and_issues_job():
    clock, mgr, eng, disp = transform_env()
    m, report = submit(mgr, payload=b"x" * 100)
    assert m.state is MessageState.IN_PROGRESS
    assert len(disp.jobs) == 1
    job = disp.jobs[0]
    assert job.kind is CallbackKind.TRANSFORM
    assert job.body == b"x" * 100
    assert job.headers["X-Transform-Args"] == "180p"
    assert job.message_ref == (m.route.key, m.id)


def test_transform_completion_swaps_payload_in_place():
    clock, mgr, eng, disp = transform_env()
    route = Route("camera", "cloud-detector.local", Direction.REQUEST)
    other, _ = submit(mgr, payload=b"other", route=route)
    q = mgr.queue_for(route)
    # disable the binding for the first message by submitting it before... instead
    # transform the second arrival and check its position is preserved.
    m, _ = submit(mgr, payload=b"y" * 100, route=route)
    assert q.items == [other, m]
    assert m.state is MessageState.IN_PROGRESS
    ok = mgr.complete_transform((q.key, m.id), b"z" * 40)
    assert ok
    assert m.state is MessageState.QUEUED
    assert m.payload == b"z" * 40
    assert m.header("Content-Length") == "40"
    assert q.items == [other, m]  # same queue position


def test_transform_identical_payload_only_changes_state():
    clock, mgr, eng, disp = transform_env()
    m, _ = submit(mgr, payload=b"same")
    q = mgr.queue_for(m.route)
    mgr.complete_transform((q.key, m.id), b"same")
    assert m.payload == b"same"
    assert m.state is MessageState.QUEUED


def test_transform_already_in_progress_unchanged():
    src = "def on_request(h):\n    h.transform(\"a\")\n    h.transform(\"b\")\n"
    binding = script_binding(src, transform_endpoint="http://e/t")
    clock, mgr, eng, disp = build_env([binding])
    m, report = submit(mgr)
    issued = [mu for mu in report.mutations if mu[0] == "transform"]
    assert issued == [("transform", m.id, "a", True), ("transform", m.id, "b", False)]
    assert len(report.callback_jobs) == 1


def test_transform_revert_keeps_original_payload():
    clock, mgr, eng, disp = transform_env()
    m, _ = submit(mgr, payload=b"original")
    q = mgr.queue_for(m.route)
    mgr.revert_transform((q.key, m.id))
    assert m.state is MessageState.QUEUED
    assert m.payload == b"original"
    assert mgr.counters["transforms_reverted"] == 1


def test_transform_completion_after_drop_is_discarded():
    clock, mgr, eng, disp = transform_env()
    m, _ = submit(mgr, payload=b"victim")
    q = mgr.queue_for(m.route)
    with q.lock:
        idx = q.index_of(m)
        assert q.drop(idx, 0).changed  # a later policy run dropped it
    before = list(q.items)
    ok = mgr.complete_transform((q.key, m.id), b"too late")
    assert not ok
    assert q.items == before
    assert mgr.counters["transforms_discarded"] == 1


def test_forwarder_skips_in_progress_head_end_to_end():
    clock, mgr, eng, disp = transform_env()
    route = Route("camera", "cloud-detector.local", Direction.REQUEST)
    first, _ = submit(mgr, payload=b"first", route=route)
    q = mgr.queue_for(route)
    assert first.state is MessageState.IN_PROGRESS
    # suppress policy for the second message so it stays plain
    eng.swap_bindings([])
    second, _ = submit(mgr, payload=b"second", route=route)
    got = q.dequeue_ready(0)
    assert got is second
    assert q.items == [first]


# -- notify ------------------------------------------------------------------------------


def test_notify_posts_to_every_endpoint():
    src = "def on_request(h):\n    h.notify(\"bw=3000\")\n"
    binding = script_binding(src, notify_endpoints=("http://a/cb", "http://b/cb"))
    clock, mgr, eng, disp = build_env([binding])
    m, report = submit(mgr)
    assert len(disp.jobs) == 2
    assert {j.endpoint for j in disp.jobs} == {"http://a/cb", "http://b/cb"}
    assert all(j.body == b"bw=3000" for j in disp.jobs)
    assert all(j.kind is CallbackKind.NOTIFY and j.message_ref is None for j in disp.jobs)


def test_notify_without_endpoints_is_load_time_error():
    src = "def on_request(h):\n    h.notify(\"x\")\n"
    binding = script_binding(src)
    problems = validate_binding(binding)
    assert any("notify" in p for p in problems)


def test_transform_without_endpoint_is_load_time_error():
    src = "def on_request(h):\n    h.transform(\"180p\")\n"
    problems = validate_binding(script_binding(src))
    assert any("transform" in p for p in problems)


def test_missing_entry_point_is_load_time_error():
    src = "def on_response(h):\n    pass\n"
    problems = validate_binding(script_binding(src, trigger=Trigger.ON_REQUEST))
    assert any("entry point" in p for p in problems)


def test_duplicate_binding_later_replaces_earlier():
    b1 = script_binding("def on_request(h):\n    pass\n")
    b2 = script_binding("def on_request(h):\n    h.drop()\n")
    chosen, warnings = dedupe_bindings([b1, b2])
    assert chosen == [b2]
    assert len(warnings) == 1


# -- callbacks dispatched only after exclusion release -----------------------------------


def test_callbacks_flushed_after_queue_release():
    seen_locked = []

    class ProbeDispatcher:
        def __init__(self, mgr):
            self.mgr = mgr

        def submit(self, job):
            q = self.mgr.find_queue(job.message_ref[0]) if job.message_ref else None
            if q is not None:
                locked_elsewhere = not q.lock.acquire(blocking=False)
                if not locked_elsewhere:
                    q.lock.release()
                seen_locked.append(locked_elsewhere)

    src = "def on_request(h):\n    h.transform(\"180p\")\n"
    binding = script_binding(src, transform_endpoint="http://e/t")
    clock, mgr, eng, disp = build_env([binding])
    mgr.dispatcher = ProbeDispatcher(mgr)
    submit(mgr)
    assert seen_locked == [False]


# -- sandbox restrictions ------------------------------------------------------------------


def test_programs_cannot_import():
    with pytest.raises(ProgramError):
        SandboxedProgram("import os\n")


def test_programs_cannot_touch_private_attributes():
    with pytest.raises(ProgramError):
        SandboxedProgram("def on_request(h):\n    h._ctx\n")


def test_programs_cannot_use_unknown_names():
    src = "def on_request(h):\n    open(\"/etc/passwd\")\n"
    clock, mgr, eng, disp = build_env([script_binding(src)])
    m, report = submit(mgr)
    assert report.error.startswith("program_error")


def test_handles_expire_with_execution():
    src = "def on_request(h):\n    pass\n"
    clock, mgr, eng, disp = build_env([script_binding(src)])
    from hivegate.policy.host import ExecutionContext, TriggerHandle

    route = Route("a", "b", Direction.REQUEST)
    m, _ = submit(mgr, route=route)
    q = mgr.queue_for(route)
    binding = script_binding(src)
    ctx = ExecutionContext(mgr, m, q, binding, 0)
    handle = TriggerHandle(ctx, m, q)
    ctx.close()
    with pytest.raises(ProgramError):
        handle.size()
