"""Node-manager tests: element plumbing, heartbeat detection, restart and
migration flows, escalation discipline, and the state-machine/purity
invariants."""

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from farmsim.armor import (
    ACTION_MIGRATE,
    ACTION_RESTART,
    Armor,
    DuplicateElementId,
    Element,
    ElementContext,
    Escalate,
    HeartbeatConfig,
    IllegalTransition,
    ProcessRecord,
    RequestAction,
    Subscription,
    UnknownElementId,
    make_escalate_all,
    make_migrate_on_overload,
    make_restart_on_crash,
    make_restart_on_hang,
)
from farmsim.dataflow import (
    PROC_CRASHED,
    PROC_HUNG,
    PROC_MIGRATING,
    PROC_RESTARTING,
    PROC_RUNNING,
)
from farmsim.vla import ConditionReport

SECOND = 1_000_000_000


class FakeWorker:
    def __init__(self):
        self.proc_state = PROC_RUNNING
        self.restart_count = 0


class FakeActions:
    """Records what the armor asked for; stands in for the simulation glue."""

    def __init__(self, allow_restart=True, migration_target=None):
        self.calls = []
        self.allow_restart = allow_restart
        self.migration_target = migration_target

    def begin_restart(self, record, now, cause):
        if not self.allow_restart:
            return False
        self.calls.append(("begin_restart", record.node_id, now))
        return True

    def finish_restart(self, record, now):
        self.calls.append(("finish_restart", record.node_id, now))

    def pick_migration_target(self, record, now):
        return self.migration_target

    def begin_migration(self, record, target, now, cause):
        self.calls.append(("begin_migration", record.node_id, target, now))

    def finish_migration(self, old_record, new_record, now):
        self.calls.append(
            ("finish_migration", old_record.node_id, new_record.node_id, now))

    def apply_status_action(self, request, cause, now):
        self.calls.append((request.kind, request.target, now))
        return True


def make_armor(node_id=500, tier="node", **kwargs):
    actions = FakeActions(**kwargs)
    escalations = []
    report_ids = itertools.count(10_000)
    escalation_ids = itertools.count(1)
    armor = Armor(
        node_id, tier,
        actions=actions,
        escalate_fn=escalations.append,
        next_report_id=lambda: next(report_ids),
        next_escalation_id=lambda: next(escalation_ids),
    )
    return armor, actions, escalations


_rid = itertools.count(1)


def report(source, metric="process_dead", severity="Fatal", observed=1.0,
           threshold=0.0, priority=0, t=0):
    return ConditionReport(
        report_id=next(_rid), source=source, metric=metric,
        observed=observed, threshold=threshold, severity=severity,
        priority=priority, t_observed=t)


# -- element management -------------------------------------------------------


def test_duplicate_and_unknown_element_ids():
    armor, _, _ = make_armor()
    armor.register_element(make_restart_on_crash())
    with pytest.raises(DuplicateElementId):
        armor.register_element(make_restart_on_crash())
    with pytest.raises(UnknownElementId):
        armor.remove_element("not-there")
    armor.remove_element("restart-on-crash")
    assert armor.element_ids() == []


def test_fanout_follows_registration_order():
    armor, _, _ = make_armor()
    seen = []

    def tap(name):
        def handler(ctx, rpt):
            seen.append(name)
            return []
        return handler

    sub = Subscription(severities=frozenset({"Warning"}))
    armor.register_element(Element("b-second", "Detection", sub, tap("second")))
    armor.register_element(Element("a-first", "Detection", sub, tap("first")))
    armor.deliver_report(report(1, metric="cpu_temperature", severity="Warning"), 0)
    # Registration order, not id order.
    assert seen == ["second", "first"]


def test_register_and_remove_take_effect_mid_run():
    armor, actions, escalations = make_armor()
    worker = FakeWorker()
    armor.watch(ProcessRecord(7, worker), 0)

    # No elements yet: the Fatal is auto-escalated, not acted on.
    armor.deliver_report(report(7, t=1 * SECOND), 1 * SECOND)
    assert len(escalations) == 1
    assert escalations[0].reason == "unclaimed-fatal"
    assert not actions.calls

    # Restart element registered mid-run: next Fatal handled locally.
    armor.register_element(make_restart_on_crash())
    armor.on_restart_complete(7, 2 * SECOND)  # no-op: not restarting
    armor.records[7].state = PROC_RUNNING
    armor.deliver_report(report(7, t=3 * SECOND), 3 * SECOND)
    assert [c[0] for c in actions.calls] == ["begin_restart"]
    assert len(escalations) == 1

    # Removed again: back to escalation.
    armor.remove_element("restart-on-crash")
    armor.on_restart_complete(7, 5 * SECOND)
    armor.deliver_report(report(7, t=6 * SECOND), 6 * SECOND)
    assert len(escalations) == 2
    assert len(actions.calls) == 2          # finish_restart from completion


def test_info_report_without_subscribers_is_absorbed():
    armor, _, escalations = make_armor()
    armor.deliver_report(report(3, metric="io_errors", severity="Info"), 0)
    assert armor.info_absorbed == 1
    assert not escalations


# -- heartbeat detection -------------------------------------------------------


def test_heartbeat_detection_bound_over_phase_sweep():
    """Crash at any phase within the monitor period is detected within
    period x (miss_threshold + 1) = 4 s of the crash instant."""
    period = SECOND
    for k in range(10):
        crash_at = 10 * SECOND + k * period // 10
        armor, _, _ = make_armor()
        record = ProcessRecord(9, FakeWorker())
        armor.watch(record, 0)
        detected_at = None
        for tick in range(1, 20):
            now = tick * period
            # Heartbeats sent each second until the crash instant.
            if now <= crash_at:
                armor.note_heartbeat(9, now)
            reports = armor.heartbeat_tick(now)
            if reports:
                detected_at = now
                assert reports[0].metric == "process_dead"
                assert reports[0].severity == "Fatal"
                break
        assert detected_at is not None
        latency = detected_at - crash_at
        assert latency <= 4 * SECOND, f"phase {k}: latency {latency}"
        assert record.state == PROC_CRASHED


def test_healthy_and_already_dead_records_do_not_report():
    armor, _, _ = make_armor()
    record = ProcessRecord(4, FakeWorker())
    armor.watch(record, 0)
    armor.note_heartbeat(4, 5 * SECOND)
    assert armor.heartbeat_tick(6 * SECOND) == []

    # Stale -> one report; belief Crashed stops re-reporting.
    assert len(armor.heartbeat_tick(9 * SECOND)) == 1
    assert armor.heartbeat_tick(10 * SECOND) == []


def test_stale_timestamp_does_not_regress_freshness():
    armor, _, _ = make_armor()
    armor.watch(ProcessRecord(4, FakeWorker()), 0)
    armor.note_heartbeat(4, 5 * SECOND)
    armor.note_heartbeat(4, 3 * SECOND)     # late-arriving older heartbeat
    assert armor.last_hb[4] == 5 * SECOND


def test_restart_completion_grants_heartbeat_grace():
    armor, actions, _ = make_armor()
    record = ProcessRecord(4, FakeWorker())
    armor.watch(record, 0)
    armor.register_element(make_restart_on_crash())
    assert len(armor.heartbeat_tick(4 * SECOND)) == 1     # dead at 4 s
    armor.deliver_report(report(4, t=4 * SECOND), 4 * SECOND)
    armor.on_restart_complete(4, 6 * SECOND)
    assert record.state == PROC_RUNNING
    # Fresh grace: not stale again until its silence exceeds 3 s from 6 s.
    assert armor.heartbeat_tick(9 * SECOND) == []
    assert len(armor.heartbeat_tick(10 * SECOND)) == 1


# -- restart flow ---------------------------------------------------------------


def test_hang_report_restarts_via_hang_element():
    armor, actions, escalations = make_armor()
    record = ProcessRecord(11, FakeWorker())
    armor.watch(record, 0)
    armor.register_element(make_restart_on_hang())
    armor.deliver_report(
        report(11, metric="task_runtime", severity="Fatal", t=2 * SECOND),
        2 * SECOND)
    # Belief moved Running -> Hung -> Restarting; handled locally.
    assert record.state == PROC_RESTARTING
    assert [c[0] for c in actions.calls] == ["begin_restart"]
    assert not escalations
    assert armor.audit() == {
        "fatal_in": 1, "fatal_acted": 1, "fatal_escalated": 0, "balanced": True}


def test_watchdog_warning_does_not_trigger_restart():
    armor, actions, _ = make_armor()
    record = ProcessRecord(11, FakeWorker())
    armor.watch(record, 0)
    armor.register_element(make_restart_on_hang())
    armor.deliver_report(
        report(11, metric="task_runtime", severity="Warning", t=SECOND), SECOND)
    assert record.state == PROC_RUNNING
    assert not actions.calls


def test_fourth_restart_in_window_escalates_with_history():
    armor, actions, escalations = make_armor()
    record = ProcessRecord(5, FakeWorker())
    armor.watch(record, 0)
    armor.register_element(make_restart_on_crash())

    for i in range(3):
        t = i * 10 * SECOND
        armor.deliver_report(report(5, t=t), t)
        assert record.state == PROC_RESTARTING
        armor.on_restart_complete(5, t + 2 * SECOND)
        assert record.state == PROC_RUNNING
    assert not escalations

    # Fourth crash within the 60 s window: no local restart, escalation.
    armor.deliver_report(report(5, t=30 * SECOND), 30 * SECOND)
    assert record.state == PROC_CRASHED
    assert len(escalations) == 1
    assert escalations[0].reason == "restart-storm"
    assert escalations[0].hops == (500,)
    assert len([c for c in actions.calls if c[0] == "begin_restart"]) == 3
    assert len(record.restart_times) == 3   # the history it carries


def test_storm_window_slides():
    armor, actions, _ = make_armor()
    record = ProcessRecord(5, FakeWorker())
    armor.watch(record, 0)
    armor.register_element(make_restart_on_crash())
    for t_s in (0, 10, 20):
        armor.deliver_report(report(5, t=t_s * SECOND), t_s * SECOND)
        armor.on_restart_complete(5, (t_s + 2) * SECOND)
    # 75 s: the restarts at 0 s and 10 s have aged out of the 60 s window.
    armor.deliver_report(report(5, t=75 * SECOND), 75 * SECOND)
    assert record.state == PROC_RESTARTING
    assert len([c for c in actions.calls if c[0] == "begin_restart"]) == 4


def test_unreachable_restart_escalates():
    armor, _, escalations = make_armor(allow_restart=False)
    record = ProcessRecord(6, FakeWorker())
    armor.watch(record, 0)
    armor.register_element(make_restart_on_crash())
    armor.deliver_report(report(6, t=SECOND), SECOND)
    assert record.state == PROC_CRASHED     # never reached Restarting
    assert [e.reason for e in escalations] == ["unreachable"]
    assert armor.audit()["balanced"]


# -- migration flow ---------------------------------------------------------------


def _ewma_series(alpha, samples):
    value = 0.0
    out = []
    for x in samples:
        value = alpha * x + (1.0 - alpha) * value
        out.append(value)
    return out


def test_migrate_on_overload_ewma_crossing():
    """Step load at t=0 with alpha=0.3 one-second windows: the EWMA crosses
    0.98 at the 11th window (1 - 0.7^11 = 0.9802), and the element fires
    exactly once the level has held for 30 s with an idle sibling."""
    alpha = 0.3
    series = _ewma_series(alpha, [1.0] * 60)
    crossing = next(i for i, v in enumerate(series) if v > 0.98)
    assert crossing == 10                     # 11th window, zero-based index
    assert series[crossing - 1] <= 0.98

    armor, actions, escalations = make_armor(tier="regional", migration_target=88)
    overloaded = ProcessRecord(40, FakeWorker())
    armor.watch(overloaded, 0)
    armor.register_element(make_migrate_on_overload())

    fired_at = []
    for i, value in enumerate(series):
        t = (i + 1) * SECOND
        armor.deliver_report(
            report(31, metric="utilization_ewma", severity="Info",
                   observed=0.30, t=t), t)
        armor.deliver_report(
            report(40, metric="utilization_ewma", severity="Info",
                   observed=value, t=t), t)
        if actions.calls and not fired_at:
            fired_at.append(t)
    # First report at/after crossing is t=(crossing+1) s; held >= 30 s later.
    expected = (crossing + 1 + 30) * SECOND
    assert fired_at == [expected]
    assert [c[:3] for c in actions.calls] == [("begin_migration", 40, 88)]
    assert overloaded.state == PROC_MIGRATING
    assert not escalations                  # requested once, no repeat


def test_migrate_without_idle_sibling_does_not_fire():
    armor, actions, _ = make_armor(tier="regional", migration_target=88)
    armor.watch(ProcessRecord(40, FakeWorker()), 0)
    armor.register_element(make_migrate_on_overload())
    for i in range(60):
        t = (i + 1) * SECOND
        armor.deliver_report(
            report(31, metric="utilization_ewma", severity="Info",
                   observed=0.90, t=t), t)    # busy sibling, not < 0.5
        armor.deliver_report(
            report(40, metric="utilization_ewma", severity="Info",
                   observed=0.99, t=t), t)
    assert not actions.calls


def test_migration_without_target_escalates():
    armor, actions, escalations = make_armor(migration_target=None)
    record = ProcessRecord(12, FakeWorker())
    armor.watch(record, 0)
    sub = Subscription(metrics=frozenset({"process_dead"}))
    armor.register_element(Element(
        "migrate-on-death", "Recovery", sub,
        lambda ctx, rpt: [RequestAction(ACTION_MIGRATE, rpt.source)]))
    armor.deliver_report(report(12, t=SECOND), SECOND)
    assert [e.reason for e in escalations] == ["no-target-available"]
    assert record.state == PROC_CRASHED
    assert armor.audit()["balanced"]


def test_migration_complete_moves_supervision_to_target():
    armor, actions, _ = make_armor(migration_target=99)
    record = ProcessRecord(12, FakeWorker())
    armor.watch(record, 0)
    sub = Subscription(metrics=frozenset({"process_dead"}))
    armor.register_element(Element(
        "migrate-on-death", "Recovery", sub,
        lambda ctx, rpt: [RequestAction(ACTION_MIGRATE, rpt.source)]))
    armor.deliver_report(report(12, t=SECOND), SECOND)
    assert record.state == PROC_MIGRATING

    new_worker = FakeWorker()
    armor.on_migration_complete(12, 99, new_worker, 6 * SECOND)
    assert record.state == PROC_RUNNING
    assert record.migrated_to == 99
    assert 12 not in armor.records
    assert armor.records[99].worker is new_worker
    assert armor.last_hb[99] == 6 * SECOND
    assert actions.calls[-1][0] == "finish_migration"


# -- escalation plumbing -----------------------------------------------------------


def test_escalate_all_forwards_everything():
    armor, _, escalations = make_armor(node_id=321, tier="regional")
    armor.register_element(make_escalate_all())
    rpt = report(2, metric="link_errors", severity="Warning", t=7)
    armor.deliver_report(rpt, 7)
    assert len(escalations) == 1
    assert escalations[0].report is rpt
    assert escalations[0].hops == (321,)
    assert escalations[0].reason == "escalate-all"
    assert escalations[0].to_json()["report"]["metric"] == "link_errors"


# -- invariants ---------------------------------------------------------------------


def test_transition_table_blocks_running_to_running():
    record = ProcessRecord(1, FakeWorker())
    with pytest.raises(IllegalTransition):
        record.transition(PROC_RUNNING)
    record.transition(PROC_CRASHED)
    with pytest.raises(IllegalTransition):
        record.transition(PROC_RUNNING)       # must pass Restarting
    record.transition(PROC_RESTARTING)
    record.transition(PROC_RUNNING)
    record.transition(PROC_MIGRATING)
    record.transition(PROC_RUNNING)


severities = st.sampled_from(["Info", "Warning", "Error", "Fatal"])
metrics = st.sampled_from(
    ["process_dead", "task_runtime", "cpu_temperature", "io_errors"])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), metrics, severities),
                min_size=1, max_size=40))
def test_every_fatal_is_acted_on_or_escalated(stream):
    armor, _, escalations = make_armor()
    for node in (1, 2, 3, 4):
        armor.watch(ProcessRecord(node, FakeWorker()), 0)
    armor.register_element(make_restart_on_crash())
    armor.register_element(make_restart_on_hang())
    for i, (source, metric, severity) in enumerate(stream):
        t = (i + 1) * SECOND
        armor.deliver_report(
            report(source, metric=metric, severity=severity, t=t), t)
    audit = armor.audit()
    assert audit["balanced"], audit
    assert armor.escalations_sent == len(escalations)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 3), metrics, severities),
                min_size=1, max_size=30))
def test_replaying_reports_into_fresh_armor_is_identical(stream):
    def run():
        armor, actions, escalations = make_armor()
        for node in (1, 2, 3):
            armor.watch(ProcessRecord(node, FakeWorker()), 0)
        armor.register_element(make_restart_on_crash())
        armor.register_element(make_escalate_all())
        for i, (source, metric, severity) in enumerate(stream):
            t = (i + 1) * SECOND
            armor.deliver_report(
                report(source, metric=metric, severity=severity,
                       observed=float(i), t=t), t)
        return (actions.calls,
                [(e.reason, e.hops, e.report.metric) for e in escalations])

    assert run() == run()
