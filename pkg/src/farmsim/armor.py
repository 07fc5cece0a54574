"""Node-level managers: each L2/3 worker PC hosts one, and each L1 region
hosts one at the regional tier (embedded DSPs are too constrained to host
their own).  An instance hosts runtime-pluggable elements, detects dead
processes by heartbeat staleness, and executes local recovery — restart,
checkpoint-restore, migrate — escalating anything it cannot handle.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable

from .dataflow import (
    PROC_CRASHED,
    PROC_HUNG,
    PROC_MIGRATING,
    PROC_RESTARTING,
    PROC_RUNNING,
    PROC_STATE_NAMES,
)
from .vla import ConditionReport

ROLE_TRIGGER_FILTER = "TriggerFilter"
ROLE_AUXILIARY = "Auxiliary"

KIND_DETECTION = "Detection"
KIND_ANALYSIS = "Analysis"
KIND_RECOVERY = "Recovery"

ACTION_RESTART = "restart"
ACTION_MIGRATE = "migrate"
ACTION_OUT_OF_SERVICE = "out_of_service"
ACTION_REASSIGN = "reassign"

# Legal ProcessRecord transitions (see PROC_* in dataflow).
_ALLOWED_TRANSITIONS = {
    (PROC_RUNNING, PROC_CRASHED),
    (PROC_RUNNING, PROC_HUNG),
    (PROC_RUNNING, PROC_MIGRATING),
    (PROC_CRASHED, PROC_RESTARTING),
    (PROC_CRASHED, PROC_MIGRATING),   # dead node: move the role to a spare
    (PROC_HUNG, PROC_RESTARTING),
    (PROC_HUNG, PROC_CRASHED),        # a hung process may crash outright
    (PROC_RESTARTING, PROC_RUNNING),
    (PROC_RESTARTING, PROC_CRASHED),  # fault strikes during restart
    (PROC_MIGRATING, PROC_RUNNING),
}


class DuplicateElementId(ValueError):
    pass


class UnknownElementId(KeyError):
    pass


class IllegalTransition(RuntimeError):
    pass


class ProcessRecord:
    """Supervision record for one worker process.  `state` is the manager's
    *belief*, advanced only by detection and recovery steps — the underlying
    worker may have crashed long before the belief says so, and the gap is
    exactly the detection latency.  Transitions are validated so Running
    never jumps to Running without passing Restarting or Migrating."""

    __slots__ = ("node_id", "role", "worker", "state", "restart_times",
                 "migrated_to")

    def __init__(self, node_id: int, worker, role: str = ROLE_TRIGGER_FILTER):
        self.node_id = node_id
        self.role = role
        self.worker = worker             # object with a proc_state attribute
        self.state = PROC_RUNNING
        self.restart_times: deque[int] = deque()
        self.migrated_to: int | None = None

    @property
    def state_name(self) -> str:
        return PROC_STATE_NAMES[self.state]

    @property
    def restart_count(self) -> int:
        return self.worker.restart_count

    def transition(self, new_state: int) -> None:
        if (self.state, new_state) not in _ALLOWED_TRANSITIONS:
            raise IllegalTransition(
                f"process {self.node_id}: {PROC_STATE_NAMES[self.state]} -> "
                f"{PROC_STATE_NAMES[new_state]}")
        self.state = new_state


@dataclass(frozen=True)
class Subscription:
    """Which reports an element consumes: None matches everything."""

    metrics: frozenset[str] | None = None
    severities: frozenset[str] | None = None

    def matches(self, report: ConditionReport) -> bool:
        if self.metrics is not None and report.metric not in self.metrics:
            return False
        if self.severities is not None and report.severity not in self.severities:
            return False
        return True


@dataclass(frozen=True)
class EmitReport:
    report: ConditionReport


@dataclass(frozen=True)
class RequestAction:
    kind: str
    target: int                  # node id the action applies to
    arg: object = None


@dataclass(frozen=True)
class Escalate:
    report: ConditionReport
    reason: str = ""


@dataclass(frozen=True)
class Element:
    """Runtime-pluggable behavior.  The handler must be deterministic and
    side-effect-free except through its outputs and the provided per-element
    memory dict (so replaying a report sequence reproduces the outputs)."""

    element_id: str
    kind: str
    subscription: Subscription
    handler: Callable  # (ElementContext, ConditionReport) -> list


@dataclass
class ElementContext:
    now: int
    armor_node: int
    tier: str
    records: dict
    memory: dict


@dataclass
class Escalation:
    """A condition forwarded upward with its cause chain preserved."""

    escalation_id: int
    report: ConditionReport
    reason: str
    hops: tuple[int, ...]        # armor/manager node ids traversed so far
    t_escalated: int

    def to_json(self) -> dict:
        return {
            "escalation_id": self.escalation_id,
            "report": self.report.to_json(),
            "reason": self.reason,
            "hops": list(self.hops),
            "t_escalated": self.t_escalated,
        }


@dataclass(frozen=True)
class HeartbeatConfig:
    period_ns: int = 1_000_000_000
    miss_threshold: int = 3

    def __post_init__(self):
        if self.period_ns <= 0:
            raise ValueError("heartbeat period must be > 0")
        if self.miss_threshold < 1:
            raise ValueError("miss threshold must be >= 1")

    @property
    def stale_after_ns(self) -> int:
        return self.period_ns * self.miss_threshold


RESTART_STORM_LIMIT = 3
RESTART_STORM_WINDOW_NS = 60_000_000_000


class Armor:
    """One manager instance.  `actions` is the execution glue the host
    simulation provides; elements only request, the armor validates and
    dispatches.  Escalations leave through `escalate_fn`."""

    def __init__(self, node_id: int, tier: str, *, actions, escalate_fn,
                 next_report_id, next_escalation_id,
                 hb: HeartbeatConfig = HeartbeatConfig()):
        self.node_id = node_id
        self.tier = tier                      # "node" or "regional"
        self.actions = actions
        self.escalate_fn = escalate_fn
        self.next_report_id = next_report_id
        self.next_escalation_id = next_escalation_id
        self.hb = hb
        self.elements: list[Element] = []
        self._memories: dict[str, dict] = {}
        self.records: dict[int, ProcessRecord] = {}
        self.last_hb: dict[int, int] = {}
        # Audit counters: every Fatal in must become an action or escalation.
        self.fatal_in = 0
        self.fatal_acted = 0
        self.fatal_escalated = 0
        self.reports_in = 0
        self.info_absorbed = 0
        self.escalations_sent = 0

    # -- element management --------------------------------------------------

    def register_element(self, element: Element) -> None:
        if any(e.element_id == element.element_id for e in self.elements):
            raise DuplicateElementId(element.element_id)
        self.elements.append(element)
        self._memories[element.element_id] = {}

    def remove_element(self, element_id: str) -> None:
        for i, e in enumerate(self.elements):
            if e.element_id == element_id:
                del self.elements[i]
                del self._memories[element_id]
                return
        raise UnknownElementId(element_id)

    def element_ids(self) -> list[str]:
        return [e.element_id for e in self.elements]

    # -- supervision ----------------------------------------------------------

    def watch(self, record: ProcessRecord, now: int = 0) -> None:
        self.records[record.node_id] = record
        self.last_hb[record.node_id] = now

    def unwatch(self, node_id: int) -> None:
        self.records.pop(node_id, None)
        self.last_hb.pop(node_id, None)

    def note_heartbeat(self, node_id: int, sent_at: int) -> None:
        # Staleness is judged against the sender's timestamp, so hop latency
        # cannot push detection past the period x (miss+1) bound.
        if node_id in self.last_hb and sent_at > self.last_hb[node_id]:
            self.last_hb[node_id] = sent_at

    def heartbeat_tick(self, now: int) -> list[ConditionReport]:
        """Declare ProcessDead for every Running record whose last heartbeat
        is older than period x miss_threshold; the belief becomes Crashed
        (even when the process is merely unreachable behind a dead link)."""
        stale_after = self.hb.stale_after_ns
        out = []
        for node_id, record in self.records.items():
            if record.state != PROC_RUNNING:
                continue
            silence = now - self.last_hb[node_id]
            if silence > stale_after:
                record.transition(PROC_CRASHED)
                out.append(ConditionReport(
                    report_id=self.next_report_id(),
                    source=node_id,
                    metric="process_dead",
                    observed=silence / 1e9,
                    threshold=stale_after / 1e9,
                    severity="Fatal",
                    priority=0,
                    t_observed=now,
                ))
        return out

    # -- report handling -------------------------------------------------------

    def deliver_report(self, report: ConditionReport, now: int) -> list:
        """Fan the report to subscribed elements in registration order,
        execute requested actions, forward escalations.  An unclaimed Fatal
        auto-escalates; sub-Warning reports with no subscriber are absorbed
        into node statistics."""
        self.reports_in += 1
        is_fatal = report.severity == "Fatal"
        if is_fatal:
            self.fatal_in += 1
        # Detection updates the belief before any element acts on it.
        record = self.records.get(report.source)
        if record is not None and record.state == PROC_RUNNING:
            if report.metric == "process_dead":
                record.transition(PROC_CRASHED)
            elif report.metric == "task_runtime" and is_fatal:
                record.transition(PROC_HUNG)
        outputs = []
        for element in self.elements:
            if element.subscription.matches(report):
                ctx = ElementContext(
                    now=now, armor_node=self.node_id, tier=self.tier,
                    records=self.records, memory=self._memories[element.element_id])
                outputs.extend(element.handler(ctx, report) or ())
        acted = False
        esc_before = self.escalations_sent
        results = []
        for output in outputs:
            if isinstance(output, RequestAction):
                ok = self._execute(output, report, now)
                acted = acted or ok
                results.append((output, ok))
            elif isinstance(output, Escalate):
                self._escalate(output.report, output.reason or "element", now)
                results.append((output, True))
            elif isinstance(output, EmitReport):
                results.extend(self.deliver_report(output.report, now))
        if is_fatal:
            if acted:
                self.fatal_acted += 1
            elif self.escalations_sent > esc_before:
                self.fatal_escalated += 1
            else:
                self._escalate(report, "unclaimed-fatal", now)
                self.fatal_escalated += 1
        elif not outputs:
            self.info_absorbed += 1
        return results

    def _execute(self, request: RequestAction, cause: ConditionReport, now: int) -> bool:
        if request.kind == ACTION_RESTART:
            record = self.records.get(request.target)
            if record is None or record.state not in (PROC_CRASHED, PROC_HUNG):
                return False
            while record.restart_times and \
                    now - record.restart_times[0] > RESTART_STORM_WINDOW_NS:
                record.restart_times.popleft()
            if len(record.restart_times) >= RESTART_STORM_LIMIT:
                self._escalate(cause, "restart-storm", now)
                return False
            if not self.actions.begin_restart(record, now, cause):
                self._escalate(cause, "unreachable", now)
                return False
            record.transition(PROC_RESTARTING)
            record.restart_times.append(now)
            return True
        if request.kind == ACTION_MIGRATE:
            record = self.records.get(request.target)
            if record is None or record.state in (PROC_MIGRATING, PROC_RESTARTING):
                return False
            target = self.actions.pick_migration_target(record, now)
            if target is None:
                self._escalate(cause, "no-target-available", now)
                return False
            record.transition(PROC_MIGRATING)
            self.actions.begin_migration(record, target, now, cause)
            return True
        if request.kind in (ACTION_OUT_OF_SERVICE, ACTION_REASSIGN):
            return self.actions.apply_status_action(request, cause, now)
        return False

    def _escalate(self, report: ConditionReport, reason: str, now: int) -> None:
        self.escalations_sent += 1
        self.escalate_fn(Escalation(
            escalation_id=self.next_escalation_id(),
            report=report,
            reason=reason,
            hops=(self.node_id,),
            t_escalated=now,
        ))

    def on_restart_complete(self, node_id: int, now: int) -> None:
        record = self.records.get(node_id)
        if record is None or record.state != PROC_RESTARTING:
            return
        record.transition(PROC_RUNNING)
        self.actions.finish_restart(record, now)
        self.last_hb[node_id] = now     # grace after restart

    def on_migration_complete(self, node_id: int, new_node_id: int,
                              new_worker, now: int) -> None:
        """The role lands on the target node: retire the source record and
        supervise a fresh one in its place."""
        record = self.records.get(node_id)
        if record is None or record.state != PROC_MIGRATING:
            return
        record.transition(PROC_RUNNING)
        record.migrated_to = new_node_id
        self.unwatch(node_id)
        fresh = ProcessRecord(new_node_id, new_worker, record.role)
        self.watch(fresh, now)
        self.actions.finish_migration(record, fresh, now)

    def audit(self) -> dict:
        """End-of-run discipline check: no Fatal silently absorbed."""
        return {
            "fatal_in": self.fatal_in,
            "fatal_acted": self.fatal_acted,
            "fatal_escalated": self.fatal_escalated,
            "balanced": self.fatal_in == self.fatal_acted + self.fatal_escalated,
        }


# -- built-in elements ----------------------------------------------------------


def _request_restart(ctx: ElementContext, report: ConditionReport):
    return [RequestAction(ACTION_RESTART, report.source)]


def make_restart_on_crash() -> Element:
    return Element(
        element_id="restart-on-crash",
        kind=KIND_RECOVERY,
        subscription=Subscription(metrics=frozenset({"process_dead"})),
        handler=_request_restart,
    )


def make_restart_on_hang() -> Element:
    return Element(
        element_id="restart-on-hang",
        kind=KIND_RECOVERY,
        subscription=Subscription(metrics=frozenset({"task_runtime"}),
                                  severities=frozenset({"Fatal"})),
        handler=_request_restart,
    )


OVERLOAD_UTIL = 0.98
OVERLOAD_HOLD_NS = 30_000_000_000
SIBLING_IDLE_UTIL = 0.5


def _migrate_on_overload(ctx: ElementContext, report: ConditionReport):
    """Track per-node utilization observations; request migration when one
    node holds above OVERLOAD_UTIL for OVERLOAD_HOLD_NS while some sibling
    sits below SIBLING_IDLE_UTIL."""
    utils = ctx.memory.setdefault("utils", {})
    since = ctx.memory.setdefault("since", {})
    node = report.source
    utils[node] = report.observed
    if report.observed > OVERLOAD_UTIL:
        start = since.setdefault(node, report.t_observed)
        held = report.t_observed - start
        sibling_idle = any(u < SIBLING_IDLE_UTIL for n, u in utils.items() if n != node)
        already = ctx.memory.setdefault("requested", set())
        if held >= OVERLOAD_HOLD_NS and sibling_idle and node not in already:
            already.add(node)
            return [RequestAction(ACTION_MIGRATE, node)]
    else:
        since.pop(node, None)
        ctx.memory.setdefault("requested", set()).discard(node)
    return []


def make_migrate_on_overload() -> Element:
    return Element(
        element_id="migrate-on-overload",
        kind=KIND_ANALYSIS,
        subscription=Subscription(metrics=frozenset({"utilization_ewma"})),
        handler=_migrate_on_overload,
    )


def make_escalate_all() -> Element:
    return Element(
        element_id="escalate-all",
        kind=KIND_DETECTION,
        subscription=Subscription(),
        handler=lambda ctx, report: [Escalate(report, "escalate-all")],
    )


BUILTIN_ELEMENTS = {
    "restart-on-crash": make_restart_on_crash,
    "restart-on-hang": make_restart_on_hang,
    "migrate-on-overload": make_migrate_on_overload,
    "escalate-all": make_escalate_all,
}
