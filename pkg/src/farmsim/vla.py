"""Very Lightweight Agents: in-worker monitors that sample local measures,
check them against a hierarchical rule set, queue prioritized condition
reports, and adapt their own duty cycle to stay inside a strict CPU budget.

A VLA is a collection of functions holding state inside the worker — no
independent execution.  On DSPs it performs no analysis: threshold checks
and upward forwarding only; analysis belongs to the node/regional managers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

SEVERITIES = ("Info", "Warning", "Error", "Fatal")
SEVERITY_RANK = {name: i for i, name in enumerate(SEVERITIES)}

TIER_LOCAL = "local-check-only"
TIER_UPWARD = "report-upward"

_OPS = {
    ">": lambda v, t: v > t,
    "<": lambda v, t: v < t,
    ">=": lambda v, t: v >= t,
    "<=": lambda v, t: v <= t,
}

REFRACTORY_SAMPLES = 10


@dataclass(frozen=True)
class VlaRule:
    """One threshold rule: fire `severity` when `metric op threshold` holds."""

    metric: str
    op: str
    threshold: float
    severity: str
    priority: int
    tier: str = TIER_UPWARD

    def __post_init__(self):
        if self.op not in _OPS:
            raise ValueError(f"unknown comparison {self.op!r}")
        if self.severity not in SEVERITY_RANK:
            raise ValueError(f"unknown severity {self.severity!r}")
        if self.priority < 0:
            raise ValueError("priority must be >= 0")
        if not math.isfinite(self.threshold):
            raise ValueError("threshold must be finite")
        if self.tier not in (TIER_LOCAL, TIER_UPWARD):
            raise ValueError(f"unknown tier {self.tier!r}")

    def holds(self, value: float) -> bool:
        return _OPS[self.op](value, self.threshold)


@dataclass(frozen=True)
class RuleSet:
    version: int
    rules: tuple[VlaRule, ...]


# Default roster: thresholds chosen against the defaults elsewhere (queue
# capacity 64, nominal CPU temperature 60 C).
DEFAULT_RULES = RuleSet(version=1, rules=(
    VlaRule("queue_occupancy", ">", 56, "Warning", 3),
    VlaRule("cpu_headroom", "<", 0.02, "Warning", 4),
    VlaRule("cpu_temperature", ">=", 85, "Error", 2),
    VlaRule("io_errors", ">", 10, "Warning", 5),
    VlaRule("link_errors", ">", 0, "Warning", 5),
))


@dataclass
class ConditionReport:
    """An observed threshold crossing (or watchdog timeout), routed upward."""

    report_id: int
    source: int                 # node id
    metric: str
    observed: float
    threshold: float
    severity: str
    priority: int
    t_observed: int

    def to_json(self) -> dict:
        return {
            "report_id": self.report_id,
            "source": self.source,
            "metric": self.metric,
            "observed": self.observed,
            "threshold": self.threshold,
            "severity": self.severity,
            "priority": self.priority,
            "t_observed": self.t_observed,
        }


class ReportQueue:
    """Bounded priority queue.  When full, the lowest-priority entry
    (numerically largest; newest among ties) is evicted if the newcomer is
    more urgent, otherwise the newcomer is dropped.  Both losses counted.
    Drain order: priority, then arrival (FIFO within equal priority)."""

    __slots__ = ("capacity", "_entries", "_arrival", "evicted", "dropped")

    def __init__(self, capacity: int = 32):
        self.capacity = capacity
        self._entries: list[tuple[int, int, ConditionReport]] = []
        self._arrival = 0
        self.evicted = 0
        self.dropped = 0

    def __len__(self) -> int:
        return len(self._entries)

    def enqueue(self, report: ConditionReport) -> bool:
        """True if the report is now queued, False if it was dropped."""
        if len(self._entries) >= self.capacity:
            worst_idx = -1
            worst_key = (-1, -1)
            for i, (prio, arr, _) in enumerate(self._entries):
                if (prio, arr) > worst_key:
                    worst_key = (prio, arr)
                    worst_idx = i
            if report.priority < worst_key[0]:
                del self._entries[worst_idx]
                self.evicted += 1
            else:
                self.dropped += 1
                return False
        self._entries.append((report.priority, self._arrival, report))
        self._arrival += 1
        return True

    def drain(self) -> list[ConditionReport]:
        out = [e[2] for e in sorted(self._entries, key=lambda e: (e[0], e[1]))]
        self._entries.clear()
        return out


def adapt_period(period_ns: int, headroom: float, *, min_ns: int, max_ns: int) -> int:
    """Duty-cycle adaptation: starve -> back off (double), plenty -> speed
    up (halve); clamped to [min_ns, max_ns]."""
    if headroom < 0.05:
        return min(period_ns * 2, max_ns)
    if headroom > 0.25:
        return max(period_ns // 2, min_ns)
    return period_ns


class VlaState:
    """Per-worker agent state: duty cycle, rule suppression, report queue."""

    __slots__ = (
        "period_ns", "min_period_ns", "max_period_ns", "budget_fraction",
        "tick_cost_ns", "queue", "ruleset", "_suppress",
        "last_sample_at", "last_busy_ns", "last_vla_ns",
    )

    def __init__(self, *, period_ns: int, tick_cost_ns: int,
                 budget_fraction: float = 0.02,
                 min_period_ns: int = 1_000_000, max_period_ns: int = 10_000_000_000,
                 ruleset: RuleSet = DEFAULT_RULES):
        # The CPU budget bounds the duty cycle: never tick faster than the
        # period at which tick cost alone consumes the whole budget.
        floor = int(math.ceil(tick_cost_ns / budget_fraction))
        self.min_period_ns = max(min_period_ns, floor)
        self.max_period_ns = max_period_ns
        self.period_ns = max(period_ns, self.min_period_ns)
        self.budget_fraction = budget_fraction
        self.tick_cost_ns = tick_cost_ns
        self.queue = ReportQueue()
        self.ruleset = ruleset
        self._suppress: dict[int, int] = {}   # rule index -> samples since fire
        self.last_sample_at = 0
        self.last_busy_ns = 0
        self.last_vla_ns = 0

    def swap_rules(self, ruleset: RuleSet) -> None:
        """Hot swap: takes effect at the next sample; suppression resets."""
        self.ruleset = ruleset
        self._suppress.clear()

    def sample(self, metrics: dict, now: int, next_report_id) -> list[ConditionReport]:
        """Evaluate every rule against the metrics snapshot.

        A rule that fired keeps quiet while its condition holds continuously,
        re-firing only every REFRACTORY_SAMPLES samples; clearing the
        condition re-arms it immediately.
        """
        out = []
        suppress = self._suppress
        for idx, rule in enumerate(self.ruleset.rules):
            value = metrics.get(rule.metric)
            if value is None:
                continue
            if rule.holds(value):
                since = suppress.get(idx)
                if since is None or since >= REFRACTORY_SAMPLES:
                    out.append(ConditionReport(
                        report_id=next_report_id(),
                        source=metrics["node_id"],
                        metric=rule.metric,
                        observed=value,
                        threshold=rule.threshold,
                        severity=rule.severity,
                        priority=rule.priority,
                        t_observed=now,
                    ))
                    suppress[idx] = 1
                else:
                    suppress[idx] = since + 1
            elif idx in suppress:
                del suppress[idx]   # cleared: re-arm
        return out

    def adapt(self, headroom: float) -> int:
        self.period_ns = adapt_period(
            self.period_ns, headroom,
            min_ns=self.min_period_ns, max_ns=self.max_period_ns)
        return self.period_ns


def dsp_vla(ruleset: RuleSet = DEFAULT_RULES) -> VlaState:
    return VlaState(period_ns=10_000_000, tick_cost_ns=50_000, ruleset=ruleset)


def pc_vla(ruleset: RuleSet = DEFAULT_RULES) -> VlaState:
    return VlaState(period_ns=100_000_000, tick_cost_ns=500_000, ruleset=ruleset)
