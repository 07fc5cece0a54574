"""Regional and global management tiers.  Regional managers aggregate each
region's telemetry into periodic summary windows (raw reports never travel
further up) and turn escalations into containment actions; the global
manager watches farm-wide balance and issues directives — most notably
input throttling when offered load outruns surviving capacity.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .armor import Escalation

SECOND = 1_000_000_000

SUMMARY_WINDOW_NS = 10 * SECOND

# Regional policy defaults.
OOS_FATAL_LIMIT = 2                       # Fatal escalations per node ...
OOS_FATAL_WINDOW_NS = 300 * SECOND        # ... within 5 minutes
REGION_LOSS_ESCALATE = 0.20               # lost-node fraction -> tell global
HARD_OOS_REASONS = frozenset(
    {"unreachable", "no-target-available", "restart-storm"})

# Global policy defaults.
DEFICIT_WINDOWS = 3                       # consecutive deficit windows
DEFICIT_TOLERANCE = 0.98                  # served < 98% of offered = deficit
RESTORE_WINDOWS = 3                       # consecutive calm windows
RESTORE_UTIL = 0.75                       # mean utilization considered calm
REGION_OOS_LOSS = 0.50                    # region loss -> RegionOutOfService

DIRECTIVE_THROTTLE = "ThrottleInput"
DIRECTIVE_PAUSE = "PauseRun"
DIRECTIVE_RESUME = "ResumeRun"
DIRECTIVE_REGION_OOS = "RegionOutOfService"
DIRECTIVE_POLICY = "PolicyBroadcast"


@dataclass(frozen=True)
class SummaryWindow:
    """One region's digest of a closed [t0, t1) window."""

    region: int
    t0: int
    t1: int
    census: dict
    reports: int
    escalations: int
    util_mean: float
    util_max: float
    offered: int
    served: int
    metric_stats: dict      # metric -> (count, mean, max)

    def to_json(self) -> dict:
        return {
            "region": self.region, "t0": self.t0, "t1": self.t1,
            "census": dict(self.census), "reports": self.reports,
            "escalations": self.escalations, "util_mean": self.util_mean,
            "util_max": self.util_max, "offered": self.offered,
            "served": self.served,
            "metric_stats": {k: list(v) for k, v in self.metric_stats.items()},
        }


@dataclass(frozen=True)
class OutOfService:
    node_id: int
    cause: tuple = ()


@dataclass(frozen=True)
class Reassign:
    node_id: int            # node whose role is being replaced
    replacement: int        # spare (or reassigned) node taking over
    cause: tuple = ()


@dataclass(frozen=True)
class EscalateToGlobal:
    escalation: Escalation


@dataclass(frozen=True)
class GlobalDirective:
    kind: str
    issued_at: int
    fraction: float = 1.0   # ThrottleInput only
    target: int = -1        # RegionOutOfService only
    cause: tuple = ()

    def __post_init__(self):
        if self.kind == DIRECTIVE_THROTTLE and not 0.0 <= self.fraction <= 1.0:
            raise ValueError("throttle fraction must lie in [0, 1]")

    def to_json(self) -> dict:
        return {
            "kind": self.kind, "issued_at": self.issued_at,
            "fraction": self.fraction, "target": self.target,
            "cause": list(self.cause),
        }


@dataclass(frozen=True)
class RegionalPolicy:
    oos_fatal_limit: int = OOS_FATAL_LIMIT
    oos_fatal_window_ns: int = OOS_FATAL_WINDOW_NS
    region_loss_escalate: float = REGION_LOSS_ESCALATE


class RegionalManager:
    """Per-region decision point.  `pick_replacement(node_id)` is supplied
    by the host simulation and returns the spare (preferred) or lowest-
    utilization reassignable node to take over a lost role, or None."""

    def __init__(self, node_id: int, region_nodes: list[int],
                 policy: RegionalPolicy = RegionalPolicy(),
                 pick_replacement=None):
        self.node_id = node_id
        self.region_nodes = list(region_nodes)
        self.policy = policy
        self.pick_replacement = pick_replacement or (lambda node_id: None)
        self.fatal_history: dict[int, deque] = {}
        self.lost_nodes: set[int] = set()
        self.region_loss_reported = False
        # Window accumulators, reset at each close.
        self._reports = 0
        self._escalations = 0
        self._stats: dict[str, list] = {}   # metric -> [count, total, max]

    # -- telemetry accumulation -------------------------------------------

    def observe_report(self, report) -> None:
        """Fold one worker report into the running window statistics."""
        self._reports += 1
        entry = self._stats.get(report.metric)
        if entry is None:
            self._stats[report.metric] = [1, report.observed, report.observed]
        else:
            entry[0] += 1
            entry[1] += report.observed
            if report.observed > entry[2]:
                entry[2] = report.observed

    def close_window(self, t0: int, t1: int, census: dict,
                     node_utils: dict, offered: int, served: int) -> SummaryWindow:
        """Aggregate and reset; the returned summary is the only routine
        upward traffic for the whole window."""
        utils = list(node_utils.values())
        summary = SummaryWindow(
            region=self.node_id, t0=t0, t1=t1, census=dict(census),
            reports=self._reports, escalations=self._escalations,
            util_mean=sum(utils) / len(utils) if utils else 0.0,
            util_max=max(utils) if utils else 0.0,
            offered=offered, served=served,
            metric_stats={k: (v[0], v[1] / v[0], v[2])
                          for k, v in self._stats.items()},
        )
        self._reports = 0
        self._escalations = 0
        self._stats = {}
        return summary

    # -- escalation handling ------------------------------------------------

    def on_escalation(self, escalation: Escalation, now: int) -> list:
        """Apply the out-of-service and reassignment policy to one upward
        escalation; returns the actions for the host to execute."""
        self._escalations += 1
        node = escalation.report.source
        actions = []
        take_out = False

        if escalation.reason in HARD_OOS_REASONS:
            take_out = True
        if escalation.report.severity == "Fatal":
            history = self.fatal_history.setdefault(node, deque())
            history.append(now)
            while history and now - history[0] > self.policy.oos_fatal_window_ns:
                history.popleft()
            if len(history) >= self.policy.oos_fatal_limit:
                take_out = True

        if take_out and node not in self.lost_nodes and node in self.region_nodes:
            self.lost_nodes.add(node)
            cause = (escalation.escalation_id,)
            actions.append(OutOfService(node, cause=cause))
            replacement = self.pick_replacement(node)
            if replacement is not None:
                actions.append(Reassign(node, replacement, cause=cause))

        loss = len(self.lost_nodes) / len(self.region_nodes)
        if loss > self.policy.region_loss_escalate and not self.region_loss_reported:
            self.region_loss_reported = True
            forwarded = Escalation(
                escalation_id=escalation.escalation_id,
                report=escalation.report,
                reason=f"region-loss:{loss:.2f}",
                hops=escalation.hops + (self.node_id,),
                t_escalated=now,
            )
            actions.append(EscalateToGlobal(forwarded))
        return actions

    @property
    def region_loss(self) -> float:
        return len(self.lost_nodes) / len(self.region_nodes)

    def node_recovered(self, node_id: int) -> None:
        """A lost node came back (restart/replacement in service)."""
        self.lost_nodes.discard(node_id)
        self.fatal_history.pop(node_id, None)
        if len(self.lost_nodes) / len(self.region_nodes) \
                <= self.policy.region_loss_escalate:
            self.region_loss_reported = False


@dataclass(frozen=True)
class GlobalPolicy:
    deficit_windows: int = DEFICIT_WINDOWS
    deficit_tolerance: float = DEFICIT_TOLERANCE
    restore_windows: int = RESTORE_WINDOWS
    restore_util: float = RESTORE_UTIL
    region_oos_loss: float = REGION_OOS_LOSS


class GlobalManager:
    """Farm-wide authority.  Consumes the per-window summaries plus any
    regional escalations, and emits directives; it never sees raw worker
    reports."""

    def __init__(self, policy: GlobalPolicy = GlobalPolicy()):
        self.policy = policy
        self.throttle = 1.0
        self._deficit_streak = 0
        self._calm_streak = 0
        self.escalation_log: list[Escalation] = []
        self.directive_log: list[GlobalDirective] = []
        self.summaries_seen = 0
        self.last_summaries: list[SummaryWindow] = []

    def on_window(self, summaries: list[SummaryWindow], offered: int,
                  served: int, now: int) -> list[GlobalDirective]:
        """Evaluate one closed window.  `offered`/`served` are the farm-wide
        first-level counts for the window (throttled crossings excluded from
        `offered` — throttling is upstream of the farm)."""
        self.summaries_seen += len(summaries)
        self.last_summaries = list(summaries)
        directives = []

        deficit = offered > 0 and served < self.policy.deficit_tolerance * offered
        if deficit:
            self._deficit_streak += 1
            self._calm_streak = 0
        else:
            self._deficit_streak = 0

        if self._deficit_streak >= self.policy.deficit_windows:
            fraction = self.throttle * served / offered
            if fraction < self.throttle:
                directives.append(self._issue(GlobalDirective(
                    kind=DIRECTIVE_THROTTLE, issued_at=now, fraction=fraction)))
                self.throttle = fraction
            self._deficit_streak = 0

        if self.throttle < 1.0 and not deficit:
            utils = [s.util_mean for s in summaries]
            calm = bool(utils) and \
                sum(utils) / len(utils) < self.policy.restore_util
            self._calm_streak = self._calm_streak + 1 if calm else 0
            if self._calm_streak >= self.policy.restore_windows:
                directives.append(self._issue(GlobalDirective(
                    kind=DIRECTIVE_THROTTLE, issued_at=now, fraction=1.0)))
                self.throttle = 1.0
                self._calm_streak = 0

        return directives

    def on_escalation(self, escalation: Escalation, from_regional: int,
                      region_loss: float, now: int) -> list[GlobalDirective]:
        """Handle one escalation forwarded by a regional manager.  The cause
        chain must end at the forwarding regional — no tier skipped."""
        if not escalation.hops or escalation.hops[-1] != from_regional:
            raise ValueError(
                f"escalation {escalation.escalation_id} arrived at global "
                f"without passing through regional {from_regional}: "
                f"hops={escalation.hops}")
        self.escalation_log.append(escalation)
        directives = []
        if region_loss > self.policy.region_oos_loss:
            directives.append(self._issue(GlobalDirective(
                kind=DIRECTIVE_REGION_OOS, issued_at=now, target=from_regional,
                cause=(escalation.escalation_id,))))
        return directives

    def _issue(self, directive: GlobalDirective) -> GlobalDirective:
        self.directive_log.append(directive)
        return directive
