"""Run-level figures of merit: uptime, loss, detection/recovery latency,
utilization, monitoring overhead, and message-tier counts.  The collector
is a pure observer — it reads counters and sensors, never mutates them —
and the final report asserts the crossing-conservation identity before
anything is published.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .dataflow import PROC_RUNNING
from .topology import NodeStatus

SECOND = 1_000_000_000

DEFAULT_WINDOW_NS = SECOND
DEFAULT_UPTIME_THRESHOLD = 0.90

# Statuses under which a worker contributes capacity.
_SERVING = (NodeStatus.IN_SERVICE, NodeStatus.REASSIGNED)


class ConservationViolation(AssertionError):
    """Crossings leaked or were double-counted — a simulator bug, never a
    scenario outcome.  Aborts the run with the discrepancy attached."""

    def __init__(self, generated: int, accounted: int, detail: dict):
        self.generated = generated
        self.accounted = accounted
        self.detail = detail
        super().__init__(
            f"crossing conservation broken: generated {generated} != "
            f"accounted {accounted} (diff {generated - accounted}); {detail}")


def percentile(samples: list, q: float) -> float:
    """Nearest-rank percentile on a sorted copy; deterministic."""
    if not samples:
        return math.nan
    ordered = sorted(samples)
    rank = max(1, math.ceil(q * len(ordered)))
    return float(ordered[rank - 1])


def latency_stats(samples_ns: list) -> dict:
    """Percentile digest in milliseconds over the given latency samples."""
    if not samples_ns:
        return {"count": 0, "p50_ms": None, "p90_ms": None,
                "p99_ms": None, "max_ms": None}
    return {
        "count": len(samples_ns),
        "p50_ms": percentile(samples_ns, 0.50) / 1e6,
        "p90_ms": percentile(samples_ns, 0.90) / 1e6,
        "p99_ms": percentile(samples_ns, 0.99) / 1e6,
        "max_ms": max(samples_ns) / 1e6,
    }


@dataclass
class MetricSeries:
    """Windowed samples at the flush cadence: (window start, value)."""

    metric: str
    samples: list = field(default_factory=list)

    def append(self, t0: int, value: float) -> None:
        self.samples.append((t0, value))

    def to_json(self) -> dict:
        return {"metric": self.metric, "samples": [list(s) for s in self.samples]}


@dataclass
class RunReport:
    duration_ns: int
    uptime: float
    uptime_threshold: float
    counts: dict
    detection: dict
    recovery: dict
    utilization: dict
    vla_overhead: dict
    messages: dict
    faults: list
    conservation: dict

    def to_json(self) -> dict:
        return {
            "duration_ns": self.duration_ns,
            "uptime": self.uptime,
            "uptime_threshold": self.uptime_threshold,
            "counts": self.counts,
            "detection": self.detection,
            "recovery": self.recovery,
            "utilization": self.utilization,
            "vla_overhead": self.vla_overhead,
            "messages": self.messages,
            "faults": self.faults,
            "conservation": self.conservation,
        }

    def to_bytes(self) -> bytes:
        """Canonical serialization — byte-identical across identical runs."""
        return json.dumps(self.to_json(), sort_keys=True, indent=2).encode() + b"\n"


class MetricsCollector:
    """Passive per-window sampler plus end-of-run aggregation.

    The host calls `on_flush(now)` at each window boundary and `finalize`
    once the run ends.  Message-tier counts arrive through `count_message`.
    """

    def __init__(self, farm, dataflow, faults=None,
                 window_ns: int = DEFAULT_WINDOW_NS,
                 uptime_threshold: float = DEFAULT_UPTIME_THRESHOLD):
        self.farm = farm
        self.dataflow = dataflow
        self.faults = faults
        self.window_ns = window_ns
        self.uptime_threshold = uptime_threshold
        self.series: dict[str, MetricSeries] = {}
        self.windows_total = 0
        self.windows_up = 0
        self.messages = {"worker_regional": 0, "regional_global": 0,
                         "directives_down": 0}
        self._last_flush = 0
        self._prev = {"generated": 0, "dropped": 0, "throttled": 0,
                      "busy_l1": 0, "busy_l23": 0}
        # Configured capacity baseline: workers serving at construction.
        self.baseline_l1 = sum(
            1 for w in dataflow.l1_workers
            if farm.nodes[w.node_id].status in _SERVING) or 1
        self.baseline_l23 = sum(
            1 for w in dataflow.l23_workers
            if farm.nodes[w.node_id].status in _SERVING) or 1

    # -- live sampling -------------------------------------------------------

    def count_message(self, tier: str, n: int = 1) -> None:
        self.messages[tier] = self.messages.get(tier, 0) + n

    def capacity_fraction(self, workers, baseline: int) -> float:
        """Effective capacity: serving-status, running workers weighted by
        the inverse of any service-time slowdown."""
        total = 0.0
        nodes = self.farm.nodes
        for w in workers:
            if w.proc_state == PROC_RUNNING \
                    and nodes[w.node_id].status in _SERVING:
                total += 1.0 / w.slowdown
        return total / baseline

    def _series(self, metric: str) -> MetricSeries:
        series = self.series.get(metric)
        if series is None:
            series = self.series[metric] = MetricSeries(metric)
        return series

    def on_flush(self, now: int) -> dict:
        """Close the window [last_flush, now); returns the snapshot it
        recorded (also served live by the control API)."""
        t0 = self._last_flush
        span = max(now - t0, 1)
        df = self.dataflow
        busy_l1 = sum(w.busy_ns for w in df.l1_workers)
        busy_l23 = sum(w.busy_ns for w in df.l23_workers)
        dropped = sum(df.drops.values())
        cap_l1 = self.capacity_fraction(df.l1_workers, self.baseline_l1)
        cap_l23 = self.capacity_fraction(df.l23_workers, self.baseline_l23)
        snapshot = {
            "t0": t0,
            "t1": now,
            "generated": df.generated - self._prev["generated"],
            "dropped": dropped - self._prev["dropped"],
            "throttled": df.throttled - self._prev["throttled"],
            "l1_util": (busy_l1 - self._prev["busy_l1"])
            / (span * len(df.l1_workers)),
            "l23_util": (busy_l23 - self._prev["busy_l23"])
            / (span * len(df.l23_workers)),
            "l1_capacity": cap_l1,
            "l23_capacity": cap_l23,
            "queue_l1_max": max((w.queue_occ for w in df.l1_workers), default=0),
            "queue_l23_max": max((w.queue_occ for w in df.l23_workers), default=0),
        }
        for key in ("generated", "dropped", "throttled",
                    "l1_util", "l23_util", "l1_capacity", "l23_capacity",
                    "queue_l1_max", "queue_l23_max"):
            self._series(key).append(t0, snapshot[key])
        self._prev = {"generated": df.generated, "dropped": dropped,
                      "throttled": df.throttled,
                      "busy_l1": busy_l1, "busy_l23": busy_l23}
        self._last_flush = now
        self.windows_total += 1
        if min(cap_l1, cap_l23) >= self.uptime_threshold:
            self.windows_up += 1
        return snapshot

    @property
    def uptime(self) -> float:
        if self.windows_total == 0:
            return 1.0
        return self.windows_up / self.windows_total

    # -- final report ------------------------------------------------------------

    def check_conservation(self) -> dict:
        generated, accounted = self.dataflow.conservation_terms()
        detail = self.dataflow.loss_accounts()
        if generated != accounted:
            raise ConservationViolation(generated, accounted, detail)
        return {"generated": generated, "accounted": accounted, "ok": True}

    def finalize(self, now: int) -> RunReport:
        conservation = self.check_conservation()
        df = self.dataflow
        duration = max(now, 1)
        detection_ns = []
        recovery_ns = []
        episodes = []
        if self.faults is not None:
            episodes = self.faults.episodes_json()
            for e in self.faults.episodes.values():
                if e.applied_at is None:
                    continue
                if e.detected_at is not None:
                    detection_ns.append(e.detected_at - e.applied_at)
                    if e.recovered_at is not None:
                        recovery_ns.append(e.recovered_at - e.applied_at)
        counts = df.loss_accounts()
        counts["completions_l1"] = df.completions_l1
        counts["completions_l23"] = df.completions_l23
        vla_l1 = sum(w.vla_busy_ns for w in df.l1_workers)
        vla_l23 = sum(w.vla_busy_ns for w in df.l23_workers)
        busy_l1 = sum(w.busy_ns for w in df.l1_workers)
        busy_l23 = sum(w.busy_ns for w in df.l23_workers)
        return RunReport(
            duration_ns=now,
            uptime=self.uptime,
            uptime_threshold=self.uptime_threshold,
            counts=counts,
            detection=latency_stats(detection_ns),
            recovery=latency_stats(recovery_ns),
            utilization={
                "l1": busy_l1 / (duration * len(df.l1_workers)),
                "l23": busy_l23 / (duration * len(df.l23_workers)),
            },
            vla_overhead={
                "l1": vla_l1 / (duration * len(df.l1_workers)),
                "l23": vla_l23 / (duration * len(df.l23_workers)),
            },
            messages=dict(self.messages),
            faults=episodes,
            conservation=conservation,
        )
