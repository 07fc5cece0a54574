"""Fault model and injection.  Scripted scenario faults and live injections
share one path: a validated spec becomes a kernel onset event (plus an end
event when the duration is finite), and each injection leaves an episode
record carrying onset/detection/recovery/clearance timestamps for the
latency metrics.

Clearing a fault removes the perturbation only.  A crashed process stays
crashed until the management plane restarts it — repair is recovery's job,
never the injector's.
"""

from __future__ import annotations

from dataclasses import dataclass

from .kernel import FAULT_END, FAULT_ONSET
from .topology import Farm, NodeKind, UnknownAddress, parse_address

FAULT_PROCESS_CRASH = "ProcessCrash"
FAULT_HANG = "Hang"
FAULT_LINK_FAILURE = "LinkFailure"
FAULT_OVERLOAD = "Overload"
FAULT_CPU_OVER_TEMP = "CpuOverTemp"
FAULT_IO_ERROR_BURST = "IoErrorBurst"
FAULT_BOARD_FAILURE = "BoardFailure"
FAULT_NODE_FAILURE = "NodeFailure"

FAULT_KINDS = frozenset({
    FAULT_PROCESS_CRASH, FAULT_HANG, FAULT_LINK_FAILURE, FAULT_OVERLOAD,
    FAULT_CPU_OVER_TEMP, FAULT_IO_ERROR_BURST, FAULT_BOARD_FAILURE,
    FAULT_NODE_FAILURE,
})

# Kinds whose damage outlives the fault itself: clearing them is meaningless,
# only recovery actions (restart/migrate/reassign) bring capacity back.
DESTRUCTIVE_KINDS = frozenset({FAULT_BOARD_FAILURE, FAULT_NODE_FAILURE})

# Kinds that hit a worker process (must target a WorkerDSP/WorkerPC).
_PROCESS_KINDS = frozenset({
    FAULT_PROCESS_CRASH, FAULT_HANG, FAULT_OVERLOAD, FAULT_CPU_OVER_TEMP,
    FAULT_IO_ERROR_BURST, FAULT_NODE_FAILURE,
})


class UnknownTarget(ValueError):
    pass


class UnknownFault(KeyError):
    pass


class NotClearable(RuntimeError):
    pass


class InvalidFault(ValueError):
    pass


@dataclass(frozen=True)
class FaultSpec:
    """One injection.  `target` is a node address string; for LinkFailure it
    names the child node of the failed parent-link.  `duration_ns` of None
    means permanent."""

    fault_id: str
    kind: str
    target: str
    onset_ns: int
    duration_ns: int | None = None
    factor: float = 2.0          # Overload service-time multiplier
    temperature: float = 95.0    # CpuOverTemp sensor reading
    rate: float = 10.0           # IoErrorBurst errors per second

    def validate(self) -> None:
        if self.kind not in FAULT_KINDS:
            raise InvalidFault(f"unknown fault kind {self.kind!r}")
        if self.onset_ns < 0:
            raise InvalidFault("onset must be >= 0")
        if self.duration_ns is not None and self.duration_ns <= 0:
            raise InvalidFault("duration must be positive (or omitted)")
        if self.kind == FAULT_OVERLOAD and self.factor <= 1.0:
            raise InvalidFault("overload factor must be > 1")
        if self.kind == FAULT_IO_ERROR_BURST and self.rate < 0:
            raise InvalidFault("io error rate must be >= 0")

    def to_json(self) -> dict:
        return {
            "fault_id": self.fault_id, "kind": self.kind,
            "target": self.target, "onset_ns": self.onset_ns,
            "duration_ns": self.duration_ns, "factor": self.factor,
            "temperature": self.temperature, "rate": self.rate,
        }


@dataclass
class FaultEpisode:
    """Lifecycle record of one injected fault."""

    spec: FaultSpec
    node_id: int                      # resolved primary target
    applied_at: int | None = None
    detected_at: int | None = None
    recovered_at: int | None = None
    cleared_at: int | None = None

    @property
    def active(self) -> bool:
        return self.applied_at is not None and self.cleared_at is None

    def to_json(self) -> dict:
        return {
            "spec": self.spec.to_json(),
            "node_id": self.node_id,
            "applied_at": self.applied_at,
            "detected_at": self.detected_at,
            "recovered_at": self.recovered_at,
            "cleared_at": self.cleared_at,
        }


@dataclass(frozen=True)
class RandomFaultConfig:
    """Poisson fault process: per-node failure rate with exponential MTTR.
    Zero rate degenerates to a fault-free run with an untouched RNG."""

    rate_per_node_per_s: float = 0.0
    mttr_mean_s: float = 20.0
    crash_weight: float = 0.7        # remainder are Hangs

    def validate(self) -> None:
        if self.rate_per_node_per_s < 0:
            raise InvalidFault("random fault rate must be >= 0")
        if self.mttr_mean_s <= 0:
            raise InvalidFault("MTTR mean must be > 0")
        if not 0.0 <= self.crash_weight <= 1.0:
            raise InvalidFault("crash weight must be in [0, 1]")


class FaultEngine:
    """Applies fault semantics to the farm + dataflow state and keeps the
    episode ledger.  `on_fault_event(phase, episode, now)` is an optional
    trace hook (phase in {"onset", "cleared"})."""

    def __init__(self, kernel, farm: Farm, dataflow, rng,
                 on_fault_event=None):
        self.kernel = kernel
        self.farm = farm
        self.dataflow = dataflow
        self.rng = rng
        self.on_fault_event = on_fault_event
        self.episodes: dict[str, FaultEpisode] = {}
        self.order: list[str] = []            # injection order for reporting
        self.dead_nodes: set[int] = set()     # hardware gone: sensors dead
        self.dead_boards: set[int] = set()
        self._saved: dict[str, float] = {}    # pre-fault sensor/slowdown values
        self._end_handles: dict[str, int] = {}
        self._auto_seq = 0
        self.random_config = RandomFaultConfig()
        self._random_nodes: list[int] = []

    # -- injection ----------------------------------------------------------

    def inject(self, spec: FaultSpec) -> FaultEpisode:
        """Validate and schedule one fault.  Scripted injection at load time
        and live injection through the control plane take the same path."""
        spec.validate()
        if spec.fault_id in self.episodes:
            raise InvalidFault(f"duplicate fault id {spec.fault_id!r}")
        if spec.onset_ns < self.kernel.now:
            raise InvalidFault(
                f"onset {spec.onset_ns} is in the past (now {self.kernel.now})")
        node_id = self._resolve_target(spec)
        episode = FaultEpisode(spec=spec, node_id=node_id)
        self.episodes[spec.fault_id] = episode
        self.order.append(spec.fault_id)
        self.kernel.schedule(spec.onset_ns, node_id, FAULT_ONSET,
                             (spec.fault_id,))
        return episode

    def _resolve_target(self, spec: FaultSpec) -> int:
        try:
            address = parse_address(spec.target)
            node = self.farm.node(address)
        except UnknownAddress:
            raise UnknownTarget(
                f"fault {spec.fault_id!r} targets unknown node {spec.target!r}"
            ) from None
        if spec.kind == FAULT_BOARD_FAILURE and node.kind is not NodeKind.BOARD:
            raise UnknownTarget(
                f"fault {spec.fault_id!r}: BoardFailure must target a board, "
                f"got {spec.target!r}")
        if spec.kind in _PROCESS_KINDS and node.kind not in (
                NodeKind.WORKER_DSP, NodeKind.WORKER_PC):
            raise UnknownTarget(
                f"fault {spec.fault_id!r}: {spec.kind} must target a worker, "
                f"got {spec.target!r}")
        return node.node_id

    # -- kernel event entry points -------------------------------------------

    def on_onset(self, fault_id: str, now: int) -> None:
        episode = self.episodes[fault_id]
        spec = episode.spec
        episode.applied_at = now
        self._apply(spec, episode.node_id, now)
        if spec.duration_ns is not None and spec.kind not in DESTRUCTIVE_KINDS:
            self._end_handles[fault_id] = self.kernel.schedule(
                now + spec.duration_ns, episode.node_id, FAULT_END, (fault_id,))
        if self.on_fault_event is not None:
            self.on_fault_event("onset", episode, now)
        if spec.fault_id.startswith("rnd-"):
            # Chain the node's next random failure for after this one ends.
            rest = spec.duration_ns if spec.duration_ns is not None else 0
            self._schedule_next_random(episode.node_id, now + rest)

    def on_end(self, fault_id: str, now: int) -> None:
        episode = self.episodes.get(fault_id)
        if episode is None or not episode.active:
            return
        self._end_handles.pop(fault_id, None)
        self._revert(episode, now)

    def clear(self, fault_id: str, now: int) -> FaultEpisode:
        """Operator-initiated clear.  Destructive kinds refuse: their damage
        is repaired by recovery actions, not by un-injecting."""
        episode = self.episodes.get(fault_id)
        if episode is None:
            raise UnknownFault(fault_id)
        if episode.spec.kind in DESTRUCTIVE_KINDS:
            raise NotClearable(
                f"{episode.spec.kind} is cleared only through recovery")
        if not episode.active:
            raise UnknownFault(f"fault {fault_id!r} is not active")
        handle = self._end_handles.pop(fault_id, None)
        if handle is not None:
            self.kernel.cancel(handle)
        self._revert(episode, now)
        return episode

    # -- semantics -------------------------------------------------------------

    def _apply(self, spec: FaultSpec, node_id: int, now: int) -> None:
        kind = spec.kind
        if kind == FAULT_PROCESS_CRASH:
            self.dataflow.crash_process(node_id, now)
        elif kind == FAULT_HANG:
            self.dataflow.hang_process(node_id, now)
        elif kind == FAULT_LINK_FAILURE:
            self.farm.nodes[node_id].link_up = False
        elif kind == FAULT_OVERLOAD:
            worker = self.dataflow.worker_of[node_id]
            self._saved[spec.fault_id] = worker.slowdown
            self.dataflow.set_slowdown(node_id, spec.factor)
        elif kind == FAULT_CPU_OVER_TEMP:
            worker = self.dataflow.worker_of[node_id]
            self._saved[spec.fault_id] = worker.cpu_temp
            worker.cpu_temp = spec.temperature
        elif kind == FAULT_IO_ERROR_BURST:
            self.dataflow.worker_of[node_id].io_error_rate = spec.rate
        elif kind == FAULT_NODE_FAILURE:
            self.dataflow.crash_process(node_id, now)
            self.dead_nodes.add(node_id)
        elif kind == FAULT_BOARD_FAILURE:
            self.farm.nodes[node_id].link_up = False
            self.dead_boards.add(node_id)
            for child in self.farm.children[node_id]:
                self.dead_nodes.add(child)
                if self.farm.nodes[child].kind is NodeKind.WORKER_DSP:
                    self.dataflow.crash_process(child, now)

    def _revert(self, episode: FaultEpisode, now: int) -> None:
        spec = episode.spec
        kind = spec.kind
        if kind == FAULT_LINK_FAILURE:
            self.farm.nodes[episode.node_id].link_up = True
        elif kind == FAULT_OVERLOAD:
            self.dataflow.set_slowdown(
                episode.node_id, self._saved.pop(spec.fault_id, 1.0))
        elif kind == FAULT_CPU_OVER_TEMP:
            worker = self.dataflow.worker_of[episode.node_id]
            worker.cpu_temp = self._saved.pop(spec.fault_id, worker.cpu_temp)
        elif kind == FAULT_IO_ERROR_BURST:
            self.dataflow.worker_of[episode.node_id].io_error_rate = 0.0
        # ProcessCrash / Hang: nothing to revert — the process stays down
        # until the management plane restarts it.
        episode.cleared_at = now
        if self.on_fault_event is not None:
            self.on_fault_event("cleared", episode, now)

    # -- latency stamping ---------------------------------------------------------

    def note_detected(self, node_id: int, now: int) -> FaultEpisode | None:
        """Called by the host when the management plane first flags this
        node; stamps the oldest unstamped episode for the node."""
        episode = self._find(node_id, lambda e: e.detected_at is None)
        if episode is not None:
            episode.detected_at = now
        return episode

    def note_recovered(self, node_id: int, now: int) -> FaultEpisode | None:
        episode = self._find(node_id, lambda e: e.recovered_at is None)
        if episode is not None:
            episode.recovered_at = now
        return episode

    def _find(self, node_id: int, pred) -> FaultEpisode | None:
        for fault_id in self.order:
            episode = self.episodes[fault_id]
            if episode.node_id == node_id and episode.applied_at is not None \
                    and pred(episode):
                return episode
        return None

    # -- random fault process ----------------------------------------------------

    def start_random_process(self, config: RandomFaultConfig,
                             node_ids: list[int]) -> int:
        """Arm the Poisson process over the given workers; returns how many
        first-failure events were scheduled (0 for a zero rate — and then
        the RNG is never drawn, keeping the trace identical to scripted)."""
        config.validate()
        self.random_config = config
        self._random_nodes = list(node_ids)
        if config.rate_per_node_per_s == 0.0 or not node_ids:
            return 0
        for node_id in node_ids:
            self._schedule_random_fault(node_id, self.kernel.now)
        return len(node_ids)

    def _schedule_random_fault(self, node_id: int, after_ns: int) -> None:
        config = self.random_config
        gap_s = self.rng.expovariate(config.rate_per_node_per_s)
        onset = after_ns + max(1, int(gap_s * 1e9))
        kind = FAULT_PROCESS_CRASH \
            if self.rng.random() < config.crash_weight else FAULT_HANG
        duration = max(1, int(self.rng.expovariate(1.0 / config.mttr_mean_s) * 1e9))
        self._auto_seq += 1
        spec = FaultSpec(
            fault_id=f"rnd-{self._auto_seq}",
            kind=kind,
            target=str(self.farm.nodes[node_id].address),
            onset_ns=onset,
            duration_ns=duration,
        )
        self.inject(spec)

    def _schedule_next_random(self, node_id: int, after_ns: int) -> None:
        if self.random_config.rate_per_node_per_s > 0.0 \
                and node_id in self._random_nodes:
            self._schedule_random_fault(node_id, after_ns)

    # -- reporting ------------------------------------------------------------------

    def episodes_json(self) -> list[dict]:
        return [self.episodes[fault_id].to_json() for fault_id in self.order]
