"""Crossing dataflow: generation at the detector comb, dispatch to L1
workers, L1/L2/L3 service and accept/reject decisions, and exact loss
accounting.

Crossings are deliberately not materialized as objects: a crossing's
identity is the monotone `generated` counter at its arrival, its state is
either a queue-occupancy increment, a worker's in-flight slot, or one unit
of the L1->L23 transit counter, and its fate is a counter increment.  This
keeps the per-event cost low enough to run desk-scale runs (7.6M
crossings per 100 s) in seconds while preserving the conservation
identity::

    generated = rejected(L1+L2+L3) + accepted(L3) + dropped(*) + throttled
                + in flight (queues + busy workers + transit)

which :mod:`farmsim.metrics` asserts at every flush.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from .kernel import MESSAGE_DELIVERY, SERVICE_COMPLETE, CROSSING_ARRIVAL, KERNEL_TARGET, Kernel
from .topology import Farm, NodeAddress, NodeKind, NodeStatus

# Process states (worker-local view of the ARMOR ProcessRecord machine).
PROC_RUNNING = 0
PROC_CRASHED = 1
PROC_HUNG = 2
PROC_RESTARTING = 3
PROC_MIGRATING = 4

PROC_STATE_NAMES = ("Running", "Crashed", "Hung", "Restarting", "Migrating")

# Drop stages.
DROP_L1_INPUT = "l1_input"
DROP_L23_INPUT = "l23_input"
DROP_IN_FLIGHT = "in_flight"      # in-service item lost to a crash/hang restart
DROP_TRANSIT = "transit"          # L1 accept blocked by a failed link
DROP_NODE_LOSS = "node_loss"      # queued work lost with a dead node
DROP_STAGES = (DROP_L1_INPUT, DROP_L23_INPUT, DROP_IN_FLIGHT, DROP_TRANSIT, DROP_NODE_LOSS)

# In-flight phases.
PHASE_IDLE = 0
PHASE_L1 = 1
PHASE_L2 = 2
PHASE_L3 = 3


class DistKind(enum.Enum):
    FIXED = "fixed"
    EXPONENTIAL = "exponential"
    LOGNORMAL = "lognormal"


@dataclass(frozen=True)
class LevelService:
    """Service-time model for one trigger level; draws truncate at 100x mean."""

    kind: DistKind
    mean_ns: int
    sigma: float = 1.0  # lognormal shape parameter

    def __post_init__(self):
        if self.mean_ns <= 0:
            raise ValueError("service mean must be > 0")

    def draw(self, rng) -> int:
        if self.kind is DistKind.FIXED:
            return self.mean_ns
        if self.kind is DistKind.EXPONENTIAL:
            value = rng.expovariate(1.0) * self.mean_ns
        else:
            # Scale a unit-mean lognormal so draws average mean_ns.
            value = rng.lognormvariate(-0.5 * self.sigma ** 2, self.sigma) * self.mean_ns
        cap = 100 * self.mean_ns
        value = int(value)
        if value > cap:
            return cap
        return value if value > 0 else 1


@dataclass(frozen=True)
class ServiceModel:
    l1: LevelService
    l2: LevelService
    l3: LevelService

    @staticmethod
    def desk_default() -> ServiceModel:
        # L1 mean 285 us targets rho = 285/(13.2*24) = 0.90 on the desk farm;
        # L2 13 ms and L3 130 ms are the level budgets.
        return ServiceModel(
            l1=LevelService(DistKind.EXPONENTIAL, 285_000),
            l2=LevelService(DistKind.EXPONENTIAL, 13_000_000),
            l3=LevelService(DistKind.EXPONENTIAL, 130_000_000),
        )


@dataclass(frozen=True)
class AcceptModel:
    p_accept_l1: float = 0.01
    p_accept_l2: float = 0.1
    p_accept_l3: float = 0.1

    def __post_init__(self):
        for name in ("p_accept_l1", "p_accept_l2", "p_accept_l3"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {p}")


class WorkerState:
    """Per-worker mutable state: queue occupancy, in-flight slot, process
    state, sensors.  One instance per WorkerDSP / WorkerPC node."""

    __slots__ = (
        "node_id", "level", "region", "board", "slot",
        "queue_occ", "phase", "started_at", "service_total", "completion",
        "proc_state", "slowdown", "busy_ns", "vla_busy_ns",
        "restart_count", "checkpoint_period", "resume_total", "resume_phase",
        "cpu_temp", "io_errors", "io_error_rate", "link_errors", "util_ewma",
    )

    def __init__(self, node_id: int, level: int, region: int, board: int, slot: int):
        self.node_id = node_id
        self.level = level              # 1 = L1 DSP, 2 = L2/3 PC
        self.region = region
        self.board = board
        self.slot = slot
        self.queue_occ = 0
        self.phase = PHASE_IDLE
        self.started_at = 0
        self.service_total = 0
        self.completion = None
        self.proc_state = PROC_RUNNING
        self.slowdown = 1.0
        self.busy_ns = 0
        self.vla_busy_ns = 0
        self.restart_count = 0
        self.checkpoint_period = 0      # 0 = checkpointing disabled
        self.resume_total = 0           # remaining service to resume after restart
        self.resume_phase = PHASE_IDLE
        self.cpu_temp = 60.0
        self.io_errors = 0.0
        self.io_error_rate = 0.0
        self.link_errors = 0
        self.util_ewma = 0.0

    @property
    def busy(self) -> bool:
        return self.phase != PHASE_IDLE


class BoardGroup:
    """Dispatch group: one L1 board's DSPs or one L23 region's PCs."""

    __slots__ = ("node_id", "workers", "live", "rr")

    def __init__(self, node_id: int, workers: list[WorkerState]):
        self.node_id = node_id
        self.workers = workers
        self.live = list(workers)   # dispatchable members (farm status based)
        self.rr = 0


class DataflowEngine:
    """Owns all dataflow state and the hot-path event handlers.

    The engine mutates worker process states only through the methods the
    fault and recovery plane calls (crash/hang/restart/migrate/...); the
    management modules never touch queue internals directly.
    """

    def __init__(self, kernel: Kernel, farm: Farm, rng, service: ServiceModel,
                 accept: AcceptModel, *, queue_capacity: int = 64,
                 crossing_interval_ns: int = 13_200, hop_latency_ns: int = 100_000,
                 transfer_latency_ns: int = 1_000_000, watchdog_factor: int = 10,
                 checkpoint_period_ns: int = 0, on_watchdog=None, on_item_lost=None):
        self.kernel = kernel
        self.farm = farm
        self.rng = rng
        self.service = service
        self.accept = accept
        self.capacity = queue_capacity
        self.interval = crossing_interval_ns
        self.hop_latency = hop_latency_ns
        self.transfer_latency = transfer_latency_ns
        self.watchdog_factor = watchdog_factor
        self.on_watchdog = on_watchdog          # callable(worker, now, severity)
        self.on_item_lost = on_item_lost        # callable(worker, stage) per lost item

        # Counters (read by metrics; never reset mid-run).
        self.generated = 0
        self.rejected_l1 = 0
        self.rejected_l2 = 0
        self.rejected_l3 = 0
        self.accepted_l3 = 0
        self.throttled = 0
        self.drops: dict[str, int] = {stage: 0 for stage in DROP_STAGES}
        self.transit = 0                # L1 accepts in flight toward L23
        self.completions_l1 = 0
        self.completions_l23 = 0

        # Generation state.
        self.generating = True
        self.until = 0
        self.throttle_keep = 1.0
        self._throttle_seen = 0
        self._throttle_admitted = 0
        self._next_arrival = None

        # Worker lookup by node id.
        self.worker_of: list[WorkerState | None] = [None] * len(farm.nodes)

        # L1 structure: boards in dispatch rotation, each a BoardGroup.
        self.boards: list[BoardGroup] = []
        self.l1_workers: list[WorkerState] = []
        # L23 structure: one BoardGroup per region.
        self.regions: list[BoardGroup] = []
        self.l23_workers: list[WorkerState] = []
        self._build(farm)

        self.live_boards: list[BoardGroup] = list(self.boards)
        self.live_regions: list[BoardGroup] = list(self.regions)
        self.board_rr = 0
        self.region_rr = 0

        # Deadlines per level (watchdog): 10x the level mean.
        self.deadline = {
            PHASE_L1: watchdog_factor * service.l1.mean_ns,
            PHASE_L2: watchdog_factor * service.l2.mean_ns,
            PHASE_L3: watchdog_factor * service.l3.mean_ns,
        }
        if checkpoint_period_ns:
            for w in self.l1_workers:
                w.checkpoint_period = checkpoint_period_ns
            for w in self.l23_workers:
                w.checkpoint_period = checkpoint_period_ns

    def _build(self, farm: Farm) -> None:
        cfg = farm.config
        for node in farm.nodes:
            if node.kind is NodeKind.BOARD:
                addr = node.address
                members = []
                for s in range(cfg.dsps_per_board):
                    wid = farm.id_of[NodeAddress(addr.branch, addr.region, addr.board, s)]
                    w = WorkerState(wid, 1, addr.region, addr.board, s)
                    self.worker_of[wid] = w
                    members.append(w)
                    self.l1_workers.append(w)
                self.boards.append(BoardGroup(node.node_id, members))
            elif node.kind is NodeKind.L23_REGIONAL_MANAGER:
                addr = node.address
                members = []
                total = cfg.pcs_per_region + cfg.spare_pcs_per_region
                for s in range(total):
                    wid = farm.id_of[NodeAddress(addr.branch, addr.region, None, s)]
                    w = WorkerState(wid, 2, addr.region, -1, s)
                    self.worker_of[wid] = w
                    members.append(w)
                    self.l23_workers.append(w)
                group = BoardGroup(node.node_id, members)
                group.live = [w for w in members
                              if farm.nodes[w.node_id].status is NodeStatus.IN_SERVICE]
                self.regions.append(group)

    # -- dispatch-list maintenance ------------------------------------------

    def refresh_group(self, group: BoardGroup) -> None:
        nodes = self.farm.nodes
        group.live = [w for w in group.workers
                      if nodes[w.node_id].status in (NodeStatus.IN_SERVICE, NodeStatus.REASSIGNED)]
        if group.rr >= len(group.live):
            group.rr = 0

    def refresh_node(self, node_id: int) -> None:
        """Re-evaluate dispatch membership after a farm status change."""
        worker = self.worker_of[node_id]
        if worker is None:
            # Board or region level: refresh the group rosters.
            node = self.farm.nodes[node_id]
            if node.kind is NodeKind.BOARD:
                self.live_boards = [g for g in self.boards
                                    if self.farm.nodes[g.node_id].status in
                                    (NodeStatus.IN_SERVICE, NodeStatus.REASSIGNED)]
                if self.board_rr >= len(self.live_boards):
                    self.board_rr = 0
            elif node.kind is NodeKind.L23_REGIONAL_MANAGER:
                self.live_regions = [g for g in self.regions
                                     if self.farm.nodes[g.node_id].status in
                                     (NodeStatus.IN_SERVICE, NodeStatus.REASSIGNED)]
                if self.region_rr >= len(self.live_regions):
                    self.region_rr = 0
            return
        if worker.level == 1:
            board = self.boards[worker.region * self.farm.config.boards_per_region + worker.board]
            self.refresh_group(board)
        else:
            self.refresh_group(self.regions[worker.region])

    # -- generation ----------------------------------------------------------

    def start_generation(self, until_ns: int) -> None:
        self.until = until_ns
        if until_ns > 0:
            self._next_arrival = self.kernel.schedule(0, KERNEL_TARGET, CROSSING_ARRIVAL)

    def pause_generation(self) -> None:
        self.generating = False
        if self._next_arrival is not None:
            self.kernel.cancel(self._next_arrival)
            self._next_arrival = None

    def resume_generation(self, now: int) -> None:
        """Restart the comb phase-aligned: next arrival at the first k*interval > now."""
        if self.generating:
            return
        self.generating = True
        next_t = ((now // self.interval) + 1) * self.interval
        if next_t < self.until:
            self._next_arrival = self.kernel.schedule(next_t, KERNEL_TARGET, CROSSING_ARRIVAL)

    def set_throttle(self, keep_fraction: float) -> None:
        self.throttle_keep = keep_fraction
        self._throttle_seen = 0
        self._throttle_admitted = 0

    def on_crossing(self, now: int) -> None:
        """CROSSING_ARRIVAL handler — the hottest path in the simulator."""
        next_t = now + self.interval
        if next_t < self.until and self.generating:
            self._next_arrival = self.kernel.schedule(next_t, KERNEL_TARGET, CROSSING_ARRIVAL)
        else:
            self._next_arrival = None
        self.generated += 1
        keep = self.throttle_keep
        if keep < 1.0:
            # Deterministic thinning: after s crossings exactly
            # floor(keep*s) have been admitted (no float drift).
            self._throttle_seen += 1
            if self._throttle_admitted >= int(keep * self._throttle_seen + 1e-9):
                self.throttled += 1
                return
            self._throttle_admitted += 1
        boards = self.live_boards
        if not boards:
            self.drops[DROP_L1_INPUT] += 1
            return
        i = self.board_rr
        if i >= len(boards):
            i = 0
        board = boards[i]
        self.board_rr = i + 1 if i + 1 < len(boards) else 0
        live = board.live
        if not live:
            self.drops[DROP_L1_INPUT] += 1
            return
        j = board.rr
        if j >= len(live):
            j = 0
        worker = live[j]
        board.rr = j + 1 if j + 1 < len(live) else 0
        if worker.phase == PHASE_IDLE and worker.proc_state in (PROC_RUNNING, PROC_HUNG):
            # A hung process stalls on the next item it pulls; starting the
            # stalled task gives the watchdog something to time out.
            self._start_service(worker, now, PHASE_L1)
        elif worker.queue_occ < self.capacity:
            worker.queue_occ += 1
        else:
            self.drops[DROP_L1_INPUT] += 1

    # -- service -------------------------------------------------------------

    def _start_service(self, worker: WorkerState, now: int, phase: int) -> None:
        worker.phase = phase
        worker.started_at = now
        if worker.proc_state == PROC_HUNG:
            # Stalled: occupy the slot, never complete; watchdog will fire.
            worker.service_total = 0
            worker.completion = None
            self.kernel.schedule(now + self.deadline[phase], worker.node_id,
                                 MESSAGE_DELIVERY, ("watchdog", now))
            return
        if worker.resume_total and worker.resume_phase == phase:
            total = worker.resume_total
            worker.resume_total = 0
        else:
            model = self.service.l1 if phase == PHASE_L1 else (
                self.service.l2 if phase == PHASE_L2 else self.service.l3)
            total = model.draw(self.rng)
        if worker.slowdown != 1.0:
            total = int(total * worker.slowdown)
        worker.service_total = total
        worker.completion = self.kernel.schedule(now + total, worker.node_id, SERVICE_COMPLETE)
        deadline = self.deadline[phase]
        if total > deadline:
            # Long-tail task: the watchdog fires (Warning) though the task
            # will still complete.
            self.kernel.schedule(now + deadline, worker.node_id,
                                 MESSAGE_DELIVERY, ("watchdog", now))

    def _pull_next(self, worker: WorkerState, now: int) -> None:
        if worker.resume_total:
            self._start_service(worker, now, worker.resume_phase)
        elif worker.queue_occ > 0:
            worker.queue_occ -= 1
            self._start_service(worker, now, PHASE_L1 if worker.level == 1 else PHASE_L2)
        else:
            worker.phase = PHASE_IDLE
            worker.completion = None

    def on_service_complete(self, node_id: int, now: int) -> None:
        worker = self.worker_of[node_id]
        worker.busy_ns += worker.service_total
        worker.completion = None
        phase = worker.phase
        if phase == PHASE_L1:
            self.completions_l1 += 1
            if self.rng.random() < self.accept.p_accept_l1:
                self._forward_to_l23(worker, now)
            else:
                self.rejected_l1 += 1
            self._pull_next(worker, now)
        elif phase == PHASE_L2:
            self.completions_l23 += 1
            if self.rng.random() < self.accept.p_accept_l2:
                self._start_service(worker, now, PHASE_L3)
            else:
                self.rejected_l2 += 1
                self._pull_next(worker, now)
        else:
            self.completions_l23 += 1
            if self.rng.random() < self.accept.p_accept_l3:
                self.accepted_l3 += 1
            else:
                self.rejected_l3 += 1
            self._pull_next(worker, now)

    def _forward_to_l23(self, src: WorkerState, now: int) -> None:
        nodes = self.farm.nodes
        board_node = self.boards[src.region * self.farm.config.boards_per_region + src.board]
        if not nodes[board_node.node_id].link_up:
            self.drops[DROP_TRANSIT] += 1
            return
        regions = self.live_regions
        if not regions:
            self.drops[DROP_TRANSIT] += 1
            return
        i = self.region_rr
        if i >= len(regions):
            i = 0
        region = regions[i]
        self.region_rr = i + 1 if i + 1 < len(regions) else 0
        if not nodes[region.node_id].link_up:
            self.drops[DROP_TRANSIT] += 1
            return
        self.transit += 1
        self.kernel.schedule(now + self.transfer_latency, region.node_id,
                             MESSAGE_DELIVERY, ("xing",))

    def on_l23_arrival(self, region_node_id: int, now: int) -> None:
        self.transit -= 1
        region = self.regions[self.farm.nodes[region_node_id].address.region]
        live = region.live
        if not live:
            self.drops[DROP_L23_INPUT] += 1
            return
        j = region.rr
        if j >= len(live):
            j = 0
        worker = live[j]
        region.rr = j + 1 if j + 1 < len(live) else 0
        if worker.phase == PHASE_IDLE and worker.proc_state in (PROC_RUNNING, PROC_HUNG):
            self._start_service(worker, now, PHASE_L2)
        elif worker.queue_occ < self.capacity:
            worker.queue_occ += 1
        else:
            self.drops[DROP_L23_INPUT] += 1

    def on_watchdog_fires(self, node_id: int, started_at: int, now: int) -> None:
        """Lazy watchdog deadline: report only if the same task is still in
        flight (Fatal if the process hung, Warning for a long tail)."""
        worker = self.worker_of[node_id]
        if worker.phase == PHASE_IDLE or worker.started_at != started_at:
            return
        if self.on_watchdog is not None:
            severity = "Fatal" if worker.proc_state == PROC_HUNG else "Warning"
            self.on_watchdog(worker, now, severity)

    # -- fault/recovery plane entry points ------------------------------------

    def _abort_in_flight(self, worker: WorkerState, now: int, *, keep_checkpoint: bool) -> None:
        """Stop current service.  The item is lost (counted) unless a
        checkpoint exists and keep_checkpoint is set, in which case the
        remaining service resumes after restart."""
        if worker.phase == PHASE_IDLE:
            return
        progressed = worker.completion is not None
        if progressed:
            self.kernel.cancel(worker.completion)
            worker.completion = None
            worker.busy_ns += now - worker.started_at
        elapsed = now - worker.started_at
        # Checkpoints credit only real progress: a task stalled by a hang
        # since its start has no trustworthy state to resume from.
        if (keep_checkpoint and progressed and worker.checkpoint_period
                and worker.service_total and elapsed >= worker.checkpoint_period):
            done = (elapsed // worker.checkpoint_period) * worker.checkpoint_period
            worker.resume_total = max(worker.service_total - done, 1)
            worker.resume_phase = worker.phase
        else:
            self.drops[DROP_IN_FLIGHT] += 1
            if self.on_item_lost is not None:
                self.on_item_lost(worker, DROP_IN_FLIGHT)
        worker.phase = PHASE_IDLE
        worker.service_total = 0

    def crash_process(self, node_id: int, now: int) -> None:
        worker = self.worker_of[node_id]
        if worker.proc_state == PROC_CRASHED:
            return
        self._abort_in_flight(worker, now, keep_checkpoint=True)
        worker.proc_state = PROC_CRASHED

    def hang_process(self, node_id: int, now: int) -> None:
        worker = self.worker_of[node_id]
        if worker.proc_state != PROC_RUNNING:
            return
        worker.proc_state = PROC_HUNG
        if worker.phase != PHASE_IDLE:
            if worker.completion is not None:
                self.kernel.cancel(worker.completion)
                worker.completion = None
            worker.busy_ns += now - worker.started_at
            deadline = worker.started_at + self.deadline[worker.phase]
            self.kernel.schedule(max(now, deadline), worker.node_id,
                                 MESSAGE_DELIVERY, ("watchdog", worker.started_at))

    def begin_restart(self, node_id: int, now: int) -> None:
        worker = self.worker_of[node_id]
        # A hung task that never checkpointed is lost at restart.
        self._abort_in_flight(worker, now, keep_checkpoint=True)
        worker.proc_state = PROC_RESTARTING

    def finish_restart(self, node_id: int, now: int) -> None:
        worker = self.worker_of[node_id]
        worker.proc_state = PROC_RUNNING
        worker.restart_count += 1
        self._pull_next(worker, now)

    def drop_queue(self, node_id: int) -> int:
        """Node death: its queued work is gone.  Returns the count dropped."""
        worker = self.worker_of[node_id]
        lost = worker.queue_occ
        worker.queue_occ = 0
        if lost:
            self.drops[DROP_NODE_LOSS] += lost
        return lost

    def redispatch_queue(self, node_id: int, now: int) -> int:
        """Alive-source migration: move queued work back through dispatch."""
        worker = self.worker_of[node_id]
        moved = worker.queue_occ
        worker.queue_occ = 0
        for _ in range(moved):
            if worker.level == 1:
                self._redispatch_one_l1(now)
            else:
                self._redispatch_one_l23(worker.region, now)
        return moved

    def _redispatch_one_l1(self, now: int) -> None:
        boards = self.live_boards
        if not boards:
            self.drops[DROP_L1_INPUT] += 1
            return
        i = self.board_rr
        if i >= len(boards):
            i = 0
        board = boards[i]
        self.board_rr = i + 1 if i + 1 < len(boards) else 0
        live = board.live
        if not live:
            self.drops[DROP_L1_INPUT] += 1
            return
        j = board.rr
        if j >= len(live):
            j = 0
        worker = live[j]
        board.rr = j + 1 if j + 1 < len(live) else 0
        if worker.phase == PHASE_IDLE and worker.proc_state == PROC_RUNNING:
            self._start_service(worker, now, PHASE_L1)
        elif worker.queue_occ < self.capacity:
            worker.queue_occ += 1
        else:
            self.drops[DROP_L1_INPUT] += 1

    def _redispatch_one_l23(self, region_idx: int, now: int) -> None:
        region = self.regions[region_idx]
        live = region.live
        if not live:
            self.drops[DROP_L23_INPUT] += 1
            return
        j = region.rr
        if j >= len(live):
            j = 0
        worker = live[j]
        region.rr = j + 1 if j + 1 < len(live) else 0
        if worker.phase == PHASE_IDLE and worker.proc_state == PROC_RUNNING:
            self._start_service(worker, now, PHASE_L2)
        elif worker.queue_occ < self.capacity:
            worker.queue_occ += 1
        else:
            self.drops[DROP_L23_INPUT] += 1

    def set_slowdown(self, node_id: int, factor: float) -> None:
        self.worker_of[node_id].slowdown = factor

    # -- accounting ------------------------------------------------------------

    def in_flight_total(self) -> int:
        """Deep scan: queued + in-service + transit items."""
        total = self.transit
        for w in self.l1_workers:
            total += w.queue_occ + (1 if w.phase != PHASE_IDLE else 0) + (1 if w.resume_total else 0)
        for w in self.l23_workers:
            total += w.queue_occ + (1 if w.phase != PHASE_IDLE else 0) + (1 if w.resume_total else 0)
        return total

    def loss_accounts(self) -> dict:
        dropped = dict(self.drops)
        total_dropped = sum(dropped.values())
        denom = self.generated if self.generated else 1
        return {
            "generated": self.generated,
            "rejected": {"l1": self.rejected_l1, "l2": self.rejected_l2, "l3": self.rejected_l3},
            "accepted_l3": self.accepted_l3,
            "throttled": self.throttled,
            "dropped": dropped,
            "dropped_total": total_dropped,
            "drop_fraction": total_dropped / denom,
        }

    def conservation_terms(self) -> tuple[int, int]:
        """(generated, sum of all fates + in-flight) — equal iff conserved."""
        accounted = (self.rejected_l1 + self.rejected_l2 + self.rejected_l3
                     + self.accepted_l3 + self.throttled
                     + sum(self.drops.values()) + self.in_flight_total())
        return self.generated, accounted
