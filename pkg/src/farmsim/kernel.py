"""Deterministic discrete-event core: virtual clock, ordered event queue, seeded streams.

Time is integer nanoseconds from run start. Delivery order is total: ascending
(fire_at, seq) where seq is the insertion counter, so two runs that schedule the
same events in the same order deliver them identically.
"""
from __future__ import annotations

import heapq
import random
import time
from dataclasses import dataclass
from typing import Callable

# Event payload tags, ordered roughly by delivery frequency.
SERVICE_COMPLETE = 0
CROSSING_ARRIVAL = 1
VLA_SAMPLE_TICK = 2
MESSAGE_DELIVERY = 3
HEARTBEAT_TICK = 4
METRIC_FLUSH = 5
FAULT_ONSET = 6
FAULT_END = 7
CONTROL_COMMAND = 8

TAG_NAMES = (
    "service_complete",
    "crossing_arrival",
    "vla_sample_tick",
    "message_delivery",
    "heartbeat_tick",
    "metric_flush",
    "fault_onset",
    "fault_end",
    "control_command",
)

# Target id for events not addressed to a farm node (generator, fault injector, ...).
KERNEL_TARGET = -1

MAX_ZERO_DELAY_DEPTH = 10_000


class SchedulingInPast(Exception):
    """schedule() called with a fire time earlier than the current clock."""


class ZeroDelayLivelock(Exception):
    """A same-time event chain exceeded MAX_ZERO_DELAY_DEPTH."""


class HandlerPanic(Exception):
    """An event handler raised; carries the offending event's target and tag."""

    def __init__(self, target: int, tag: int, cause: BaseException):
        super().__init__(f"handler failed for target={target} kind={TAG_NAMES[tag]}: {cause!r}")
        self.target = target
        self.tag = tag


@dataclass
class KernelStats:
    events_delivered: int
    end_time: int
    wall_seconds: float


class RngStreams:
    """Named deterministic random streams.

    Each subsystem draws from its own stream, so adding draws in one subsystem
    never perturbs another. Same (seed, name, draw sequence) yields identical
    values on every platform: string seeding hashes via SHA-512 in CPython.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self._streams: dict[str, random.Random] = {}

    def stream(self, name: str) -> random.Random:
        rng = self._streams.get(name)
        if rng is None:
            rng = self._streams[name] = random.Random(f"{self.seed}/{name}")
        return rng


class Kernel:
    """Single-threaded event loop owning the virtual clock.

    ``handler(now, seq, target, tag, payload)`` is invoked for every delivered
    event. All simulation state must be owned by that handler's world; external
    commands enter only between events via run-loop hooks.
    """

    def __init__(
        self,
        handler: Callable[[int, int, int, int, tuple], None] | None = None,
        trace_sink=None,
        target_name: Callable[[int], str] | None = None,
        summarize: Callable[[int, tuple], str] | None = None,
    ):
        self.now: int = 0
        self.handler = handler
        self.trace_sink = trace_sink
        self.target_name = target_name
        self.summarize = summarize
        self.events_delivered = 0
        self.last_delivered_seq = -1
        self._heap: list[tuple[int, int, int, int, tuple]] = []
        self._alive: set[int] = set()
        self._seq = 0
        self._zero_depth: dict[int, int] = {}
        self._current_depth = 0
        self._in_handler = False

    def schedule(self, at: int, target: int, tag: int, payload: tuple = ()) -> int:
        """Queue an event for delivery at time ``at``; returns a cancel handle."""
        if at < self.now:
            raise SchedulingInPast(f"schedule at t={at} but clock is {self.now}")
        seq = self._seq
        self._seq = seq + 1
        if self._in_handler and at == self.now:
            depth = self._current_depth + 1
            if depth > MAX_ZERO_DELAY_DEPTH:
                raise ZeroDelayLivelock(
                    f"zero-delay chain exceeded {MAX_ZERO_DELAY_DEPTH} events "
                    f"at t={self.now} (kind={TAG_NAMES[tag]})"
                )
            self._zero_depth[seq] = depth
        heapq.heappush(self._heap, (at, seq, target, tag, payload))
        self._alive.add(seq)
        return seq

    def cancel(self, handle: int) -> bool:
        """Remove a pending event. False if it already fired or was cancelled."""
        if handle in self._alive:
            self._alive.remove(handle)
            return True
        return False

    def pending(self) -> int:
        return len(self._alive)

    def run_until(self, t_end: int, after_event: Callable[[int], None] | None = None) -> KernelStats:
        """Deliver every event with fire_at <= t_end in (fire_at, seq) order.

        The clock ends at max(now, t_end). ``after_event(seq)`` runs between
        events; it is the only place external state may be folded in.
        """
        wall_start = time.perf_counter()
        delivered_before = self.events_delivered
        heap = self._heap
        alive = self._alive
        pop = heapq.heappop
        handler = self.handler
        sink = self.trace_sink
        write = sink.write if sink is not None else None
        name_of = self.target_name
        summarize = self.summarize
        zero_depth = self._zero_depth
        delivered = self.events_delivered
        last_seq = self.last_delivered_seq
        self._in_handler = True
        try:
            while heap and heap[0][0] <= t_end:
                at, seq, target, tag, payload = pop(heap)
                try:
                    alive.remove(seq)
                except KeyError:
                    zero_depth.pop(seq, None)
                    continue  # cancelled
                self.now = at
                self._current_depth = zero_depth.pop(seq, 0) if zero_depth else 0
                try:
                    handler(at, seq, target, tag, payload)
                except Exception as exc:
                    if isinstance(exc, (ZeroDelayLivelock, SchedulingInPast, HandlerPanic)):
                        raise
                    raise HandlerPanic(target, tag, exc) from exc
                delivered += 1
                last_seq = seq
                if write is not None:
                    name = name_of(target) if name_of else str(target)
                    summary = summarize(tag, payload) if summarize else ""
                    write(
                        '{"t":%d,"seq":%d,"target":"%s","kind":"%s","summary":"%s"}\n'
                        % (at, seq, name, TAG_NAMES[tag], summary)
                    )
                if after_event is not None:
                    after_event(seq)
        finally:
            self._in_handler = False
            self.events_delivered = delivered
            self.last_delivered_seq = last_seq
        if t_end > self.now:
            self.now = t_end
        return KernelStats(
            events_delivered=delivered - delivered_before,
            end_time=self.now,
            wall_seconds=time.perf_counter() - wall_start,
        )

    def next_event_time(self) -> int | None:
        """Fire time of the earliest pending event, skipping cancelled entries."""
        heap = self._heap
        alive = self._alive
        while heap:
            entry = heap[0]
            if entry[1] in alive:
                return entry[0]
            heapq.heappop(heap)
            self._zero_depth.pop(entry[1], None)
        return None
