import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from farmsim.dataflow import (
    DROP_IN_FLIGHT,
    DROP_L1_INPUT,
    AcceptModel,
    DataflowEngine,
    DistKind,
    LevelService,
    ServiceModel,
)
from farmsim.kernel import CROSSING_ARRIVAL, MESSAGE_DELIVERY, SERVICE_COMPLETE, Kernel
from farmsim.topology import FarmConfig, NodeStatus, build_farm


def fixed_model(l1_ns=1, l2_ns=1, l3_ns=1):
    return ServiceModel(
        l1=LevelService(DistKind.FIXED, l1_ns),
        l2=LevelService(DistKind.FIXED, l2_ns),
        l3=LevelService(DistKind.FIXED, l3_ns),
    )


def make_engine(cfg=FarmConfig(1, 1, 1, 1, 1), *, service=None, accept=None,
                interval=132, seed=1, **kw):
    farm = build_farm(cfg)
    kernel = Kernel()
    engine = DataflowEngine(
        kernel, farm, random.Random(seed),
        service or fixed_model(),
        accept or AcceptModel(0.0, 0.0, 0.0),
        crossing_interval_ns=interval, **kw,
    )

    def handler(now, seq, target, tag, payload):
        if tag == SERVICE_COMPLETE:
            engine.on_service_complete(target, now)
        elif tag == CROSSING_ARRIVAL:
            engine.on_crossing(now)
        elif tag == MESSAGE_DELIVERY:
            if payload[0] == "xing":
                engine.on_l23_arrival(target, now)
            elif payload[0] == "watchdog":
                engine.on_watchdog_fires(target, payload[1], now)

    kernel.handler = handler
    return farm, kernel, engine


def test_comb_count_ten_crossings():
    farm, kernel, engine = make_engine(interval=132)
    engine.start_generation(1320)
    kernel.run_until(1320)
    assert engine.generated == 10


def test_comb_count_one_second_desk_spacing():
    # Oracle: number of k >= 0 with k*13200 < 1e9, i.e. ceil(1e9/13200).
    expected = -(-1_000_000_000 // 13_200)
    assert expected == 75_758
    farm, kernel, engine = make_engine(interval=13_200)
    engine.start_generation(1_000_000_000)
    kernel.run_until(1_000_000_000)
    assert engine.generated == expected


def test_round_robin_over_boards():
    # Two boards, one DSP each, service far longer than four arrivals:
    # crossings 0,1,2,3 land on boards 0,1,0,1.
    farm, kernel, engine = make_engine(
        FarmConfig(1, 2, 1, 1, 1), service=fixed_model(l1_ns=10_000_000), interval=132)
    engine.start_generation(132 * 4)
    kernel.run_until(132 * 4)
    d0, d1 = engine.l1_workers
    assert d0.busy and d1.busy
    assert d0.queue_occ == 1 and d1.queue_occ == 1


def test_queue_overflow_drop_point():
    # One DSP, B=64, service >> interval: arrival 1 enters service, 2..65
    # fill the queue to 64, and arrival 66 is the first drop.
    farm, kernel, engine = make_engine(
        service=fixed_model(l1_ns=10_000_000_000), interval=100, queue_capacity=64)
    engine.start_generation(100 * 66)
    kernel.run_until(100 * 65 - 50)     # arrivals k=0..64 delivered
    assert engine.generated == 65
    assert engine.drops[DROP_L1_INPUT] == 0
    assert engine.l1_workers[0].queue_occ == 64
    kernel.run_until(100 * 66)          # arrival k=65 is the first drop
    assert engine.generated == 66
    assert engine.drops[DROP_L1_INPUT] == 1


def test_out_of_service_board_skipped():
    farm, kernel, engine = make_engine(
        FarmConfig(1, 2, 1, 1, 1), service=fixed_model(l1_ns=10_000_000), interval=100)
    board0 = engine.boards[0].node_id
    farm.nodes[board0].status = NodeStatus.OUT_OF_SERVICE
    engine.refresh_node(board0)
    engine.start_generation(400)
    kernel.run_until(400)
    d0, d1 = engine.l1_workers
    assert not d0.busy and d0.queue_occ == 0
    assert d1.busy and d1.queue_occ == 3


def test_reject_all_l1_nothing_reaches_l23():
    farm, kernel, engine = make_engine(
        accept=AcceptModel(0.0, 0.0, 0.0), service=fixed_model(l1_ns=10), interval=132)
    engine.start_generation(13_200)
    kernel.run_until(13_200)
    assert engine.rejected_l1 == engine.generated == 100
    assert engine.transit == 0 and engine.completions_l23 == 0


def test_rate_matched_single_dsp_saturates_without_loss():
    # p1=1, fixed 330 us service, 330 us spacing: steady state, zero drops,
    # utilization exactly 1.0 over the generation horizon.
    duration = 330_000 * 100
    farm, kernel, engine = make_engine(
        FarmConfig(1, 1, 1, 1, 1), accept=AcceptModel(1.0, 0.0, 0.0),
        service=fixed_model(l1_ns=330_000, l2_ns=10), interval=330_000)
    engine.start_generation(duration)
    kernel.run_until(duration)
    assert engine.drops[DROP_L1_INPUT] == 0
    assert engine.l1_workers[0].busy_ns == duration
    assert engine.completions_l1 == 100


def test_desk_utilization_near_rho():
    # rho = 285/(13.2*24) = 0.8996; measured busy fraction within +-0.02.
    duration = 2_000_000_000
    farm, kernel, engine = make_engine(
        FarmConfig(1, 6, 4, 1, 25),
        service=ServiceModel(
            l1=LevelService(DistKind.EXPONENTIAL, 285_000),
            l2=LevelService(DistKind.EXPONENTIAL, 13_000_000),
            l3=LevelService(DistKind.EXPONENTIAL, 130_000_000),
        ),
        accept=AcceptModel(0.01, 0.1, 0.1), interval=13_200, seed=7)
    engine.start_generation(duration)
    kernel.run_until(duration)
    busy = sum(w.busy_ns for w in engine.l1_workers)
    rho = busy / (24 * duration)
    assert abs(rho - 285 / (13.2 * 24)) < 0.02
    generated, accounted = engine.conservation_terms()
    assert generated == accounted


def test_overload_localizes_drops_to_slowed_dsp():
    # 1 board x 4 DSPs, interval 1 us -> per-DSP spacing 4 us; fixed service
    # 3.6 us (rho 0.9).  Slowing DSP0 by 2x makes its rho_eff = 1.8.
    # Hand count at t = 1 ms: dsp0 receives crossings k=0,4,...,996 (250);
    # completes floor(1e6/7200) = 138; backlog 112 = 1 in service + 64
    # queued + 47 dropped.  Siblings stay at rho 0.9 with tiny queues.
    farm, kernel, engine = make_engine(
        FarmConfig(1, 1, 4, 1, 1), service=fixed_model(l1_ns=3_600), interval=1_000)
    engine.set_slowdown(engine.l1_workers[0].node_id, 2.0)
    engine.start_generation(1_000_000)
    kernel.run_until(1_000_000)
    d0 = engine.l1_workers[0]
    assert d0.queue_occ == 64
    assert engine.drops[DROP_L1_INPUT] == 47
    for sibling in engine.l1_workers[1:]:
        assert sibling.queue_occ <= 1


def test_all_workers_dead_post_kill_crossings_drop():
    farm, kernel, engine = make_engine(
        FarmConfig(1, 1, 2, 1, 1), service=fixed_model(l1_ns=10_000_000_000),
        interval=100, queue_capacity=4)
    engine.start_generation(100_000)
    kernel.run_until(1_000)
    for w in engine.l1_workers:
        engine.crash_process(w.node_id, 1_000)
    kernel.run_until(2_000)   # queues (2 x 4) fill
    drops_then = engine.drops[DROP_L1_INPUT]
    gen_then = engine.generated
    kernel.run_until(100_000)
    assert engine.drops[DROP_L1_INPUT] - drops_then == engine.generated - gen_then
    generated, accounted = engine.conservation_terms()
    assert generated == accounted


def test_throttle_deterministic_thinning():
    farm, kernel, engine = make_engine(service=fixed_model(l1_ns=1), interval=100)
    engine.set_throttle(0.6)
    engine.start_generation(100 * 100)
    kernel.run_until(100 * 100)
    assert engine.generated == 100
    assert engine.throttled == 40
    assert engine.rejected_l1 == 60


def test_crash_without_checkpoint_loses_in_flight():
    farm, kernel, engine = make_engine(service=fixed_model(l1_ns=1_000), interval=10_000)
    engine.start_generation(5_000)
    kernel.run_until(600)
    worker = engine.l1_workers[0]
    assert worker.busy
    engine.crash_process(worker.node_id, 600)
    assert engine.drops[DROP_IN_FLIGHT] == 1
    assert not worker.busy


def test_crash_with_checkpoint_resumes_remaining_service():
    farm, kernel, engine = make_engine(
        service=fixed_model(l1_ns=1_000), interval=100_000, checkpoint_period_ns=500)
    engine.start_generation(50_000)
    kernel.run_until(600)
    worker = engine.l1_workers[0]
    engine.crash_process(worker.node_id, 600)
    assert engine.drops[DROP_IN_FLIGHT] == 0
    assert worker.resume_total == 500     # checkpoint at 500 of 1000
    engine.begin_restart(worker.node_id, 700)
    engine.finish_restart(worker.node_id, 900)
    kernel.run_until(1_400)               # resumes 500 ns: completes at 1400
    assert engine.completions_l1 == 1
    assert engine.rejected_l1 == 1
    generated, accounted = engine.conservation_terms()
    assert generated == accounted


def test_watchdog_fatal_on_hang_warning_on_long_tail():
    fired = []
    farm, kernel, engine = make_engine(
        service=fixed_model(l1_ns=1_000), interval=100_000, watchdog_factor=10)
    engine.on_watchdog = lambda w, now, sev: fired.append((now, sev))
    engine.start_generation(100_000)
    kernel.run_until(100)
    worker = engine.l1_workers[0]
    engine.hang_process(worker.node_id, 100)
    kernel.run_until(60_000)
    # Task started at 0, deadline 10x1000 ns -> Fatal at 10_000.
    assert fired == [(10_000, "Fatal")]

    fired.clear()
    farm, kernel, engine = make_engine(
        service=fixed_model(l1_ns=1_000), interval=100_000, watchdog_factor=10)
    engine.on_watchdog = lambda w, now, sev: fired.append((now, sev))
    engine.set_slowdown(engine.l1_workers[0].node_id, 15.0)   # service 15_000 > deadline
    engine.start_generation(100_000)
    kernel.run_until(20_000)
    assert fired == [(10_000, "Warning")]
    assert engine.completions_l1 == 1      # long tail still completes


def test_watchdog_quiet_for_normal_tasks_and_crashes():
    fired = []
    farm, kernel, engine = make_engine(service=fixed_model(l1_ns=1_000), interval=2_000)
    engine.on_watchdog = lambda w, now, sev: fired.append(sev)
    engine.start_generation(20_000)
    kernel.run_until(5_000)
    engine.crash_process(engine.l1_workers[0].node_id, 5_000)
    kernel.run_until(200_000)
    assert fired == []


def test_service_model_truncates_at_100x_mean():
    rng = random.Random(3)
    model = LevelService(DistKind.LOGNORMAL, 1_000, sigma=4.0)
    draws = [model.draw(rng) for _ in range(20_000)]
    assert max(draws) <= 100_000
    assert max(draws) == 100_000      # heavy tail actually hits the cap
    assert LevelService(DistKind.FIXED, 777).draw(rng) == 777


def test_exponential_mean_close():
    rng = random.Random(5)
    model = LevelService(DistKind.EXPONENTIAL, 10_000)
    n = 50_000
    mean = sum(model.draw(rng) for _ in range(n)) / n
    assert abs(mean - 10_000) < 200


def test_accept_model_validation():
    with pytest.raises(ValueError):
        AcceptModel(1.5, 0.1, 0.1)
    with pytest.raises(ValueError):
        LevelService(DistKind.FIXED, 0)


@settings(max_examples=20, deadline=None)
@given(
    p1=st.floats(0.0, 1.0), p2=st.floats(0.0, 1.0), p3=st.floats(0.0, 1.0),
    seed=st.integers(0, 10_000),
)
def test_conservation_under_random_accept_models(p1, p2, p3, seed):
    farm, kernel, engine = make_engine(
        FarmConfig(1, 2, 2, 1, 2),
        service=ServiceModel(
            l1=LevelService(DistKind.EXPONENTIAL, 400),
            l2=LevelService(DistKind.EXPONENTIAL, 900),
            l3=LevelService(DistKind.EXPONENTIAL, 900),
        ),
        accept=AcceptModel(p1, p2, p3), interval=100, seed=seed)
    engine.start_generation(200_000)
    kernel.run_until(200_000)
    generated, accounted = engine.conservation_terms()
    assert generated == accounted
    # Fate uniqueness in aggregate: every generated crossing is in exactly
    # one bucket, so the sum can neither over- nor under-count.
    assert generated == 2_000
