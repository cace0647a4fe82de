import json

import pytest

from memsim.core.errors import SimulationError
from memsim.hardware.machine import (
    ActorFault, ActorKind, ActorSpec, BudgetExhausted, Machine, PagemapDenied, PerfCounters, Schedule, run,
)
from memsim.hardware.memory import PAGE_SIZE
from memsim.schemas.machine import DedupConfig, NoiseConfig


def pausing(steps: int, log: list | None = None, name: str = ""):
    def program(cpu):
        for _ in range(steps):
            if log is not None:
                log.append(name)
            cpu.pause()
            yield
    return program


def test_llc_counters(cpu):
    vaddr = cpu.alloc(PAGE_SIZE)

    cpu.read(vaddr)
    cpu.read(vaddr)

    counters = cpu.counters
    assert counters.cache_references == 1
    assert counters.cache_misses == 1
    assert counters.l1d_rm == 1
    assert counters.instructions == 3


def test_llc_hit_counts_reference_only(machine, cpu):
    vaddr = cpu.alloc(PAGE_SIZE)
    cpu.read(vaddr)
    machine.caches.demote(cpu.pagemap(vaddr), cpu.core)

    cpu.read(vaddr)

    assert cpu.counters.cache_references == 2
    assert cpu.counters.cache_misses == 1


def test_itlb_counts_start_and_code_pages(machine):
    def program(cpu):
        cpu.execute(cpu.actor.code_pages[0])
        cpu.execute(cpu.actor.code_pages[0] + 64)
        cpu.execute(cpu.actor.code_pages[1])
        yield

    actor = machine.spawn("victim", program, ActorKind.VICTIM, code_pages=2)
    machine.run()

    assert actor.counters.itlb_ra == 3


def test_itlb_counts_timer_ticks(machine, cpu):
    cpu.pause(machine.config.timer_period)

    assert cpu.counters.itlb_ra == 2


def test_itlb_counts_preemption_on_shared_core(tiny):
    shared = Machine(tiny)
    a = shared.spawn("a", pausing(4), core=0)
    b = shared.spawn("b", pausing(4), core=0)
    shared.run()

    split = Machine(tiny)
    c = split.spawn("c", pausing(4), core=0)
    d = split.spawn("d", pausing(4), core=1)
    split.run()

    assert c.counters.itlb_ra == d.counters.itlb_ra == 1
    assert a.counters.itlb_ra > 1
    assert b.counters.itlb_ra > 1


def test_syscall_counts_itlb(machine, cpu):
    machine.kernel.register_syscall("noop", lambda kernel_cpu: 7)

    assert cpu.syscall("noop") == 7
    assert cpu.counters.itlb_ra == 2
    with pytest.raises(SimulationError):
        cpu.syscall("missing")


def test_round_robin_order(machine):
    log = []
    for name in ("a", "b", "c"):
        machine.spawn(name, pausing(2, log, name))

    machine.run(Schedule.ROUND_ROBIN)

    assert log == ["a", "b", "c", "a", "b", "c"]


def test_daemon_does_not_keep_machine_running(machine):
    def forever(cpu):
        while True:
            cpu.pause()
            yield

    machine.spawn("noise", forever, daemon=True)
    worker = machine.spawn("worker", pausing(3))

    machine.run()

    assert worker.finished


def test_budget_exhausted(machine):
    def forever(cpu):
        while True:
            cpu.pause(1000)
            yield

    machine.spawn("spin", forever)

    with pytest.raises(BudgetExhausted):
        machine.run(budget=50_000)


def test_actor_fault(machine):
    def broken(cpu):
        cpu.read(0x6000_0000)
        yield

    machine.spawn("broken", broken)

    with pytest.raises(ActorFault) as error:
        machine.run()

    assert error.value.actor == "broken"
    assert len(machine.faults) == 1


def jittery_trace(tiny, seed: int):
    config = tiny.model_copy(update={"noise": NoiseConfig(jitter_sigma=8.0)})

    def program(cpu):
        vaddr = cpu.alloc(4 * PAGE_SIZE)
        for offset in range(0, 4 * PAGE_SIZE, 256):
            cpu.read(vaddr + offset)
            cpu.clflush(vaddr + offset)
            yield

    return run(config, [ActorSpec("reader", program), ActorSpec("other", pausing(8), core=1)], seed=seed)


def test_runs_are_deterministic(tiny):
    first = jittery_trace(tiny, seed=3)
    second = jittery_trace(tiny, seed=3)
    third = jittery_trace(tiny, seed=4)

    assert first == second
    assert [event.latency for event in first.events] != [event.latency for event in third.events]


def test_trace_jsonl(tmp_path, machine):
    machine.spawn("a", pausing(2))
    trace = machine.run()
    path = tmp_path / "trace.jsonl"

    trace.to_jsonl(path)

    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert [record["type"] for record in records] == ["instruction"] * 2 + ["summary"]
    assert records[-1]["counters"]["a"]["INSTRUCTIONS"] == 2
    assert records[-1]["end_time"] == trace.end_time


def test_trace_counters_are_read_only(machine):
    machine.spawn("a", pausing(2))
    trace = machine.run()

    with pytest.raises(TypeError):
        trace.counters["a"] = {}
    with pytest.raises(TypeError):
        trace.counters["a"]["INSTRUCTIONS"] = 0
    assert trace.counters["a"]["INSTRUCTIONS"] == 2


def test_dedup_merges_and_copies_on_write(tiny):
    machine = Machine(tiny.model_copy(update={"dedup": DedupConfig(enabled=True)}))
    first = machine.spawn("first")
    second = machine.spawn("second")
    first_cpu, second_cpu = machine.cpu(first), machine.cpu(second)
    a = first_cpu.alloc(PAGE_SIZE)
    b = second_cpu.alloc(PAGE_SIZE)
    machine.poke(first, a, b"same")
    machine.poke(second, b, b"same")

    assert machine.dedup_scan() == 1
    assert first_cpu.pagemap(a) == second_cpu.pagemap(b)

    second_cpu.write(b, 0x41, size=1)

    cow = machine.events[-1]
    assert cow.detail == "cow"
    assert cow.latency >= tiny.dedup.cow_multiplier
    assert first_cpu.pagemap(a) != second_cpu.pagemap(b)
    assert machine.peek(first, a, 4) == b"same"
    assert machine.peek(second, b, 4) == b"Aame"


def test_dedup_disabled(machine):
    with pytest.raises(SimulationError):
        machine.dedup_scan()


def test_share_mapping(machine):
    owner = machine.spawn("owner")
    other = machine.spawn("other")
    owner_vaddr, other_vaddr = machine.share_mapping(owner, other)

    machine.poke(owner, owner_vaddr, b"shared")

    assert machine.resolve(owner, owner_vaddr) == machine.resolve(other, other_vaddr)
    assert machine.peek(other, other_vaddr, 6) == b"shared"


def test_pagemap_denied(tiny):
    machine = Machine(tiny.model_copy(update={"pagemap_access": False}))
    cpu = machine.cpu(machine.spawn("attacker"))

    with pytest.raises(PagemapDenied):
        cpu.pagemap(cpu.alloc(PAGE_SIZE))


def test_spawn_on_missing_core(machine):
    with pytest.raises(SimulationError):
        machine.spawn("nowhere", core=5)


def test_counter_arithmetic():
    counters = PerfCounters(cache_misses=4, itlb_ra=2)
    later = counters.copy()
    later.add(PerfCounters(cache_misses=1, itlb_wa=1), times=3)

    delta = later.delta(counters)

    assert delta.cache_misses == 3
    assert delta.itlb_events == 3
    assert later.mean(2).cache_misses == 4
    assert later.as_dict()["CACHE_MISSES"] == 7
