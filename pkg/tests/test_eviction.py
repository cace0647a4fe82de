import pytest
from pydantic import ValidationError

from memsim.hardware.cache import set_index
from memsim.hardware.machine import ActorKind, Machine
from memsim.hardware.memory import HUGE_PAGE_SIZE
from memsim.schemas.machine import MachineConfig
from memsim.schemas.reports import StrategyReport
from memsim.services.eviction import (
    EvictionService, EvictionSet, EvictionStrategy, SetTooSmall, explore, explore_candidates, rank_reports,
)


# Строка в множестве 5: обход таблиц для больших страниц касается только множества 0
TARGET_OFFSET = 5 * 64


@pytest.fixture
def service(machine, attacker):
    return EvictionService(machine, attacker)


@pytest.fixture
def pool(service):
    return service.pool_for(8)


@pytest.fixture
def target(pool):
    return pool[0] + TARGET_OFFSET


def report(name: str, rate: float, time: float, size: int = 4) -> StrategyReport:
    return StrategyReport(strategy=name, C=1, D=1, L=1, S=size, accesses=size, hits=0.0, misses=float(size),
                          time_cycles=time, eviction_rate=rate, trials=10)


def test_strategy_names_and_counts():
    assert EvictionStrategy(S=17, C=2, D=2, L=1).name == "P-2-2-1-17"
    assert EvictionStrategy(S=17, C=2, D=2, L=1).access_count == 64
    assert EvictionStrategy(S=18, C=5, D=2, L=2).access_count == 90
    assert EvictionStrategy(S=4).pattern() == (0, 1, 2, 3)
    assert EvictionStrategy(S=4, C=2, D=2, L=2).pattern() == (0, 1, 0, 1, 2, 3, 2, 3)


def test_access_count_matches_pattern():
    for size in range(1, 25):
        for c in range(1, 7):
            for d in range(1, min(size, 6) + 1):
                for step in range(1, d + 1):
                    strategy = EvictionStrategy(S=size, C=c, D=d, L=step)
                    assert len(strategy.pattern()) == strategy.access_count, strategy.name


@pytest.mark.parametrize("fields", [
    {"S": 0},
    {"S": 4, "D": 5},
    {"S": 4, "D": 2, "L": 3},
    {"S": 4, "C": 0},
])
def test_invalid_strategy(fields):
    with pytest.raises(ValidationError):
        EvictionStrategy(**fields)


def test_explore_candidates_drops_relabelled_duplicates():
    strategies = explore_candidates([1, 2], [1, 2], [1, 2], [2])

    assert [strategy.name for strategy in strategies] == ["P-1-1-1-2", "P-2-1-1-2", "P-2-2-1-2"]
    assert len({strategy.canonical() for strategy in strategies}) == len(strategies)


def test_rank_reports():
    ranked = rank_reports([
        report("slow", 1.0, 500.0),
        report("weak", 0.5, 100.0),
        report("fast", 1.0, 300.0),
        report("weaker", 0.2, 50.0),
    ], threshold=0.99)

    assert [item.strategy for item in ranked] == ["fast", "slow", "weak", "weaker"]


def test_build_static_is_congruent(machine, service, pool, target):
    llc = machine.config.llc
    target_paddr = service.cpu.pagemap(target)

    eviction_set = service.build_static(target, 6, pool)

    assert len(eviction_set) == 6
    for member in eviction_set.members:
        paddr = service.cpu.pagemap(member)
        assert set_index(paddr, llc) == set_index(target_paddr, llc)
        assert paddr >> 6 != target_paddr >> 6


def test_lru_needs_associativity_many_addresses(machine, service, pool, target):
    ways = machine.config.llc.ways
    eviction_set = service.build_static(target, ways, pool)

    full = service.evaluate(EvictionStrategy(S=ways), eviction_set, trials=20)
    short = service.evaluate(EvictionStrategy(S=ways - 1), eviction_set, trials=20)

    assert full.eviction_rate == 1.0
    assert full.accesses == ways
    assert short.eviction_rate == 0.0


def test_run_strategy_issues_pattern_reads(service, pool, target):
    strategy = EvictionStrategy(S=4, C=2, D=2, L=1)
    eviction_set = service.build_static(target, 4, pool)
    before = service.attacker.counters.instructions

    service.run_strategy(strategy, eviction_set)

    assert service.attacker.counters.instructions - before == strategy.access_count + 2


def test_set_too_small(service, pool, target):
    eviction_set = EvictionSet(target, service.build_static(target, 3, pool).members)

    with pytest.raises(SetTooSmall):
        service.run_strategy(EvictionStrategy(S=4), eviction_set)


def test_dynamic_build_finds_minimal_set(machine, service, pool, target):
    llc = machine.config.llc
    target_paddr = service.cpu.pagemap(target)

    result = service.build_dynamic(target, threshold=1.0, tests_per_decision=4, pool=pool)

    assert len(result.eviction_set) == llc.ways
    assert result.eviction_rate == 1.0
    for member in result.eviction_set.members:
        assert set_index(service.cpu.pagemap(member), llc) == set_index(target_paddr, llc)
    assert service.audit_minimality(result, threshold=1.0, tests_per_decision=4) == []


def test_explore_is_ranked_and_reproducible(tiny):
    strategies = [EvictionStrategy(S=3), EvictionStrategy(S=4), EvictionStrategy(S=4, C=2, D=2, L=1)]

    first = explore(tiny, strategies, trials=10, seed=1)
    second = explore(tiny, strategies, trials=10, seed=1)

    assert first == second
    assert {item.strategy for item in first} == {strategy.name for strategy in strategies}
    assert first == rank_reports(first)


def test_candidates_follow_line_size(tiny):
    wide = MachineConfig.model_validate({
        **tiny.model_dump(), "name": "wide",
        "l1": {**tiny.l1.model_dump(), "line_size": 128},
        "llc": {**tiny.llc.model_dump(), "line_size": 128},
    })
    machine = Machine(wide)
    service = EvictionService(machine, machine.spawn("attacker", kind=ActorKind.ATTACKER))
    base = 0x4000_0000
    target = base + 64

    candidates = service.candidates(target, [base], stride=64)

    # base и target лежат в одной 128-байтной строке
    assert base not in candidates
    assert target not in candidates
    assert base + 128 in candidates
    assert len(candidates) == HUGE_PAGE_SIZE // 64 - 2
