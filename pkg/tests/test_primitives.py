import pytest

from memsim.core.errors import SimulationError
from memsim.hardware.machine import ActorKind
from memsim.hardware.memory import GIANT_PAGE_SIZE, HUGE_PAGE_SIZE, PAGE_SIZE
from memsim.hardware.mmu import LevelClass, RegionStatus, canonical
from memsim.schemas.machine import IsolationMode
from memsim.services.eviction import EvictionStrategy
from memsim.services.experiments import ORACLE_LAYOUTS, ExperimentService
from memsim.services.primitives import AttackPrimitives, NotSameBank, ProbeKind, true_level_map
from memsim.services.reports import ReportWriter
from memsim.services.victims import DriverVictim


# Множество LLC 5: вне строк, которых касаются обходы таблиц
LINE = 5 * 64


@pytest.fixture
def primitives(machine, attacker):
    return AttackPrimitives(machine, attacker)


def spawn_reader(machine, active: bool):
    """Жертва на втором ядре, на каждом ходу читающая первую строку своей страницы со смещением LINE."""
    victim = machine.spawn("victim", kind=ActorKind.VICTIM, core=1)
    vaddr = machine.cpu(victim).alloc(PAGE_SIZE, mergeable=False)

    def program(cpu):
        while True:
            if active:
                cpu.read(vaddr + LINE)
            else:
                cpu.pause()
            yield

    victim.program = program
    return victim, vaddr


@pytest.fixture
def shared_line(machine, attacker):
    def make(active: bool) -> int:
        victim, vaddr = spawn_reader(machine, active)
        _, attacker_vaddr = machine.share_mapping(victim, attacker, vaddr=vaddr)
        return attacker_vaddr + LINE
    return make


def test_reload_calibration(machine, primitives):
    calibration = primitives.calibrate(ProbeKind.RELOAD)
    latency = machine.config.latency

    assert calibration.medians["hit"] == latency.l3_hit
    assert calibration.medians["miss"] >= latency.dram
    assert calibration.overlap() == 0.0
    assert ProbeKind.RELOAD in primitives.calibrations


def test_flush_calibration_hit_is_slow(machine, primitives):
    calibration = primitives.calibrate(ProbeKind.FLUSH)
    latency = machine.config.latency

    assert calibration.hit_is_slow
    assert calibration.medians["hit"] == latency.flush_base + latency.flush_hit_extra
    assert calibration.medians["miss"] == latency.flush_base


def test_prefetch_calibration_separates_levels(machine, primitives):
    calibration = primitives.calibrate(ProbeKind.PREFETCH)
    expected = machine.config.prefetch_latency

    assert calibration.medians[LevelClass.CACHED.name] == expected.cached
    assert calibration.medians[LevelClass.PDPT_ABSENT.name] == expected.pdpt_absent
    assert calibration.medians[LevelClass.PTE_ABSENT.name] == expected.pte_absent


def test_dram_row_calibration(machine, primitives):
    calibration = primitives.calibrate(ProbeKind.DRAM_ROW)
    mine, other = primitives.find_row_pair()

    assert calibration.medians["hit"] < calibration.medians["miss"]
    assert machine.dram.map_address(primitives.cpu.pagemap(mine)).bank_key == \
        machine.dram.map_address(primitives.cpu.pagemap(other)).bank_key


def test_histogram_columns(primitives):
    frame = primitives.calibrate(ProbeKind.FLUSH).histogram()

    assert list(frame.columns) == ["latency", "count", "label"]
    assert frame["count"].sum() == 64


def test_prime_probe_calibration_needs_set(primitives):
    with pytest.raises(SimulationError):
        primitives.calibrate(ProbeKind.PRIME_PROBE)


@pytest.mark.parametrize("active", [True, False])
def test_flush_reload(primitives, shared_line, active):
    address = shared_line(active)

    results = [primitives.flush_reload(address) for _ in range(5)]

    assert all(result.hit == active for result in results)


@pytest.mark.parametrize("active", [True, False])
def test_flush_flush(primitives, shared_line, active):
    address = shared_line(active)
    primitives.calibrate(ProbeKind.FLUSH)
    references = primitives.attacker.counters.cache_references
    misses = primitives.attacker.counters.cache_misses

    results = [primitives.flush_flush(address) for _ in range(5)]

    assert all(result.hit == active for result in results)
    assert primitives.attacker.counters.cache_references == references
    assert primitives.attacker.counters.cache_misses == misses


def test_flush_flush_ignores_cold_translation(machine, primitives, shared_line):
    address = shared_line(False)
    primitives.calibrate(ProbeKind.FLUSH)
    walks = primitives.attacker.counters.dtlb_rm

    first = primitives.flush_flush(address)

    # Первый замер идет с промахом TLB, но время clflush от него не зависит
    assert primitives.attacker.counters.dtlb_rm > walks
    assert not first.hit
    assert first.latency == machine.config.latency.flush_base


@pytest.mark.parametrize("active", [True, False])
def test_prime_probe(machine, primitives, shared_line, active):
    address = shared_line(active)
    eviction_set = primitives.eviction.build_static(address, machine.config.llc.ways)
    primitives.calibrate(ProbeKind.RELOAD)

    result = primitives.prime_probe(eviction_set)

    assert result.hit == active
    assert (result.ways > 0) == active


def test_translation_levels_match_page_tables(machine, primitives):
    primitives.cpu.alloc(3 * PAGE_SIZE)
    primitives.calibrate(ProbeKind.PREFETCH)

    recovered = primitives.recover_translation_levels(slots=[0], k=4)

    assert recovered == true_level_map(machine, primitives.cpu.root, slots=[0])


def test_translation_levels_tell_full_tables_from_large_pages(machine, primitives):
    cpu = primitives.cpu
    base = canonical(10 << 39)
    full = cpu.alloc(HUGE_PAGE_SIZE, mergeable=False, vaddr=base + 3 * HUGE_PAGE_SIZE)
    huge = cpu.alloc(HUGE_PAGE_SIZE, huge=True, mergeable=False, vaddr=base + 5 * HUGE_PAGE_SIZE)
    cpu.alloc(2 * PAGE_SIZE, mergeable=False, vaddr=base + 7 * HUGE_PAGE_SIZE + 40 * PAGE_SIZE)
    # Псевдоним нижней физической памяти одной страницей 1 ГБ
    giant = canonical(11 << 39) + 2 * GIANT_PAGE_SIZE
    machine.kernel.map_page(primitives.attacker.space.user_root, giant, 0, GIANT_PAGE_SIZE, writable=False)
    primitives.calibrate(ProbeKind.PREFETCH)

    recovered = primitives.recover_translation_levels(slots=[10, 11])

    assert recovered == true_level_map(machine, cpu.root, slots=[10, 11])
    assert recovered[(2, full)] == RegionStatus.TABLE
    assert recovered[(2, huge)] == RegionStatus.PAGE
    assert recovered[(3, giant)] == RegionStatus.PAGE
    assert recovered[(1, full + 511 * PAGE_SIZE)] == RegionStatus.PAGE


def test_translation_level_probe(primitives):
    probe = primitives.translation_level_probe(0x6000_0000_0000)

    assert probe.level == LevelClass.PDPT_ABSENT
    assert not probe.ambiguous


def test_direct_map_alias(machine, primitives):
    p = primitives.scratch_huge + LINE

    alias = primitives.find_direct_map_alias(p)

    assert alias == machine.config.kernel.direct_map_base + primitives.cpu.pagemap(p)


def test_direct_map_alias_hidden_by_isolation(machine, primitives):
    p = primitives.scratch_huge + LINE
    machine.set_isolation(IsolationMode.STRONGER_KERNEL_ISOLATION)

    assert primitives.find_direct_map_alias(p) is None


def test_syscall_page_scan(machine, primitives):
    driver = DriverVictim.install(machine, count=2, line_offset=LINE)
    cpu = primitives.cpu

    used = primitives.scan_syscall_pages(DriverVictim.region(machine), lambda: driver.call(cpu), line_offset=LINE)

    assert used == driver.touched
    assert driver.calls == len(DriverVictim.region(machine))


def test_evict_time(primitives):
    cpu = primitives.cpu
    target = cpu.alloc(PAGE_SIZE, mergeable=False) + LINE
    pool = primitives.eviction.pool_for(4)
    eviction_set = primitives.eviction.build_static(target, 4, pool)

    delta = primitives.evict_time(lambda: cpu.read(target), eviction_set, EvictionStrategy(S=4), runs=4)

    assert delta >= primitives.config.latency.dram - primitives.config.latency.l1_hit


def spawn_row_opener(machine, attacker, address: int, active: bool):
    """Жертва на втором ядре, которая на каждом ходу открывает строку DRAM с адресом address."""
    victim = machine.spawn("victim", kind=ActorKind.VICTIM, core=1)
    page = address & ~(PAGE_SIZE - 1)
    _, alias = machine.share_mapping(attacker, victim, vaddr=page)
    line = alias + address - page

    def program(cpu):
        while True:
            if active:
                cpu.clflush(line)
                cpu.read(line)
            else:
                cpu.pause()
            yield

    victim.program = program


@pytest.mark.parametrize("active", [True, False])
def test_dram_row_conflict_probe(machine, attacker, primitives, active):
    mine, other = primitives.find_row_pair()
    spawn_row_opener(machine, attacker, other, active)

    result = primitives.dram_row_probe(mine, primitives.cpu.pagemap(other))

    assert result.hit is active


@pytest.mark.parametrize("active", [True, False])
def test_dram_row_hit_probe(machine, attacker, primitives, active):
    mine, opener = primitives.find_row_pair()
    # Жертва читает соседнюю строку кэша в той же строке DRAM, что и mine
    spawn_row_opener(machine, attacker, mine + 64, active)

    result = primitives.dram_row_hit_probe(mine, opener)

    assert result.hit is active


def test_dram_row_probe_rejects_other_bank(primitives):
    mine, _ = primitives.find_row_pair()

    with pytest.raises(NotSameBank):
        primitives.dram_row_probe(mine, primitives.cpu.pagemap(mine) + 64)


def test_translation_level_oracle_on_random_layouts(tiny, tmp_path):
    service = ExperimentService(tiny, ReportWriter(tmp_path), seed=3, trials=3)

    results = [result for result in service.oracle_suite() if result.oracle == "translation_levels"]

    assert ORACLE_LAYOUTS == 50
    assert [result.seed for result in results] == [3, 4, 5]
    assert all(result.passed for result in results), [result.observed for result in results]
