import pytest

from memsim.core.errors import SimulationError
from memsim.hardware.machine import ActorKind, Machine
from memsim.hardware.memory import HUGE_PAGE_SIZE, PAGE_SIZE
from memsim.schemas.reports import Exploitability
from memsim.services.eviction import EvictionStrategy
from memsim.services.rowhammer import (
    HammerMethod,
    NoPairFound,
    Rowhammer,
    classify_flip,
    page_table_share,
    plant_victim_flips,
    pte_redirect_target,
    rowhammer_sweep,
    spray_page_tables,
)


@pytest.fixture
def hammer(machine, attacker) -> Rowhammer:
    return Rowhammer(machine, attacker)


@pytest.fixture
def region(hammer) -> int:
    return hammer.cpu.alloc(HUGE_PAGE_SIZE, huge=True, mergeable=False)


def planted_machine(config, thresholds: tuple[int, int], max_pairs: int = 2):
    planted = plant_victim_flips(config, seed=0, max_pairs=max_pairs, thresholds=thresholds)
    machine = Machine(planted, seed=0, trace=False)
    attacker = machine.spawn("hammer", kind=ActorKind.ATTACKER)
    hammer = Rowhammer(machine, attacker)
    region = hammer.cpu.alloc(HUGE_PAGE_SIZE, huge=True, mergeable=False)
    return hammer, region


def leaf_entry(machine, attacker, vaddr: int) -> int:
    return machine.mmu.walk(attacker.space.user_root, vaddr).steps[-1].entry_paddr


def test_classify_user_data(machine, attacker, cpu):
    page = cpu.alloc(PAGE_SIZE)
    cpu.write(page, 0xFF, size=1)
    paddr = machine.resolve(attacker, page)
    assert classify_flip(machine, paddr, 3, applied=False) == Exploitability.USER_DATA


def test_classify_page_table_bits(machine, attacker, cpu):
    page = cpu.alloc(PAGE_SIZE)
    cpu.write(page, 1)
    entry = leaf_entry(machine, attacker, page)

    # Бит 16 записи лежит в поле номера кадра
    assert classify_flip(machine, entry + 2, 0, applied=False) == Exploitability.PTE_ADDRESS_BIT
    assert classify_flip(machine, entry, 1, applied=False) == Exploitability.PTE_FLAG_BIT


def test_pte_redirect_target(machine, attacker, cpu):
    page = cpu.alloc(PAGE_SIZE)
    cpu.write(page, 1)
    entry = leaf_entry(machine, attacker, page)

    assert pte_redirect_target(machine, entry + 2) == machine.resolve(attacker, page)


def test_classify_kernel_frame(machine):
    assert classify_flip(machine, 0x40, 0, applied=False) == Exploitability.NONE


def test_double_sided_pairs_surround_victim(hammer, region):
    pairs = hammer.select_double_sided(region)

    assert pairs
    for pair in pairs:
        low, high = pair.rows
        assert high - low == 2
        assert pair.victim_row == low + 1
        assert pair.double_sided
        banks = {hammer.locate(address)[0] for address in pair.aggressors}
        assert banks == {pair.bank}


def test_victim_row_filter(hammer, region):
    victim = hammer.select_double_sided(region)[0].victim_row
    pairs = hammer.select_double_sided(region, victim_rows=[victim])

    assert {pair.victim_row for pair in pairs} == {victim}


def test_single_sided_pairs(hammer, region):
    pairs = hammer.select_amplified_single_sided(region)

    assert pairs
    assert not any(pair.double_sided for pair in pairs)


def test_no_pair_in_single_row(hammer, region):
    with pytest.raises(NoPairFound):
        hammer.select_double_sided(region, size=1 << 13)


def test_eviction_job_needs_strategy(hammer, region):
    pair = hammer.select_double_sided(region)[0]

    with pytest.raises(SimulationError):
        hammer.job(pair, HammerMethod.EVICTION)


def test_clflush_hammer_activates_every_round(hammer, region):
    job = hammer.job(hammer.select_double_sided(region)[0], rounds=200)
    hammer.hammer(job)

    assert job.activation_rate == 1.0
    assert job.round_cycles == pytest.approx(180)
    assert job.accesses == 200


def test_eviction_hammer_with_lru_strategy(hammer, region):
    strategy = EvictionStrategy(C=1, D=1, L=1, S=4)
    job = hammer.job(hammer.select_double_sided(region)[0], HammerMethod.EVICTION, strategy, rounds=64)
    hammer.hammer(job)

    assert job.activation_rate == 1.0
    assert job.round_cycles > 180


def test_scan_reports_planted_flips(tiny):
    hammer, region = planted_machine(tiny, thresholds=(100_000, 200_000))
    reports = hammer.scan_for_flips(region, max_pairs=2)

    assert len(reports) == 2
    for report in reports:
        assert region <= report.vaddr < region + HUGE_PAGE_SIZE
        assert report.exploitability == Exploitability.USER_DATA
        assert report.activations >= 100_000


def test_scan_without_reaching_threshold(tiny):
    hammer, region = planted_machine(tiny, thresholds=(50_000_000, 60_000_000))

    assert hammer.scan_for_flips(region, max_pairs=2) == []


def test_zero_pattern_hides_one_to_zero_flips(tiny):
    hammer, region = planted_machine(tiny, thresholds=(100_000, 200_000))

    assert hammer.scan_for_flips(region, pattern=0x00, max_pairs=2) == []


def test_spray_grows_page_table_share(machine, attacker):
    before = page_table_share(machine)
    created = spray_page_tables(machine, attacker, 8)

    assert created == 8
    assert page_table_share(machine) > before


def test_sweep_rows(tiny):
    planted = plant_victim_flips(tiny, seed=0, max_pairs=1, thresholds=(100_000, 200_000))
    rows = rowhammer_sweep(planted, [1.0, 2.0], [HammerMethod.CLFLUSH], seed=0, max_pairs=1)

    assert [row.refresh_multiplier for row in rows] == [1.0, 2.0]
    assert all(row.method == "clflush" and row.flips == 1 for row in rows)


def test_eviction_sweep_needs_strategy(tiny):
    with pytest.raises(SimulationError):
        rowhammer_sweep(tiny, [1.0], [HammerMethod.EVICTION], seed=0, max_pairs=1)
