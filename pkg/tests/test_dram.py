import pytest

from memsim.hardware.dram import Dram, RowOutcome, map_address
from memsim.hardware.memory import PhysicalMemory
from memsim.schemas.machine import FlipDirection, FlipMapConfig, FlipSpec


VICTIM_ROW = 5
VICTIM_PADDR = (VICTIM_ROW << 17) + 0x40


@pytest.fixture
def dram(tiny):
    return Dram(tiny, PhysicalMemory(tiny.phys_bytes))


def flippy_dram(tiny, threshold: int = 1000) -> Dram:
    config = tiny.model_copy(update={"flip_map": FlipMapConfig(entries=[
        FlipSpec(paddr=VICTIM_PADDR, bit=3, direction=FlipDirection.ONE_TO_ZERO, threshold=threshold),
    ])})
    dram = Dram(config, PhysicalMemory(config.phys_bytes))
    dram.memory.write_byte(VICTIM_PADDR, 0xFF)
    return dram


def hammer_below(dram: Dram, count: int):
    victim = dram.map_address(VICTIM_PADDR)
    return dram.fast_forward(0, 1, 10, {(victim.bank_key, victim.row - 1): count})


def test_map_address(tiny):
    assert map_address(0x2000, tiny.dram).bank == 1
    location = map_address(0x22000, tiny.dram)
    assert location.bank == 0
    assert location.row == 1
    assert location.column == 0x2000 & ((1 << 13) - 1)


def test_row_buffer_outcomes(dram, tiny):
    base = tiny.latency.dram

    closed = dram.access_row(0)
    hit = dram.access_row(0x40)
    conflict = dram.access_row((1 << 17) | (1 << 13))

    assert closed.kind == RowOutcome.ROW_CLOSED
    assert closed.latency == round(base * 1.6)
    assert hit.kind == RowOutcome.ROW_HIT
    assert hit.latency == base
    assert conflict.kind == RowOutcome.ROW_CONFLICT
    assert conflict.latency == round(base * 2.2)


def test_other_bank_keeps_row_open(dram):
    dram.access_row(0)
    dram.access_row(0x2000)

    assert dram.access_row(0).kind == RowOutcome.ROW_HIT


def test_activation_counts_neighbors(dram):
    dram.access_row(3 << 17)
    bank = dram.map_address(3 << 17).bank_key

    assert dram.neighbor_activations[2][bank] == 1
    assert dram.neighbor_activations[4][bank] == 1
    assert 3 not in dram.neighbor_activations


def test_refresh_schedule_covers_every_row(dram):
    covered = set()
    for index in range(dram.refreshes):
        covered.update(dram.rows_of_refresh(index))

    assert covered == set(range(dram.topology.rows_per_bank))
    assert dram.interval == pytest.approx(64e6 * 3.0 / 8192)


def test_refresh_window_clears_counters(dram):
    dram.access_row(3 << 17)

    dram.refresh_tick(dram.window_cycles)

    assert dram.neighbor_activations == {}
    assert dram.refresh_index == dram.refreshes


def test_flip_at_threshold(tiny):
    dram = flippy_dram(tiny)

    hammer_below(dram, 1000)
    flips = dram.check(10)

    assert len(flips) == 1
    assert flips[0].paddr == VICTIM_PADDR
    assert flips[0].activations == 1000
    assert dram.memory.read_byte(VICTIM_PADDR) == 0xFF & ~(1 << 3)


def test_no_flip_below_threshold(tiny):
    dram = flippy_dram(tiny)

    hammer_below(dram, 999)

    assert dram.check(10) == []
    assert dram.memory.read_byte(VICTIM_PADDR) == 0xFF


def test_flip_requires_matching_bit_value(tiny):
    dram = flippy_dram(tiny)
    dram.memory.write_byte(VICTIM_PADDR, 0x00)

    hammer_below(dram, 5000)

    assert dram.check(10) == []


def test_fast_forward_applies_flips_on_refresh(tiny):
    dram = flippy_dram(tiny, threshold=2000)
    victim = dram.map_address(VICTIM_PADDR)
    round_cycles = 100.0
    rounds = int(dram.window_cycles // round_cycles)

    end, flips = dram.fast_forward(0, rounds, round_cycles, {(victim.bank_key, victim.row - 1): 1})

    assert end == rounds * round_cycles
    assert [flip.paddr for flip in flips] == [VICTIM_PADDR]
