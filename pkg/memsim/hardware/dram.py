from enum import Enum
from typing import NamedTuple

import numpy as np

from memsim.hardware.memory import PhysicalMemory
from memsim.schemas.machine import DramTopology, FlipDirection, FlipSpec, MachineConfig


BankKey = tuple[int, int, int, int]


class RowOutcome(str, Enum):
    ROW_HIT = "row_hit"
    ROW_CONFLICT = "row_conflict"
    ROW_CLOSED = "row_closed"


class DramLocation(NamedTuple):
    channel: int
    dimm: int
    rank: int
    bank: int
    row: int
    column: int

    @property
    def bank_key(self) -> BankKey:
        return (self.channel, self.dimm, self.rank, self.bank)


class RowAccess(NamedTuple):
    kind: RowOutcome
    latency: int
    location: DramLocation


class FlipEntry(NamedTuple):
    paddr: int
    bit: int
    direction: FlipDirection
    threshold: int
    bank_key: BankKey
    row: int


class FlipEvent(NamedTuple):
    paddr: int
    bit: int
    direction: FlipDirection
    time: int
    bank_key: BankKey
    row: int
    activations: int


def _parity_bits(paddr: int, masks: list[int]) -> int:
    value = 0
    for bit, mask in enumerate(masks):
        value |= ((paddr & mask).bit_count() & 1) << bit
    return value


def map_address(paddr: int, topology: DramTopology) -> DramLocation:
    """Канал, DIMM, ранг и банк считаются четностью масок, строка и столбец делятся по row_cutoff."""
    fn = topology.addr_fn
    return DramLocation(
        channel=_parity_bits(paddr, fn.channel_masks),
        dimm=_parity_bits(paddr, fn.dimm_masks),
        rank=_parity_bits(paddr, fn.rank_masks),
        bank=_parity_bits(paddr, fn.bank_masks),
        row=paddr >> fn.row_cutoff,
        column=paddr & ((1 << fn.column_bits) - 1),
    )


def build_flip_entries(config: MachineConfig) -> list[FlipEntry]:
    """Явные записи FlipMap плюс seeded-записи по плотности (flips/GB)."""
    specs = list(config.flip_map.entries)
    flip_cfg = config.flip_map
    if flip_cfg.density_per_gb > 0:
        rng = np.random.default_rng(flip_cfg.seed)
        count = int(round(flip_cfg.density_per_gb * config.phys_bytes / (1 << 30)))
        addrs = rng.integers(0, config.phys_bytes, size=count)
        bits = rng.integers(0, 8, size=count)
        directions = rng.integers(0, 2, size=count)
        spreads = rng.uniform(1 - flip_cfg.threshold_spread, 1 + flip_cfg.threshold_spread, size=count)
        for paddr, bit, direction, spread in zip(addrs, bits, directions, spreads):
            specs.append(FlipSpec(
                paddr=int(paddr),
                bit=int(bit),
                direction=FlipDirection.ONE_TO_ZERO if direction == 0 else FlipDirection.ZERO_TO_ONE,
                threshold=max(1, int(flip_cfg.threshold * spread)),
            ))
    entries = []
    for spec in specs:
        loc = map_address(spec.paddr, config.dram)
        entries.append(FlipEntry(spec.paddr, spec.bit, spec.direction, spec.threshold, loc.bank_key, loc.row))
    return entries


class Dram:
    """Банки с row buffer, регенерация и модель помех Rowhammer."""

    def __init__(self, config: MachineConfig, memory: PhysicalMemory):
        self.config = config
        self.topology = config.dram
        self.memory = memory
        self.base_latency = config.latency.dram
        factors = config.dram.latency
        self.latency_of = {
            RowOutcome.ROW_HIT: int(round(self.base_latency * factors.row_hit)),
            RowOutcome.ROW_CLOSED: int(round(self.base_latency * factors.row_closed)),
            RowOutcome.ROW_CONFLICT: int(round(self.base_latency * factors.row_conflict)),
        }
        self.open_rows: dict[BankKey, int] = {}
        # Активации соседей с момента последней регенерации строки: row -> bank -> count
        self.neighbor_activations: dict[int, dict[BankKey, int]] = {}
        self.activations_total = 0

        refresh = config.refresh
        window_cycles = refresh.window_ms * 1e6 * config.clock_ghz
        self.window_cycles = window_cycles * refresh.multiplier
        self.interval = self.window_cycles / refresh.refreshes
        self.refreshes = refresh.refreshes
        self.refresh_index = 0
        self.next_refresh = self.interval

        self.flip_entries: dict[tuple[BankKey, int], list[FlipEntry]] = {}
        for entry in build_flip_entries(config):
            self.flip_entries.setdefault((entry.bank_key, entry.row), []).append(entry)
        self.flips: list[FlipEvent] = []

    def map_address(self, paddr: int) -> DramLocation:
        return map_address(paddr, self.topology)

    def access_row(self, paddr: int) -> RowAccess:
        loc = map_address(paddr, self.topology)
        bank = loc.bank_key
        open_row = self.open_rows.get(bank)
        if open_row == loc.row:
            kind = RowOutcome.ROW_HIT
        else:
            kind = RowOutcome.ROW_CLOSED if open_row is None else RowOutcome.ROW_CONFLICT
            self.open_rows[bank] = loc.row
            self._activate(bank, loc.row, 1)
        return RowAccess(kind, self.latency_of[kind], loc)

    def _activate(self, bank: BankKey, row: int, count: int):
        self.activations_total += count
        for neighbor in (row - 1, row + 1):
            if 0 <= neighbor < self.topology.rows_per_bank:
                counts = self.neighbor_activations.setdefault(neighbor, {})
                counts[bank] = counts.get(bank, 0) + count

    def precharge_all(self):
        self.open_rows.clear()

    def rows_of_refresh(self, index: int) -> range:
        """Строки, регенерируемые командой index (0..refreshes-1)."""
        rows = self.topology.rows_per_bank
        group = index % self.refreshes
        start = -(-group * rows // self.refreshes)
        end = -(-(group + 1) * rows // self.refreshes)
        return range(start, end)

    def refresh_tick(self, now: float) -> list[FlipEvent]:
        """Выполняет все просроченные команды регенерации к моменту now."""
        if now < self.next_refresh:
            return []
        flips: list[FlipEvent] = []
        while now >= self.next_refresh:
            for row in self.rows_of_refresh(self.refresh_index):
                flips.extend(self._refresh_row(row, int(self.next_refresh)))
            self.refresh_index += 1
            self.next_refresh += self.interval
        return flips

    def _refresh_row(self, row: int, time: int) -> list[FlipEvent]:
        counts = self.neighbor_activations.pop(row, None)
        if not counts:
            return []
        flips = []
        for bank, count in counts.items():
            flips.extend(self._apply_flips(bank, row, count, time))
        return flips

    def _apply_flips(self, bank: BankKey, row: int, count: int, time: int) -> list[FlipEvent]:
        events = []
        for entry in self.flip_entries.get((bank, row), ()):
            if count < entry.threshold:
                continue
            value = self.memory.read_byte(entry.paddr)
            mask = 1 << entry.bit
            if entry.direction == FlipDirection.ONE_TO_ZERO and value & mask:
                self.memory.write_byte(entry.paddr, value & ~mask)
            elif entry.direction == FlipDirection.ZERO_TO_ONE and not value & mask:
                self.memory.write_byte(entry.paddr, value | mask)
            else:
                continue
            event = FlipEvent(entry.paddr, entry.bit, entry.direction, time, bank, row, count)
            events.append(event)
            self.flips.append(event)
        return events

    def check(self, now: float) -> list[FlipEvent]:
        """Применяет перевороты для строк, уже набравших порог (без сброса счетчиков)."""
        flips = []
        for row, counts in list(self.neighbor_activations.items()):
            for bank, count in counts.items():
                if (bank, row) in self.flip_entries:
                    flips.extend(self._apply_flips(bank, row, count, int(now)))
        return flips

    def fast_forward(self, start: float, rounds: int, round_cycles: float,
                     activations: dict[tuple[BankKey, int], float]) -> tuple[float, list[FlipEvent]]:
        """Пакетное продолжение hammer-цикла.

        Args:
            start: Виртуальное время начала
            rounds: Число раундов
            round_cycles: Длительность раунда в циклах
            activations: Активации агрессорной строки за раунд по (bank, row)

        Returns:
            Время окончания и список переворотов
        """
        end = start + rounds * round_cycles
        flips: list[FlipEvent] = []
        applied = 0

        def apply_until(time: float):
            nonlocal applied
            done = min(rounds, int((time - start) // round_cycles)) if time > start else 0
            delta = done - applied
            if delta <= 0:
                return
            for (bank, row), per_round in activations.items():
                count = int((applied + delta) * per_round) - int(applied * per_round)
                if count > 0:
                    self.open_rows[bank] = row
                    self._activate(bank, row, count)
            applied = done

        while self.next_refresh <= end:
            apply_until(self.next_refresh)
            flips.extend(self.refresh_tick(self.next_refresh))
        apply_until(end)
        return end, flips
