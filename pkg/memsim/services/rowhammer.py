from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from memsim.core.errors import SimulationError
from memsim.core.logging import attack_logger
from memsim.hardware.cache import HitLevel
from memsim.hardware.dram import BankKey, FlipEvent, map_address
from memsim.hardware.machine import Actor, ActorKind, Machine, PagemapDenied
from memsim.hardware.memory import HUGE_PAGE_SIZE, PAGE_SIZE, FrameKind, OutOfMemory
from memsim.hardware.mmu import FRAME_MASK, PRESENT
from memsim.schemas.machine import FlipDirection, FlipSpec, MachineConfig
from memsim.schemas.reports import Exploitability, FlipReport, SweepRow
from memsim.services.eviction import EvictionService, EvictionSet, EvictionStrategy


WARMUP_ROUNDS = 32
PTES_PER_TABLE = PAGE_SIZE // 8


class NoPairFound(SimulationError):
    """В пуле нет двух строк одного банка, подходящих для выбранной схемы."""


class HammerMethod(str, Enum):
    CLFLUSH = "clflush"
    EVICTION = "eviction"


@dataclass(frozen=True)
class HammerPair:
    aggressors: tuple[int, int]
    bank: BankKey
    rows: tuple[int, int]
    victim_row: int
    double_sided: bool = True


@dataclass
class HammerJob:
    pair: HammerPair
    method: HammerMethod = HammerMethod.CLFLUSH
    strategy: EvictionStrategy | None = None
    eviction_sets: tuple[EvictionSet, EvictionSet] | None = None
    rounds: int | None = None
    # Заполняется после hammer()
    accesses: int = 0
    round_cycles: float = 0.0
    activation_rate: float = 0.0
    flips: list[FlipReport] = field(default_factory=list)


def classify_flip(machine: Machine, paddr: int, bit: int, applied: bool = True) -> Exploitability:
    """Пригодность переворота по реестру кадров и раскладке PTE.

    Для applied=True бит в памяти уже перевернут, запись восстанавливается обратно.
    """
    kind = machine.allocator.kind(paddr // PAGE_SIZE)
    if kind == FrameKind.USER:
        return Exploitability.USER_DATA
    if kind != FrameKind.PAGE_TABLE:
        return Exploitability.NONE
    position = (paddr % 8) * 8 + bit
    entry = machine.memory.read_u64(paddr & ~7)
    if applied:
        entry ^= 1 << position
    if not entry & PRESENT:
        return Exploitability.NONE
    if FRAME_MASK >> position & 1:
        return Exploitability.PTE_ADDRESS_BIT
    return Exploitability.PTE_FLAG_BIT


def pte_redirect_target(machine: Machine, paddr: int) -> int:
    """Физический адрес, на который теперь указывает запись, содержащая paddr."""
    return machine.memory.read_u64(paddr & ~7) & FRAME_MASK


def spray_page_tables(machine: Machine, actor: Actor, tables: int) -> int:
    """Заполняет память таблицами страниц: один кадр отображается по 512 раз на таблицу.

    Возвращает число созданных таблиц (меньше запрошенного при нехватке памяти).
    """
    kernel = machine.kernel
    space = actor.space
    page = kernel.alloc(space, PAGE_SIZE, mergeable=False)
    frame = kernel.resolve(space, page)
    before = kernel.user_page_table_frames()
    created = 0
    for _ in range(tables):
        # Каждые 512 страниц с границы 2 МБ занимают ровно одну таблицу
        base = -(-space.next_shared // HUGE_PAGE_SIZE) * HUGE_PAGE_SIZE
        try:
            kernel.map_frames(space, [frame] * PTES_PER_TABLE, writable=True, vaddr=base)
        except OutOfMemory:
            attack_logger.warning("Page table spray stopped: out of memory", tables=created)
            break
        space.next_shared = base + HUGE_PAGE_SIZE
        created += 1
    attack_logger.info(f"Sprayed {created} page tables", actor=actor.name,
                       table_frames=kernel.user_page_table_frames() - before)
    return created


def page_table_share(machine: Machine) -> float:
    """Доля физических кадров, занятых таблицами страниц."""
    return machine.allocator.count(FrameKind.PAGE_TABLE) / machine.allocator.total_frames


class Rowhammer:
    """Hammer-циклы атакующего, выбор агрессоров и поиск переворотов."""

    def __init__(self, machine: Machine, attacker: Actor, eviction: EvictionService | None = None):
        self.machine = machine
        self.attacker = attacker
        self.cpu = machine.cpu(attacker)
        self.config = machine.config
        self.eviction = eviction or EvictionService(machine, attacker)
        self._pools: dict[int, list[int]] = {}

    def pool(self, count: int) -> list[int]:
        """Пул конгруэнтных адресов, общий для всех заданий с набором размера count."""
        if count not in self._pools:
            self._pools[count] = self.eviction.pool_for(count)
        return self._pools[count]

    # --- выбор адресов ---

    def locate(self, vaddr: int) -> tuple[BankKey, int]:
        """Банк и строка адреса: через pagemap или по смещению внутри 2 МБ страницы.

        Без pagemap номера строк относительные, но соседство строк сохраняется.
        """
        try:
            paddr = self.cpu.pagemap(vaddr)
        except PagemapDenied:
            paddr = vaddr % HUGE_PAGE_SIZE
        location = map_address(paddr, self.config.dram)
        return location.bank_key, location.row

    def _rows(self, region: int, size: int) -> dict[BankKey, dict[int, int]]:
        step = 1 << self.config.dram.addr_fn.column_bits
        rows: dict[BankKey, dict[int, int]] = {}
        for offset in range(0, size, step):
            bank, row = self.locate(region + offset)
            rows.setdefault(bank, {}).setdefault(row, region + offset)
        return rows

    def select_double_sided(self, region: int, size: int = HUGE_PAGE_SIZE,
                            victim_rows: list[int] | None = None) -> list[HammerPair]:
        """Пары агрессоров в строках r-1 и r+1 одного банка вокруг строки r.

        Raises:
            NoPairFound: Ни одна строка пула не окружена соседями
        """
        pairs = []
        for bank, rows in sorted(self._rows(region, size).items()):
            for row in sorted(rows):
                if victim_rows is not None and row not in victim_rows:
                    continue
                below, above = rows.get(row - 1), rows.get(row + 1)
                if below is not None and above is not None:
                    pairs.append(HammerPair((below, above), bank, (row - 1, row + 1), row))
        if not pairs:
            raise NoPairFound(f"No double-sided pair in region {region:#x} of {size:#x} bytes")
        return pairs

    def select_amplified_single_sided(self, region: int, size: int = HUGE_PAGE_SIZE) -> list[HammerPair]:
        """Две соседние строки на краю области; цель в строке за ее пределами.

        Raises:
            NoPairFound: В каждом банке меньше двух соседних строк
        """
        pairs = []
        for bank, rows in sorted(self._rows(region, size).items()):
            lowest, highest = min(rows), max(rows)
            if highest - 1 in rows:
                pairs.append(HammerPair((rows[highest - 1], rows[highest]), bank, (highest - 1, highest),
                                        highest + 1, double_sided=False))
            if lowest + 1 in rows and lowest + 1 != highest:
                pairs.append(HammerPair((rows[lowest + 1], rows[lowest]), bank, (lowest + 1, lowest),
                                        lowest - 1, double_sided=False))
        if not pairs:
            raise NoPairFound(f"No adjacent rows at the edges of region {region:#x}")
        return pairs

    # --- hammer ---

    def job(self, pair: HammerPair, method: HammerMethod = HammerMethod.CLFLUSH,
            strategy: EvictionStrategy | None = None, rounds: int | None = None) -> HammerJob:
        """Задание; для вытеснения строит наборы по pagemap для обоих агрессоров."""
        method = HammerMethod(method)
        eviction_sets = None
        if method == HammerMethod.EVICTION:
            if strategy is None:
                raise SimulationError("Eviction-based hammering needs a strategy")
            pool = self.pool(strategy.S)
            eviction_sets = tuple(self.eviction.build_static(address, strategy.S, pool)
                                  for address in pair.aggressors)
        return HammerJob(pair, method, strategy, eviction_sets, rounds)

    def _round(self, job: HammerJob) -> list[bool]:
        cpu = self.cpu
        activated = []
        for address in job.pair.aggressors:
            cpu.read(address)
            activated.append(cpu.last_level == HitLevel.DRAM)
        if job.method == HammerMethod.CLFLUSH:
            for address in job.pair.aggressors:
                cpu.clflush(address)
        else:
            for eviction_set in job.eviction_sets:
                self.eviction.run_strategy(job.strategy, eviction_set)
        return activated

    def hammer(self, job: HammerJob, windows: int = 2) -> list[FlipReport]:
        """Прогревочные раунды выполняются инструкциями, остальные пакетно через fast_forward.

        Без явного job.rounds цикл длится windows окон регенерации, чтобы строка-жертва
        гарантированно прожила полное окно под нагрузкой.
        """
        machine = self.machine
        dram = machine.dram
        flips_before = len(machine.flips)
        counters_before = self.attacker.counters.copy()
        start = machine.now

        warmup = WARMUP_ROUNDS if job.rounds is None else min(WARMUP_ROUNDS, job.rounds)
        hits = np.zeros(2)
        for _ in range(warmup):
            hits += self._round(job)
        measured = (machine.now - start) / max(1, warmup)
        if job.method == HammerMethod.CLFLUSH:
            round_cycles = self.config.ns_to_cycles(self.config.clflush_round_ns)
        else:
            round_cycles = measured
        rates = hits / max(1, warmup)
        rounds = job.rounds if job.rounds is not None else int(windows * dram.window_cycles / round_cycles)

        activations: dict[tuple[BankKey, int], float] = {}
        for aggressor, rate in zip(job.pair.aggressors, rates):
            location = dram.map_address(machine.resolve(self.attacker, aggressor))
            key = (location.bank_key, location.row)
            activations[key] = activations.get(key, 0.0) + float(rate)
        remaining = max(0, rounds - warmup)
        if remaining:
            per_round = self.attacker.counters.delta(counters_before).mean(max(1, warmup))
            machine.fast_forward(self.attacker, remaining, round_cycles, activations, per_round)
        machine.flips.extend(dram.check(machine.now))

        job.accesses = rounds
        job.round_cycles = round_cycles
        job.activation_rate = float(rates.mean())
        job.flips = [self.report(event) for event in machine.flips[flips_before:]]
        attack_logger.info(
            f"Hammered rows {job.pair.rows} for {rounds} rounds", method=job.method.value,
            round_cycles=round(round_cycles, 1), activation_rate=job.activation_rate, flips=len(job.flips),
        )
        return job.flips

    def report(self, event: FlipEvent) -> FlipReport:
        return FlipReport(
            paddr=event.paddr, bank=event.bank_key, row=event.row, bit=event.bit,
            direction=event.direction, time=event.time, activations=event.activations,
            exploitability=classify_flip(self.machine, event.paddr, event.bit),
        )

    def scan_for_flips(self, region: int, size: int = HUGE_PAGE_SIZE, pattern: int = 0xFF,
                       method: HammerMethod = HammerMethod.CLFLUSH, strategy: EvictionStrategy | None = None,
                       victim_rows: list[int] | None = None, max_pairs: int | None = None,
                       windows: int = 2) -> list[FlipReport]:
        """Заполняет область образцом, обрабатывает пары и сообщает отклонения от образца."""
        machine = self.machine
        machine.poke(self.attacker, region, bytes([pattern]) * size)
        try:
            pairs = self.select_double_sided(region, size, victim_rows)
        except NoPairFound:
            attack_logger.warning("No hammer pairs in region", region=hex(region))
            return []
        if max_pairs is not None:
            pairs = pairs[:max_pairs]
        flips_before = len(machine.flips)
        for pair in pairs:
            self.hammer(self.job(pair, method, strategy), windows)
        events = {(event.paddr, event.bit): event for event in machine.flips[flips_before:]}

        base = machine.resolve(self.attacker, region)
        data = np.frombuffer(machine.peek(self.attacker, region, size), dtype=np.uint8)
        reports = []
        for offset in np.flatnonzero(data != pattern):
            offset = int(offset)
            diff = int(data[offset]) ^ pattern
            paddr = base + offset
            for bit in range(8):
                if not diff >> bit & 1:
                    continue
                event = events.get((paddr, bit))
                location = machine.dram.map_address(paddr)
                direction = FlipDirection.ONE_TO_ZERO if pattern >> bit & 1 else FlipDirection.ZERO_TO_ONE
                reports.append(FlipReport(
                    paddr=paddr, bank=location.bank_key, row=location.row, bit=bit, direction=direction,
                    time=event.time if event is not None else machine.now,
                    activations=event.activations if event is not None else 0,
                    exploitability=classify_flip(machine, paddr, bit),
                    vaddr=region + offset,
                ))
        attack_logger.info(f"Flip scan found {len(reports)} flips", pairs=len(pairs), method=HammerMethod(method).value)
        return reports


def rowhammer_sweep(config: MachineConfig, multipliers: list[float], methods: list[HammerMethod],
                    strategy: EvictionStrategy | None = None, seed: int = 0, max_pairs: int = 8,
                    pattern: int = 0xFF, trials: int = 64) -> list[SweepRow]:
    """Число переворотов в зависимости от окна регенерации и способа hammer."""
    rows = []
    for multiplier in multipliers:
        refresh = config.refresh.model_copy(update={"multiplier": multiplier})
        swept = config.model_copy(update={"refresh": refresh})
        for method in methods:
            method = HammerMethod(method)
            machine = Machine(swept, seed=seed, trace=False)
            attacker = machine.spawn("hammer", kind=ActorKind.ATTACKER)
            hammer = Rowhammer(machine, attacker)
            region = hammer.cpu.alloc(HUGE_PAGE_SIZE, huge=True, mergeable=False)
            rate = None
            if method == HammerMethod.EVICTION:
                if strategy is None:
                    raise SimulationError("Eviction sweep needs a strategy")
                pool = hammer.pool(strategy.S)
                probe_set = hammer.eviction.build_static(region, strategy.S, pool)
                rate = hammer.eviction.evaluate(strategy, probe_set, trials).eviction_rate
            flips = hammer.scan_for_flips(region, pattern=pattern, method=method, strategy=strategy,
                                          max_pairs=max_pairs)
            rows.append(SweepRow(
                refresh_multiplier=multiplier, method=method.value,
                strategy=strategy.name if method == HammerMethod.EVICTION else None,
                eviction_rate=rate, pairs=max_pairs, flips=len(flips),
            ))
    return rows


def plant_victim_flips(config: MachineConfig, seed: int = 0, max_pairs: int = 8,
                       thresholds: tuple[int, int] = (500_000, 4_000_000)) -> MachineConfig:
    """Добавляет в карту восприимчивости по одному биту в строках-жертвах первых пар.

    Пороги распределены лог-равномерно; машина с тем же seed выделит ту же
    большую страницу первым вызовом alloc, поэтому записи попадут под hammer.
    """
    machine = Machine(config, seed=seed, trace=False)
    attacker = machine.spawn("hammer", kind=ActorKind.ATTACKER)
    hammer = Rowhammer(machine, attacker)
    region = hammer.cpu.alloc(HUGE_PAGE_SIZE, huge=True, mergeable=False)
    rows = hammer._rows(region, HUGE_PAGE_SIZE)
    rng = np.random.default_rng(seed)
    low, high = np.log(thresholds[0]), np.log(thresholds[1])
    entries = list(config.flip_map.entries)
    for pair in hammer.select_double_sided(region)[:max_pairs]:
        address = rows[pair.bank].get(pair.victim_row)
        if address is None:
            continue
        paddr = machine.resolve(attacker, address)
        entries.append(FlipSpec(
            paddr=paddr, bit=int(rng.integers(0, 8)), direction=FlipDirection.ONE_TO_ZERO,
            threshold=int(np.exp(rng.uniform(low, high))),
        ))
    attack_logger.info("Planted victim-row flips", planted=len(entries) - len(config.flip_map.entries))
    flip_map = config.flip_map.model_copy(update={"entries": entries})
    return config.model_copy(update={"flip_map": flip_map})
