from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, NamedTuple

import numpy as np
import pandas as pd

from memsim.core.errors import SimulationError
from memsim.core.logging import attack_logger
from memsim.hardware.machine import Actor, Machine
from memsim.hardware.memory import HUGE_PAGE_SIZE, PAGE_SIZE
from memsim.hardware.mmu import LEVEL_SPAN, FaultReason, LevelClass, PageFault, RegionStatus, canonical
from memsim.schemas.machine import ReplacementPolicyName
from memsim.services.eviction import EvictionService, EvictionSet, EvictionStrategy


# Свободный слот PML4 под страницу калибровки prefetch
SCRATCH_VADDR = 0x0000_7000_0000_0000

# Класс латентности, означающий отсутствие записи на данном уровне
ABSENT_AT = {
    4: LevelClass.PDPT_ABSENT,
    3: LevelClass.PD_ABSENT,
    2: LevelClass.PT_INVALID,
    1: LevelClass.PTE_ABSENT,
}
MAPPED = (LevelClass.CACHED, LevelClass.VALID_UNCACHED)

MAX_OVERLAP = 0.25


class IndistinguishableDistributions(SimulationError):
    """Распределения латентностей перекрываются, порог не разделяет состояния."""


class NotSameBank(SimulationError):
    """Адреса не лежат в разных строках одного банка DRAM."""


class ProbeKind(str, Enum):
    RELOAD = "reload"
    FLUSH = "flush"
    PREFETCH = "prefetch"
    PRIME_PROBE = "prime_probe"
    DRAM_ROW = "dram_row"


@dataclass
class Calibration:
    """Выборки латентностей по меткам и порог между ними."""
    kind: ProbeKind
    samples: dict[str, np.ndarray]
    threshold: float | None = None
    # True, если «попадание» медленнее промаха (clflush кэшированной строки)
    hit_is_slow: bool = False
    medians: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.medians = {label: float(np.median(values)) for label, values in self.samples.items()}

    def nearest(self, latency: float) -> tuple[str, float]:
        """Ближайшая по медиане метка и запас до следующей."""
        ranked = sorted(self.medians.items(), key=lambda item: (abs(item[1] - latency), item[0]))
        margin = abs(ranked[1][1] - latency) - abs(ranked[0][1] - latency) if len(ranked) > 1 else float("inf")
        return ranked[0][0], margin

    def overlap(self) -> float:
        """Доля выборок, которые порог (или ближайшая медиана) относит не к своей метке."""
        wrong = 0
        total = 0
        for label, values in self.samples.items():
            total += len(values)
            if self.threshold is None:
                wrong += sum(1 for value in values if self.nearest(float(value))[0] != label)
                continue
            slow = (label == "hit") == self.hit_is_slow
            wrong += int(np.sum(values < self.threshold)) if slow else int(np.sum(values >= self.threshold))
        return wrong / total if total else 0.0

    def histogram(self) -> pd.DataFrame:
        """Гистограмма: колонки latency, count, label."""
        frames = []
        for label, values in sorted(self.samples.items()):
            latencies, counts = np.unique(values, return_counts=True)
            frames.append(pd.DataFrame({"latency": latencies, "count": counts, "label": label}))
        if not frames:
            return pd.DataFrame(columns=["latency", "count", "label"])
        return pd.concat(frames, ignore_index=True)


class ProbeResult(NamedTuple):
    hit: bool
    latency: int
    # Оценка числа вытесненных путей для Prime+Probe
    ways: int | None = None


class TranslationProbe(NamedTuple):
    level: LevelClass
    latency: float
    margin: float
    ambiguous: bool = False


LevelMap = dict[tuple[int, int], RegionStatus]


class AttackPrimitives:
    """Примитивы атак по времени, исполняемые от имени атакующего актора."""

    def __init__(self, machine: Machine, attacker: Actor, eviction: EvictionService | None = None,
                 repeats: int | None = None, prime_size: int | None = None):
        self.machine = machine
        self.attacker = attacker
        self.cpu = machine.cpu(attacker)
        self.config = machine.config
        self.eviction = eviction or EvictionService(machine, attacker)
        noisy = self.config.noise.jitter_sigma > 0
        self.repeats = repeats or (16 if noisy else 1)
        llc = self.config.llc
        if prime_size is None:
            # При случайном замещении один путь оставляем свободным
            prime_size = llc.ways - 1 if llc.policy == ReplacementPolicyName.RANDOM else llc.ways
        self.prime_size = prime_size
        self.calibrations: dict[ProbeKind, Calibration] = {}
        self._scratch: int | None = None
        self._scratch_huge: int | None = None
        self._row_pair: tuple[int, int] | None = None

    # --- измерения ---

    def timed(self, action: Callable[[], object]) -> int:
        cpu = self.cpu
        start = cpu.rdtsc()
        action()
        return cpu.rdtsc() - start

    def timed_read(self, vaddr: int) -> int:
        return self.timed(lambda: self.cpu.read(vaddr))

    def timed_flush(self, vaddr: int) -> int:
        """Время clflush без обхода таблиц страниц: трансляция прогревается до замера."""
        cpu = self.cpu
        cpu.warm_translation(vaddr)
        return self.timed(lambda: cpu.clflush(vaddr))

    def _wait(self, turns: int):
        if turns > 0:
            self.machine.yield_turns(turns, exclude=self.attacker)

    @property
    def scratch(self) -> int:
        if self._scratch is None:
            self._scratch = self.cpu.alloc(PAGE_SIZE, mergeable=False, vaddr=SCRATCH_VADDR)
        return self._scratch

    @property
    def scratch_huge(self) -> int:
        if self._scratch_huge is None:
            self._scratch_huge = self.cpu.alloc(HUGE_PAGE_SIZE, huge=True, mergeable=False)
        return self._scratch_huge

    # --- калибровка ---

    def calibrate(self, kind: ProbeKind, samples: int = 32,
                  eviction_set: EvictionSet | None = None) -> Calibration:
        """Строит выборки для заведомо известных состояний и выбирает порог.

        Raises:
            IndistinguishableDistributions: Выборки перекрываются сильнее допустимого
        """
        kind = ProbeKind(kind)
        if kind == ProbeKind.RELOAD:
            calibration = self._calibrate_reload(samples)
        elif kind == ProbeKind.FLUSH:
            calibration = self._calibrate_flush(samples)
        elif kind == ProbeKind.PREFETCH:
            calibration = self._calibrate_prefetch(samples)
        elif kind == ProbeKind.PRIME_PROBE:
            if eviction_set is None:
                raise SimulationError("Prime+Probe calibration needs an eviction set")
            calibration = self._calibrate_prime_probe(samples, eviction_set)
        else:
            calibration = self._calibrate_dram_row(samples)

        overlap = calibration.overlap()
        if overlap > MAX_OVERLAP:
            attack_logger.error("Latency distributions overlap", kind=kind.value, overlap=overlap)
            raise IndistinguishableDistributions(
                f"{kind.value} calibration overlap {overlap:.2f} exceeds {MAX_OVERLAP}")
        self.calibrations[kind] = calibration
        attack_logger.info(f"Calibrated {kind.value} probe", kind=kind.value,
                           threshold=calibration.threshold, medians=calibration.medians)
        return calibration

    def calibration(self, kind: ProbeKind) -> Calibration:
        if kind not in self.calibrations:
            self.calibrate(kind)
        return self.calibrations[kind]

    def threshold(self, kind: ProbeKind) -> float:
        return self.calibration(kind).threshold

    @staticmethod
    def _split(kind: ProbeKind, hits: list[int], misses: list[int], hit_is_slow: bool = False) -> Calibration:
        hits_arr = np.array(hits, dtype=np.int64)
        misses_arr = np.array(misses, dtype=np.int64)
        threshold = (float(np.median(hits_arr)) + float(np.median(misses_arr))) / 2
        return Calibration(kind, {"hit": hits_arr, "miss": misses_arr}, threshold, hit_is_slow)

    def _calibrate_reload(self, samples: int) -> Calibration:
        cpu = self.cpu
        address = self.scratch
        paddr = self.machine.resolve(self.attacker, address)
        cpu.read(address)
        hits, misses = [], []
        for _ in range(samples):
            # Строка только в LLC: так ее видит атакующий после обращения жертвы с другого ядра
            cpu.read(address)
            self.machine.caches.demote(paddr, self.attacker.core)
            hits.append(self.timed_read(address))
            cpu.clflush(address)
            misses.append(self.timed_read(address))
        return self._split(ProbeKind.RELOAD, hits, misses)

    def _calibrate_flush(self, samples: int) -> Calibration:
        cpu = self.cpu
        address = self.scratch
        hits, misses = [], []
        for _ in range(samples):
            cpu.read(address)
            hits.append(self.timed_flush(address))
            misses.append(self.timed_flush(address))
        return self._split(ProbeKind.FLUSH, hits, misses, hit_is_slow=True)

    def _calibrate_prefetch(self, samples: int) -> Calibration:
        cpu = self.cpu
        base = self.scratch
        probes = {
            LevelClass.PTE_ABSENT: base + PAGE_SIZE,
            LevelClass.PT_INVALID: base + HUGE_PAGE_SIZE,
            LevelClass.PD_ABSENT: base + LEVEL_SPAN[3],
            LevelClass.PDPT_ABSENT: base + LEVEL_SPAN[4],
        }
        values: dict[str, list[int]] = {level.name: [] for level in LevelClass}
        for _ in range(samples):
            cpu.read(base)
            values[LevelClass.CACHED.name].append(self.timed(lambda: cpu.prefetch(base)))
            cpu.clflush(base)
            values[LevelClass.VALID_UNCACHED.name].append(self.timed(lambda: cpu.prefetch(base)))
            for level, address in probes.items():
                values[level.name].append(self.timed(lambda: cpu.prefetch(address)))
        return Calibration(ProbeKind.PREFETCH,
                           {label: np.array(items, dtype=np.int64) for label, items in values.items()})

    def _calibrate_prime_probe(self, samples: int, eviction_set: EvictionSet) -> Calibration:
        cpu = self.cpu
        quiet, active = [], []
        for _ in range(samples):
            cpu.clflush(eviction_set.target)
            self.prime(eviction_set)
            quiet.append(self._probe_members(eviction_set)[0])
            self.prime(eviction_set)
            cpu.read(eviction_set.target)
            active.append(self._probe_members(eviction_set)[0])
        # «Попадание» Prime+Probe означает активность в множестве, то есть медленный probe
        return self._split(ProbeKind.PRIME_PROBE, active, quiet, hit_is_slow=True)

    def find_row_pair(self) -> tuple[int, int]:
        """Два адреса своей 2 МБ страницы в разных строках одного банка."""
        if self._row_pair is not None:
            return self._row_pair
        dram = self.machine.dram
        base = self.scratch_huge
        paddr = self.cpu.pagemap(base)
        first = dram.map_address(paddr)
        row_size = self.config.dram.row_size
        for offset in range(row_size, HUGE_PAGE_SIZE, self.config.line_size):
            location = dram.map_address(paddr + offset)
            if location.bank_key == first.bank_key and location.row != first.row:
                self._row_pair = (base, base + offset)
                return self._row_pair
        raise NotSameBank("No same-bank row pair inside the scratch huge page")

    def _calibrate_dram_row(self, samples: int) -> Calibration:
        cpu = self.cpu
        mine, other = self.find_row_pair()
        hits, conflicts = [], []
        for _ in range(samples):
            cpu.clflush(mine)
            cpu.read(mine)
            cpu.clflush(mine)
            hits.append(self.timed_read(mine))
            cpu.clflush(mine)
            cpu.clflush(other)
            cpu.read(other)
            conflicts.append(self.timed_read(mine))
        return self._split(ProbeKind.DRAM_ROW, hits, conflicts)

    # --- кэш-атаки ---

    def flush_reload(self, address: int, wait: int = 1) -> ProbeResult:
        threshold = self.threshold(ProbeKind.RELOAD)
        self.cpu.clflush(address)
        self._wait(wait)
        latency = self.timed_read(address)
        return ProbeResult(latency < threshold, latency)

    def evict_reload(self, address: int, eviction_set: EvictionSet, strategy: EvictionStrategy,
                     wait: int = 1) -> ProbeResult:
        threshold = self.threshold(ProbeKind.RELOAD)
        self.eviction.run_strategy(strategy, eviction_set)
        self._wait(wait)
        latency = self.timed_read(address)
        return ProbeResult(latency < threshold, latency)

    def flush_flush(self, address: int, wait: int = 1) -> ProbeResult:
        """Только clflush: данные атакующий не читает."""
        threshold = self.threshold(ProbeKind.FLUSH)
        self._wait(wait)
        latency = self.timed_flush(address)
        return ProbeResult(latency >= threshold, latency)

    def prime(self, eviction_set: EvictionSet, size: int | None = None):
        size = size or self.prime_size
        if len(eviction_set) < size:
            raise SimulationError(f"Eviction set has {len(eviction_set)} members, prime needs {size}")
        for address in eviction_set.members[:size]:
            self.cpu.read(address)

    def _probe_members(self, eviction_set: EvictionSet, size: int | None = None) -> tuple[int, int]:
        size = size or self.prime_size
        reload_threshold = self.threshold(ProbeKind.RELOAD)
        total = 0
        displaced = 0
        for address in eviction_set.members[:size]:
            latency = self.timed_read(address)
            total += latency
            if latency >= reload_threshold:
                displaced += 1
        return total, displaced

    def probe(self, eviction_set: EvictionSet, size: int | None = None) -> ProbeResult:
        """Повторный обход набора; число медленных обращений оценивает занятые жертвой пути."""
        total, displaced = self._probe_members(eviction_set, size)
        calibration = self.calibrations.get(ProbeKind.PRIME_PROBE)
        hit = total >= calibration.threshold if calibration is not None else displaced > 0
        return ProbeResult(hit, total, displaced)

    def prime_probe(self, eviction_set: EvictionSet, wait: int = 1, size: int | None = None) -> ProbeResult:
        self.prime(eviction_set, size)
        self._wait(wait)
        return self.probe(eviction_set, size)

    def evict_time(self, routine: Callable[[], object], eviction_set: EvictionSet,
                   strategy: EvictionStrategy, runs: int = 16) -> float:
        """Среднее время процедуры жертвы с вытеснением минус без него."""
        plain, evicted = [], []
        for _ in range(runs):
            routine()
            plain.append(self.timed(routine))
            self.eviction.run_strategy(strategy, eviction_set)
            evicted.append(self.timed(routine))
        delta = float(np.mean(evicted) - np.mean(plain))
        attack_logger.debug("Evict+Time measured", runs=runs, delta=delta)
        return delta

    # --- prefetch-оракулы ---

    def translation_level_probe(self, vaddr: int, repeats: int | None = None) -> TranslationProbe:
        """Класс глубины трансляции по латентности непривилегированного prefetch."""
        calibration = self.calibration(ProbeKind.PREFETCH)
        repeats = repeats or self.repeats
        latencies = [self.timed(lambda: self.cpu.prefetch(vaddr)) for _ in range(repeats)]
        latency = float(np.median(latencies))
        label, margin = calibration.nearest(latency)
        medians = sorted(calibration.medians.values())
        min_gap = min(b - a for a, b in zip(medians, medians[1:]))
        return TranslationProbe(LevelClass[label], latency, margin, margin < min_gap / 2)

    def _classify_region(self, level: int, base: int, k: int) -> RegionStatus:
        probes = 1 if level == 1 else k
        span = LEVEL_SPAN[level]
        classes = [self.translation_level_probe(base + index * (span // probes)).level for index in range(probes)]
        if all(level_class in MAPPED for level_class in classes):
            if level == 4:
                return RegionStatus.TABLE
            # Полностью отображенную таблицу от большой страницы отличает только охват записи TLB
            return RegionStatus.PAGE if self._single_translation(level, base) else RegionStatus.TABLE
        if level == 1 or all(level_class == ABSENT_AT[level] for level_class in classes):
            return RegionStatus.INVALID
        return RegionStatus.TABLE

    def _single_translation(self, level: int, base: int) -> bool:
        """Транслируется ли конец области без обхода сразу после ее начала."""
        cpu = self.cpu
        last = base + LEVEL_SPAN[level] - PAGE_SIZE
        try:
            cpu.warm_translation(base)
            hit = self.timed(lambda: cpu.warm_translation(base))
            latency = self.timed(lambda: cpu.warm_translation(last))
        except PageFault as e:
            # Охват TLB для страниц ядра из пользовательского режима не виден, считаем страницей
            return e.reason == FaultReason.PRIVILEGE
        return latency <= hit

    def recover_translation_levels(self, slots: range | list[int] = range(256), k: int = 4) -> LevelMap:
        """Обход в ширину от PML4: состояние каждой посещенной области по уровням."""
        queue = deque((4, canonical(slot << 39)) for slot in slots)
        levels: LevelMap = {}
        probes_before = self.attacker.counters.instructions
        while queue:
            level, base = queue.popleft()
            status = self._classify_region(level, base, k)
            levels[(level, base)] = status
            if status == RegionStatus.TABLE and level > 1:
                span = LEVEL_SPAN[level - 1]
                queue.extend((level - 1, base + index * span) for index in range(512))
        attack_logger.info("Translation levels recovered", regions=len(levels),
                           tables=sum(1 for status in levels.values() if status == RegionStatus.TABLE),
                           instructions=self.attacker.counters.instructions - probes_before)
        return levels

    def address_translation_probe(self, p: int, p_bar: int, repeats: int | None = None) -> bool:
        """Flush p, prefetch p̄, reload p: попадание означает одну физическую строку."""
        threshold = self.threshold(ProbeKind.RELOAD)
        cpu = self.cpu
        for _ in range(repeats or self.repeats):
            cpu.clflush(p)
            cpu.prefetch(p_bar)
            if self.timed_read(p) < threshold:
                return True
        return False

    def find_direct_map_alias(self, p: int, stride: int = HUGE_PAGE_SIZE) -> int | None:
        """Перебор кандидатов прямого отображения с тем же смещением в пределах stride.

        p должен лежать в странице размера не меньше stride, иначе смещение неизвестно.
        """
        base = self.config.kernel.direct_map_base
        offset = p % stride
        for index in range(self.config.phys_bytes // stride):
            candidate = base + index * stride + offset
            if self.address_translation_probe(p, candidate):
                attack_logger.info("Direct-map alias found", p=p, alias=candidate, probes=index + 1)
                return candidate
        attack_logger.info("No direct-map alias found", p=p)
        return None

    def default_strategy(self, eviction_set: EvictionSet) -> EvictionStrategy:
        size = len(eviction_set)
        return EvictionStrategy(S=size, C=2, D=min(2, size), L=1)

    def kernel_eviction_set(self, target: int, count: int | None = None,
                            pool: list[int] | None = None) -> EvictionSet:
        """Набор вытеснения для адреса ядра; физический адрес берется из таблиц ядра."""
        llc = self.config.llc
        count = count or llc.ways + llc.ways // 2
        target_paddr = self.machine.kernel.resolve(self.attacker.space, target, kernel=True)
        if target_paddr is None:
            raise SimulationError(f"Kernel address {target:#x} is not mapped")
        return self.eviction.build_static(target, count, pool, target_paddr=target_paddr)

    def evict_prefetch(self, p: int, routine: Callable[[], object], eviction_set: EvictionSet,
                       strategy: EvictionStrategy | None = None) -> bool:
        """Evict p, вызов процедуры, prefetch p; обязательный контрольный прогон без вызова."""
        calibration = self.calibration(ProbeKind.PREFETCH)
        threshold = (calibration.medians[LevelClass.CACHED.name]
                     + calibration.medians[LevelClass.VALID_UNCACHED.name]) / 2
        strategy = strategy or self.default_strategy(eviction_set)
        cpu = self.cpu

        self.eviction.run_strategy(strategy, eviction_set)
        control = self.timed(lambda: cpu.prefetch(p))
        self.eviction.run_strategy(strategy, eviction_set)
        routine()
        latency = self.timed(lambda: cpu.prefetch(p))
        if control < threshold:
            attack_logger.warning("Evict+Prefetch control run was fast", p=p, control=control)
            return False
        return latency < threshold

    def scan_syscall_pages(self, pages: list[int], routine: Callable[[], object],
                           line_offset: int = 0) -> list[int]:
        """Страницы области, которые процедура (системный вызов) затрагивает."""
        llc = self.config.llc
        count = llc.ways + llc.ways // 2
        pool = self.eviction.pool_for(count)
        used = []
        for page in pages:
            target = page + line_offset
            eviction_set = self.kernel_eviction_set(target, count, pool)
            if self.evict_prefetch(target, routine, eviction_set):
                used.append(page)
        attack_logger.info("Syscall page scan finished", scanned=len(pages), used=len(used))
        return used

    # --- DRAM ---

    def _check_same_bank(self, mine_paddr: int, other_paddr: int):
        dram = self.machine.dram
        mine = dram.map_address(mine_paddr)
        other = dram.map_address(other_paddr)
        if mine.bank_key != other.bank_key or mine.row == other.row:
            raise NotSameBank(
                f"{mine_paddr:#x} (bank {mine.bank_key}, row {mine.row}) and "
                f"{other_paddr:#x} (bank {other.bank_key}, row {other.row}) are not a row pair")

    def dram_row_probe(self, mine: int, victim_paddr: int, wait: int = 1) -> ProbeResult:
        """Row-conflict: открываем свою строку, ждем, медленное чтение значит, что жертва открыла другую.

        Raises:
            NotSameBank: Адреса в разных банках или в одной строке
        """
        self._check_same_bank(self.cpu.pagemap(mine), victim_paddr)
        threshold = self.threshold(ProbeKind.DRAM_ROW)
        cpu = self.cpu
        cpu.clflush(mine)
        cpu.read(mine)
        cpu.clflush(mine)
        self._wait(wait)
        latency = self.timed_read(mine)
        return ProbeResult(latency >= threshold, latency)

    def dram_row_hit_probe(self, mine: int, opener: int, wait: int = 1) -> ProbeResult:
        """Row-hit: закрываем строку mine своей строкой opener; быстрое чтение значит, что жертва ее открыла."""
        self._check_same_bank(self.cpu.pagemap(mine), self.cpu.pagemap(opener))
        threshold = self.threshold(ProbeKind.DRAM_ROW)
        cpu = self.cpu
        cpu.clflush(opener)
        cpu.read(opener)
        cpu.clflush(mine)
        self._wait(wait)
        latency = self.timed_read(mine)
        return ProbeResult(latency < threshold, latency)


def true_level_map(machine: Machine, root: int, slots: range | list[int] = range(256)) -> LevelMap:
    """Истинная карта уровней по таблицам страниц в том же порядке обхода."""
    mmu = machine.mmu
    queue = deque((4, canonical(slot << 39)) for slot in slots)
    levels: LevelMap = {}
    while queue:
        level, base = queue.popleft()
        status = mmu.region_status(root, level, base)
        levels[(level, base)] = status
        if status == RegionStatus.TABLE and level > 1:
            span = LEVEL_SPAN[level - 1]
            queue.extend((level - 1, base + index * span) for index in range(512))
    return levels
