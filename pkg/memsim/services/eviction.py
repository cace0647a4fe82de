from dataclasses import dataclass, field

import numpy as np

from pydantic import BaseModel, model_validator

from memsim.core.errors import SimulationError
from memsim.core.logging import attack_logger
from memsim.hardware.cache import set_index, slice_of
from memsim.hardware.machine import Actor, ActorKind, Machine
from memsim.hardware.memory import HUGE_PAGE_SIZE
from memsim.schemas.machine import MachineConfig
from memsim.schemas.reports import StrategyReport


DEFAULT_EVICTION_THRESHOLD = 0.9975


class SetTooSmall(SimulationError):
    """В наборе вытеснения меньше S адресов."""


class InsufficientCongruentMemory(SimulationError):
    """В пуле не хватает конгруэнтных адресов."""


class CannotReachThreshold(SimulationError):
    """Кандидаты исчерпаны, а доля вытеснения ниже порога."""


class EvictionStrategy(BaseModel):
    """Стратегия P-C-D-L-S."""
    S: int
    C: int = 1
    D: int = 1
    L: int = 1

    class Config:
        frozen = True

    @model_validator(mode="after")
    def check_ranges(self) -> "EvictionStrategy":
        if self.S < 1:
            raise ValueError("eviction set size S must be >= 1")
        if not 1 <= self.D <= self.S:
            raise ValueError("D must satisfy 1 <= D <= S")
        if not 1 <= self.L <= self.D:
            raise ValueError("L must satisfy 1 <= L <= D")
        if self.C < 1:
            raise ValueError("C must be >= 1")
        return self

    @property
    def name(self) -> str:
        return f"P-{self.C}-{self.D}-{self.L}-{self.S}"

    @property
    def access_count(self) -> int:
        return self.C * self.D * ((self.S - self.D) // self.L + 1)

    def pattern(self) -> tuple[int, ...]:
        """Индексы адресов набора в порядке обращения (тройной цикл)."""
        order = []
        for start in range(0, self.S - self.D + 1, self.L):
            for _ in range(self.C):
                order.extend(range(start, start + self.D))
        return tuple(order)

    def canonical(self) -> tuple[int, ...]:
        """Шаблон с метками адресов, перенумерованными по первому появлению."""
        labels: dict[int, int] = {}
        return tuple(labels.setdefault(index, len(labels)) for index in self.pattern())


@dataclass
class EvictionSet:
    target: int
    members: list[int]

    def __len__(self) -> int:
        return len(self.members)


@dataclass
class DynamicEvictionResult:
    eviction_set: EvictionSet
    accesses: list[int]
    eviction_rate: float
    latency: float
    evaluations: int = 0
    history: list[tuple[str, int, float]] = field(default_factory=list)

    @property
    def pattern(self) -> tuple[int, ...]:
        index = {member: position for position, member in enumerate(self.eviction_set.members)}
        return tuple(index[address] for address in self.accesses)


class EvictionService:
    """Построение наборов вытеснения и выполнение стратегий от имени атакующего."""

    def __init__(self, machine: Machine, attacker: Actor):
        self.machine = machine
        self.attacker = attacker
        self.cpu = machine.cpu(attacker)
        self.config = machine.config

    # --- память ---

    def congruent_per_huge_page(self) -> float:
        llc = self.config.llc
        stride = llc.line_size * llc.sets
        return max(1.0, HUGE_PAGE_SIZE / stride) / llc.slices

    def allocate_pool(self, huge_pages: int) -> list[int]:
        """Пул 2 МБ страниц; возвращает базовые адреса страниц."""
        base = self.cpu.alloc(huge_pages * HUGE_PAGE_SIZE, huge=True, mergeable=False)
        return [base + index * HUGE_PAGE_SIZE for index in range(huge_pages)]

    def pool_for(self, count: int) -> list[int]:
        pages = int(-(-(count + 1) * 2 // self.congruent_per_huge_page())) + 1
        return self.allocate_pool(pages)

    # --- статическое построение ---

    def build_static(self, target: int, count: int, pool: list[int] | None = None,
                     target_paddr: int | None = None) -> EvictionSet:
        """Набор из count адресов с тем же множеством и срезом LLC, что у target.

        Требует знания физических адресов (pagemap). target_paddr задается явно
        для целей вне пространства атакующего (страницы ядра).

        Raises:
            InsufficientCongruentMemory: Пул слишком мал
        """
        config = self.config
        llc = config.llc
        if pool is None:
            pool = self.pool_for(count)
        if target_paddr is None:
            target_paddr = self.cpu.pagemap(target)
        if target_paddr is None:
            raise SimulationError(f"Target {target:#x} is not mapped")
        target_line = target_paddr >> llc.offset_bits
        target_set = set_index(target_paddr, llc)
        target_slice = slice_of(target_paddr, config.slice_hash) if llc.slices > 1 else 0
        stride = llc.line_size * llc.sets
        low = target_paddr % stride

        members: list[int] = []
        for base in pool:
            page_paddr = self.cpu.pagemap(base)
            if stride <= HUGE_PAGE_SIZE:
                offsets = range(low, HUGE_PAGE_SIZE, stride)
            elif page_paddr % stride == low - low % HUGE_PAGE_SIZE:
                offsets = [low % HUGE_PAGE_SIZE]
            else:
                continue
            for offset in offsets:
                paddr = page_paddr + offset
                if paddr >> llc.offset_bits == target_line or set_index(paddr, llc) != target_set:
                    continue
                if llc.slices > 1 and slice_of(paddr, config.slice_hash) != target_slice:
                    continue
                members.append(base + offset)
                if len(members) == count:
                    return EvictionSet(target, members)

        attack_logger.error("Not enough congruent memory", requested=count, found=len(members))
        raise InsufficientCongruentMemory(
            f"Found {len(members)} congruent addresses, {count} requested")

    # --- выполнение стратегии ---

    def run_strategy(self, strategy: EvictionStrategy, eviction_set: EvictionSet) -> int:
        """Выполняет цикл стратегии и возвращает его время по rdtsc.

        Raises:
            SetTooSmall: В наборе меньше S адресов
        """
        members = eviction_set.members
        if len(members) < strategy.S:
            raise SetTooSmall(f"Eviction set has {len(members)} members, {strategy.name} needs {strategy.S}")
        cpu = self.cpu
        start = cpu.rdtsc()
        for s in range(0, strategy.S - strategy.D + 1, strategy.L):
            for _ in range(strategy.C):
                for d in range(strategy.D):
                    cpu.read(members[s + d])
        return cpu.rdtsc() - start

    def evaluate(self, strategy: EvictionStrategy, eviction_set: EvictionSet, trials: int) -> StrategyReport:
        """Доля испытаний, после которых цель вытеснена (по истинному состоянию кэша)."""
        if trials < 1:
            raise SimulationError("At least one trial is required")
        cpu = self.cpu
        target_paddr = self.machine.resolve(self.attacker, eviction_set.target)
        counters = self.attacker.counters
        evicted = 0
        total_time = 0
        misses = 0
        for _ in range(trials):
            cpu.read(eviction_set.target)
            before = counters.cache_misses
            total_time += self.run_strategy(strategy, eviction_set)
            misses += counters.cache_misses - before
            if not self.machine.caches.is_cached(target_paddr):
                evicted += 1
        misses = misses / trials
        accesses = strategy.access_count
        return StrategyReport(
            strategy=strategy.name, C=strategy.C, D=strategy.D, L=strategy.L, S=strategy.S,
            accesses=accesses,
            hits=max(0.0, accesses - misses),
            misses=misses,
            time_cycles=total_time / trials,
            eviction_rate=evicted / trials,
            trials=trials,
        )

    # --- динамическое построение ---

    def reload_threshold(self, target: int, samples: int = 5) -> float:
        """Середина между временем повторного чтения и чтения после clflush."""
        cpu = self.cpu
        hits, misses = [], []
        for _ in range(samples):
            cpu.read(target)
            start = cpu.rdtsc()
            cpu.read(target)
            hits.append(cpu.rdtsc() - start)
            cpu.clflush(target)
            start = cpu.rdtsc()
            cpu.read(target)
            misses.append(cpu.rdtsc() - start)
        return float(np.median(hits) + np.median(misses)) / 2

    def _decide(self, target: int, accesses: list[int], tests: int, threshold_latency: float,
                crn_seed: int) -> tuple[float, float]:
        """Доля вытеснения и среднее время обхода; перед оценкой машина приводится в одно состояние."""
        self.machine.quiesce(seed=crn_seed)
        cpu = self.cpu
        evicted = 0
        total = 0
        for _ in range(tests):
            cpu.read(target)
            start = cpu.rdtsc()
            for address in accesses:
                cpu.read(address)
            total += cpu.rdtsc() - start
            start = cpu.rdtsc()
            cpu.read(target)
            if cpu.rdtsc() - start >= threshold_latency:
                evicted += 1
        return evicted / tests, total / tests

    def candidates(self, target: int, pool: list[int], stride: int) -> list[int]:
        """Адреса пула с тем же смещением, что у цели, по модулю stride."""
        low = target % stride
        line_bits = self.config.llc.offset_bits
        out = []
        for base in pool:
            for offset in range(low % min(stride, HUGE_PAGE_SIZE), HUGE_PAGE_SIZE, stride):
                address = base + offset
                if address >> line_bits != target >> line_bits:
                    out.append(address)
        return out

    def build_dynamic(self, target: int, threshold: float, tests_per_decision: int,
                      pool: list[int] | None = None, stride: int | None = None,
                      max_passes: int = 2, crn_seed: int = 0) -> DynamicEvictionResult:
        """Построение набора без знания физических адресов, только по времени доступа.

        Args:
            target: Виртуальный адрес цели
            threshold: Требуемая доля вытеснения
            tests_per_decision: Повторов на одно решение cached(p)
            pool: Базы 2 МБ страниц с кандидатами
            stride: Шаг кандидатов; 2^(b+n) при известной геометрии, 4096 в запасном варианте
            max_passes: Сколько раз адрес может входить в последовательность доступов
            crn_seed: Фиксированный поток политики замещения для всех оценок

        Raises:
            CannotReachThreshold: Порог не достигнут на всех кандидатах
        """
        llc = self.config.llc
        if stride is None:
            stride = llc.line_size * llc.sets
        if pool is None:
            pool = self.pool_for(4 * llc.ways)
        threshold_latency = self.reload_threshold(target)
        result = DynamicEvictionResult(EvictionSet(target, []), [], 0.0, 0.0)

        def decide(accesses: list[int]) -> tuple[float, float]:
            result.evaluations += 1
            return self._decide(target, accesses, tests_per_decision, threshold_latency, crn_seed)

        # Фаза 1: добавление адресов до достижения порога
        accesses: list[int] = []
        rate, latency = decide(accesses)
        pending = self.candidates(target, pool, stride)
        step = 1
        passes = 1
        while rate < threshold:
            if pending:
                batch, pending = pending[:step], pending[step:]
                accesses.extend(batch)
                if len(accesses) >= 2 * llc.ways:
                    step = max(1, len(accesses) // 8)
            elif passes < max_passes:
                passes += 1
                accesses.extend(dict.fromkeys(accesses))
            else:
                attack_logger.error("Eviction threshold not reached", accesses=len(accesses),
                                    rate=rate, threshold=threshold)
                raise CannotReachThreshold(
                    f"Rate {rate:.4f} below {threshold} after {len(accesses)} accesses")
            rate, latency = decide(accesses)
        result.history.append(("grow", len(accesses), rate))

        changed = True
        while changed:
            changed = False
            # Фаза 2: удаление адресов целиком, группами, затем по одному
            members = list(dict.fromkeys(accesses))
            chunk = max(1, len(members) // 2)
            while chunk >= 1:
                index = 0
                while index < len(members):
                    dropped = set(members[index:index + chunk])
                    trial = [address for address in accesses if address not in dropped]
                    trial_rate, trial_latency = decide(trial)
                    if trial_rate >= threshold:
                        accesses, rate, latency = trial, trial_rate, trial_latency
                        members = list(dict.fromkeys(accesses))
                        changed = True
                    else:
                        index += chunk
                chunk //= 2
            result.history.append(("reduce", len(members), rate))

            # Фаза 3: удаление повторных обращений без потери доли и без роста времени
            position = len(accesses) - 1
            while position >= 0:
                address = accesses[position]
                if accesses.count(address) > 1:
                    trial = accesses[:position] + accesses[position + 1:]
                    trial_rate, trial_latency = decide(trial)
                    if trial_rate >= threshold and trial_latency <= latency:
                        accesses, rate, latency = trial, trial_rate, trial_latency
                        changed = True
                position -= 1
            result.history.append(("dedupe", len(accesses), rate))

        result.eviction_set = EvictionSet(target, list(dict.fromkeys(accesses)))
        result.accesses = accesses
        result.eviction_rate = rate
        result.latency = latency
        attack_logger.info(
            f"Dynamic eviction set with {len(result.eviction_set)} members",
            members=len(result.eviction_set), accesses=len(accesses), rate=rate,
            evaluations=result.evaluations,
        )
        return result

    def audit_minimality(self, result: DynamicEvictionResult, threshold: float, tests_per_decision: int,
                         crn_seed: int = 0) -> list[str]:
        """Проверка одиночными удалениями; возвращает список нарушений."""
        target = result.eviction_set.target
        threshold_latency = self.reload_threshold(target)
        accesses = result.accesses
        violations = []
        for member in result.eviction_set.members:
            trial = [address for address in accesses if address != member]
            rate, _ = self._decide(target, trial, tests_per_decision, threshold_latency, crn_seed)
            if rate >= threshold:
                violations.append(f"member {member:#x} is redundant")
        for position, address in enumerate(accesses):
            if accesses.count(address) < 2:
                continue
            trial = accesses[:position] + accesses[position + 1:]
            rate, latency = self._decide(target, trial, tests_per_decision, threshold_latency, crn_seed)
            if rate >= threshold and latency <= result.latency:
                violations.append(f"access #{position} is redundant")
        return violations


def explore_candidates(c_values: list[int], d_values: list[int], l_values: list[int],
                       sizes: list[int]) -> list[EvictionStrategy]:
    """Все допустимые стратегии без эквивалентных по перенумерации адресов."""
    seen: set[tuple[int, ...]] = set()
    strategies = []
    for size in sorted(sizes):
        for c in sorted(c_values):
            for d in sorted(d_values):
                for step in sorted(l_values):
                    if not (1 <= step <= d <= size):
                        continue
                    strategy = EvictionStrategy(S=size, C=c, D=d, L=step)
                    key = strategy.canonical()
                    if key in seen:
                        continue
                    seen.add(key)
                    strategies.append(strategy)
    return strategies


def rank_key(report: StrategyReport, threshold: float) -> tuple:
    """Сначала стратегии с долей не ниже порога по времени, затем остальные по доле."""
    meets = report.meets(threshold)
    return (
        0 if meets else 1,
        report.time_cycles if meets else -report.eviction_rate,
        report.time_cycles,
        report.S,
        report.strategy,
    )


def rank_reports(reports: list[StrategyReport], threshold: float = DEFAULT_EVICTION_THRESHOLD) -> list[StrategyReport]:
    return sorted(reports, key=lambda report: rank_key(report, threshold))


def evaluate_strategy_on_clone(config: MachineConfig, strategy: EvictionStrategy, trials: int,
                               seed: int) -> StrategyReport:
    """Оценка стратегии на собственной машине (пригодно для параллельного запуска)."""
    machine = Machine(config, seed=seed, trace=False)
    attacker = machine.spawn("explorer", kind=ActorKind.ATTACKER)
    service = EvictionService(machine, attacker)
    pool = service.pool_for(strategy.S)
    target = pool[0]
    eviction_set = service.build_static(target, strategy.S, pool)
    return service.evaluate(strategy, eviction_set, trials)


def explore(config: MachineConfig, strategies: list[EvictionStrategy], trials: int, seed: int,
            threshold: float = DEFAULT_EVICTION_THRESHOLD) -> list[StrategyReport]:
    """Последовательная оценка и ранжирование; параллельная версия в broker.py."""
    attack_logger.info(f"Exploring {len(strategies)} eviction strategies", machine=config.name, trials=trials)
    reports = [evaluate_strategy_on_clone(config, strategy, trials, seed) for strategy in strategies]
    return rank_reports(reports, threshold)
