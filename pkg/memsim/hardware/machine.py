import json
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Generator, Iterable, Mapping, NamedTuple

import numpy as np

from memsim.core.errors import SimulationError
from memsim.core.logging import sim_logger
from memsim.hardware.cache import AccessKind, CacheHierarchy, HitLevel
from memsim.hardware.dram import Dram, FlipEvent
from memsim.hardware.kernel import TRAMPOLINE_VADDR, AddressSpace, Kernel
from memsim.hardware.memory import PAGE_SIZE, FrameAllocator, PhysicalMemory
from memsim.hardware.mmu import FaultReason, Intent, Mmu, PageFault, Privilege
from memsim.schemas.machine import Addressing, IsolationMode, MachineConfig


class BudgetExhausted(SimulationError):
    """Исчерпан бюджет виртуального времени."""


class ActorFault(SimulationError):
    """Необработанная ошибка страницы в пользовательском коде актора."""

    def __init__(self, actor: str, fault: PageFault):
        self.actor = actor
        self.fault = fault
        super().__init__(f"Actor {actor} faulted: {fault.message}")


class PagemapDenied(SimulationError):
    """Интерфейс pagemap недоступен непривилегированному процессу."""


class ActorKind(str, Enum):
    ATTACKER = "attacker"
    VICTIM = "victim"
    OS = "os"


class Schedule(str, Enum):
    ROUND_ROBIN = "round_robin"
    SEEDED_INTERLEAVE = "seeded_interleave"


@dataclass(slots=True)
class PerfCounters:
    cache_references: int = 0
    cache_misses: int = 0
    l1d_rm: int = 0
    ll_ra: int = 0
    itlb_ra: int = 0
    itlb_wa: int = 0
    dtlb_ra: int = 0
    dtlb_rm: int = 0
    instructions: int = 0
    page_faults: int = 0

    def copy(self) -> "PerfCounters":
        return PerfCounters(**asdict(self))

    def add(self, other: "PerfCounters", times: int = 1):
        for item in fields(self):
            setattr(self, item.name, getattr(self, item.name) + getattr(other, item.name) * times)

    def delta(self, earlier: "PerfCounters") -> "PerfCounters":
        return PerfCounters(**{
            item.name: getattr(self, item.name) - getattr(earlier, item.name) for item in fields(self)
        })

    def mean(self, count: int) -> "PerfCounters":
        """Средние значения на одну из count итераций (с округлением)."""
        return PerfCounters(**{
            item.name: int(round(getattr(self, item.name) / count)) for item in fields(self)
        })

    @property
    def itlb_events(self) -> int:
        return self.itlb_ra + self.itlb_wa

    def as_dict(self) -> dict[str, int]:
        """Имена событий в стиле perf (CACHE_MISSES, ITLB_RA, ...)."""
        return {key.upper(): value for key, value in asdict(self).items()}


class TraceEvent(NamedTuple):
    time: int
    actor: str
    op: str
    vaddr: int | None
    paddr: int | None
    latency: int
    detail: str = ""


class CounterSample(NamedTuple):
    time: int
    actor: str
    counters: dict[str, int]


@dataclass(frozen=True)
class Trace:
    """Неизменяемый результат прогона."""
    end_time: int
    events: tuple[TraceEvent, ...]
    flips: tuple[FlipEvent, ...]
    faults: tuple[str, ...]
    counters: Mapping[str, Mapping[str, int]]
    samples: tuple[CounterSample, ...] = ()

    def to_jsonl(self, path: Path):
        with open(path, "w", encoding="utf-8") as out:
            for event in self.events:
                out.write(json.dumps({"type": "instruction", **event._asdict()}) + "\n")
            for flip in self.flips:
                out.write(json.dumps({
                    "type": "flip", "paddr": flip.paddr, "bit": flip.bit,
                    "direction": flip.direction.value, "time": flip.time,
                    "bank": list(flip.bank_key), "row": flip.row, "activations": flip.activations,
                }) + "\n")
            for fault in self.faults:
                out.write(json.dumps({"type": "fault", "message": fault}) + "\n")
            counters = {name: dict(values) for name, values in self.counters.items()}
            out.write(json.dumps({"type": "summary", "end_time": self.end_time, "counters": counters}) + "\n")


Program = Callable[["Cpu"], Generator[None, None, None]]


@dataclass
class Actor:
    id: int
    name: str
    kind: ActorKind
    core: int
    space: AddressSpace
    program: Program | None = None
    daemon: bool = False
    counters: PerfCounters = field(default_factory=PerfCounters)
    code_pages: list[int] = field(default_factory=list)
    finished: bool = False
    started: bool = False
    gen: Generator | None = None

    @property
    def scheduled(self) -> bool:
        return self.program is not None and not self.finished


class ActorSpec(NamedTuple):
    name: str
    program: Program
    kind: ActorKind = ActorKind.ATTACKER
    core: int = 0
    daemon: bool = False


class Cpu:
    """Набор инструкций, доступный программе актора.

    Единственный источник времени для актора: rdtsc().
    """

    def __init__(self, machine: "Machine", actor: Actor):
        self.machine = machine
        self.actor = actor
        self.privilege = Privilege.USER
        self.root = actor.space.user_root
        self.code_page: int | None = None
        self.last_level: HitLevel | None = None

    @property
    def core(self) -> int:
        return self.actor.core

    @property
    def counters(self) -> PerfCounters:
        return self.actor.counters

    def _translate(self, vaddr: int, intent: Intent):
        machine = self.machine
        try:
            translation = machine.mmu.translate(vaddr, self.root, self.core, self.privilege, intent)
        except PageFault:
            self.counters.page_faults += 1
            raise
        if intent == Intent.EXEC:
            if not translation.tlb_hit:
                self.counters.itlb_wa += 1
        else:
            self.counters.dtlb_ra += 1
            if not translation.tlb_hit:
                self.counters.dtlb_rm += 1
        return translation

    def _account(self, level: HitLevel, kind: AccessKind):
        counters = self.counters
        if level != HitLevel.L1 and kind != AccessKind.CODE:
            counters.l1d_rm += 1
        if level in (HitLevel.L3, HitLevel.REMOTE, HitLevel.DRAM):
            counters.cache_references += 1
            counters.ll_ra += 1
            if level != HitLevel.L3:
                counters.cache_misses += 1

    def _memory_access(self, vaddr: int, intent: Intent, kind: AccessKind) -> tuple[int, int]:
        machine = self.machine
        machine.enter(self.actor)
        translation = self._translate(vaddr, intent)
        result = machine.caches.access(translation.paddr, self.core, kind, vaddr)
        self.last_level = result.hit_level
        self._account(result.hit_level, kind)
        self.counters.instructions += 1
        return translation.paddr, translation.latency + result.latency

    def read(self, vaddr: int, size: int = 8) -> int:
        paddr, latency = self._memory_access(vaddr, Intent.LOAD, AccessKind.READ)
        self.machine.tick(self.actor, latency, "read", vaddr, paddr, jitter=True, detail=self.last_level.value)
        return int.from_bytes(self.machine.memory.read(paddr, size), "little")

    def read_bytes(self, vaddr: int, length: int) -> bytes:
        """Чтение диапазона: по одному доступу на каждую строку кэша."""
        line = self.machine.config.line_size
        chunks = []
        offset = 0
        while offset < length:
            chunk = min(length - offset, line - ((vaddr + offset) % line))
            paddr, latency = self._memory_access(vaddr + offset, Intent.LOAD, AccessKind.READ)
            self.machine.tick(self.actor, latency, "read", vaddr + offset, paddr, jitter=True)
            chunks.append(self.machine.memory.read(paddr, chunk))
            offset += chunk
        return b"".join(chunks)

    def write(self, vaddr: int, value: int | bytes, size: int = 8):
        """Запись; запись в COW-страницу стоит cow_multiplier обычных записей."""
        payload = value if isinstance(value, bytes) else (value & ((1 << 8 * size) - 1)).to_bytes(size, "little")
        machine = self.machine
        multiplier = 1
        try:
            paddr, latency = self._memory_access(vaddr, Intent.STORE, AccessKind.WRITE)
        except PageFault as fault:
            space = self.actor.space
            if fault.reason != FaultReason.WRITE_PROTECT or not machine.kernel.handle_cow(space, vaddr):
                raise
            multiplier = machine.config.dedup.cow_multiplier
            paddr, latency = self._memory_access(vaddr, Intent.STORE, AccessKind.WRITE)
        machine.memory.write(paddr, payload)
        machine.tick(self.actor, latency * multiplier, "write", vaddr, paddr, jitter=True,
                     detail="cow" if multiplier > 1 else "")

    def warm_translation(self, vaddr: int):
        """Только трансляция: заполняет TLB, состояние кэшей данных не меняет."""
        machine = self.machine
        machine.enter(self.actor)
        translation = self._translate(vaddr, Intent.LOAD)
        machine.tick(self.actor, translation.latency, "translate", vaddr, translation.paddr)

    def clflush(self, vaddr: int):
        machine = self.machine
        machine.enter(self.actor)
        translation = self._translate(vaddr, Intent.LOAD)
        latency = translation.latency + machine.caches.flush(translation.paddr, self.core)
        self.counters.instructions += 1
        machine.tick(self.actor, latency, "clflush", vaddr, translation.paddr, jitter=True)

    def prefetch(self, vaddr: int):
        """Программный prefetch: без проверок привилегий и без ошибок."""
        machine = self.machine
        machine.enter(self.actor)
        latency, level_class = machine.mmu.prefetch(vaddr, self.root, self.core)
        self.counters.instructions += 1
        machine.tick(self.actor, latency, "prefetch", vaddr, None, jitter=True, detail=level_class.name)

    def rdtsc(self) -> int:
        machine = self.machine
        machine.enter(self.actor)
        self.counters.instructions += 1
        machine.tick(self.actor, machine.config.latency.rdtsc, "rdtsc", None, None)
        return machine.now

    def serialize(self):
        machine = self.machine
        machine.enter(self.actor)
        self.counters.instructions += 1
        machine.tick(self.actor, machine.config.latency.serialize, "serialize", None, None)

    def pause(self, cycles: int | None = None):
        machine = self.machine
        machine.enter(self.actor)
        self.counters.instructions += 1
        machine.tick(self.actor, machine.config.latency.idle if cycles is None else cycles, "pause", None, None)

    def execute(self, vaddr: int):
        """Выборка инструкций со строки vaddr; переход на новую кодовую страницу считается в ITLB_RA."""
        machine = self.machine
        machine.enter(self.actor)
        page = vaddr & ~(PAGE_SIZE - 1)
        if page != self.code_page:
            self.counters.itlb_ra += 1
            self.code_page = page
        translation = self._translate(vaddr, Intent.EXEC)
        result = machine.caches.access(translation.paddr, self.core, AccessKind.CODE, vaddr)
        self.last_level = result.hit_level
        self._account(result.hit_level, AccessKind.CODE)
        self.counters.instructions += 1
        machine.tick(self.actor, translation.latency + result.latency, "execute", vaddr, translation.paddr)

    def syscall(self, name: str, *args):
        """Вход в ядро через трамплин, выполнение процедуры, возврат."""
        machine = self.machine
        kernel = machine.kernel
        machine.enter(self.actor)
        routine = kernel.syscalls.get(name)
        if routine is None:
            raise SimulationError(f"Unknown syscall {name}")
        space = self.actor.space
        isolated = kernel.isolation != IsolationMode.OFF
        # Трамплин должен быть виден из пользовательского корня
        if not kernel.trampoline_mapped(space):
            raise PageFault(TRAMPOLINE_VADDR, FaultReason.NOT_PRESENT)
        cost = machine.config.latency.syscall
        self.counters.itlb_ra += 1
        if isolated:
            machine.mmu.flush_tlb(self.core)
            cost += machine.config.latency.isolation_switch
        self.counters.instructions += 1
        machine.tick(self.actor, cost, "syscall", None, None, detail=name)

        saved = (self.privilege, self.root, self.code_page)
        self.privilege = Privilege.KERNEL
        self.root = space.kernel_root
        try:
            return routine(self, *args)
        finally:
            self.privilege, self.root, self.code_page = saved
            if isolated:
                machine.mmu.flush_tlb(self.core)
                machine.tick(self.actor, machine.config.latency.isolation_switch, "sysret", None, None)

    def alloc(self, size: int, huge: bool = False, writable: bool = True, mergeable: bool = True,
              vaddr: int | None = None) -> int:
        machine = self.machine
        machine.enter(self.actor)
        vaddr = machine.kernel.alloc(self.actor.space, size, huge=huge, writable=writable,
                                     mergeable=mergeable, vaddr=vaddr)
        self.counters.instructions += 1
        machine.tick(self.actor, machine.config.latency.syscall, "alloc", vaddr, None)
        return vaddr

    def unmap(self, vaddr: int):
        machine = self.machine
        machine.enter(self.actor)
        machine.kernel.unmap(self.actor.space, vaddr)
        self.counters.instructions += 1
        machine.tick(self.actor, machine.config.latency.syscall, "unmap", vaddr, None)

    def pagemap(self, vaddr: int) -> int | None:
        """Физический адрес через /proc/self/pagemap (если разрешено конфигурацией)."""
        if not self.machine.config.pagemap_access:
            raise PagemapDenied("pagemap access is disabled on this machine")
        return self.machine.kernel.resolve(self.actor.space, vaddr)


class Machine:
    """Многоядерная машина: кэши, DRAM, MMU, модель ОС и планировщик акторов."""

    def __init__(self, config: MachineConfig, seed: int | None = None, trace: bool = True,
                 sampling_period: int | None = None):
        self.config = config
        self.seed = config.seed if seed is None else seed
        cache_seed, noise_seed, sched_seed, aux_seed = np.random.SeedSequence(self.seed).spawn(4)
        self.noise_rng = np.random.default_rng(noise_seed)
        self.sched_rng = np.random.default_rng(sched_seed)
        self.rng = np.random.default_rng(aux_seed)

        self.memory = PhysicalMemory(config.phys_bytes)
        self.allocator = FrameAllocator(self.memory)
        self.dram = Dram(config, self.memory)
        self.caches = CacheHierarchy(config, np.random.default_rng(cache_seed), self.dram)
        self.mmu = Mmu(config, self.memory, self.caches)
        self.kernel = Kernel(config, self.memory, self.allocator, self.mmu)

        self.now = 0
        self.actors: list[Actor] = []
        self.cpus: dict[int, Cpu] = {}
        self.current: Actor | None = None
        self._core_last: dict[int, int] = {}

        self.record = trace
        self.events: list[TraceEvent] = []
        self.flips: list[FlipEvent] = []
        self.faults: list[str] = []
        self.samples: list[CounterSample] = []
        self.sampling_period = sampling_period
        self._next_sample = sampling_period or 0
        self._next_timer = config.timer_period
        self._next_dedup = config.dedup.scan_period if config.dedup.enabled else 0

    # --- акторы ---

    def spawn(self, name: str, program: Program | None = None, kind: ActorKind = ActorKind.ATTACKER,
              core: int = 0, daemon: bool = False, code_pages: int = 1) -> Actor:
        """Создает актора с собственным адресным пространством."""
        if not 0 <= core < self.config.cores:
            raise SimulationError(f"Core {core} does not exist")
        actor_id = len(self.actors)
        space = self.kernel.create_space(pid=actor_id + 1)
        actor = Actor(actor_id, name, kind, core, space, program, daemon)
        if code_pages:
            base = self.kernel.alloc(space, code_pages * PAGE_SIZE, executable=True)
            actor.code_pages = [base + index * PAGE_SIZE for index in range(code_pages)]
        self.actors.append(actor)
        self.cpus[actor_id] = Cpu(self, actor)
        return actor

    def cpu(self, actor: Actor) -> Cpu:
        return self.cpus[actor.id]

    def enter(self, actor: Actor):
        """Переключение на актора перед его инструкцией."""
        if self.current is actor:
            return
        previous = self._core_last.get(actor.core)
        if previous is not None and previous != actor.id:
            # Возобновление после вытеснения другим актором на том же ядре
            actor.counters.itlb_ra += 1
            if self.config.l1.addressing == Addressing.VIVT:
                self.caches.flush_private(actor.core)
        if not actor.started:
            actor.started = True
            actor.counters.itlb_ra += 1
        self._core_last[actor.core] = actor.id
        self.current = actor

    # --- время ---

    def _jitter(self, latency: int) -> int:
        sigma = self.config.noise.jitter_sigma
        if sigma <= 0:
            return latency
        return max(0, latency + int(round(self.noise_rng.normal(0.0, sigma))))

    def tick(self, actor: Actor, latency: int, op: str, vaddr: int | None, paddr: int | None,
             jitter: bool = False, detail: str = ""):
        if jitter:
            latency = self._jitter(latency)
        if self.record:
            self.events.append(TraceEvent(self.now, actor.name, op, vaddr, paddr, latency, detail))
        self.advance(latency, actor)

    def advance(self, cycles: float, actor: Actor | None = None):
        """Продвигает виртуальное время и обрабатывает периодические события."""
        self.now = int(self.now + cycles)
        now = self.now
        while now >= self._next_timer:
            # Тик таймера ОС: обработчик прерывания выбирается через ITLB
            if actor is not None:
                actor.counters.itlb_ra += 1
            self._next_timer += self.config.timer_period
        if self.sampling_period:
            while now >= self._next_sample:
                self._snapshot(self._next_sample)
                self._next_sample += self.sampling_period
        if now >= self.dram.next_refresh:
            self.flips.extend(self.dram.refresh_tick(now))
        if self._next_dedup and now >= self._next_dedup:
            self.kernel.dedup_scan()
            while self._next_dedup <= now:
                self._next_dedup += self.config.dedup.scan_period

    def _snapshot(self, time: int):
        for actor in self.actors:
            self.samples.append(CounterSample(time, actor.name, actor.counters.as_dict()))

    def fast_forward(self, actor: Actor, rounds: int, round_cycles: float,
                     activations: dict, per_round: PerfCounters | None = None):
        """Пакетно продолжает периодический цикл актора (hammer) на rounds раундов."""
        chunk = rounds
        if self.sampling_period:
            chunk = max(1, int(self.sampling_period // round_cycles))
        done = 0
        while done < rounds:
            step = min(chunk, rounds - done)
            end, flips = self.dram.fast_forward(self.now, step, round_cycles, activations)
            self.flips.extend(flips)
            if per_round is not None:
                actor.counters.add(per_round, step)
            self.advance(end - self.now, actor)
            done += step

    # --- ОС ---

    def share_mapping(self, owner: Actor, other: Actor, pages: int = 1, vaddr: int | None = None,
                      writable: bool = False) -> tuple[int, int]:
        """Отображает одни и те же физические страницы в пространства двух акторов."""
        kernel = self.kernel
        if vaddr is None:
            vaddr = kernel.alloc(owner.space, pages * PAGE_SIZE, mergeable=False)
        paddrs = []
        for index in range(pages):
            paddr = kernel.resolve(owner.space, vaddr + index * PAGE_SIZE)
            if paddr is None:
                raise SimulationError(f"Page {vaddr + index * PAGE_SIZE:#x} of {owner.name} is not mapped")
            paddrs.append(paddr)
        other_vaddr = kernel.map_frames(other.space, paddrs, writable=writable)
        sim_logger.debug(f"Shared {pages} pages between {owner.name} and {other.name}",
                         owner=owner.name, other=other.name, pages=pages)
        return vaddr, other_vaddr

    def dedup_scan(self) -> int:
        if not self.config.dedup.enabled:
            raise SimulationError("Page deduplication is disabled on this machine")
        return self.kernel.dedup_scan()

    def set_isolation(self, mode: IsolationMode):
        self.kernel.set_isolation(mode)

    def resolve(self, actor: Actor, vaddr: int) -> int | None:
        """Истинный физический адрес (для оракулов)."""
        return self.kernel.resolve(actor.space, vaddr)

    def poke(self, actor: Actor, vaddr: int, data: bytes):
        """Неучитываемая запись данных при подготовке сценария."""
        for offset in range(0, len(data), PAGE_SIZE):
            page = (vaddr + offset) & ~(PAGE_SIZE - 1)
            paddr = self.resolve(actor, page)
            if paddr is None:
                raise SimulationError(f"Page {page:#x} is not mapped")
            start = (vaddr + offset) - page
            self.memory.write(paddr + start, data[offset:offset + PAGE_SIZE - start])

    def peek(self, actor: Actor, vaddr: int, length: int) -> bytes:
        paddr = self.resolve(actor, vaddr)
        if paddr is None:
            raise SimulationError(f"Address {vaddr:#x} is not mapped")
        return self.memory.read(paddr, length)

    def quiesce(self, seed: int | None = None):
        """Пустые кэши, закрытые строки DRAM, пустые TLB; опционально новый поток политики."""
        self.caches.clear()
        self.dram.precharge_all()
        self.mmu.flush_tlb()
        if seed is not None:
            self.caches.reseed(seed)

    # --- планировщик ---

    def _step(self, actor: Actor) -> bool:
        """Один шаг программы актора; False, если программа завершилась."""
        if actor.gen is None:
            actor.gen = actor.program(self.cpus[actor.id])
        self.enter(actor)
        try:
            next(actor.gen)
        except StopIteration:
            actor.finished = True
            return False
        except PageFault as fault:
            actor.finished = True
            self.faults.append(f"{actor.name}: {fault.message}")
            sim_logger.error(f"Actor {actor.name} faulted", actor=actor.name, vaddr=fault.vaddr,
                             reason=fault.reason.value)
            raise ActorFault(actor.name, fault)
        return True

    def _turn_length(self, schedule: Schedule) -> int:
        if schedule == Schedule.ROUND_ROBIN:
            return 1
        return int(self.sched_rng.geometric(0.5))

    def run(self, schedule: Schedule = Schedule.ROUND_ROBIN, budget: int | None = None) -> Trace:
        """Выполняет программы акторов до завершения всех недемонических.

        Raises:
            BudgetExhausted: Виртуальное время превысило бюджет
            ActorFault: Необработанная ошибка страницы
        """
        schedule = Schedule(schedule)
        cursor = 0
        while any(actor.scheduled and not actor.daemon for actor in self.actors):
            if budget is not None and self.now >= budget:
                sim_logger.warning("Virtual time budget exhausted", now=self.now, budget=budget)
                raise BudgetExhausted(f"Budget of {budget} cycles exhausted at {self.now}")
            runnable = [actor for actor in self.actors if actor.scheduled]
            if schedule == Schedule.ROUND_ROBIN:
                # Следующий по id после последнего выполненного, с заворотом
                actor = next((item for item in runnable if item.id >= cursor), runnable[0])
                cursor = actor.id + 1
            else:
                actor = runnable[int(self.sched_rng.integers(len(runnable)))]
            for _ in range(self._turn_length(schedule)):
                if not self._step(actor):
                    break
        return self.trace()

    def yield_turns(self, turns: int, exclude: Actor | Iterable[Actor] | None = None):
        """Продвигает остальных запланированных акторов на turns ходов каждого."""
        if isinstance(exclude, Actor):
            exclude = [exclude]
        excluded = {actor.id for actor in exclude or ()}
        for _ in range(turns):
            for actor in self.actors:
                if actor.scheduled and actor.id not in excluded:
                    self._step(actor)

    def trace(self) -> Trace:
        return Trace(
            end_time=self.now,
            events=tuple(self.events),
            flips=tuple(self.flips),
            faults=tuple(self.faults),
            counters=MappingProxyType({
                actor.name: MappingProxyType(actor.counters.as_dict()) for actor in self.actors
            }),
            samples=tuple(self.samples),
        )


def run(config: MachineConfig, actors: list[ActorSpec], schedule: Schedule = Schedule.ROUND_ROBIN,
        budget: int | None = None, seed: int | None = None) -> Trace:
    """Собирает машину, запускает акторов и возвращает трассу."""
    machine = Machine(config, seed=seed)
    for spec in actors:
        machine.spawn(spec.name, spec.program, spec.kind, spec.core, spec.daemon)
    return machine.run(schedule, budget)
