from enum import Enum, IntEnum
from typing import NamedTuple

from cachetools import LRUCache

from memsim.core.errors import SimulationError
from memsim.hardware.cache import CacheHierarchy
from memsim.hardware.memory import PhysicalMemory
from memsim.schemas.machine import MachineConfig


# Биты записи таблицы страниц x86-64
PRESENT = 1 << 0
WRITABLE = 1 << 1
USER = 1 << 2
PAGE_SIZE_BIT = 1 << 7
COW = 1 << 9  # программный бит: страница дедуплицирована
NX = 1 << 63
FRAME_MASK = ((1 << 52) - 1) & ~0xFFF

# Размер области, покрываемой одной записью уровня
LEVEL_SPAN = {4: 1 << 39, 3: 1 << 30, 2: 1 << 21, 1: 1 << 12}
LEVEL_SHIFT = {4: 39, 3: 30, 2: 21, 1: 12}


class Privilege(str, Enum):
    USER = "user"
    KERNEL = "kernel"


class Intent(str, Enum):
    LOAD = "load"
    STORE = "store"
    EXEC = "exec"


class FaultReason(str, Enum):
    NOT_PRESENT = "not_present"
    PRIVILEGE = "privilege"
    WRITE_PROTECT = "write_protect"
    NO_EXECUTE = "no_execute"


class PageFault(SimulationError):
    """Ошибка трансляции."""

    def __init__(self, vaddr: int, reason: FaultReason):
        self.vaddr = vaddr
        self.reason = reason
        super().__init__(f"Page fault at {vaddr:#x}: {reason.value}")


class LevelClass(IntEnum):
    """Классы латентности prefetch по глубине разрешения трансляции."""
    CACHED = 0
    VALID_UNCACHED = 1
    PT_INVALID = 2
    PD_ABSENT = 3
    PDPT_ABSENT = 4
    PTE_ABSENT = 5


class RegionStatus(str, Enum):
    INVALID = "invalid"
    TABLE = "table"
    PAGE = "page"


class Translation(NamedTuple):
    paddr: int
    page_size: int
    flags: int
    latency: int
    tlb_hit: bool = False


class WalkStep(NamedTuple):
    level: int
    entry_paddr: int
    entry: int


class Walk(NamedTuple):
    steps: tuple[WalkStep, ...]
    paddr: int | None
    page_size: int


def table_index(vaddr: int, level: int) -> int:
    return (vaddr >> LEVEL_SHIFT[level]) & 0x1FF


def canonical(vaddr: int) -> int:
    """Знаковое расширение 48-битного адреса."""
    vaddr &= (1 << 48) - 1
    if vaddr & (1 << 47):
        vaddr |= ~((1 << 48) - 1) & ((1 << 64) - 1)
    return vaddr


class TranslationCaches:
    """TLB и кэши структур трансляции одного ядра, полностью ассоциативные LRU."""

    def __init__(self, tlb: int, pde: int, pdpte: int, pml4e: int):
        self.tlb: LRUCache = LRUCache(maxsize=tlb)
        self.pde: LRUCache = LRUCache(maxsize=pde)
        self.pdpte: LRUCache = LRUCache(maxsize=pdpte)
        self.pml4e: LRUCache = LRUCache(maxsize=pml4e)

    def flush(self):
        for cache in (self.tlb, self.pde, self.pdpte, self.pml4e):
            cache.clear()


class Mmu:
    """Обход 4-уровневых таблиц в симулированной физической памяти."""

    def __init__(self, config: MachineConfig, memory: PhysicalMemory, caches: CacheHierarchy):
        self.config = config
        self.memory = memory
        self.caches = caches
        sizes = config.translation_caches
        self.per_core = [
            TranslationCaches(sizes.tlb, sizes.pde, sizes.pdpte, sizes.pml4e)
            for _ in range(config.cores)
        ]
        lat = config.prefetch_latency
        self.prefetch_latency = {
            LevelClass.CACHED: lat.cached,
            LevelClass.VALID_UNCACHED: lat.valid_uncached,
            LevelClass.PT_INVALID: lat.pt_invalid,
            LevelClass.PD_ABSENT: lat.pd_absent,
            LevelClass.PDPT_ABSENT: lat.pdpt_absent,
            LevelClass.PTE_ABSENT: lat.pte_absent,
        }

    def walk(self, root: int, vaddr: int) -> Walk:
        """Обход таблиц без кэшей; останавливается на первой отсутствующей записи."""
        table = root
        steps = []
        for level in (4, 3, 2, 1):
            entry_paddr = table + table_index(vaddr, level) * 8
            entry = self.memory.read_u64(entry_paddr)
            steps.append(WalkStep(level, entry_paddr, entry))
            if not entry & PRESENT:
                return Walk(tuple(steps), None, 0)
            frame = entry & FRAME_MASK
            if level == 1 or (level in (2, 3) and entry & PAGE_SIZE_BIT):
                span = LEVEL_SPAN[level]
                base = frame & ~(span - 1)
                return Walk(tuple(steps), base | (vaddr & (span - 1)), span)
            table = frame
        return Walk(tuple(steps), None, 0)

    def translate(self, vaddr: int, root: int, core: int,
                  privilege: Privilege = Privilege.USER, intent: Intent = Intent.LOAD) -> Translation:
        """Трансляция с кэшами в порядке прерывания поиска: TLB, PDE, PDPTE, PML4E.

        Raises:
            PageFault: Запись отсутствует или нарушены права
        """
        tc = self.per_core[core]
        for shift in (12, 21, 30):
            cached = tc.tlb.get((root, shift, vaddr >> shift))
            if cached is not None:
                frame_base, page_size, flags = cached
                self._check_access(vaddr, flags, privilege, intent)
                paddr = frame_base | (vaddr & (page_size - 1))
                return Translation(paddr, page_size, flags, self.config.latency.tlb_hit, True)

        walk = self.walk(root, vaddr)
        # Сколько уровней обхода экономят кэши структур трансляции
        if (root, vaddr >> 21) in tc.pde:
            skip = 3
        elif (root, vaddr >> 30) in tc.pdpte:
            skip = 2
        elif (root, vaddr >> 39) in tc.pml4e:
            skip = 1
        else:
            skip = 0
        latency = 0
        for step in walk.steps[skip:]:
            latency += self.caches.access(step.entry_paddr, core).latency

        if walk.paddr is None:
            raise PageFault(vaddr, FaultReason.NOT_PRESENT)
        flags = self._effective_flags(walk)
        self._check_access(vaddr, flags, privilege, intent)
        self._fill(tc, root, vaddr, walk, flags)
        return Translation(walk.paddr, walk.page_size, flags, latency)

    @staticmethod
    def _effective_flags(walk: Walk) -> int:
        """USER и WRITABLE должны быть на всех уровнях, NX хотя бы на одном."""
        flags = USER | WRITABLE
        nx = 0
        for step in walk.steps:
            flags &= step.entry | ~(USER | WRITABLE)
            nx |= step.entry & NX
        leaf = walk.steps[-1].entry
        return (flags & (USER | WRITABLE)) | (leaf & (PRESENT | COW)) | nx

    @staticmethod
    def _check_access(vaddr: int, flags: int, privilege: Privilege, intent: Intent):
        if privilege == Privilege.USER and not flags & USER:
            raise PageFault(vaddr, FaultReason.PRIVILEGE)
        if intent == Intent.STORE and not flags & WRITABLE:
            raise PageFault(vaddr, FaultReason.WRITE_PROTECT)
        if intent == Intent.EXEC and flags & NX:
            raise PageFault(vaddr, FaultReason.NO_EXECUTE)

    def _fill(self, tc: TranslationCaches, root: int, vaddr: int, walk: Walk, flags: int):
        levels = [step.level for step in walk.steps]
        if 4 in levels and len(levels) > 1:
            tc.pml4e[(root, vaddr >> 39)] = True
        if 3 in levels and len(levels) > 2:
            tc.pdpte[(root, vaddr >> 30)] = True
        if 2 in levels and len(levels) > 3:
            tc.pde[(root, vaddr >> 21)] = True
        # Одна запись TLB на страницу своего размера (4 КБ, 2 МБ, 1 ГБ)
        shift = walk.page_size.bit_length() - 1
        page_base = walk.paddr & ~(walk.page_size - 1)
        tc.tlb[(root, shift, vaddr >> shift)] = (page_base, walk.page_size, flags)

    def prefetch(self, vaddr: int, root: int, core: int) -> tuple[int, LevelClass]:
        """Prefetch без проверки привилегий; никогда не вызывает ошибку.

        Returns:
            Латентность класса и сам класс глубины разрешения
        """
        walk = self.walk(root, vaddr)
        if walk.paddr is None:
            level = walk.steps[-1].level
            level_class = {
                4: LevelClass.PDPT_ABSENT,
                3: LevelClass.PD_ABSENT,
                2: LevelClass.PT_INVALID,
                1: LevelClass.PTE_ABSENT,
            }[level]
            return self.prefetch_latency[level_class], level_class

        if self.caches.is_cached(walk.paddr):
            level_class = LevelClass.CACHED
            self.caches.access(walk.paddr, core)
        else:
            level_class = LevelClass.VALID_UNCACHED
            self.caches.fill_line(walk.paddr, core)
        flags = self._effective_flags(walk)
        if flags & USER:
            self._fill(self.per_core[core], root, vaddr, walk, flags)
        return self.prefetch_latency[level_class], level_class

    def flush_tlb(self, core: int | None = None):
        targets = self.per_core if core is None else [self.per_core[core]]
        for tc in targets:
            tc.flush()

    def region_status(self, root: int, level: int, base: int) -> RegionStatus:
        """Истинное состояние записи уровня level, покрывающей адрес base."""
        table = root
        for current in (4, 3, 2, 1):
            entry = self.memory.read_u64(table + table_index(base, current) * 8)
            if not entry & PRESENT:
                return RegionStatus.INVALID
            is_leaf = current == 1 or (current in (2, 3) and entry & PAGE_SIZE_BIT)
            if current == level:
                return RegionStatus.PAGE if is_leaf else RegionStatus.TABLE
            if is_leaf:
                # Область целиком внутри большой страницы уровнем выше
                return RegionStatus.PAGE
            table = entry & FRAME_MASK
        return RegionStatus.INVALID
