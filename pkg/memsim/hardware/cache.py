from abc import ABC, abstractmethod
from enum import Enum
from typing import NamedTuple

import numpy as np

from memsim.schemas.machine import (
    Addressing, CacheGeometry, Inclusion, LatencyModel, MachineConfig,
    ReplacementPolicyName, SliceHash,
)


class HitLevel(str, Enum):
    L1 = "1"
    L2 = "2"
    L3 = "3"
    REMOTE = "remote"
    DRAM = "dram"


class AccessKind(str, Enum):
    READ = "read"
    WRITE = "write"
    CODE = "code"


class AccessResult(NamedTuple):
    hit_level: HitLevel
    latency: int
    evictions: tuple[int, ...] = ()


def set_index(addr: int, geom: CacheGeometry) -> int:
    """Номер множества: средние n бит адреса."""
    return (addr >> geom.offset_bits) & (geom.sets - 1)


def slice_of(paddr: int, slice_hash: SliceHash) -> int:
    """Номер среза LLC: бит k равен четности paddr & mask_k."""
    slice_id = 0
    for bit, mask in enumerate(slice_hash.masks):
        slice_id |= ((paddr & mask).bit_count() & 1) << bit
    return slice_id


class CacheSet:
    __slots__ = ("lines", "meta", "clock")

    def __init__(self, ways: int):
        self.lines: list[int | None] = [None] * ways
        self.meta: list[int] = [0] * ways
        self.clock = 0


class ReplacementPolicy(ABC):

    @abstractmethod
    def on_hit(self, cset: CacheSet, way: int):
        raise NotImplementedError

    @abstractmethod
    def on_insert(self, cset: CacheSet, way: int):
        raise NotImplementedError

    @abstractmethod
    def victim(self, cset: CacheSet, rng: np.random.Generator) -> int:
        raise NotImplementedError


class LruPolicy(ReplacementPolicy):
    """meta хранит метку времени последнего обращения."""

    def on_hit(self, cset: CacheSet, way: int):
        cset.clock += 1
        cset.meta[way] = cset.clock

    on_insert = on_hit

    def victim(self, cset: CacheSet, rng: np.random.Generator) -> int:
        meta = cset.meta
        return meta.index(min(meta))


class RandomPolicy(ReplacementPolicy):

    def on_hit(self, cset: CacheSet, way: int):
        pass

    def on_insert(self, cset: CacheSet, way: int):
        pass

    def victim(self, cset: CacheSet, rng: np.random.Generator) -> int:
        return int(rng.integers(len(cset.lines)))


class QuadAgePolicy(ReplacementPolicy):
    """2-битный возраст: попадание ставит 3, вытесняется младший возраст 0.

    Если строк с возрастом 0 нет, все возрасты уменьшаются до появления нуля.
    Вставка с возрастом 3 (как LRU) либо 0 (BIP).
    """

    def __init__(self, bip: bool):
        self.insert_age = 0 if bip else 3

    def on_hit(self, cset: CacheSet, way: int):
        cset.meta[way] = 3

    def on_insert(self, cset: CacheSet, way: int):
        cset.meta[way] = self.insert_age

    def victim(self, cset: CacheSet, rng: np.random.Generator) -> int:
        meta = cset.meta
        lowest = min(meta)
        if lowest:
            for way in range(len(meta)):
                meta[way] -= lowest
        return meta.index(0)


def make_policy(geom: CacheGeometry) -> ReplacementPolicy:
    if geom.policy == ReplacementPolicyName.LRU:
        return LruPolicy()
    if geom.policy == ReplacementPolicyName.RANDOM:
        return RandomPolicy()
    return QuadAgePolicy(geom.bip)


def choose_victim(cset: CacheSet, policy: ReplacementPolicy, rng: np.random.Generator) -> int:
    """Выбор вытесняемого пути в полном множестве."""
    return policy.victim(cset, rng)


class CacheLevel:
    """Один экземпляр кэша (приватный L1/L2 ядра или общий LLC).

    Хранит только присутствие физических строк; where отображает строку в ключ
    множества (slice * sets + set).
    """

    def __init__(self, geom: CacheGeometry, rng: np.random.Generator, slice_hash: SliceHash | None = None):
        self.geom = geom
        self.rng = rng
        self.slice_hash = slice_hash if geom.slices > 1 else None
        self.policy = make_policy(geom)
        self.sets: dict[int, CacheSet] = {}
        self.where: dict[int, int] = {}
        self.virtual = geom.addressing != Addressing.PIPT

    def key(self, index_addr: int) -> int:
        geom = self.geom
        key = (index_addr >> geom.offset_bits) & (geom.sets - 1)
        if self.slice_hash is not None:
            key += slice_of(index_addr, self.slice_hash) * geom.sets
        return key

    def lookup(self, line: int) -> bool:
        key = self.where.get(line)
        if key is None:
            return False
        cset = self.sets[key]
        self.policy.on_hit(cset, cset.lines.index(line))
        return True

    def insert(self, line: int, index_addr: int) -> int | None:
        """Устанавливает строку и возвращает вытесненную (или None)."""
        if line in self.where:
            self.invalidate(line)
        key = self.key(index_addr)
        cset = self.sets.get(key)
        if cset is None:
            cset = self.sets[key] = CacheSet(self.geom.ways)
        lines = cset.lines
        if None in lines:
            way = lines.index(None)
        else:
            way = choose_victim(cset, self.policy, self.rng)
        victim = lines[way]
        if victim is not None:
            del self.where[victim]
        lines[way] = line
        self.where[line] = key
        self.policy.on_insert(cset, way)
        return victim

    def invalidate(self, line: int) -> bool:
        key = self.where.pop(line, None)
        if key is None:
            return False
        cset = self.sets[key]
        way = cset.lines.index(line)
        cset.lines[way] = None
        cset.meta[way] = 0
        return True

    def clear(self):
        self.sets.clear()
        self.where.clear()

    def __contains__(self, line: int) -> bool:
        return line in self.where


class StreamPrefetcher:
    """Два промаха в пределах trigger_distance строк одной страницы запускают подкачку следующей строки."""

    def __init__(self, trigger_distance: int, lines_per_page: int):
        self.trigger_distance = trigger_distance
        self.lines_per_page = lines_per_page
        self._last_miss: dict[tuple[int, int], int] = {}

    def reset(self):
        self._last_miss.clear()

    def on_miss(self, core: int, line: int) -> int | None:
        page = line // self.lines_per_page
        previous = self._last_miss.get((core, page))
        self._last_miss[(core, page)] = line
        if previous is None or previous == line or abs(line - previous) > self.trigger_distance:
            return None
        candidate = line + 1
        if candidate // self.lines_per_page != page:
            return None
        return candidate


class CacheHierarchy:
    """Приватные L1 (и L2) на ядро плюс общий срезанный LLC."""

    def __init__(self, config: MachineConfig, rng: np.random.Generator, dram):
        self.config = config
        self.latency: LatencyModel = config.latency
        self.dram = dram
        self.rng = rng
        self.offset_bits = config.llc.offset_bits
        self.l1 = [CacheLevel(config.l1, rng) for _ in range(config.cores)]
        self.l2 = [CacheLevel(config.l2, rng) for _ in range(config.cores)] if config.l2 else None
        self.llc = CacheLevel(config.llc, rng, config.slice_hash)
        self.inclusion = config.llc.inclusion
        self.prefetcher = (
            StreamPrefetcher(config.prefetcher.trigger_distance, 4096 >> self.offset_bits)
            if config.prefetcher.enabled else None
        )

    def _privates(self, core: int) -> list[CacheLevel]:
        levels = [self.l1[core]]
        if self.l2 is not None:
            levels.append(self.l2[core])
        return levels

    def access(self, paddr: int, core: int, kind: AccessKind = AccessKind.READ,
               vaddr: int | None = None) -> AccessResult:
        """Доступ к строке: L1 → L2 → LLC → чужие приватные кэши → DRAM."""
        line = paddr >> self.offset_bits
        lat = self.latency
        l1 = self.l1[core]
        if l1.lookup(line):
            return AccessResult(HitLevel.L1, lat.l1_hit)
        l1_index = vaddr if (l1.virtual and vaddr is not None) else paddr
        l2 = self.l2[core] if self.l2 is not None else None
        if l2 is not None and l2.lookup(line):
            evicted = self._fill_private(core, line, paddr, l1_index, skip_l2=True)
            return AccessResult(HitLevel.L2, lat.l2_hit, evicted)

        if self.llc.lookup(line):
            if self.inclusion == Inclusion.EXCLUSIVE:
                self.llc.invalidate(line)
            evicted = self._fill_private(core, line, paddr, l1_index)
            return AccessResult(HitLevel.L3, lat.l3_hit, evicted)

        if self._remote_holder(line, core) is not None:
            evicted = self._fill(core, line, paddr, l1_index)
            return AccessResult(HitLevel.REMOTE, lat.remote_fetch, evicted)

        row = self.dram.access_row(paddr)
        evicted = self._fill(core, line, paddr, l1_index)
        if self.prefetcher is not None:
            extra = self.prefetcher.on_miss(core, line)
            if extra is not None and not self.is_cached(extra << self.offset_bits):
                extra_addr = extra << self.offset_bits
                l1_extra = extra_addr if vaddr is None else (vaddr & ~0xFFF) | (extra_addr & 0xFFF)
                self._fill(core, extra, extra_addr, l1_extra)
        return AccessResult(HitLevel.DRAM, row.latency, evicted)

    def _remote_holder(self, line: int, core: int) -> int | None:
        for other in range(len(self.l1)):
            if other == core:
                continue
            if line in self.l1[other] or (self.l2 is not None and line in self.l2[other]):
                return other
        return None

    def _fill(self, core: int, line: int, paddr: int, l1_index: int) -> tuple[int, ...]:
        """Установка строки, пришедшей из памяти или чужого ядра."""
        evicted: list[int] = []
        if self.inclusion != Inclusion.EXCLUSIVE:
            victim = self.llc.insert(line, paddr)
            if victim is not None:
                evicted.append(victim)
                if self.inclusion == Inclusion.INCLUSIVE:
                    self._back_invalidate(victim)
        evicted.extend(self._fill_private(core, line, paddr, l1_index))
        return tuple(evicted)

    def _fill_private(self, core: int, line: int, paddr: int, l1_index: int,
                      skip_l2: bool = False) -> tuple[int, ...]:
        evicted: list[int] = []
        exclusive = self.inclusion == Inclusion.EXCLUSIVE
        if self.l2 is not None and not skip_l2:
            victim = self.l2[core].insert(line, paddr)
            if victim is not None and exclusive:
                evicted.extend(self._spill_to_llc(victim))
        victim = self.l1[core].insert(line, l1_index)
        if victim is not None and exclusive and self.l2 is None:
            evicted.extend(self._spill_to_llc(victim))
        return tuple(evicted)

    def _spill_to_llc(self, line: int) -> list[int]:
        """Эксклюзивный LLC принимает строки, вытесненные из приватных кэшей."""
        if line in self.llc:
            return []
        victim = self.llc.insert(line, line << self.offset_bits)
        return [victim] if victim is not None else []

    def _back_invalidate(self, line: int):
        for level in self.l1:
            level.invalidate(line)
        if self.l2 is not None:
            for level in self.l2:
                level.invalidate(line)

    def fill_line(self, paddr: int, core: int):
        """Установка строки без учета латентности (подкачка, prefetch)."""
        line = paddr >> self.offset_bits
        if not self.is_cached(paddr):
            self._fill(core, line, paddr, paddr)

    def flush(self, paddr: int, core: int) -> int:
        line = paddr >> self.offset_bits
        was_cached = self.invalidate_everywhere(line)
        latency = self.latency.flush_base
        if was_cached:
            latency += self.latency.flush_hit_extra
        if self.config.llc.slices > 1 and slice_of(paddr, self.config.slice_hash) != self.local_slice(core):
            latency += self.latency.remote_slice_penalty
        return latency

    def invalidate_everywhere(self, line: int) -> bool:
        was_cached = self.llc.invalidate(line)
        for level in self.l1:
            was_cached = level.invalidate(line) or was_cached
        if self.l2 is not None:
            for level in self.l2:
                was_cached = level.invalidate(line) or was_cached
        return was_cached

    def local_slice(self, core: int) -> int:
        return core % self.config.llc.slices

    def is_cached(self, paddr: int) -> bool:
        return bool(self.cached_levels(paddr))

    def cached_levels(self, paddr: int) -> set[str]:
        line = paddr >> self.offset_bits
        levels: set[str] = set()
        if line in self.llc:
            levels.add("llc")
        for core, level in enumerate(self.l1):
            if line in level:
                levels.add(f"l1:{core}")
        if self.l2 is not None:
            for core, level in enumerate(self.l2):
                if line in level:
                    levels.add(f"l2:{core}")
        return levels

    def demote(self, paddr: int, core: int):
        """Убирает строку из приватных кэшей ядра, оставляя ее в LLC."""
        line = paddr >> self.offset_bits
        held = False
        for level in self._privates(core):
            held = level.invalidate(line) or held
        if held and self.inclusion == Inclusion.EXCLUSIVE:
            self._spill_to_llc(line)

    def flush_private(self, core: int):
        """Сброс виртуально тегированного L1 при переключении контекста."""
        self.l1[core].clear()

    def check_inclusion(self) -> bool:
        if self.inclusion != Inclusion.INCLUSIVE:
            return True
        levels = list(self.l1) + (list(self.l2) if self.l2 is not None else [])
        return all(line in self.llc for level in levels for line in level.where)

    def reseed(self, seed: int):
        """Новый поток случайных чисел для политик замещения всех уровней."""
        self.rng = np.random.default_rng(seed)
        for level in self._all_levels():
            level.rng = self.rng

    def clear(self):
        for level in self._all_levels():
            level.clear()
        if self.prefetcher is not None:
            self.prefetcher.reset()

    def _all_levels(self) -> list[CacheLevel]:
        levels = list(self.l1) + [self.llc]
        if self.l2 is not None:
            levels.extend(self.l2)
        return levels
