from typing import Callable

from memsim.core.errors import SimulationError
from memsim.core.logging import sim_logger
from memsim.hardware.memory import (
    GIANT_PAGE_SIZE, HUGE_PAGE_SIZE, PAGE_SIZE, FrameAllocator, FrameKind, PhysicalMemory,
)
from memsim.hardware.mmu import (
    COW, FRAME_MASK, NX, PAGE_SIZE_BIT, PRESENT, USER, WRITABLE, Mmu, table_index,
)
from memsim.schemas.machine import IsolationMode, MachineConfig


# Раскладка виртуального пространства
USER_SMALL_BASE = 0x0000_0000_1000_0000
USER_HUGE_BASE = 0x0000_0100_0000_0000
USER_SHARED_BASE = 0x0000_0200_0000_0000
CODE_BASE = 0x0000_0000_0040_0000
KERNEL_TEXT_BASE = 0xFFFF_FFFF_8000_0000
TRAMPOLINE_VADDR = KERNEL_TEXT_BASE
DRIVER_BASE = 0xFFFF_FFFF_C000_0000
KERNEL_TEXT_PAGES = 16


class MappingError(SimulationError):
    """Некорректный запрос на отображение."""


class AddressSpace:
    """Адресное пространство процесса: корни трансляции и реестр отображений."""

    def __init__(self, pid: int, user_root: int):
        self.pid = pid
        self.user_root = user_root
        self.kernel_root = user_root
        self.next_small = USER_SMALL_BASE
        self.next_huge = USER_HUGE_BASE
        self.next_shared = USER_SHARED_BASE
        self.next_code = CODE_BASE
        # vaddr -> (paddr, size)
        self.mappings: dict[int, tuple[int, int]] = {}


class Kernel:
    """Модель ОС: таблицы страниц в физической памяти, аллокация, системные вызовы."""

    def __init__(self, config: MachineConfig, memory: PhysicalMemory, allocator: FrameAllocator, mmu: Mmu):
        self.config = config
        self.memory = memory
        self.allocator = allocator
        self.mmu = mmu
        self.spaces: dict[int, AddressSpace] = {}
        # кадр -> [(pid, vaddr)] для страниц, участвующих в дедупликации
        self.mergeable: dict[int, list[tuple[int, int]]] = {}
        self.syscalls: dict[str, Callable] = {}
        self.isolation = IsolationMode.OFF
        self.driver_pages: list[int] = []

        self.kernel_root = self._new_table()
        self._map_direct_map()
        self.trampoline_frame = self.allocator.alloc(FrameKind.KERNEL) * PAGE_SIZE
        self.map_page(self.kernel_root, TRAMPOLINE_VADDR, self.trampoline_frame, PAGE_SIZE,
                      writable=False, user=False, executable=True)
        for page in range(1, KERNEL_TEXT_PAGES):
            frame = self.allocator.alloc(FrameKind.KERNEL) * PAGE_SIZE
            self.map_page(self.kernel_root, KERNEL_TEXT_BASE + page * PAGE_SIZE, frame, PAGE_SIZE,
                          writable=False, user=False, executable=True)
        for page in range(config.kernel.driver_pages):
            frame = self.allocator.alloc(FrameKind.KERNEL) * PAGE_SIZE
            self.map_page(self.kernel_root, DRIVER_BASE + page * PAGE_SIZE, frame, PAGE_SIZE,
                          writable=True, user=False, executable=False)
            self.driver_pages.append(DRIVER_BASE + page * PAGE_SIZE)

        # Отдельная цепочка таблиц только с трамплином для пользовательских корней при изоляции
        self.trampoline_root = self._new_table()
        self.map_page(self.trampoline_root, TRAMPOLINE_VADDR, self.trampoline_frame, PAGE_SIZE,
                      writable=False, user=False, executable=True)

        if config.kernel.isolation != IsolationMode.OFF:
            self.set_isolation(config.kernel.isolation)

    # --- таблицы страниц ---

    def _new_table(self) -> int:
        return self.allocator.alloc(FrameKind.PAGE_TABLE) * PAGE_SIZE

    def _ensure_table(self, table: int, index: int, user: bool) -> int:
        entry_paddr = table + index * 8
        entry = self.memory.read_u64(entry_paddr)
        if entry & PRESENT:
            if entry & PAGE_SIZE_BIT:
                raise MappingError(f"Table slot {index} is covered by a large page")
            if user and not entry & USER:
                self.memory.write_u64(entry_paddr, entry | USER)
            return entry & FRAME_MASK
        child = self._new_table()
        flags = PRESENT | WRITABLE | (USER if user else 0)
        self.memory.write_u64(entry_paddr, child | flags)
        return child

    def map_page(self, root: int, vaddr: int, paddr: int, size: int, writable: bool = True,
                 user: bool = True, executable: bool = False, extra_flags: int = 0):
        """Записывает листовую запись для страницы 4 КБ, 2 МБ или 1 ГБ."""
        leaf_level = {PAGE_SIZE: 1, HUGE_PAGE_SIZE: 2, GIANT_PAGE_SIZE: 3}.get(size)
        if leaf_level is None:
            raise MappingError(f"Unsupported page size {size}")
        if vaddr % size or paddr % size:
            raise MappingError(f"Mapping {vaddr:#x} -> {paddr:#x} is not aligned to {size:#x}")
        table = root
        for level in (4, 3, 2, 1):
            if level == leaf_level:
                break
            table = self._ensure_table(table, table_index(vaddr, level), user)
        flags = PRESENT
        flags |= WRITABLE if writable else 0
        flags |= USER if user else 0
        flags |= 0 if executable else NX
        flags |= PAGE_SIZE_BIT if leaf_level > 1 else 0
        self.memory.write_u64(table + table_index(vaddr, leaf_level) * 8, paddr | flags | extra_flags)

    def _leaf_entry(self, root: int, vaddr: int) -> int | None:
        """Физический адрес листовой записи, отображающей vaddr."""
        walk = self.mmu.walk(root, vaddr)
        if walk.paddr is None:
            return None
        return walk.steps[-1].entry_paddr

    def _map_direct_map(self):
        base = self.config.kernel.direct_map_base
        for offset in range(0, self.config.phys_bytes, HUGE_PAGE_SIZE):
            self.map_page(self.kernel_root, base + offset, offset, HUGE_PAGE_SIZE,
                          writable=True, user=False, executable=False)

    def _sync_user_slot(self, space: AddressSpace, vaddr: int):
        """Копирует запись PML4 пользовательской половины в корень ядра процесса."""
        if space.kernel_root == space.user_root:
            return
        offset = table_index(vaddr, 4) * 8
        self.memory.write_u64(space.kernel_root + offset, self.memory.read_u64(space.user_root + offset))

    # --- адресные пространства ---

    def create_space(self, pid: int) -> AddressSpace:
        space = AddressSpace(pid, self._new_table())
        self._install_kernel_half(space)
        self.spaces[pid] = space
        return space

    def _install_kernel_half(self, space: AddressSpace):
        if self.isolation == IsolationMode.OFF:
            if space.kernel_root != space.user_root:
                self.allocator.free(space.kernel_root // PAGE_SIZE)
                space.kernel_root = space.user_root
            for slot in range(256, 512):
                self.memory.write_u64(space.user_root + slot * 8,
                                      self.memory.read_u64(self.kernel_root + slot * 8))
            return

        if space.kernel_root == space.user_root:
            space.kernel_root = self._new_table()
        for slot in range(512):
            source = self.kernel_root if slot >= 256 else space.user_root
            self.memory.write_u64(space.kernel_root + slot * 8, self.memory.read_u64(source + slot * 8))
        for slot in range(256, 512):
            self.memory.write_u64(space.user_root + slot * 8,
                                  self.memory.read_u64(self.trampoline_root + slot * 8))

    def set_isolation(self, mode: IsolationMode):
        """Включение/выключение усиленной изоляции ядра для всех процессов."""
        self.isolation = mode
        for space in self.spaces.values():
            self._install_kernel_half(space)
        self.mmu.flush_tlb()
        sim_logger.info("Kernel isolation switched", isolation=mode.value)

    def alloc(self, space: AddressSpace, size: int, huge: bool = False, writable: bool = True,
              mergeable: bool = True, vaddr: int | None = None, executable: bool = False) -> int:
        """Выделяет и отображает память процессу, возвращает виртуальный адрес."""
        page = HUGE_PAGE_SIZE if huge else PAGE_SIZE
        count = max(1, -(-size // page))
        if vaddr is None:
            if huge:
                vaddr = space.next_huge
                space.next_huge += count * page
            elif executable:
                vaddr = space.next_code
                space.next_code += count * page
            else:
                vaddr = space.next_small
                space.next_small += count * page
        for index in range(count):
            page_vaddr = vaddr + index * page
            if page_vaddr in space.mappings:
                raise MappingError(f"Address {page_vaddr:#x} is already mapped")
            if huge:
                paddr = self.allocator.alloc_huge(FrameKind.USER) * PAGE_SIZE
            else:
                paddr = self.allocator.alloc(FrameKind.USER) * PAGE_SIZE
                if mergeable and not executable:
                    self.mergeable.setdefault(paddr // PAGE_SIZE, []).append((space.pid, page_vaddr))
            self.map_page(space.user_root, page_vaddr, paddr, page, writable=writable,
                          user=True, executable=executable)
            self._sync_user_slot(space, page_vaddr)
            space.mappings[page_vaddr] = (paddr, page)
        return vaddr

    def map_giant(self, space: AddressSpace, vaddr: int) -> int:
        """Отображает первый гигабайт физической памяти одной страницей 1 ГБ, только чтение."""
        if self.config.phys_bytes < GIANT_PAGE_SIZE:
            raise MappingError(f"1 GB page needs at least 1 GB of memory, machine has {self.config.phys_bytes:#x}")
        self.map_page(space.user_root, vaddr, 0, GIANT_PAGE_SIZE, writable=False, user=True)
        self._sync_user_slot(space, vaddr)
        sim_logger.debug("Giant page mapped", pid=space.pid, vaddr=vaddr)
        return vaddr

    def map_frames(self, space: AddressSpace, paddrs: list[int], writable: bool,
                   vaddr: int | None = None) -> int:
        """Отображает существующие 4 КБ кадры в пространство процесса."""
        if vaddr is None:
            vaddr = space.next_shared
            space.next_shared += len(paddrs) * PAGE_SIZE
        for index, paddr in enumerate(paddrs):
            page_vaddr = vaddr + index * PAGE_SIZE
            self.map_page(space.user_root, page_vaddr, paddr, PAGE_SIZE, writable=writable, user=True)
            self._sync_user_slot(space, page_vaddr)
            space.mappings[page_vaddr] = (paddr, PAGE_SIZE)
            frame = paddr // PAGE_SIZE
            if frame in self.mergeable:
                self.mergeable[frame].append((space.pid, page_vaddr))
        return vaddr

    def unmap(self, space: AddressSpace, vaddr: int):
        mapping = space.mappings.pop(vaddr, None)
        if mapping is None:
            raise MappingError(f"Address {vaddr:#x} is not mapped")
        paddr, size = mapping
        entry_paddr = self._leaf_entry(space.user_root, vaddr)
        if entry_paddr is not None:
            self.memory.write_u64(entry_paddr, 0)
        frame = paddr // PAGE_SIZE
        owners = self.mergeable.get(frame)
        if owners is not None and (space.pid, vaddr) in owners:
            owners.remove((space.pid, vaddr))
        still_mapped = any(
            mapped == (paddr, size) for other in self.spaces.values() for mapped in other.mappings.values()
        )
        if not still_mapped:
            self.mergeable.pop(frame, None)
            if size == HUGE_PAGE_SIZE:
                self.allocator.free_huge(frame)
            else:
                self.allocator.free(frame)
        self.mmu.flush_tlb()

    def resolve(self, space: AddressSpace, vaddr: int, kernel: bool = False) -> int | None:
        """Истинный физический адрес (привилегированное знание, pagemap)."""
        root = space.kernel_root if kernel else space.user_root
        return self.mmu.walk(root, vaddr).paddr

    def user_page_table_frames(self) -> int:
        return self.allocator.count(FrameKind.PAGE_TABLE)

    # --- дедупликация ---

    def dedup_scan(self) -> int:
        """Сливает побайтово одинаковые страницы в один кадр с копированием при записи."""
        by_content: dict[bytes, int] = {}
        merges = 0
        for frame in sorted(self.mergeable):
            owners = self.mergeable[frame]
            if not owners:
                continue
            content = self.memory.frame_bytes(frame)
            canonical_frame = by_content.get(content)
            if canonical_frame is None:
                by_content[content] = frame
                continue
            canonical_paddr = canonical_frame * PAGE_SIZE
            for pid, vaddr in owners:
                space = self.spaces[pid]
                self._remap_cow(space, vaddr, canonical_paddr)
            self.mergeable[canonical_frame].extend(owners)
            del self.mergeable[frame]
            self.allocator.free(frame)
            merges += 1
        for frame, owners in self.mergeable.items():
            if len(owners) > 1:
                for pid, vaddr in owners:
                    self._remap_cow(self.spaces[pid], vaddr, frame * PAGE_SIZE)
        if merges:
            self.mmu.flush_tlb()
            sim_logger.info("Dedup scan merged pages", merges=merges)
        return merges

    def _remap_cow(self, space: AddressSpace, vaddr: int, paddr: int):
        entry_paddr = self._leaf_entry(space.user_root, vaddr)
        if entry_paddr is None:
            return
        entry = self.memory.read_u64(entry_paddr)
        flags = (entry & ~FRAME_MASK & ~WRITABLE) | COW
        self.memory.write_u64(entry_paddr, paddr | flags)
        space.mappings[vaddr] = (paddr, PAGE_SIZE)

    def handle_cow(self, space: AddressSpace, vaddr: int) -> bool:
        """Обработка записи в COW-страницу: копия кадра и восстановление записи."""
        page_vaddr = vaddr & ~0xFFF
        entry_paddr = self._leaf_entry(space.user_root, page_vaddr)
        if entry_paddr is None:
            return False
        entry = self.memory.read_u64(entry_paddr)
        if not entry & COW:
            return False
        frame = (entry & FRAME_MASK) // PAGE_SIZE
        owners = self.mergeable.get(frame, [])
        if (space.pid, page_vaddr) in owners:
            owners.remove((space.pid, page_vaddr))
        if owners:
            new_frame = self.allocator.alloc(FrameKind.USER)
            self.memory.copy_frame(frame, new_frame)
        else:
            new_frame = frame
        self.mergeable.setdefault(new_frame, []).append((space.pid, page_vaddr))
        flags = (entry & ~FRAME_MASK & ~COW) | WRITABLE
        self.memory.write_u64(entry_paddr, new_frame * PAGE_SIZE | flags)
        space.mappings[page_vaddr] = (new_frame * PAGE_SIZE, PAGE_SIZE)
        self.mmu.flush_tlb()
        return True

    # --- системные вызовы ---

    def register_syscall(self, name: str, routine: Callable):
        self.syscalls[name] = routine

    def trampoline_mapped(self, space: AddressSpace) -> bool:
        return self.mmu.walk(space.user_root, TRAMPOLINE_VADDR).paddr == self.trampoline_frame
