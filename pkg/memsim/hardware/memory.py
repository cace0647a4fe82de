from enum import Enum

from memsim.core.errors import SimulationError


PAGE_SIZE = 4096
HUGE_PAGE_SIZE = 2 << 20
GIANT_PAGE_SIZE = 1 << 30
FRAMES_PER_HUGE = HUGE_PAGE_SIZE // PAGE_SIZE


class OutOfMemory(SimulationError):
    """Нет свободных физических кадров."""


class FrameKind(str, Enum):
    FREE = "free"
    USER = "user"
    PAGE_TABLE = "page_table"
    KERNEL = "kernel"


class PhysicalMemory:
    """Физическая память с ленивым выделением кадров.

    Невыделенный кадр читается как нули; байты появляются при первой записи.
    """

    def __init__(self, size: int):
        self.size = size
        self._frames: dict[int, bytearray] = {}

    def _frame(self, frame: int) -> bytearray:
        data = self._frames.get(frame)
        if data is None:
            data = bytearray(PAGE_SIZE)
            self._frames[frame] = data
        return data

    def read(self, paddr: int, length: int) -> bytes:
        out = bytearray()
        while length > 0:
            frame, offset = divmod(paddr, PAGE_SIZE)
            chunk = min(length, PAGE_SIZE - offset)
            data = self._frames.get(frame)
            out += data[offset:offset + chunk] if data is not None else bytes(chunk)
            paddr += chunk
            length -= chunk
        return bytes(out)

    def write(self, paddr: int, payload: bytes):
        view = memoryview(payload)
        while view:
            frame, offset = divmod(paddr, PAGE_SIZE)
            chunk = min(len(view), PAGE_SIZE - offset)
            self._frame(frame)[offset:offset + chunk] = view[:chunk]
            paddr += chunk
            view = view[chunk:]

    def read_u64(self, paddr: int) -> int:
        frame, offset = divmod(paddr, PAGE_SIZE)
        data = self._frames.get(frame)
        if data is None:
            return 0
        return int.from_bytes(data[offset:offset + 8], "little")

    def write_u64(self, paddr: int, value: int):
        frame, offset = divmod(paddr, PAGE_SIZE)
        self._frame(frame)[offset:offset + 8] = value.to_bytes(8, "little")

    def read_byte(self, paddr: int) -> int:
        frame, offset = divmod(paddr, PAGE_SIZE)
        data = self._frames.get(frame)
        return 0 if data is None else data[offset]

    def write_byte(self, paddr: int, value: int):
        frame, offset = divmod(paddr, PAGE_SIZE)
        self._frame(frame)[offset] = value

    def frame_bytes(self, frame: int) -> bytes:
        data = self._frames.get(frame)
        return bytes(data) if data is not None else bytes(PAGE_SIZE)

    def copy_frame(self, src: int, dst: int):
        data = self._frames.get(src)
        if data is None:
            self._frames.pop(dst, None)
        else:
            self._frames[dst] = bytearray(data)

    def clear_frame(self, frame: int):
        self._frames.pop(frame, None)


class FrameAllocator:
    """Аллокатор кадров с реестром видов.

    Нижняя половина памяти отдана под 4 КБ кадры: данные растут снизу вверх, таблицы
    страниц сгруппированы сверху вниз. Верхняя половина отдана под 2 МБ страницы.
    """

    def __init__(self, memory: PhysicalMemory, reserved_frames: int = 256):
        self.memory = memory
        total = memory.size // PAGE_SIZE
        self.total_frames = total
        self._small_limit = total // 2
        self.ledger: dict[int, FrameKind] = {}
        for frame in range(reserved_frames):
            self.ledger[frame] = FrameKind.KERNEL
        self._next_data = reserved_frames
        self._next_table = self._small_limit - 1
        self._free_small: list[int] = []
        self._next_huge = self._small_limit
        self._free_huge: list[int] = []

    def kind(self, frame: int) -> FrameKind:
        return self.ledger.get(frame, FrameKind.FREE)

    def alloc(self, kind: FrameKind) -> int:
        """Выделяет обнуленный 4 КБ кадр и возвращает его номер."""
        if self._free_small:
            frame = self._free_small.pop()
        elif kind == FrameKind.PAGE_TABLE:
            frame = self._take_table_frame()
        else:
            frame = self._take_data_frame()
        self.ledger[frame] = kind
        self.memory.clear_frame(frame)
        return frame

    def _take_data_frame(self) -> int:
        while self._next_data <= self._next_table and self._next_data in self.ledger:
            self._next_data += 1
        if self._next_data > self._next_table:
            raise OutOfMemory("No free 4 KB frames left")
        frame = self._next_data
        self._next_data += 1
        return frame

    def _take_table_frame(self) -> int:
        while self._next_table >= self._next_data and self._next_table in self.ledger:
            self._next_table -= 1
        if self._next_table < self._next_data:
            raise OutOfMemory("No free frames for page tables")
        frame = self._next_table
        self._next_table -= 1
        return frame

    def alloc_huge(self, kind: FrameKind) -> int:
        """Выделяет выровненный 2 МБ блок и возвращает номер первого кадра."""
        if self._free_huge:
            base = self._free_huge.pop()
        else:
            if self._next_huge + FRAMES_PER_HUGE > self.total_frames:
                raise OutOfMemory("No free 2 MB frames left")
            base = self._next_huge
            self._next_huge += FRAMES_PER_HUGE
        for frame in range(base, base + FRAMES_PER_HUGE):
            self.ledger[frame] = kind
            self.memory.clear_frame(frame)
        return base

    def free(self, frame: int):
        if self.ledger.pop(frame, None) is None:
            return
        self.memory.clear_frame(frame)
        if frame < self._small_limit:
            self._free_small.append(frame)

    def free_huge(self, base: int):
        for frame in range(base, base + FRAMES_PER_HUGE):
            self.ledger.pop(frame, None)
            self.memory.clear_frame(frame)
        self._free_huge.append(base)

    def count(self, kind: FrameKind) -> int:
        return sum(1 for value in self.ledger.values() if value == kind)
