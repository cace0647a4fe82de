from typing import Iterable

from pyaes import AESModeOfOperationECB
from pyaes.aes import AES

from memsim.core.errors import SimulationError
from memsim.core.logging import attack_logger
from memsim.hardware.kernel import DRIVER_BASE
from memsim.hardware.machine import Actor, ActorKind, Cpu, Machine, Program
from memsim.hardware.memory import PAGE_SIZE


class Victim:
    """Процесс-жертва с образом в памяти, который можно разделить с атакующим."""

    kind = "victim"

    def __init__(self, machine: Machine, actor: Actor, base: int, pages: int):
        self.machine = machine
        self.actor = actor
        self.cpu = machine.cpu(actor)
        self.base = base
        self.pages = pages
        # (виртуальное время, событие) для сверки с результатами атаки
        self.log: list[tuple[int, int]] = []

    @property
    def events(self) -> list[int]:
        return list(range(self.pages))

    def trigger(self, event: int):
        raise NotImplementedError

    def share_with(self, attacker: Actor) -> int:
        """Отображает образ жертвы в пространство атакующего (только чтение)."""
        _, attacker_base = self.machine.share_mapping(self.actor, attacker, self.pages, vaddr=self.base)
        return attacker_base

    def program(self, script: Iterable[int | None]) -> Program:
        """Программа по сценарию: на каждом ходу событие или простой."""
        def run(cpu: Cpu):
            for event in script:
                if event is None:
                    cpu.pause()
                else:
                    self.log.append((self.machine.now, event))
                    self.trigger(event)
                yield
        return run

    def attach(self, script: Iterable[int | None]):
        actor = self.actor
        actor.program = self.program(list(script))
        actor.gen = None
        actor.finished = False


class TableAccessor(Victim):
    """Событие e читает первую строку страницы e (записи массива через 4096 байт)."""

    kind = "table_accessor"

    @classmethod
    def spawn(cls, machine: Machine, events: int = 10, core: int = 1, name: str = "victim") -> "TableAccessor":
        actor = machine.spawn(name, kind=ActorKind.VICTIM, core=core)
        base = machine.kernel.alloc(actor.space, events * PAGE_SIZE, mergeable=False)
        return cls(machine, actor, base, events)

    def trigger(self, event: int):
        self.cpu.read(self.base + event * PAGE_SIZE)


class CodeAccessor(Victim):
    """Событие e вызывает функцию, выровненную на страницу e."""

    kind = "code_accessor"

    @classmethod
    def spawn(cls, machine: Machine, events: int = 10, core: int = 1, name: str = "victim") -> "CodeAccessor":
        actor = machine.spawn(name, kind=ActorKind.VICTIM, core=core, code_pages=0)
        base = machine.kernel.alloc(actor.space, events * PAGE_SIZE, executable=True)
        return cls(machine, actor, base, events)

    def trigger(self, event: int):
        self.cpu.execute(self.base + event * PAGE_SIZE)


# Четыре таблицы по 256 записей по 4 байта: ровно одна страница
TTABLE_SIZE = 1024


class AesTTable(Victim):
    """AES с T-таблицами; моделируются обращения только первого раунда.

    Байт состояния i читает T_j[p_i ^ k_i], где j = i mod 4.
    """

    kind = "aes_ttable"

    def __init__(self, machine: Machine, actor: Actor, base: int, key: bytes):
        super().__init__(machine, actor, base, 1)
        if len(key) != 16:
            raise SimulationError("AES-128 key must be 16 bytes long")
        self.key = key
        self._cipher = AESModeOfOperationECB(key)
        self.encryptions = 0

    @classmethod
    def spawn(cls, machine: Machine, key: bytes | None = None, core: int = 1,
              name: str = "aes") -> "AesTTable":
        actor = machine.spawn(name, kind=ActorKind.VICTIM, core=core)
        base = machine.kernel.alloc(actor.space, PAGE_SIZE, mergeable=False)
        tables = b"".join(
            value.to_bytes(4, "little")
            for table in (AES.T1, AES.T2, AES.T3, AES.T4)
            for value in table
        )
        machine.poke(actor, base, tables)
        if key is None:
            key = bytes(machine.rng.integers(0, 256, size=16, dtype=int).tolist())
        return cls(machine, actor, base, key)

    @property
    def events(self) -> list[int]:
        # Событие: старший полубайт p_0
        return list(range(16))

    @staticmethod
    def entry_offset(index: int, value: int) -> int:
        return (index % 4) * TTABLE_SIZE + value * 4

    def first_round_offsets(self, plaintext: bytes) -> list[int]:
        return [self.entry_offset(i, p ^ k) for i, (p, k) in enumerate(zip(plaintext, self.key))]

    def encrypt(self, plaintext: bytes) -> bytes:
        """Шифрует блок; обращения к памяти дают 16 поисков первого раунда."""
        if len(plaintext) != 16:
            raise SimulationError("AES block must be 16 bytes long")
        for offset in self.first_round_offsets(plaintext):
            self.cpu.read(self.base + offset, size=4)
        self.encryptions += 1
        return self._cipher.encrypt(plaintext)

    def trigger(self, event: int):
        plaintext = bytearray(self.machine.rng.integers(0, 256, size=16, dtype=int).tolist())
        plaintext[0] = (event << 4) | (plaintext[0] & 0x0F)
        self.encrypt(bytes(plaintext))


class DriverVictim:
    """Системный вызов драйвера ядра, читающий строку набора драйверных страниц."""

    syscall_name = "driver_ioctl"

    def __init__(self, machine: Machine, touched: list[int], line_offset: int = 0):
        self.machine = machine
        self.touched = sorted(touched)
        self.line_offset = line_offset
        self.calls = 0
        machine.kernel.register_syscall(self.syscall_name, self._routine)

    @classmethod
    def install(cls, machine: Machine, count: int = 4, line_offset: int = 0) -> "DriverVictim":
        """Выбирает count страниц драйвера по seed машины."""
        pages = machine.kernel.driver_pages
        if not 0 < count <= len(pages):
            raise SimulationError(f"Driver has {len(pages)} pages, cannot touch {count}")
        chosen = machine.rng.choice(len(pages), size=count, replace=False)
        touched = [pages[int(index)] for index in chosen]
        attack_logger.debug("Driver victim installed", pages=len(pages), touched=count)
        return cls(machine, touched, line_offset)

    def _routine(self, cpu: Cpu):
        self.calls += 1
        for page in self.touched:
            cpu.read(page + self.line_offset)

    def call(self, cpu: Cpu):
        cpu.syscall(self.syscall_name)

    @staticmethod
    def region(machine: Machine) -> list[int]:
        return [DRIVER_BASE + index * PAGE_SIZE for index in range(len(machine.kernel.driver_pages))]
