import binascii
from dataclasses import dataclass
from enum import Enum

import numpy as np

from memsim.core.errors import SimulationError
from memsim.core.logging import attack_logger
from memsim.hardware.machine import Actor, ActorKind, BudgetExhausted, Cpu, Machine, PerfCounters, Schedule
from memsim.hardware.memory import PAGE_SIZE
from memsim.schemas.machine import MachineConfig
from memsim.schemas.reports import ChannelStats
from memsim.services.eviction import EvictionSet
from memsim.services.primitives import AttackPrimitives, ProbeKind


DATA_LINES = 8
# Служебные байты пакета: номер и CRC-16
PACKET_OVERHEAD = 3
# Слоты фазы подтверждения: пауза, байт seq, контрольный байт
ACK_SLOTS = 3


class DeadlockTimeout(SimulationError):
    """Передача не продвигается: подтверждение не получено за отведенное число попыток."""


class Technique(str, Enum):
    FLUSH_RELOAD = "flush_reload"
    FLUSH_FLUSH = "flush_flush"
    PRIME_PROBE = "prime_probe"


def crc16(data: bytes) -> int:
    """CRC-16/CCITT-FALSE: полином 0x1021, начальное значение 0xFFFF, без отражения."""
    return binascii.crc_hqx(bytes(data), 0xFFFF)


def ack_check(seq: int) -> int:
    return crc16(bytes([seq])) & 0xFF


def build_frames(data: bytes, packet_size: int) -> list[bytes]:
    """Разбивает данные на пакеты: payload, seq, CRC-16 (big-endian) по payload+seq."""
    payload_size = packet_size - PACKET_OVERHEAD
    frames = []
    for index, start in enumerate(range(0, len(data), payload_size)):
        payload = data[start:start + payload_size].ljust(payload_size, b"\x00")
        body = payload + bytes([index % 256])
        frames.append(body + crc16(body).to_bytes(2, "big"))
    return frames


def line_offset(index: int, line_size: int) -> int:
    # Одна линия на страницу, у каждой свое множество; начало страниц (код, таблицы страниц) не задеваем
    return index * PAGE_SIZE + ((index * 2 + 9) * line_size) % PAGE_SIZE


@dataclass
class ChannelBinding:
    """Линии канала в пространствах отправителя и получателя."""
    technique: Technique
    sender_data: list[int]
    receiver_data: list[int]
    sender_ack: list[int]
    receiver_ack: list[int]


class Endpoint:
    """Сторона канала: передает байт на tx-линиях, принимает с rx-линий."""

    def __init__(self, primitives: AttackPrimitives, technique: Technique, tx_lines: list[int],
                 rx_lines: list[int], noise: float, rng: np.random.Generator):
        self.primitives = primitives
        self.cpu = primitives.cpu
        self.technique = technique
        self.tx_lines = tx_lines
        self.rx_lines = rx_lines
        self.noise = noise
        self.rng = rng
        self.rx_sets: list[EvictionSet] = []

    def prepare(self):
        """Калибровка порога и, для Prime+Probe, наборы вытеснения rx-линий."""
        primitives = self.primitives
        if self.technique == Technique.FLUSH_RELOAD:
            primitives.calibrate(ProbeKind.RELOAD)
        elif self.technique == Technique.FLUSH_FLUSH:
            primitives.calibrate(ProbeKind.FLUSH)
        else:
            primitives.calibrate(ProbeKind.RELOAD)
            pool = primitives.eviction.pool_for(primitives.prime_size)
            self.rx_sets = [
                primitives.eviction.build_static(line, primitives.prime_size, pool) for line in self.rx_lines
            ]
            primitives.calibrate(ProbeKind.PRIME_PROBE, eviction_set=self.rx_sets[0])
        self.arm()

    def arm(self):
        if self.technique == Technique.PRIME_PROBE:
            for eviction_set in self.rx_sets:
                self.primitives.prime(eviction_set)
        else:
            for line in self.rx_lines:
                self.cpu.clflush(line)

    def send_symbol(self, value: int):
        cpu = self.cpu
        for bit, line in enumerate(self.tx_lines):
            if value >> bit & 1:
                if self.technique == Technique.PRIME_PROBE:
                    cpu.clflush(line)
                cpu.read(line)

    def receive_symbol(self) -> int:
        """Замер всех rx-линий с повторным взведением; шум с вероятностью noise искажает символ целиком."""
        primitives = self.primitives
        cpu = self.cpu
        value = 0
        for bit, line in enumerate(self.rx_lines):
            if self.technique == Technique.FLUSH_RELOAD:
                hit = primitives.timed_read(line) < primitives.threshold(ProbeKind.RELOAD)
                cpu.clflush(line)
            elif self.technique == Technique.FLUSH_FLUSH:
                hit = primitives.timed_flush(line) >= primitives.threshold(ProbeKind.FLUSH)
            else:
                hit = primitives.probe(self.rx_sets[bit]).hit
            value |= int(hit) << bit
        if self.noise > 0 and self.rng.random() < self.noise:
            value ^= int(self.rng.integers(1, 1 << DATA_LINES))
        return value


class CovertChannel:
    """Полудуплексный канал с пакетами, CRC-16 и повторной передачей до подтверждения.

    Работает пошагово под round_robin: отправитель и получатель чередуют ходы,
    за ход передается один символ (байт на восьми линиях).
    """

    def __init__(self, machine: Machine, technique: Technique, packet_size: int = 28, noise: float = 0.0,
                 max_retries: int = 64, seed: int = 0):
        if packet_size <= PACKET_OVERHEAD:
            raise SimulationError(f"Packet size must exceed {PACKET_OVERHEAD} bytes")
        if not 0.0 <= noise < 1.0:
            raise SimulationError("Symbol noise must be in [0, 1)")
        self.machine = machine
        self.technique = Technique(technique)
        self.packet_size = packet_size
        self.noise = noise
        self.max_retries = max_retries
        rng_sender, rng_receiver = np.random.SeedSequence(seed).spawn(2)

        cores = machine.config.cores
        self.sender: Actor = machine.spawn("sender", kind=ActorKind.ATTACKER, core=0, code_pages=2)
        self.receiver: Actor = machine.spawn("receiver", kind=ActorKind.ATTACKER, core=min(1, cores - 1),
                                             daemon=True, code_pages=2)
        self.binding = self._bind()
        binding = self.binding
        self.tx = Endpoint(AttackPrimitives(machine, self.sender), self.technique, binding.sender_data,
                           binding.sender_ack, noise, np.random.default_rng(rng_sender))
        self.rx = Endpoint(AttackPrimitives(machine, self.receiver), self.technique, binding.receiver_ack,
                           binding.receiver_data, noise, np.random.default_rng(rng_receiver))

        self.frames: list[bytes] = []
        self.received = bytearray()
        self._current: bytes = b""
        self._expected_seq = 0
        self._accepted = 0
        self.retransmissions = 0
        self.crc_rejects = 0
        self.false_accepts = 0
        self.raw_errors = 0
        self.raw_bits = 0
        # Момент старта передачи и счетчики на этот момент (после калибровки)
        self.started_at = 0
        self.baseline: dict[str, PerfCounters] = {}

    def _bind(self) -> ChannelBinding:
        machine = self.machine
        pages = 2 * DATA_LINES
        base, shared = machine.share_mapping(
            self.sender, self.receiver, pages,
            vaddr=machine.kernel.alloc(self.sender.space, pages * PAGE_SIZE, mergeable=False),
        )
        line = machine.config.line_size
        offsets = [line_offset(index, line) for index in range(pages)]
        return ChannelBinding(
            technique=self.technique,
            sender_data=[base + offset for offset in offsets[:DATA_LINES]],
            receiver_data=[shared + offset for offset in offsets[:DATA_LINES]],
            sender_ack=[base + offset for offset in offsets[DATA_LINES:]],
            receiver_ack=[shared + offset for offset in offsets[DATA_LINES:]],
        )

    # --- программы акторов ---

    def _call(self, cpu: Cpu):
        # Вызов send()/receive() на второй кодовой странице и возврат в цикл
        code = cpu.actor.code_pages
        cpu.execute(code[1])
        cpu.execute(code[0])

    def _sender_program(self, cpu: Cpu):
        slots = self.packet_size
        for frame in self.frames:
            seq = frame[-3]
            attempts = 0
            while True:
                self._current = frame
                for symbol in frame:
                    self._call(cpu)
                    self.tx.send_symbol(symbol)
                    yield
                cpu.pause()
                yield
                self._call(cpu)
                ack_seq = self.tx.receive_symbol()
                yield
                self._call(cpu)
                check = self.tx.receive_symbol()
                if ack_seq == seq and check == ack_check(seq):
                    yield
                    break
                attempts += 1
                self.retransmissions += 1
                if attempts > self.max_retries:
                    attack_logger.error("Covert channel deadlock", seq=seq, attempts=attempts, slots=slots)
                    raise DeadlockTimeout(f"Packet {seq} not acknowledged after {attempts} attempts")
                yield

    def _receiver_program(self, cpu: Cpu):
        while True:
            frame = bytearray()
            for _ in range(self.packet_size):
                self._call(cpu)
                frame.append(self.rx.receive_symbol())
                yield
            ack = self._accept(bytes(frame))
            self._call(cpu)
            self.rx.send_symbol(ack[0])
            yield
            self._call(cpu)
            self.rx.send_symbol(ack[1])
            yield
            cpu.pause()
            yield

    def _accept(self, frame: bytes) -> bytes:
        self.raw_bits += len(frame) * 8
        self.raw_errors += sum((a ^ b).bit_count() for a, b in zip(frame, self._current))
        seq = frame[-3]
        if crc16(frame[:-2]) != int.from_bytes(frame[-2:], "big"):
            self.crc_rejects += 1
            return b"\x00\x00"
        if seq == self._expected_seq and self._accepted < len(self.frames):
            payload = frame[:-3]
            if payload != self.frames[self._accepted][:-3]:
                self.false_accepts += 1
                attack_logger.warning("CRC false match accepted", seq=seq)
            self.received.extend(payload)
            self._accepted += 1
            self._expected_seq = (self._expected_seq + 1) % 256
        # Повтор уже принятого пакета тоже подтверждается
        return bytes([seq, ack_check(seq)])

    # --- передача ---

    def transfer(self, data: bytes, budget: int | None = None) -> tuple[bytes, ChannelStats]:
        """Передает данные и возвращает принятые байты и статистику.

        Raises:
            DeadlockTimeout: Пакет не подтвержден или исчерпан бюджет времени
        """
        machine = self.machine
        self.frames = build_frames(data, self.packet_size)
        self.tx.prepare()
        self.rx.prepare()
        before = {actor.name: actor.counters.copy() for actor in (self.sender, self.receiver)}
        self.baseline = before
        self.sender.program = self._sender_program
        self.receiver.program = self._receiver_program
        start = machine.now
        self.started_at = start
        attack_logger.info("Covert transfer started", technique=self.technique.value,
                           bytes=len(data), packet_size=self.packet_size, noise=self.noise)
        try:
            machine.run(Schedule.ROUND_ROBIN, budget=None if budget is None else start + budget)
        except BudgetExhausted as e:
            raise DeadlockTimeout(f"Covert transfer exceeded its budget: {e.message}")
        runtime = machine.now - start
        received = bytes(self.received[:len(data)])
        sender = self.sender.counters.delta(before["sender"])
        receiver = self.receiver.counters.delta(before["receiver"])
        stats = self._stats(data, received, runtime, sender, receiver)
        attack_logger.info("Covert transfer finished", technique=self.technique.value,
                           capacity_bps=stats.capacity_bps, effective_error_rate=stats.effective_error_rate,
                           retransmissions=self.retransmissions)
        return received, stats

    def _stats(self, data: bytes, received: bytes, runtime: int, sender: PerfCounters,
               receiver: PerfCounters) -> ChannelStats:
        bits_sent = len(data) * 8
        bits_received = len(received) * 8
        transmitted = min(bits_sent, bits_received)
        errors = sum((a ^ b).bit_count() for a, b in zip(data, received)) + (bits_sent - transmitted)
        seconds = runtime / (self.machine.config.clock_ghz * 1e9)
        return ChannelStats(
            technique=self.technique.value,
            packet_size=self.packet_size,
            payload_bytes=len(data),
            bits_sent=bits_sent,
            bits_received=bits_received,
            transmitted_bits=transmitted,
            runtime_cycles=runtime,
            capacity_bps=transmitted / seconds if seconds > 0 else 0.0,
            raw_error_rate=self.raw_errors / self.raw_bits if self.raw_bits else 0.0,
            effective_error_rate=errors / bits_sent if bits_sent else 0.0,
            packets=len(self.frames),
            retransmissions=self.retransmissions,
            crc_rejects=self.crc_rejects,
            false_accepts=self.false_accepts,
            sender_references=sender.cache_references,
            sender_misses=sender.cache_misses,
            receiver_references=receiver.cache_references,
            receiver_misses=receiver.cache_misses,
            sender_itlb=sender.itlb_events,
            receiver_itlb=receiver.itlb_events,
        )


def run_transfer(config: MachineConfig, technique: Technique, data: bytes, packet_size: int,
                 noise: float = 0.0, seed: int = 0) -> tuple[bytes, ChannelStats, CovertChannel]:
    """Передача на собственной машине."""
    machine = Machine(config, seed=seed, trace=False)
    channel = CovertChannel(machine, technique, packet_size, noise, seed=seed)
    received, stats = channel.transfer(data)
    return received, stats, channel


def measure(config: MachineConfig, technique: Technique, payload_bytes: int, noise: float = 0.0,
            packet_sizes: tuple[int, ...] = (4, 28), seed: int = 0) -> list[ChannelStats]:
    """Таблица емкости и ошибок по размерам пакета для одного способа передачи."""
    if payload_bytes <= 0:
        return []
    data = bytes(np.random.default_rng(seed).integers(0, 256, size=payload_bytes, dtype=int).tolist())
    rows = []
    for packet_size in packet_sizes:
        _, stats, _ = run_transfer(config, technique, data, packet_size, noise, seed)
        rows.append(stats)
    return rows
