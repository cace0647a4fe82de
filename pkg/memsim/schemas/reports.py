from enum import Enum

from pydantic import BaseModel, Field

from memsim.schemas.machine import FlipDirection


class StrategyReport(BaseModel):
    """Строка таблицы оценки стратегии вытеснения."""
    strategy: str
    C: int
    D: int
    L: int
    S: int
    accesses: int
    hits: float  # среднее на прогон
    misses: float
    time_cycles: float
    eviction_rate: float = Field(ge=0.0, le=1.0)
    trials: int

    class Config:
        frozen = True

    def meets(self, threshold: float) -> bool:
        return self.eviction_rate >= threshold


class ChannelStats(BaseModel):
    """Итог передачи по скрытому каналу."""
    technique: str
    packet_size: int
    payload_bytes: int
    bits_sent: int = 0
    bits_received: int = 0
    transmitted_bits: int = 0
    runtime_cycles: int = 0
    capacity_bps: float = 0.0
    raw_error_rate: float = 0.0
    effective_error_rate: float = 0.0
    packets: int = 0
    retransmissions: int = 0
    crc_rejects: int = 0
    false_accepts: int = 0
    sender_references: int = 0
    sender_misses: int = 0
    receiver_references: int = 0
    receiver_misses: int = 0
    sender_itlb: int = 0
    receiver_itlb: int = 0


class StealthRow(BaseModel):
    """Вердикт детектора для одного актора сценария."""
    scenario: str
    actor: str
    role: str
    misses_per_itlb: float
    references_per_itlb: float
    malicious: bool
    threshold: str | None = None
    windows: int = 1
    flagged_windows: int = 0


class Exploitability(str, Enum):
    NONE = "none"
    PTE_ADDRESS_BIT = "pte_address_bit"
    PTE_FLAG_BIT = "pte_flag_bit"
    USER_DATA = "user_data"


class FlipReport(BaseModel):
    """Наблюдаемый переворот бита и его пригодность для эксплуатации."""
    paddr: int
    bank: tuple[int, ...]
    row: int
    bit: int
    direction: FlipDirection
    time: int
    activations: int = 0
    exploitability: Exploitability = Exploitability.NONE
    vaddr: int | None = None

    class Config:
        frozen = True


class SweepRow(BaseModel):
    """Строка развертки: число переворотов при данном окне регенерации и способе."""
    refresh_multiplier: float
    method: str
    strategy: str | None = None
    eviction_rate: float | None = None
    pairs: int = 0
    flips: int = 0


class OracleResult(BaseModel):
    """Сверка оракула с истинным состоянием машины."""
    oracle: str
    seed: int
    expected: str
    observed: str
    passed: bool

    class Config:
        frozen = True


class DedupRow(BaseModel):
    """Время записи атакующего в страницу после сканирования дедупликации."""
    page: int
    guess_matches: bool
    merged: bool
    write_cycles: int
    plain_cycles: int

    @property
    def ratio(self) -> float:
        return self.write_cycles / max(1, self.plain_cycles)
