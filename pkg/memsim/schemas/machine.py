from enum import Enum

from pydantic import BaseModel, Field, field_validator, model_validator


PAGE_SIZE = 4096


def _is_power_of_two(value: int) -> bool:
    return value > 0 and value & (value - 1) == 0


class Addressing(str, Enum):
    PIPT = "PIPT"
    VIPT = "VIPT"
    VIVT = "VIVT"


class Inclusion(str, Enum):
    INCLUSIVE = "inclusive"
    NON_INCLUSIVE = "non_inclusive"
    EXCLUSIVE = "exclusive"


class ReplacementPolicyName(str, Enum):
    LRU = "lru"
    RANDOM = "random"
    QUAD_AGE = "quad_age"


class CacheGeometry(BaseModel):
    """Геометрия одного уровня кэша."""
    line_size: int = 64
    sets: int
    ways: int
    level: int = 1
    addressing: Addressing = Addressing.PIPT
    inclusion: Inclusion = Inclusion.INCLUSIVE
    slices: int = 1
    policy: ReplacementPolicyName = ReplacementPolicyName.LRU
    # Режим вставки quad-age: False вставляет с возрастом 3 (как LRU), True с возрастом 0 (BIP)
    bip: bool = False

    class Config:
        frozen = True

    @field_validator("line_size", "sets", "slices")
    @classmethod
    def check_power_of_two(cls, value: int) -> int:
        if not _is_power_of_two(value):
            raise ValueError(f"{value} is not a power of two")
        return value

    @field_validator("ways")
    @classmethod
    def check_ways(cls, value: int) -> int:
        if value < 1:
            raise ValueError("ways must be >= 1")
        return value

    @field_validator("level")
    @classmethod
    def check_level(cls, value: int) -> int:
        if value not in (1, 2, 3):
            raise ValueError("level must be 1, 2 or 3")
        return value

    @model_validator(mode="after")
    def check_addressing(self) -> "CacheGeometry":
        if self.addressing != Addressing.PIPT and self.level != 1:
            raise ValueError("virtual addressing is supported only for L1")
        if self.addressing == Addressing.VIPT and self.line_size * self.sets > PAGE_SIZE:
            raise ValueError("VIPT index bits must lie inside the page offset")
        return self

    @property
    def offset_bits(self) -> int:
        return self.line_size.bit_length() - 1

    @property
    def capacity(self) -> int:
        return self.line_size * self.sets * self.ways * self.slices


class SliceHash(BaseModel):
    """Маски XOR-функции выбора среза LLC, по одной на выходной бит."""
    masks: list[int] = Field(default_factory=list)

    class Config:
        frozen = True

    @field_validator("masks")
    @classmethod
    def check_masks(cls, masks: list[int]) -> list[int]:
        for mask in masks:
            if mask < 0 or mask & 0x3F:
                raise ValueError(f"slice mask {mask:#x} covers bits below the line offset")
        return masks


class LatencyModel(BaseModel):
    """Латентности в циклах."""
    l1_hit: int = 4
    l2_hit: int = 12
    l3_hit: int = 40
    remote_fetch: int = 70
    dram: int = 200
    remote_slice_penalty: int = 3
    flush_base: int = 140
    flush_hit_extra: int = 12
    tlb_hit: int = 0
    rdtsc: int = 0
    serialize: int = 0
    idle: int = 20
    syscall: int = 150
    # Переключение корня трансляции при изоляции ядра
    isolation_switch: int = 200

    class Config:
        frozen = True

    @model_validator(mode="after")
    def check_ordering(self) -> "LatencyModel":
        chain = [self.l1_hit, self.l2_hit, self.l3_hit, self.remote_fetch, self.dram]
        if any(a >= b for a, b in zip(chain, chain[1:])):
            raise ValueError("latencies must satisfy L1 < L2 < L3 < remote < DRAM")
        if self.flush_hit_extra <= 0:
            raise ValueError("flush_hit_extra must be positive")
        if min(self.flush_base, self.remote_slice_penalty, self.tlb_hit, self.rdtsc) < 0:
            raise ValueError("latencies must be non-negative")
        return self


class DramAddressFn(BaseModel):
    """Функции адресации DRAM: XOR-маски на каждый выход."""
    bank_masks: list[int] = Field(default_factory=list)
    rank_masks: list[int] = Field(default_factory=list)
    dimm_masks: list[int] = Field(default_factory=list)
    channel_masks: list[int] = Field(default_factory=list)
    row_cutoff: int = 18
    column_bits: int = 13

    class Config:
        frozen = True


class DramLatencyFactors(BaseModel):
    row_hit: float = 1.0
    row_closed: float = 1.6
    row_conflict: float = 2.2

    class Config:
        frozen = True

    @model_validator(mode="after")
    def check_ordering(self) -> "DramLatencyFactors":
        if not (0 < self.row_hit < self.row_closed < self.row_conflict):
            raise ValueError("row latency factors must satisfy hit < closed < conflict")
        return self


class DramTopology(BaseModel):
    channels: int = 1
    dimms: int = 1
    ranks: int = 1
    banks: int = 8
    rows_per_bank: int = 8192
    row_size: int = 8192
    addr_fn: DramAddressFn = DramAddressFn()
    latency: DramLatencyFactors = DramLatencyFactors()

    class Config:
        frozen = True

    @property
    def capacity(self) -> int:
        return self.channels * self.dimms * self.ranks * self.banks * self.rows_per_bank * self.row_size


class RefreshConfig(BaseModel):
    window_ms: float = 64.0
    refreshes: int = 8192
    multiplier: float = 1.0

    class Config:
        frozen = True

    @field_validator("multiplier", "window_ms")
    @classmethod
    def check_positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("must be positive")
        return value


class FlipDirection(str, Enum):
    ONE_TO_ZERO = "1->0"
    ZERO_TO_ONE = "0->1"


class FlipSpec(BaseModel):
    """Явная запись карты восприимчивости: бит физической памяти."""
    paddr: int
    bit: int
    direction: FlipDirection = FlipDirection.ONE_TO_ZERO
    threshold: int = 1_000_000

    class Config:
        frozen = True

    @field_validator("threshold")
    @classmethod
    def check_threshold(cls, value: int) -> int:
        if value <= 0:
            raise ValueError("flip threshold must be positive")
        return value

    @field_validator("bit")
    @classmethod
    def check_bit(cls, value: int) -> int:
        if not 0 <= value < 8:
            raise ValueError("bit index must be in 0..7")
        return value


class FlipMapConfig(BaseModel):
    density_per_gb: float = 0.0
    seed: int = 0
    threshold: int = 1_000_000
    # Разброс порогов: порог записи = threshold * U(1 - spread, 1 + spread)
    threshold_spread: float = 0.0
    entries: list[FlipSpec] = Field(default_factory=list)

    class Config:
        frozen = True


class PrefetchLatencies(BaseModel):
    """Калиброванные латентности prefetch по глубине разрешения."""
    cached: int = 181
    valid_uncached: int = 383
    pt_invalid: int = 222
    pd_absent: int = 246
    pdpt_absent: int = 230
    pte_absent: int = 206

    class Config:
        frozen = True

    @model_validator(mode="after")
    def check_distinct(self) -> "PrefetchLatencies":
        values = [self.cached, self.valid_uncached, self.pt_invalid,
                  self.pd_absent, self.pdpt_absent, self.pte_absent]
        if len(set(values)) != len(values):
            raise ValueError("prefetch latency classes must be distinct")
        return self


class TranslationCacheSizes(BaseModel):
    tlb: int = 64
    pde: int = 16
    pdpte: int = 16
    pml4e: int = 16

    class Config:
        frozen = True


class NoiseConfig(BaseModel):
    # Стандартное отклонение симметричного джиттера латентности (циклы)
    jitter_sigma: float = 0.0

    class Config:
        frozen = True

    @field_validator("jitter_sigma")
    @classmethod
    def check_sigma(cls, value: float) -> float:
        if value < 0:
            raise ValueError("jitter must be >= 0")
        return value


class DedupConfig(BaseModel):
    enabled: bool = False
    scan_period: int = 0  # 0: только явный dedup_scan
    cow_multiplier: int = 1000

    class Config:
        frozen = True


class PrefetcherConfig(BaseModel):
    enabled: bool = False
    trigger_distance: int = 2  # в строках кэша

    class Config:
        frozen = True


class IsolationMode(str, Enum):
    OFF = "off"
    STRONGER_KERNEL_ISOLATION = "stronger_kernel_isolation"


class KernelConfig(BaseModel):
    direct_map_base: int = 0xFFFF_8800_0000_0000
    isolation: IsolationMode = IsolationMode.OFF
    driver_pages: int = 64

    class Config:
        frozen = True


class MachineConfig(BaseModel):
    """Полная конфигурация симулируемой платформы."""
    name: str = "custom"
    cores: int = 2
    clock_ghz: float = 3.0
    phys_mem_mb: int = 1024
    seed: int = 0
    l1: CacheGeometry
    l2: CacheGeometry | None = None
    llc: CacheGeometry
    slice_hash: SliceHash = SliceHash()
    latency: LatencyModel = LatencyModel()
    dram: DramTopology = DramTopology()
    refresh: RefreshConfig = RefreshConfig()
    flip_map: FlipMapConfig = FlipMapConfig()
    prefetch_latency: PrefetchLatencies = PrefetchLatencies()
    translation_caches: TranslationCacheSizes = TranslationCacheSizes()
    noise: NoiseConfig = NoiseConfig()
    dedup: DedupConfig = DedupConfig()
    prefetcher: PrefetcherConfig = PrefetcherConfig()
    kernel: KernelConfig = KernelConfig()
    pagemap_access: bool = True
    timer_period: int = 3_000_000
    clflush_round_ns: float = 60.0

    class Config:
        frozen = True

    @model_validator(mode="after")
    def check_consistency(self) -> "MachineConfig":
        if self.cores < 1:
            raise ValueError("at least one core is required")
        if self.llc.addressing != Addressing.PIPT:
            raise ValueError("the last-level cache is always PIPT")
        if self.l2 is not None and self.l2.addressing != Addressing.PIPT:
            raise ValueError("L2 is always PIPT")
        slice_bits = self.llc.slices.bit_length() - 1
        if len(self.slice_hash.masks) != slice_bits:
            raise ValueError(
                f"slice hash has {len(self.slice_hash.masks)} masks, {slice_bits} required")
        if self.phys_mem_mb < 16 or not _is_power_of_two(self.phys_mem_mb):
            raise ValueError("physical memory must be a power of two >= 16 MB")
        if self.dram.capacity < self.phys_bytes:
            raise ValueError("DRAM topology is smaller than physical memory")
        if self.clock_ghz <= 0:
            raise ValueError("clock must be positive")
        return self

    @property
    def phys_bytes(self) -> int:
        return self.phys_mem_mb << 20

    @property
    def line_size(self) -> int:
        return self.llc.line_size

    def ns_to_cycles(self, ns: float) -> float:
        return ns * self.clock_ghz
