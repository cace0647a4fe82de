from pathlib import Path

from pydantic import ValidationError

from memsim.core.errors import ConfigError
from memsim.schemas.machine import (
    Addressing, CacheGeometry, DramAddressFn, DramTopology, Inclusion, LatencyModel,
    MachineConfig, ReplacementPolicyName, SliceHash,
)


def _mask(*bits: int) -> int:
    value = 0
    for bit in bits:
        value |= 1 << bit
    return value


# Пример функции срезов для процессоров Intel Core (выходы o0, o1, o2)
SLICE_O0 = _mask(6, 10, 12, 14, 16, 17, 18, 20, 22, 24, 25, 26, 27, 28, 30, 32, 33, 35, 36)
SLICE_O1 = _mask(7, 11, 13, 15, 17, 19, 20, 21, 22, 23, 24, 26, 28, 29, 31, 33, 34, 35, 37)
SLICE_O2 = _mask(8, 12, 13, 16, 19, 22, 23, 26, 27, 30, 31, 34, 35, 36, 37)

L1_INTEL = CacheGeometry(sets=64, ways=8, level=1, addressing=Addressing.VIPT)
L2_INTEL = CacheGeometry(sets=512, ways=8, level=2, inclusion=Inclusion.NON_INCLUSIVE)


def _llc(slices: int, ways: int, policy: ReplacementPolicyName = ReplacementPolicyName.QUAD_AGE,
         sets: int = 2048) -> CacheGeometry:
    return CacheGeometry(sets=sets, ways=ways, level=3, slices=slices, policy=policy)


def _slice_hash(slices: int) -> SliceHash:
    return SliceHash(masks=[SLICE_O0, SLICE_O1, SLICE_O2][:slices.bit_length() - 1])


SANDY = MachineConfig(
    name="sandy",
    cores=2,
    clock_ghz=2.6,
    l1=L1_INTEL,
    l2=L2_INTEL,
    llc=_llc(slices=2, ways=12),
    slice_hash=_slice_hash(2),
    latency=LatencyModel(flush_hit_extra=12),
    dram=DramTopology(
        channels=1, ranks=2, banks=8,
        addr_fn=DramAddressFn(
            bank_masks=[_mask(13, 17), _mask(14, 18), _mask(15, 19)],
            rank_masks=[_mask(16)],
            row_cutoff=17,
        ),
    ),
)

IVY = MachineConfig(
    name="ivy",
    cores=4,
    clock_ghz=3.4,
    l1=L1_INTEL,
    l2=L2_INTEL,
    llc=_llc(slices=4, ways=16),
    slice_hash=_slice_hash(4),
    latency=LatencyModel(flush_hit_extra=9),
    dram=DramTopology(
        channels=1, ranks=2, banks=8,
        addr_fn=DramAddressFn(
            bank_masks=[_mask(13, 17), _mask(14, 18), _mask(16, 20)],
            rank_masks=[_mask(15, 19)],
        ),
    ),
)

HASWELL = MachineConfig(
    name="haswell",
    cores=4,
    clock_ghz=3.6,
    l1=L1_INTEL,
    l2=L2_INTEL,
    llc=_llc(slices=4, ways=16),
    slice_hash=_slice_hash(4),
    dram=DramTopology(
        channels=2, ranks=2, banks=8,
        addr_fn=DramAddressFn(
            bank_masks=[_mask(14, 18), _mask(15, 19), _mask(17, 21)],
            rank_masks=[_mask(16, 20)],
            channel_masks=[_mask(7, 8, 9, 12, 13, 18, 19)],
        ),
    ),
)

SKYLAKE = MachineConfig(
    name="skylake",
    cores=4,
    clock_ghz=4.0,
    l1=L1_INTEL,
    l2=CacheGeometry(sets=1024, ways=4, level=2, inclusion=Inclusion.NON_INCLUSIVE),
    llc=_llc(slices=4, ways=16),
    slice_hash=_slice_hash(4),
    dram=DramTopology(
        channels=2, ranks=2, banks=16,
        addr_fn=DramAddressFn(
            bank_masks=[_mask(7, 14), _mask(15, 19), _mask(17, 21), _mask(18, 22)],
            rank_masks=[_mask(16, 20)],
            channel_masks=[_mask(8, 9, 12, 13, 18, 19)],
        ),
    ),
)

CORTEX_A53 = MachineConfig(
    name="cortex-a53",
    cores=4,
    clock_ghz=1.5,
    l1=CacheGeometry(sets=64, ways=8, level=1, addressing=Addressing.VIPT,
                     policy=ReplacementPolicyName.RANDOM),
    llc=CacheGeometry(sets=512, ways=16, level=2, policy=ReplacementPolicyName.RANDOM),
    latency=LatencyModel(l1_hit=3, l2_hit=10, l3_hit=24, remote_fetch=60, dram=180, flush_hit_extra=10),
    dram=DramTopology(
        channels=2, ranks=1, banks=16,
        addr_fn=DramAddressFn(
            bank_masks=[_mask(14), _mask(15), _mask(16), _mask(8, 13)],
            channel_masks=[_mask(7, 12)],
            row_cutoff=17,
        ),
    ),
)

# Профили для исследования стратегий вытеснения: один срез, 16 путей
RANDOM16 = MachineConfig(
    name="random16",
    cores=2,
    l1=CacheGeometry(sets=64, ways=8, level=1),
    llc=_llc(slices=1, ways=16, policy=ReplacementPolicyName.RANDOM),
    dram=SANDY.dram,
)

LRU16 = RANDOM16.model_copy(update={
    "name": "lru16",
    "llc": _llc(slices=1, ways=16, policy=ReplacementPolicyName.LRU),
})

# Маленькая машина для тестов
TINY = MachineConfig(
    name="tiny",
    cores=2,
    phys_mem_mb=16,
    l1=CacheGeometry(sets=16, ways=2, level=1),
    llc=CacheGeometry(sets=64, ways=4, level=3),
    kernel={"driver_pages": 16},
    dram=DramTopology(
        channels=1, ranks=1, banks=8, rows_per_bank=256,
        addr_fn=SANDY.dram.addr_fn,
    ),
)

PRESETS: dict[str, MachineConfig] = {
    config.name: config
    for config in (SANDY, IVY, HASWELL, SKYLAKE, CORTEX_A53, RANDOM16, LRU16, TINY)
}


def get_preset(name: str) -> MachineConfig:
    preset = PRESETS.get(name)
    if preset is None:
        raise ConfigError(f"Unknown machine preset '{name}'; known: {', '.join(sorted(PRESETS))}")
    return preset


def load_machine(spec: str) -> MachineConfig:
    """Пресет по имени либо JSON-файл конфигурации машины.

    Raises:
        ConfigError: Неизвестный пресет, нечитаемый или невалидный файл
    """
    if spec in PRESETS:
        return PRESETS[spec]
    path = Path(spec)
    if not path.suffix:
        return get_preset(spec)
    try:
        return MachineConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read machine config {path}: {e}")
    except ValidationError as e:
        raise ConfigError(f"Invalid machine config {path}: {e}")
