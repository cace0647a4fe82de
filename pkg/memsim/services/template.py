from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np
import pandas as pd

from memsim.core.errors import SimulationError
from memsim.core.logging import attack_logger
from memsim.hardware.memory import PAGE_SIZE
from memsim.services.eviction import EvictionSet
from memsim.services.primitives import AttackPrimitives, ProbeKind
from memsim.services.victims import TTABLE_SIZE, AesTTable, Victim


DEFAULT_REJECT_MSE = 0.25


class EmptyTemplate(SimulationError):
    """Матрица шаблона пуста: нет адресов, событий или срабатываний."""


class TemplateProbe(str, Enum):
    FLUSH_RELOAD = "flush_reload"
    EVICT_RELOAD = "evict_reload"
    FLUSH_FLUSH = "flush_flush"
    PRIME_PROBE = "prime_probe"


@dataclass
class CacheTemplateMatrix:
    """Доли попаданий H(a, e) = k / n по адресам (строки) и событиям (столбцы)."""
    addresses: list[int]
    columns: list[tuple[int, ...]]
    hits: np.ndarray
    triggers: np.ndarray

    @property
    def labels(self) -> list[str]:
        return ["+".join(str(event) for event in column) for column in self.columns]

    @property
    def ratios(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.triggers > 0, self.hits / np.maximum(self.triggers, 1), 0.0)

    @property
    def merge_map(self) -> dict[str, list[int]]:
        return {label: list(column) for label, column in zip(self.labels, self.columns)}

    @property
    def is_empty(self) -> bool:
        return self.hits.size == 0 or not self.triggers.any()

    def ratio(self, address: int, event: int) -> float:
        row = self.addresses.index(address)
        col = next(index for index, column in enumerate(self.columns) if event in column)
        return float(self.ratios[row, col])

    def to_frame(self) -> pd.DataFrame:
        """Таблица для тепловой карты: адреса по строкам, события по столбцам."""
        frame = pd.DataFrame(self.ratios, columns=self.labels)
        frame.insert(0, "address", [f"{address:#x}" for address in self.addresses])
        return frame

    def f_scores(self) -> pd.Series:
        """F-score строки как детектора своего наиболее вероятного события."""
        ratios = self.ratios
        scores = []
        for row in ratios:
            total = row.sum()
            recall = row.max() if row.size else 0.0
            precision = recall / total if total > 0 else 0.0
            scores.append(0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall))
        return pd.Series(scores, index=[f"{address:#x}" for address in self.addresses], name="f_score")


class ExploitEvent(NamedTuple):
    time: int
    event: str | None
    mse: float


@dataclass
class AesRecovery:
    nibbles: list[int]
    encryptions: list[int] = field(default_factory=list)

    @property
    def total_encryptions(self) -> int:
        return sum(self.encryptions)


class TemplateAttack:
    """Профилирование и эксплуатация шаблонов кэша для жертвы с разделяемым образом."""

    def __init__(self, primitives: AttackPrimitives, victim: Victim, image: int | None = None):
        self.primitives = primitives
        self.machine = primitives.machine
        self.cpu = primitives.cpu
        self.victim = victim
        self.image = image if image is not None else victim.share_with(primitives.attacker)
        self._sets: dict[int, EvictionSet] = {}

    def monitored_lines(self) -> list[int]:
        line = self.machine.config.line_size
        return [self.image + offset for offset in range(0, self.victim.pages * PAGE_SIZE, line)]

    # --- зонды ---

    def _eviction_set(self, address: int) -> EvictionSet:
        eviction_set = self._sets.get(address)
        if eviction_set is None:
            llc = self.machine.config.llc
            eviction_set = self.primitives.eviction.build_static(address, llc.ways + llc.ways // 2)
            self._sets[address] = eviction_set
        return eviction_set

    def _arm(self, addresses: list[int], probe: TemplateProbe):
        primitives = self.primitives
        for address in addresses:
            if probe in (TemplateProbe.FLUSH_RELOAD, TemplateProbe.FLUSH_FLUSH):
                self.cpu.clflush(address)
            elif probe == TemplateProbe.EVICT_RELOAD:
                eviction_set = self._eviction_set(address)
                primitives.eviction.run_strategy(primitives.default_strategy(eviction_set), eviction_set)
            else:
                primitives.prime(self._eviction_set(address))

    def _measure(self, addresses: list[int], probe: TemplateProbe) -> list[bool]:
        primitives = self.primitives
        cpu = self.cpu
        hits = []
        for address in addresses:
            if probe == TemplateProbe.FLUSH_FLUSH:
                latency = primitives.timed_flush(address)
                hits.append(latency >= primitives.threshold(ProbeKind.FLUSH))
            elif probe == TemplateProbe.PRIME_PROBE:
                hits.append(primitives.probe(self._eviction_set(address)).hit)
            else:
                latency = primitives.timed_read(address)
                hits.append(latency < primitives.threshold(ProbeKind.RELOAD))
                # Строка не должна занимать множество до следующего замера
                cpu.clflush(address)
        return hits

    def _batches(self, addresses: list[int], per_page: bool) -> list[list[int]]:
        """Без префетчера по одному адресу, с ним по одному адресу на страницу."""
        if not per_page:
            return [[address] for address in addresses]
        by_page: dict[int, list[int]] = {}
        for address in addresses:
            by_page.setdefault(address // PAGE_SIZE, []).append(address)
        pages = list(by_page.values())
        batches = []
        depth = max(len(items) for items in pages)
        for index in range(depth):
            # Разные смещения на разных страницах, чтобы строки пакета не делили множество
            batch = [items[(index + shift) % len(items)] for shift, items in enumerate(pages)
                     if index < len(items)]
            batches.append(batch)
        return batches

    # --- профилирование ---

    def profile(self, events: list[int] | None = None, triggers: int = 8,
                probe: TemplateProbe = TemplateProbe.FLUSH_RELOAD,
                addresses: list[int] | None = None) -> CacheTemplateMatrix:
        """Матрица H(a, e): для каждого адреса и события triggers срабатываний с замером.

        Raises:
            EmptyTemplate: Нет срабатываний, адресов или событий
        """
        probe = TemplateProbe(probe)
        events = self.victim.events if events is None else events
        addresses = self.monitored_lines() if addresses is None else addresses
        if triggers <= 0 or not events or not addresses:
            attack_logger.error("Empty cache template requested", triggers=triggers,
                                events=len(events), addresses=len(addresses))
            raise EmptyTemplate("Profiling needs at least one trigger, event and address")

        row_of = {address: row for row, address in enumerate(addresses)}
        hits = np.zeros((len(addresses), len(events)), dtype=np.int64)
        counts = np.zeros_like(hits)
        per_page = self.machine.config.prefetcher.enabled
        for batch in self._batches(addresses, per_page):
            rows = [row_of[address] for address in batch]
            for col, event in enumerate(events):
                for _ in range(triggers):
                    self._arm(batch, probe)
                    self.victim.trigger(event)
                    for row, hit in zip(rows, self._measure(batch, probe)):
                        hits[row, col] += int(hit)
                        counts[row, col] += 1

        matrix = CacheTemplateMatrix(list(addresses), [(event,) for event in events], hits, counts)
        attack_logger.info("Cache template profiled", victim=self.victim.kind, probe=probe.value,
                           addresses=len(addresses), events=len(events), triggers=triggers)
        return matrix

    # --- эксплуатация ---

    def exploit(self, matrix: CacheTemplateMatrix, window: int = 1,
                probe: TemplateProbe = TemplateProbe.FLUSH_RELOAD,
                reject: float = DEFAULT_REJECT_MSE, max_windows: int = 100_000) -> list[ExploitEvent]:
        """Наблюдает жертву окнами по window ходов; классифицирует вектор попаданий по MSE."""
        if matrix.is_empty:
            raise EmptyTemplate("Cannot exploit an empty template")
        probe = TemplateProbe(probe)
        ratios = matrix.ratios
        labels = matrix.labels
        rows = matrix.addresses
        attacker = self.primitives.attacker
        log: list[ExploitEvent] = []
        windows = 0
        self._arm(rows, probe)
        while self.victim.actor.scheduled and windows < max_windows:
            started = self.machine.now
            self.machine.yield_turns(window, exclude=attacker)
            vector = np.array(self._measure(rows, probe), dtype=float)
            windows += 1
            if probe in (TemplateProbe.EVICT_RELOAD, TemplateProbe.PRIME_PROBE):
                self._arm(rows, probe)
            if not vector.any():
                continue
            errors = ((ratios - vector[:, None]) ** 2).mean(axis=0)
            best = int(np.argmin(errors))
            mse = float(errors[best])
            log.append(ExploitEvent(started, labels[best] if mse <= reject else None, mse))
        attack_logger.info("Template exploit finished", windows=windows, detected=len(log))
        return log

    # --- AES ---

    def aes_recover_upper_nibbles(self, max_per_byte: int = 160) -> AesRecovery:
        """Старшие полубайты ключа по первой строке каждой T-таблицы.

        Для байта i перебирается старший полубайт p_i; кандидат, при котором
        отслеживаемая строка хоть раз не попала, отбрасывается.
        """
        victim = self.victim
        if not isinstance(victim, AesTTable):
            raise SimulationError("Nibble recovery needs the T-table AES victim")
        primitives = self.primitives
        threshold = primitives.threshold(ProbeKind.RELOAD)
        rng = self.machine.rng
        cpu = self.cpu
        recovery = AesRecovery([])
        for index in range(16):
            line = self.image + (index % 4) * TTABLE_SIZE
            candidates = list(range(16))
            used = 0
            while len(candidates) > 1 and used < max_per_byte:
                for nibble in list(candidates):
                    plaintext = bytearray(rng.integers(0, 256, size=16, dtype=int).tolist())
                    plaintext[index] = (nibble << 4) | (plaintext[index] & 0x0F)
                    cpu.clflush(line)
                    victim.encrypt(bytes(plaintext))
                    used += 1
                    if primitives.timed_read(line) >= threshold:
                        candidates.remove(nibble)
                    if len(candidates) <= 1 or used >= max_per_byte:
                        break
                if not candidates:
                    # Шум выбил верный кандидат: начинаем заново
                    candidates = list(range(16))
            if len(candidates) != 1:
                attack_logger.warning("Nibble not isolated", byte=index, candidates=len(candidates))
            recovery.nibbles.append(candidates[0])
            recovery.encryptions.append(used)
        attack_logger.info("AES upper nibbles recovered", encryptions=recovery.total_encryptions)
        return recovery


def prune(matrix: CacheTemplateMatrix, min_range: float = 0.5, merge_mse: float = 0.01) -> CacheTemplateMatrix:
    """Убирает неинформативные и повторяющиеся строки, сливает похожие столбцы.

    Ячейки не меняются: слитый столбец суммирует k и n исходных.
    """
    if matrix.is_empty:
        raise EmptyTemplate("Cannot prune an empty template")
    ratios = matrix.ratios
    spread = ratios.max(axis=1) - ratios.min(axis=1)
    keep = [row for row in range(len(matrix.addresses)) if spread[row] >= min_range]

    seen: set[tuple[float, ...]] = set()
    unique = []
    for row in keep:
        key = tuple(np.round(ratios[row], 9))
        if key not in seen:
            seen.add(key)
            unique.append(row)

    hits = matrix.hits[unique]
    triggers = matrix.triggers[unique]
    kept_ratios = ratios[unique]
    groups: list[list[int]] = []
    for col in range(len(matrix.columns)):
        for group in groups:
            if float(np.mean((kept_ratios[:, group[0]] - kept_ratios[:, col]) ** 2)) < merge_mse:
                group.append(col)
                break
        else:
            groups.append([col])

    columns = [tuple(event for col in group for event in matrix.columns[col]) for group in groups]
    merged_hits = np.stack([hits[:, group].sum(axis=1) for group in groups], axis=1) if unique else \
        np.zeros((0, len(groups)), dtype=np.int64)
    merged_triggers = np.stack([triggers[:, group].sum(axis=1) for group in groups], axis=1) if unique else \
        np.zeros((0, len(groups)), dtype=np.int64)
    attack_logger.debug("Template pruned", rows_before=len(matrix.addresses), rows_after=len(unique),
                        columns_before=len(matrix.columns), columns_after=len(columns))
    return CacheTemplateMatrix([matrix.addresses[row] for row in unique], columns, merged_hits, merged_triggers)
