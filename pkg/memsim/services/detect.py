from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, field_validator

from memsim.core.config import settings
from memsim.core.errors import SimulationError
from memsim.core.logging import attack_logger
from memsim.hardware.machine import ActorKind, Cpu, Machine, PerfCounters, Schedule
from memsim.hardware.memory import HUGE_PAGE_SIZE, PAGE_SIZE
from memsim.schemas.machine import MachineConfig
from memsim.schemas.reports import StealthRow
from memsim.services.covert import CovertChannel, Technique
from memsim.services.primitives import AttackPrimitives, ProbeKind
from memsim.services.rowhammer import Rowhammer
from memsim.services.victims import TableAccessor


COUNTER_COLUMNS = ["CACHE_REFERENCES", "CACHE_MISSES", "ITLB_RA", "ITLB_WA"]


class NoItlbEvents(SimulationError):
    """Нормировать не на что: за период не было событий ITLB."""


class DetectorConfig(BaseModel):
    k_m: float = 2.35
    k_r: float = 2.34
    sampling_period: int = 3_000_000
    # Длина скользящего окна в периодах выборки
    window: int = 1

    class Config:
        frozen = True

    @field_validator("k_m", "k_r")
    @classmethod
    def check_threshold(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("detection thresholds must be positive")
        return value

    @field_validator("sampling_period", "window")
    @classmethod
    def check_period(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @classmethod
    def from_settings(cls) -> "DetectorConfig":
        detect = settings.detect
        return cls(k_m=detect.k_m, k_r=detect.k_r, sampling_period=detect.sampling_period)


class Classification(NamedTuple):
    malicious: bool
    misses_per_itlb: float
    references_per_itlb: float
    threshold: str | None


def classify(counters: PerfCounters, config: DetectorConfig) -> Classification:
    """Вредоносен, если промахов или обращений к LLC на событие ITLB не меньше порога.

    Raises:
        NoItlbEvents: ITLB_RA + ITLB_WA == 0
    """
    itlb = counters.itlb_events
    if itlb <= 0:
        raise NoItlbEvents("No ITLB events to normalize cache events by")
    misses = counters.cache_misses / itlb
    references = counters.cache_references / itlb
    crossed = [name for name, ratio, limit in (("k_m", misses, config.k_m), ("k_r", references, config.k_r))
               if ratio >= limit]
    return Classification(bool(crossed), misses, references, "+".join(crossed) or None)


def counters_from(values: dict[str, int] | pd.Series) -> PerfCounters:
    return PerfCounters(**{str(key).lower(): int(value) for key, value in dict(values).items()
                           if str(key).lower() in PerfCounters.__dataclass_fields__})


def sample_windows(machine: Machine, actor: str, start: int, window: int = 1) -> pd.DataFrame:
    """Приращения счетчиков актора по скользящим окнам из window периодов выборки."""
    rows = [{"time": sample.time, **sample.counters} for sample in machine.samples
            if sample.actor == actor and sample.time >= start]
    if len(rows) < 2:
        return pd.DataFrame(columns=["time", *COUNTER_COLUMNS])
    frame = pd.DataFrame(rows).sort_values("time").set_index("time")[COUNTER_COLUMNS]
    deltas = frame.diff().dropna()
    return deltas.rolling(window).sum().dropna().astype(int).reset_index()


def calibrate_thresholds(benign: list[PerfCounters], malicious: list[PerfCounters],
                         sampling_period: int | None = None) -> DetectorConfig:
    """Пороги с максимальным зазором: середина между максимумом benign и ближайшим malicious выше него.

    Если ни один вредоносный профиль не превышает benign по метрике, порог
    по ней ставится выше всех benign (вдвое от максимума).
    """
    if not benign:
        raise SimulationError("Threshold calibration needs benign profiles")

    def ratios(profiles: list[PerfCounters], attribute: str) -> np.ndarray:
        return np.array([getattr(item, attribute) / item.itlb_events for item in profiles if item.itlb_events > 0])

    thresholds = {}
    for name, attribute in (("k_m", "cache_misses"), ("k_r", "cache_references")):
        benign_max = float(ratios(benign, attribute).max(initial=0.0))
        above = ratios(malicious, attribute)
        above = above[above > benign_max]
        if above.size:
            thresholds[name] = (benign_max + float(above.min())) / 2
        else:
            thresholds[name] = max(2 * benign_max, 1e-6)
    config = DetectorConfig(
        k_m=thresholds["k_m"], k_r=thresholds["k_r"],
        sampling_period=sampling_period or settings.detect.sampling_period,
    )
    attack_logger.info("Detection thresholds calibrated", k_m=config.k_m, k_r=config.k_r,
                       benign=len(benign), malicious=len(malicious))
    return config


# --- сценарии ---

@dataclass
class ScenarioRun:
    """Прогон сценария: машина после run и роли наблюдаемых акторов."""
    name: str
    machine: Machine
    roles: dict[str, str]
    start: int = 0
    baseline: dict[str, PerfCounters] = field(default_factory=dict)

    def counters(self, actor: str) -> PerfCounters:
        current = next(item for item in self.machine.actors if item.name == actor).counters
        base = self.baseline.get(actor)
        return current.delta(base) if base is not None else current.copy()


Scenario = Callable[[MachineConfig, int, DetectorConfig], ScenarioRun]


def _snapshot(machine: Machine, names: list[str]) -> dict[str, PerfCounters]:
    return {actor.name: actor.counters.copy() for actor in machine.actors if actor.name in names}


def idle_scenario(config: MachineConfig, seed: int, detector: DetectorConfig, steps: int = 400) -> ScenarioRun:
    machine = Machine(config, seed=seed, trace=False, sampling_period=detector.sampling_period)

    def program(cpu: Cpu):
        buffer = cpu.alloc(PAGE_SIZE, mergeable=False)
        for step in range(steps):
            cpu.read(buffer + (step % 8) * machine.config.line_size)
            cpu.pause(100_000)
            yield

    machine.spawn("idle", program, kind=ActorKind.VICTIM)
    machine.run(Schedule.ROUND_ROBIN)
    return ScenarioRun("idle", machine, {"idle": "benign"})


def streaming_writer_scenario(config: MachineConfig, seed: int, detector: DetectorConfig,
                              iterations: int = 2000) -> ScenarioRun:
    """Аналог stress -m: выделить страницу, записать, освободить."""
    machine = Machine(config, seed=seed, trace=False, sampling_period=detector.sampling_period)
    kernel = machine.kernel
    kernel.register_syscall("mmap", lambda cpu, size: kernel.alloc(cpu.actor.space, size, mergeable=False))
    kernel.register_syscall("munmap", lambda cpu, vaddr: kernel.unmap(cpu.actor.space, vaddr))

    def program(cpu: Cpu):
        for step in range(iterations):
            page = cpu.syscall("mmap", PAGE_SIZE)
            cpu.write(page + (step % 64) * machine.config.line_size, step)
            cpu.syscall("munmap", page)
            yield

    machine.spawn("stress", program, kind=ActorKind.VICTIM)
    machine.run(Schedule.ROUND_ROBIN)
    return ScenarioRun("streaming_writer", machine, {"stress": "benign"})


def covert_scenario(technique: Technique, payload: int = 256) -> Scenario:
    def scenario(config: MachineConfig, seed: int, detector: DetectorConfig) -> ScenarioRun:
        machine = Machine(config, seed=seed, trace=False, sampling_period=detector.sampling_period)
        channel = CovertChannel(machine, technique, packet_size=28, seed=seed)
        data = bytes(np.random.default_rng(seed).integers(0, 256, size=payload, dtype=int).tolist())
        channel.transfer(data)
        # Окна и счетчики считаются от начала передачи, калибровка не входит
        return ScenarioRun(f"covert_{Technique(technique).value}", machine,
                           {"sender": "sender", "receiver": "receiver"}, channel.started_at, channel.baseline)
    return scenario


def template_spy_scenario(config: MachineConfig, seed: int, detector: DetectorConfig,
                          rounds: int = 300) -> ScenarioRun:
    machine = Machine(config, seed=seed, trace=False, sampling_period=detector.sampling_period)
    victim = TableAccessor.spawn(machine, events=8, core=min(1, config.cores - 1))
    spy = machine.spawn("spy", kind=ActorKind.ATTACKER, core=0, code_pages=2)
    lines = [victim.share_with(spy) + event * PAGE_SIZE for event in victim.events]
    primitives = AttackPrimitives(machine, spy)
    primitives.calibrate(ProbeKind.RELOAD)
    start = machine.now
    baseline = _snapshot(machine, ["spy"])

    def spy_program(cpu: Cpu):
        for _ in range(rounds):
            cpu.execute(spy.code_pages[1])
            for line in lines:
                primitives.flush_reload(line, wait=0)
            cpu.execute(spy.code_pages[0])
            yield

    spy.program = spy_program
    script = machine.rng.integers(0, len(lines), size=rounds).tolist()
    victim.attach(script)
    machine.run(Schedule.ROUND_ROBIN)
    return ScenarioRun("template_spy", machine, {"spy": "attacker"}, start, baseline)


def rowhammer_scenario(config: MachineConfig, seed: int, detector: DetectorConfig,
                       rounds: int = 200_000) -> ScenarioRun:
    machine = Machine(config, seed=seed, trace=False, sampling_period=detector.sampling_period)
    attacker = machine.spawn("hammer", kind=ActorKind.ATTACKER)
    hammer = Rowhammer(machine, attacker)
    region = hammer.cpu.alloc(HUGE_PAGE_SIZE, huge=True, mergeable=False)
    pair = hammer.select_double_sided(region)[0]
    start = machine.now
    baseline = _snapshot(machine, ["hammer"])
    hammer.hammer(hammer.job(pair, rounds=rounds))
    return ScenarioRun("rowhammer", machine, {"hammer": "attacker"}, start, baseline)


SCENARIOS: dict[str, Scenario] = {
    "idle": idle_scenario,
    "streaming_writer": streaming_writer_scenario,
    "covert_flush_flush": covert_scenario(Technique.FLUSH_FLUSH),
    "covert_flush_reload": covert_scenario(Technique.FLUSH_RELOAD),
    "covert_prime_probe": covert_scenario(Technique.PRIME_PROBE),
    "template_spy": template_spy_scenario,
    "rowhammer": rowhammer_scenario,
}


def judge(run: ScenarioRun, detector: DetectorConfig) -> list[StealthRow]:
    """Вердикт по каждому актору: большинство окон с событиями ITLB, иначе весь прогон."""
    rows = []
    for actor, role in run.roles.items():
        overall = classify(run.counters(actor), detector)
        windows = sample_windows(run.machine, actor, run.start, detector.window)
        verdicts = []
        for _, window in windows.iterrows():
            counters = counters_from(window[COUNTER_COLUMNS])
            if counters.itlb_events > 0:
                verdicts.append(classify(counters, detector).malicious)
        flagged = sum(verdicts)
        malicious = flagged * 2 > len(verdicts) if verdicts else overall.malicious
        rows.append(StealthRow(
            scenario=run.name, actor=actor, role=role,
            misses_per_itlb=round(overall.misses_per_itlb, 4),
            references_per_itlb=round(overall.references_per_itlb, 4),
            malicious=malicious, threshold=overall.threshold,
            windows=len(verdicts), flagged_windows=flagged,
        ))
    return rows


def evaluate_suite(config: MachineConfig, scenarios: list[str] | None = None,
                   detector: DetectorConfig | None = None, seed: int = 0) -> list[StealthRow]:
    """Прогоняет сценарии и классифицирует каждого наблюдаемого актора."""
    detector = detector or DetectorConfig.from_settings()
    names = scenarios or list(SCENARIOS)
    rows = []
    for name in names:
        scenario = SCENARIOS.get(name)
        if scenario is None:
            raise SimulationError(f"Unknown detection scenario '{name}'")
        run = scenario(config, seed, detector)
        scenario_rows = judge(run, detector)
        for row in scenario_rows:
            attack_logger.info(f"Scenario {name}: {row.actor} classified", role=row.role,
                               malicious=row.malicious, misses_per_itlb=row.misses_per_itlb,
                               references_per_itlb=row.references_per_itlb)
        rows.extend(scenario_rows)
    return rows
