from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from memsim.core.errors import CheckFailed
from memsim.core.logging import report_logger
from memsim.hardware.machine import Actor, ActorKind, Machine
from memsim.hardware.memory import GIANT_PAGE_SIZE, HUGE_PAGE_SIZE, PAGE_SIZE
from memsim.hardware.mmu import canonical
from memsim.schemas.machine import IsolationMode, MachineConfig
from memsim.schemas.reports import DedupRow, OracleResult, StrategyReport
from memsim.schemas.scenario import Experiment
from memsim.services.covert import Technique, measure
from memsim.services.detect import DetectorConfig, evaluate_suite
from memsim.services.eviction import DEFAULT_EVICTION_THRESHOLD, EvictionStrategy, explore, explore_candidates
from memsim.services.primitives import AttackPrimitives, ProbeKind, true_level_map
from memsim.services.reports import ReportWriter
from memsim.services.rowhammer import HammerMethod, Rowhammer, plant_victim_flips, rowhammer_sweep
from memsim.services.template import TemplateAttack
from memsim.services.victims import AesTTable, DriverVictim, TableAccessor


Explorer = Callable[[MachineConfig, list[EvictionStrategy], int, int], list[StrategyReport]]

REFRESH_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
DEDUP_SPIKE = 10
# Допуск числа обращений за окно относительно аналитического значения
ACCESS_TOLERANCE = 0.01
# Случайных раскладок памяти в проверке карты уровней трансляции
ORACLE_LAYOUTS = 50


class ExperimentService:
    """Именованные эксперименты: прогон, запись отчетов и приемочные проверки (--check)."""

    def __init__(self, config: MachineConfig, writer: ReportWriter, seed: int = 0, check: bool = False,
                 trials: int | None = None, noise: float | None = None, payload_bytes: int = 1024,
                 explorer: Explorer | None = None, detector: DetectorConfig | None = None):
        self.config = config
        self.writer = writer
        self.seed = seed
        self.check = check
        self.trials = trials
        self.noise = noise
        self.payload_bytes = payload_bytes
        self.explorer = explorer or explore
        self.detector = detector or DetectorConfig.from_settings()

    def run(self, experiment: Experiment) -> list[Path]:
        experiment = Experiment(experiment)
        handlers = {
            Experiment.EXPLORE_EVICTIONS: self.explore_evictions,
            Experiment.COVERT_BENCH: self.covert_bench,
            Experiment.TEMPLATE: self.template,
            Experiment.ROWHAMMER_SWEEP: self.rowhammer_sweep,
            Experiment.ORACLE_SUITE: self.oracle_suite,
            Experiment.DETECT_SUITE: self.detect_suite,
            Experiment.DEDUP_DEMO: self.dedup_demo,
        }
        report_logger.info(f"Running experiment {experiment.value}", machine=self.config.name,
                           seed=self.seed, check=self.check)
        before = len(self.writer.written)
        handlers[experiment]()
        return self.writer.written[before:]

    def _require(self, condition: bool, message: str):
        if self.check and not condition:
            report_logger.error("Acceptance check failed", reason=message, machine=self.config.name)
            raise CheckFailed(message)

    @property
    def machine_config(self) -> MachineConfig:
        """Конфигурация с джиттером --noise (для всех экспериментов, кроме covert)."""
        if self.noise is None:
            return self.config
        noise = self.config.noise.model_copy(update={"jitter_sigma": self.noise})
        return self.config.model_copy(update={"noise": noise})

    # --- eviction ---

    def explore_evictions(self) -> list[StrategyReport]:
        llc = self.config.llc
        sizes = list(range(llc.ways, llc.ways + 5))
        strategies = explore_candidates([1, 2], [1, 2], [1, 2], sizes)
        trials = self.trials or 2000
        reports = self.explorer(self.machine_config, strategies, trials, self.seed)
        self.writer.write(reports, "eviction_strategies")

        ranked = [report.strategy for report in reports]
        single = next((index for index, report in enumerate(reports) if report.C == 1 and report.D == 1), None)
        repeated = next((index for index, report in enumerate(reports) if report.C >= 2 or report.D >= 2), None)
        report_logger.info("Eviction strategies ranked", best=ranked[0] if ranked else None,
                           best_single=ranked[single] if single is not None else None)
        self._require(repeated is not None and reports[repeated].meets(DEFAULT_EVICTION_THRESHOLD)
                      and (single is None or repeated < single),
                      "no repeated-access strategy ranks above the best single-pass strategy")
        return reports

    # --- covert ---

    def covert_bench(self):
        noise = self.noise or 0.0
        rows = []
        for technique in Technique:
            stats = measure(self.config, technique, self.payload_bytes, noise, (4, 28), self.seed)
            rows.extend(stats)
            by_size = {item.packet_size: item for item in stats}
            if 4 in by_size and 28 in by_size:
                self._require(by_size[28].capacity_bps > by_size[4].capacity_bps,
                              f"{technique.value}: 28-byte packets are not faster than 4-byte packets")
            for item in stats:
                self._require(item.false_accepts == 0,
                              f"{technique.value}: {item.false_accepts} corrupted packets accepted")
                if noise == 0:
                    self._require(item.effective_error_rate == 0,
                                  f"{technique.value}: noiseless transfer has errors")
                else:
                    self._require(item.effective_error_rate < 0.05,
                                  f"{technique.value}: effective error rate {item.effective_error_rate:.4f}")
        self.writer.write(rows, "covert_channels")
        return rows

    # --- template ---

    def template(self):
        config = self.machine_config
        machine = Machine(config, seed=self.seed, trace=False)
        victim = TableAccessor.spawn(machine, events=8, core=min(1, config.cores - 1))
        spy = machine.spawn("spy", kind=ActorKind.ATTACKER)
        primitives = AttackPrimitives(machine, spy)
        self.writer.write_histogram(primitives.calibrate(ProbeKind.RELOAD), "reload")
        attack = TemplateAttack(primitives, victim)
        addresses = [attack.image + event * PAGE_SIZE for event in victim.events]
        matrix = attack.profile(triggers=8, addresses=addresses)
        self.writer.write_frame(matrix.to_frame(), "template_matrix")

        script = machine.rng.integers(0, len(victim.events), size=64).tolist()
        victim.attach([event if step % 2 else None for step, event in enumerate(script)])
        log = attack.exploit(matrix)
        detected = pd.DataFrame(log, columns=["time", "event", "mse"]).astype({"time": "int64"})
        actual = pd.DataFrame(victim.log, columns=["time", "actual"]).astype({"time": "int64"})
        merged = pd.merge_asof(actual.sort_values("time"), detected.sort_values("time"),
                               on="time", direction="backward")
        accuracy = float((merged["actual"].astype(str) == merged["event"]).mean()) if len(merged) else 0.0
        self.writer.write_frame(merged, "template_exploit")
        report_logger.info("Template exploit scored", events=len(actual), accuracy=round(accuracy, 4))

        self.aes_recovery(self.trials or 4)

    def aes_recovery(self, keys: int) -> pd.DataFrame:
        rng = np.random.default_rng(self.seed)
        records = []
        for index in range(keys):
            machine = Machine(self.machine_config, seed=self.seed + index, trace=False)
            key = bytes(rng.integers(0, 256, size=16, dtype=int).tolist())
            victim = AesTTable.spawn(machine, key=key)
            spy = machine.spawn("spy", kind=ActorKind.ATTACKER)
            primitives = AttackPrimitives(machine, spy)
            primitives.calibrate(ProbeKind.RELOAD)
            recovery = TemplateAttack(primitives, victim).aes_recover_upper_nibbles()
            for position, (nibble, used) in enumerate(zip(recovery.nibbles, recovery.encryptions)):
                records.append({"key": index, "byte": position, "expected": key[position] >> 4,
                                "recovered": nibble, "encryptions": used})
        frame = pd.DataFrame(records)
        self.writer.write_frame(frame, "aes_nibbles")
        wrong = int((frame["expected"] != frame["recovered"]).sum())
        self._require(wrong == 0, f"{wrong} AES key nibbles recovered incorrectly")
        self._require(int(frame["encryptions"].max()) <= 160, "AES nibble recovery needed more than 160 encryptions")
        return frame

    # --- rowhammer ---

    def rowhammer_sweep(self):
        config = plant_victim_flips(self.machine_config, self.seed)
        llc = config.llc
        strategy = EvictionStrategy(S=llc.ways + 1, C=2, D=2, L=1)
        rows = rowhammer_sweep(config, list(REFRESH_MULTIPLIERS), [HammerMethod.CLFLUSH, HammerMethod.EVICTION],
                               strategy=strategy, seed=self.seed, trials=self.trials or 64)
        self.writer.write(rows, "rowhammer_sweep")

        for method in HammerMethod:
            flips = [row.flips for row in sorted(rows, key=lambda row: row.refresh_multiplier)
                     if row.method == method.value]
            self._require(all(a <= b for a, b in zip(flips, flips[1:])),
                          f"{method.value}: flip count is not monotone in the refresh window")

        accesses, expected = self.accesses_per_window(config)
        self._require(abs(accesses - expected) <= ACCESS_TOLERANCE * expected,
                      f"clflush hammering made {accesses} accesses per window, expected about {expected:.0f}")
        return rows

    def accesses_per_window(self, config: MachineConfig) -> tuple[int, float]:
        """Обращения к одному адресу за одно окно регенерации при clflush-hammer."""
        machine = Machine(config, seed=self.seed, trace=False)
        attacker = machine.spawn("hammer", kind=ActorKind.ATTACKER)
        hammer = Rowhammer(machine, attacker)
        region = hammer.cpu.alloc(HUGE_PAGE_SIZE, huge=True, mergeable=False)
        job = hammer.job(hammer.select_double_sided(region)[0])
        hammer.hammer(job, windows=1)
        refresh = config.refresh
        expected = refresh.window_ms * refresh.multiplier * 1e6 / config.clflush_round_ns
        report_logger.info("Accesses per refresh window", accesses=job.accesses, expected=round(expected))
        return job.accesses, expected

    # --- prefetch oracles ---

    def oracle_suite(self) -> list[OracleResult]:
        results = []
        for layout in range(self.trials or ORACLE_LAYOUTS):
            results.append(self._translation_levels(self.seed + layout))
        results.extend(self._direct_map(self.seed))
        results.append(self._driver_scan(self.seed))
        self.writer.write(results, "oracles")
        failed = [result.oracle for result in results if not result.passed]
        self._require(not failed, f"oracles disagree with the machine: {', '.join(failed)}")
        return results

    def _random_layout(self, machine: Machine, attacker: Actor, rng: np.random.Generator):
        """Смесь 4 КБ серий с дырами, полных таблиц, 2 МБ и (если хватает памяти) 1 ГБ страниц."""
        cpu = machine.cpu(attacker)
        kinds = ["small", "table", "huge"]
        if self.machine_config.phys_bytes >= GIANT_PAGE_SIZE:
            kinds.append("giant")
        huge_left, tables_left = 2, 1
        for slot in rng.choice(np.arange(8, 200), size=int(rng.integers(2, 5)), replace=False):
            base = canonical(int(slot) << 39) + int(rng.integers(0, 512)) * GIANT_PAGE_SIZE
            kind = str(rng.choice(kinds))
            if kind == "giant":
                machine.kernel.map_giant(attacker.space, base)
            elif kind == "huge" and huge_left:
                count = int(rng.integers(1, huge_left + 1))
                for index in rng.choice(512, size=count, replace=False):
                    cpu.alloc(HUGE_PAGE_SIZE, huge=True, mergeable=False, vaddr=base + int(index) * HUGE_PAGE_SIZE)
                huge_left -= count
            elif kind == "table" and tables_left:
                # Таблица нижнего уровня, заполненная целиком
                cpu.alloc(HUGE_PAGE_SIZE, mergeable=False, vaddr=base + int(rng.integers(0, 512)) * HUGE_PAGE_SIZE)
                tables_left -= 1
            else:
                table = base + int(rng.integers(0, 512)) * HUGE_PAGE_SIZE
                for start in rng.choice(np.arange(0, 512, 16), size=int(rng.integers(1, 4)), replace=False):
                    cpu.alloc(int(rng.integers(1, 9)) * PAGE_SIZE, mergeable=False,
                              vaddr=table + int(start) * PAGE_SIZE)

    def _translation_levels(self, seed: int) -> OracleResult:
        machine = Machine(self.machine_config, seed=seed, trace=False)
        attacker = machine.spawn("attacker", kind=ActorKind.ATTACKER)
        self._random_layout(machine, attacker, np.random.default_rng(seed))
        primitives = AttackPrimitives(machine, attacker)
        primitives.calibrate(ProbeKind.PREFETCH)
        recovered = primitives.recover_translation_levels()
        truth = true_level_map(machine, attacker.space.user_root)
        mismatches = sum(1 for key in truth.keys() | recovered.keys() if truth.get(key) != recovered.get(key))
        return OracleResult(oracle="translation_levels", seed=seed, expected=f"{len(truth)} regions",
                            observed=f"{len(recovered)} regions, {mismatches} mismatches",
                            passed=mismatches == 0)

    def _direct_map(self, seed: int) -> list[OracleResult]:
        results = []
        for mode in (IsolationMode.OFF, IsolationMode.STRONGER_KERNEL_ISOLATION):
            machine = Machine(self.machine_config, seed=seed, trace=False)
            attacker = machine.spawn("attacker", kind=ActorKind.ATTACKER)
            machine.set_isolation(mode)
            primitives = AttackPrimitives(machine, attacker)
            page = primitives.cpu.alloc(HUGE_PAGE_SIZE, huge=True, mergeable=False)
            primitives.cpu.read(page)
            alias = primitives.find_direct_map_alias(page)
            if mode == IsolationMode.OFF:
                expected = self.config.kernel.direct_map_base + machine.resolve(attacker, page)
            else:
                expected = None
            results.append(OracleResult(
                oracle=f"direct_map_alias_{mode.value}", seed=seed,
                expected=hex(expected) if expected is not None else "none",
                observed=hex(alias) if alias is not None else "none",
                passed=alias == expected,
            ))
        return results

    def _driver_scan(self, seed: int) -> OracleResult:
        machine = Machine(self.machine_config, seed=seed, trace=False)
        attacker = machine.spawn("attacker", kind=ActorKind.ATTACKER)
        victim = DriverVictim.install(machine, count=min(4, self.config.kernel.driver_pages))
        primitives = AttackPrimitives(machine, attacker)
        used = primitives.scan_syscall_pages(DriverVictim.region(machine), lambda: victim.call(primitives.cpu))
        return OracleResult(oracle="syscall_pages", seed=seed,
                            expected=",".join(hex(page) for page in victim.touched),
                            observed=",".join(hex(page) for page in sorted(used)),
                            passed=sorted(used) == victim.touched)

    # --- detection ---

    def detect_suite(self):
        rows = evaluate_suite(self.machine_config, detector=self.detector, seed=self.seed)
        self.writer.write(rows, "stealth")
        verdicts = {(row.scenario, row.role): row.malicious for row in rows}
        self._require(verdicts.get(("covert_flush_flush", "receiver")) is False,
                      "Flush+Flush receiver was flagged")
        for scenario in ("covert_flush_reload", "covert_prime_probe"):
            self._require(verdicts.get((scenario, "receiver")) is True, f"{scenario} receiver was not flagged")
        flagged = [row.scenario for row in rows if row.role == "benign" and row.malicious]
        self._require(not flagged, f"benign workloads flagged: {', '.join(flagged)}")
        return rows

    # --- dedup ---

    def dedup_demo(self) -> list[DedupRow]:
        """Запись в слитую страницу идет через копирование и стоит на порядки дороже обычной."""
        base = self.machine_config
        config = base.model_copy(update={"dedup": base.dedup.model_copy(update={"enabled": True})})
        machine = Machine(config, seed=self.seed, trace=False)
        victim = machine.spawn("victim", kind=ActorKind.VICTIM, core=min(1, config.cores - 1))
        attacker = machine.spawn("attacker", kind=ActorKind.ATTACKER)
        victim_cpu = machine.cpu(victim)
        primitives = AttackPrimitives(machine, attacker)
        cpu = primitives.cpu
        rng = np.random.default_rng(self.seed)

        pages = []
        for index in range(self.trials or 4):
            secret = rng.bytes(PAGE_SIZE)
            victim_page = victim_cpu.alloc(PAGE_SIZE)
            machine.poke(victim, victim_page, secret)
            matches = index % 2 == 0
            guess = cpu.alloc(PAGE_SIZE)
            machine.poke(attacker, guess, secret if matches else rng.bytes(PAGE_SIZE))
            pages.append((victim_page, guess, matches))
        machine.dedup_scan()

        plain = cpu.alloc(PAGE_SIZE, mergeable=False)
        cpu.write(plain, 1)
        plain_cycles = primitives.timed(lambda: cpu.write(plain, 2))
        rows = []
        for index, (victim_page, guess, matches) in enumerate(pages):
            merged = machine.resolve(attacker, guess) == machine.resolve(victim, victim_page)
            cpu.read(guess)
            write_cycles = primitives.timed(lambda: cpu.write(guess, 0x41))
            rows.append(DedupRow(page=index, guess_matches=matches, merged=merged,
                                 write_cycles=write_cycles, plain_cycles=plain_cycles))
        self.writer.write(rows, "dedup")

        for row in rows:
            if row.merged:
                self._require(row.ratio >= DEDUP_SPIKE, f"merged page {row.page} write is only {row.ratio:.1f}x slower")
            else:
                self._require(row.ratio < DEDUP_SPIKE, f"unmerged page {row.page} shows a write spike")
            self._require(row.merged == row.guess_matches, f"page {row.page} merge does not follow its content")
        return rows

