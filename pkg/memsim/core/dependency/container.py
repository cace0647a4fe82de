from pathlib import Path

from memsim.core.config import AppSettings
from memsim.core.presets import load_machine
from memsim.schemas.machine import MachineConfig
from memsim.services.detect import DetectorConfig
from memsim.services.experiments import ExperimentService, Explorer
from memsim.services.reports import ReportFormat, ReportWriter


class DependencyContainer:
    def __init__(self, settings: AppSettings, explorer: Explorer | None = None) -> None:
        self._settings = settings
        self._explorer = explorer
        self._machines: dict[str, MachineConfig] = {}

    @property
    def settings(self) -> AppSettings:
        return self._settings

    def get_machine(self, spec: str | None = None) -> MachineConfig:
        """Загружает пресет или файл машины (один раз на процесс)."""
        spec = spec or self._settings.run.machine
        if spec not in self._machines:
            self._machines[spec] = load_machine(spec)
        return self._machines[spec]

    def get_detector_config(self) -> DetectorConfig:
        """Создает DetectorConfig из настроек detect."""
        return DetectorConfig.from_settings()

    def get_report_writer(self, out_dir: Path | None = None, fmt: str | None = None) -> ReportWriter:
        """Создает ReportWriter с переданным каталогом и форматом."""
        return ReportWriter(out_dir or self._settings.run.out_dir, ReportFormat(fmt or self._settings.run.format))

    def get_experiment_service(self, config: MachineConfig, writer: ReportWriter, seed: int | None = None,
                               check: bool = False, trials: int | None = None, noise: float | None = None,
                               payload_bytes: int = 1024, workers: int | None = None) -> ExperimentService:
        """Создает ExperimentService с переданной машиной и ReportWriter.

        При workers > 1 оценка стратегий вытеснения идет через брокер задач.
        """
        workers = workers or self._settings.run.workers
        return ExperimentService(
            config=config,
            writer=writer,
            seed=self._settings.run.seed if seed is None else seed,
            check=check,
            trials=trials,
            noise=noise,
            payload_bytes=payload_bytes,
            explorer=self._explorer if workers > 1 else None,
            detector=self.get_detector_config(),
        )
