from enum import Enum
from pathlib import Path

from pydantic import BaseModel, Field, field_validator

from memsim.core.config import settings


class Experiment(str, Enum):
    EXPLORE_EVICTIONS = "explore_evictions"
    COVERT_BENCH = "covert_bench"
    TEMPLATE = "template"
    ROWHAMMER_SWEEP = "rowhammer_sweep"
    ORACLE_SUITE = "oracle_suite"
    DETECT_SUITE = "detect_suite"
    DEDUP_DEMO = "dedup_demo"


class ScenarioSpec(BaseModel):
    """Файл сценария для `run <scenario.json>`."""
    experiment: Experiment
    # Имя пресета или путь к JSON-конфигурации машины
    machine: str = settings.run.machine
    seeds: list[int] = Field(default_factory=lambda: [settings.run.seed])
    out_dir: Path = settings.run.out_dir
    format: str = settings.run.format
    check: bool = False
    trials: int | None = None
    noise: float | None = None
    bytes: int = 1024
    workers: int = settings.run.workers

    class Config:
        frozen = True

    @field_validator("seeds")
    @classmethod
    def check_seeds(cls, value: list[int]) -> list[int]:
        if not value:
            raise ValueError("at least one seed is required")
        return value

    @field_validator("format")
    @classmethod
    def check_format(cls, value: str) -> str:
        if value not in ("csv", "json"):
            raise ValueError(f"unknown report format '{value}'")
        return value

    @field_validator("trials", "workers")
    @classmethod
    def check_positive(cls, value: int | None) -> int | None:
        if value is not None and value < 1:
            raise ValueError("must be >= 1")
        return value

    @field_validator("noise")
    @classmethod
    def check_noise(cls, value: float | None) -> float | None:
        if value is not None and value < 0:
            raise ValueError("noise must be non-negative")
        return value
