from pathlib import Path

from pydantic import BaseModel
from pydantic_settings import BaseSettings


class LoggingSettings(BaseModel):
    debug: bool = False
    level: str = "INFO"


class RunSettings(BaseModel):
    seed: int = 0
    machine: str = "haswell"  # пресет по умолчанию для CLI
    out_dir: Path = Path("./reports")
    format: str = "csv"
    workers: int = 1  # >1: веерный прогон через taskiq


class DetectSettings(BaseModel):
    k_m: float = 2.35
    k_r: float = 2.34
    sampling_period: int = 3_000_000  # циклы виртуального времени


class AppSettings(BaseSettings):
    logging: LoggingSettings = LoggingSettings()
    run: RunSettings = RunSettings()
    detect: DetectSettings = DetectSettings()

    class Config:
        env_file = ".env"
        env_prefix = "MEMSIM_"
        env_nested_delimiter = '__'


settings = AppSettings()
