from enum import Enum
from pathlib import Path
from typing import Iterable

import pandas as pd
from pydantic import BaseModel

from memsim.core.logging import report_logger
from memsim.services.primitives import Calibration


class ReportFormat(str, Enum):
    CSV = "csv"
    JSON = "json"


def to_frame(rows: Iterable[BaseModel]) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump(mode="json") for row in rows])


class ReportWriter:
    """Запись таблиц в каталог отчетов; одинаковые данные дают побайтно одинаковые файлы."""

    def __init__(self, out_dir: Path, fmt: ReportFormat = ReportFormat.CSV):
        self.out_dir = Path(out_dir)
        self.fmt = ReportFormat(fmt)
        self.written: list[Path] = []

    def write_frame(self, frame: pd.DataFrame, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"{name}.{self.fmt.value}"
        if self.fmt == ReportFormat.CSV:
            frame.to_csv(path, index=False, lineterminator="\n", float_format="%.6f")
        else:
            frame.to_json(path, orient="records", indent=2, double_precision=6)
        self.written.append(path)
        report_logger.info(f"Report written: {path}", rows=len(frame), format=self.fmt.value)
        return path

    def write(self, rows: Iterable[BaseModel], name: str) -> Path:
        return self.write_frame(to_frame(rows), name)

    def write_histogram(self, calibration: Calibration, name: str) -> Path:
        """Гистограмма латентностей калибровки: latency, count, label."""
        return self.write_frame(calibration.histogram(), f"{name}_histogram")
