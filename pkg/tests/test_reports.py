import json

import numpy as np
import pytest

from memsim.schemas.reports import DedupRow
from memsim.services.primitives import Calibration, ProbeKind
from memsim.services.reports import ReportFormat, ReportWriter, to_frame


ROWS = [
    DedupRow(page=0, guess_matches=True, merged=True, write_cycles=4200, plain_cycles=4),
    DedupRow(page=1, guess_matches=False, merged=False, write_cycles=4, plain_cycles=4),
]


def test_frame_columns():
    frame = to_frame(ROWS)

    assert list(frame.columns) == ["page", "guess_matches", "merged", "write_cycles", "plain_cycles"]
    assert frame["write_cycles"].tolist() == [4200, 4]


@pytest.mark.parametrize("fmt", [ReportFormat.CSV, ReportFormat.JSON])
def test_rewrite_is_byte_identical(tmp_path, fmt):
    first = ReportWriter(tmp_path / "a", fmt).write(ROWS, "dedup")
    second = ReportWriter(tmp_path / "b", fmt).write(ROWS, "dedup")

    assert first.name == f"dedup.{fmt.value}"
    assert first.read_bytes() == second.read_bytes()


def test_json_records(tmp_path):
    path = ReportWriter(tmp_path, "json").write(ROWS, "dedup")
    records = json.loads(path.read_text(encoding="utf-8"))

    assert records[0]["merged"] is True
    assert records[1]["page"] == 1


def test_csv_header(tmp_path):
    path = ReportWriter(tmp_path).write(ROWS, "dedup")

    assert path.read_text(encoding="utf-8").splitlines()[0] == "page,guess_matches,merged,write_cycles,plain_cycles"


def test_histogram_file(tmp_path):
    calibration = Calibration(ProbeKind.RELOAD, {"hit": np.array([40, 40, 41]), "miss": np.array([200])})
    writer = ReportWriter(tmp_path)
    path = writer.write_histogram(calibration, "reload")
    lines = path.read_text(encoding="utf-8").splitlines()

    assert path.name == "reload_histogram.csv"
    assert lines[0] == "latency,count,label"
    assert lines[1:] == ["40,2,hit", "41,1,hit", "200,1,miss"]
    assert writer.written == [path]


def test_unknown_format_rejected(tmp_path):
    with pytest.raises(ValueError):
        ReportWriter(tmp_path, "xml")
