import pytest
from pydantic import ValidationError

from memsim.core.errors import SimulationError
from memsim.hardware.machine import Machine, PerfCounters
from memsim.hardware.memory import PAGE_SIZE
from memsim.services.covert import Technique
from memsim.services.detect import (
    COUNTER_COLUMNS, DetectorConfig, NoItlbEvents, calibrate_thresholds, classify, counters_from,
    covert_scenario, evaluate_suite, judge, sample_windows,
)


@pytest.fixture
def detector():
    return DetectorConfig()


def test_classify_thresholds(detector):
    benign = classify(PerfCounters(cache_misses=10, cache_references=10, itlb_ra=5), detector)
    both = classify(PerfCounters(cache_misses=10, cache_references=10, itlb_ra=4), detector)
    references = classify(PerfCounters(cache_references=12, itlb_ra=3, itlb_wa=2), detector)

    assert not benign.malicious
    assert benign.threshold is None
    assert benign.misses_per_itlb == 2.0
    assert both.malicious
    assert both.threshold == "k_m+k_r"
    assert references.malicious
    assert references.threshold == "k_r"


def test_classify_without_itlb_events(detector):
    with pytest.raises(NoItlbEvents):
        classify(PerfCounters(cache_misses=10), detector)


def test_detector_config_validation():
    with pytest.raises(ValidationError):
        DetectorConfig(k_m=0)
    with pytest.raises(ValidationError):
        DetectorConfig(window=0)


def test_counters_from_ignores_unknown_events():
    counters = counters_from({"CACHE_MISSES": 3, "ITLB_RA": 2, "BRANCH_MISSES": 9})

    assert counters == PerfCounters(cache_misses=3, itlb_ra=2)


def test_calibrate_thresholds_uses_widest_gap():
    benign = [PerfCounters(cache_misses=1, cache_references=2, itlb_ra=1),
              PerfCounters(cache_misses=1, cache_references=1, itlb_ra=2)]
    malicious = [PerfCounters(cache_misses=5, cache_references=10, itlb_ra=1),
                 PerfCounters(cache_misses=9, cache_references=20, itlb_ra=1)]

    config = calibrate_thresholds(benign, malicious, sampling_period=1000)

    assert config.k_m == pytest.approx(3.0)
    assert config.k_r == pytest.approx(6.0)
    assert config.sampling_period == 1000


def test_calibrate_thresholds_without_separation():
    benign = [PerfCounters(cache_misses=2, cache_references=4, itlb_ra=1)]

    config = calibrate_thresholds(benign, [PerfCounters(cache_misses=1, cache_references=1, itlb_ra=1)])

    assert config.k_m == pytest.approx(4.0)
    assert config.k_r == pytest.approx(8.0)
    with pytest.raises(SimulationError):
        calibrate_thresholds([], [])


def test_sample_windows(tiny):
    machine = Machine(tiny, sampling_period=10_000)

    def program(cpu):
        buffer = cpu.alloc(PAGE_SIZE)
        for step in range(20):
            cpu.read(buffer + step * 64)
            cpu.pause(5_000)
            yield

    machine.spawn("reader", program)
    machine.run()

    windows = sample_windows(machine, "reader", start=0, window=2)
    assert list(windows.columns) == ["time", *COUNTER_COLUMNS]
    assert len(windows) > 0
    assert (windows["CACHE_REFERENCES"] >= 0).all()
    assert sample_windows(machine, "nobody", start=0).empty


def test_idle_is_benign(tiny, detector):
    rows = evaluate_suite(tiny, ["idle"], detector)

    assert len(rows) == 1
    assert rows[0].role == "benign"
    assert not rows[0].malicious


def test_unknown_scenario(tiny, detector):
    with pytest.raises(SimulationError):
        evaluate_suite(tiny, ["nope"], detector)


def test_covert_receivers(tiny, detector):
    flush_flush = judge(covert_scenario(Technique.FLUSH_FLUSH, payload=50)(tiny, 0, detector), detector)
    flush_reload = judge(covert_scenario(Technique.FLUSH_RELOAD, payload=50)(tiny, 0, detector), detector)

    receivers = {row.scenario: row for row in flush_flush + flush_reload if row.actor == "receiver"}
    assert not receivers["covert_flush_flush"].malicious
    assert receivers["covert_flush_reload"].malicious
