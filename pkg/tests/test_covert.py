import numpy as np
import pytest

from memsim.core.errors import SimulationError
from memsim.hardware.machine import Machine
from memsim.services.covert import (
    DATA_LINES, CovertChannel, Technique, ack_check, build_frames, crc16, line_offset, measure, run_transfer,
)


DATA = bytes(range(7, 31))


def test_crc16_check_value():
    assert crc16(b"123456789") == 0x29B1


def bitwise_crc16(data: bytes) -> int:
    crc = 0xFFFF
    for byte in data:
        crc ^= byte << 8
        for _ in range(8):
            crc = (crc << 1) ^ 0x1021 if crc & 0x8000 else crc << 1
            crc &= 0xFFFF
    return crc


@pytest.mark.parametrize("data", [b"", b"\x00", b"\xff", bytes(range(7, 31)), b"123456789"])
def test_crc16_matches_bitwise_ccitt(data):
    assert crc16(data) == bitwise_crc16(data)


def test_crc16_edge_values():
    assert crc16(b"") == 0xFFFF
    assert crc16(b"\x00") == 0xE1F0


def test_build_frames():
    frames = build_frames(bytes(range(12)), packet_size=8)

    assert len(frames) == 3
    assert all(len(frame) == 8 for frame in frames)
    assert [frame[5] for frame in frames] == [0, 1, 2]
    assert frames[1][:5] == bytes(range(5, 10))
    assert frames[2][:5] == bytes([10, 11, 0, 0, 0])
    for frame in frames:
        assert int.from_bytes(frame[-2:], "big") == crc16(frame[:-2])


def test_ack_check():
    assert ack_check(3) == crc16(bytes([3])) & 0xFF


def test_lines_use_distinct_sets():
    offsets = [line_offset(index, 64) for index in range(2 * DATA_LINES)]

    assert len({(offset % 4096) // 64 for offset in offsets}) == len(offsets)
    assert all(offset % 4096 for offset in offsets)


@pytest.mark.parametrize(("packet_size", "noise"), [(3, 0.0), (8, 1.0), (8, -0.1)])
def test_channel_rejects_bad_parameters(tiny, packet_size, noise):
    with pytest.raises(SimulationError):
        CovertChannel(Machine(tiny), Technique.FLUSH_RELOAD, packet_size=packet_size, noise=noise)


@pytest.mark.parametrize("technique", list(Technique))
def test_noiseless_transfer(tiny, technique):
    received, stats, channel = run_transfer(tiny, technique, DATA, packet_size=8)

    assert received == DATA
    assert stats.effective_error_rate == 0.0
    assert stats.raw_error_rate == 0.0
    assert stats.retransmissions == 0
    assert stats.packets == 5
    assert stats.capacity_bps > 0
    assert channel.crc_rejects == 0


def test_noisy_transfer_retransmits(tiny):
    received, stats, _ = run_transfer(tiny, Technique.FLUSH_RELOAD, DATA, packet_size=8, noise=0.15, seed=3)

    assert received == DATA
    assert stats.false_accepts == 0
    assert stats.effective_error_rate == 0.0
    assert stats.retransmissions > 0
    assert stats.raw_error_rate > 0


def test_symbol_noise_corrupts_whole_symbols(tiny):
    received, stats, channel = run_transfer(tiny, Technique.FLUSH_RELOAD, DATA, packet_size=8, noise=0.15, seed=5)

    assert received == DATA
    assert channel.crc_rejects > 0
    # Битовая доля ошибок не превышает долю искаженных символов
    assert 0 < stats.raw_error_rate <= 0.15


def test_large_transfer_survives_one_percent_noise(tiny):
    data = bytes(np.random.default_rng(11).integers(0, 256, size=64 * 1024, dtype=int).tolist())

    received, stats, _ = run_transfer(tiny, Technique.FLUSH_RELOAD, data, packet_size=28, noise=0.01)

    assert received == data
    assert stats.false_accepts == 0
    assert stats.effective_error_rate < 0.05
    assert 0 < stats.retransmissions < stats.packets


def test_longer_packets_win_under_noise(tiny):
    short, long = measure(tiny, Technique.FLUSH_RELOAD, payload_bytes=1024, noise=0.01, packet_sizes=(4, 28))

    assert short.effective_error_rate == 0.0
    assert long.effective_error_rate == 0.0
    assert long.capacity_bps > short.capacity_bps


def test_transfer_is_reproducible(tiny):
    first = run_transfer(tiny, Technique.FLUSH_FLUSH, DATA, packet_size=8, seed=1)[1]
    second = run_transfer(tiny, Technique.FLUSH_FLUSH, DATA, packet_size=8, seed=1)[1]

    assert first == second


def test_measure(tiny):
    rows = measure(tiny, Technique.FLUSH_RELOAD, payload_bytes=20, packet_sizes=(4, 12))

    assert [row.packet_size for row in rows] == [4, 12]
    assert all(row.effective_error_rate == 0.0 for row in rows)
    assert measure(tiny, Technique.FLUSH_RELOAD, payload_bytes=0) == []


def test_flush_flush_receiver_makes_few_llc_accesses(tiny):
    _, stats, _ = run_transfer(tiny, Technique.FLUSH_FLUSH, DATA, packet_size=8)
    _, reload_stats, _ = run_transfer(tiny, Technique.FLUSH_RELOAD, DATA, packet_size=8)

    assert stats.receiver_itlb > 0
    assert stats.receiver_references < reload_stats.receiver_references
    assert stats.receiver_misses / stats.receiver_itlb < 1.0
