import numpy as np
import pytest

from memsim.core.errors import SimulationError
from memsim.hardware.memory import PAGE_SIZE
from memsim.services.primitives import AttackPrimitives, ProbeKind
from memsim.services.template import (
    CacheTemplateMatrix, EmptyTemplate, TemplateAttack, TemplateProbe, prune,
)
from memsim.services.victims import AesTTable, TableAccessor


EVENTS = 4


@pytest.fixture
def primitives(machine, attacker):
    return AttackPrimitives(machine, attacker)


@pytest.fixture
def primitives_ready(primitives):
    primitives.calibrate(ProbeKind.RELOAD)
    primitives.calibrate(ProbeKind.FLUSH)
    return primitives


@pytest.fixture
def table_attack(machine, primitives_ready):
    victim = TableAccessor.spawn(machine, events=EVENTS)
    attack = TemplateAttack(primitives_ready, victim)
    # Прогрев TLB обоих ядер: обходы таблиц не должны вытеснять отслеживаемые строки
    for event, address in enumerate(first_lines(attack)):
        primitives_ready.cpu.read(address)
        victim.trigger(event)
    return attack


def first_lines(attack: TemplateAttack) -> list[int]:
    return [attack.image + event * PAGE_SIZE for event in range(EVENTS)]


@pytest.mark.parametrize("probe", [TemplateProbe.FLUSH_RELOAD, TemplateProbe.FLUSH_FLUSH])
def test_profile_table_accessor_is_diagonal(table_attack, probe):
    matrix = table_attack.profile(triggers=4, probe=probe, addresses=first_lines(table_attack))

    assert matrix.ratios.shape == (EVENTS, EVENTS)
    np.testing.assert_array_equal(matrix.ratios, np.eye(EVENTS))
    assert (matrix.triggers == 4).all()
    assert table_attack.victim.log == []


def test_profile_ignores_other_lines(table_attack):
    quiet = [table_attack.image + 64, table_attack.image + PAGE_SIZE + 128]

    matrix = table_attack.profile(triggers=2, addresses=quiet)

    assert not matrix.hits.any()


def test_profile_rejects_empty_input(table_attack):
    with pytest.raises(EmptyTemplate):
        table_attack.profile(triggers=0)
    with pytest.raises(EmptyTemplate):
        table_attack.profile(events=[])


def test_matrix_views(table_attack):
    matrix = table_attack.profile(triggers=2, addresses=first_lines(table_attack))

    frame = matrix.to_frame()
    assert list(frame.columns) == ["address", "0", "1", "2", "3"]
    assert (matrix.f_scores() == 1.0).all()
    assert matrix.ratio(first_lines(table_attack)[2], 2) == 1.0


def test_exploit_recovers_event_sequence(table_attack):
    matrix = table_attack.profile(triggers=2, addresses=first_lines(table_attack))
    table_attack.victim.attach([0, None, 2, None, 3])

    log = table_attack.exploit(matrix, window=1)

    assert [event.event for event in log] == ["0", "2", "3"]
    assert all(event.mse == 0.0 for event in log)
    assert [event for _, event in table_attack.victim.log] == [0, 2, 3]


def test_exploit_rejects_empty_template(table_attack):
    empty = CacheTemplateMatrix([], [], np.zeros((0, 0), dtype=np.int64), np.zeros((0, 0), dtype=np.int64))

    with pytest.raises(EmptyTemplate):
        table_attack.exploit(empty)


def test_prune_drops_flat_and_duplicate_rows_and_merges_columns():
    matrix = CacheTemplateMatrix(
        addresses=[0x100, 0x140, 0x180],
        columns=[(0,), (1,), (2,)],
        hits=np.array([[4, 0, 0], [4, 0, 0], [2, 2, 2]]),
        triggers=np.full((3, 3), 4),
    )

    pruned = prune(matrix)

    assert pruned.addresses == [0x100]
    assert pruned.labels == ["0", "1+2"]
    np.testing.assert_array_equal(pruned.hits, [[4, 0]])
    np.testing.assert_array_equal(pruned.triggers, [[4, 8]])
    assert pruned.merge_map == {"0": [0], "1+2": [1, 2]}


def test_aes_upper_nibbles(machine, primitives):
    key = bytes((index * 17 + 5) % 256 for index in range(16))
    victim = AesTTable.spawn(machine, key=key)
    attack = TemplateAttack(primitives, victim)

    recovery = attack.aes_recover_upper_nibbles()

    assert recovery.nibbles == [byte >> 4 for byte in key]
    assert all(used <= 160 for used in recovery.encryptions)
    assert victim.encryptions == recovery.total_encryptions


def test_aes_recovery_needs_aes_victim(table_attack):
    with pytest.raises(SimulationError):
        table_attack.aes_recover_upper_nibbles()


def test_aes_victim_matches_reference_cipher(machine):
    from pyaes import AESModeOfOperationECB

    key = bytes(range(16))
    victim = AesTTable.spawn(machine, key=key)
    block = b"sixteen byte msg"

    assert victim.encrypt(block) == AESModeOfOperationECB(key).encrypt(block)
    with pytest.raises(SimulationError):
        victim.encrypt(b"short")
