import pytest

from memsim.core.presets import TINY
from memsim.hardware.machine import ActorKind, Machine
from memsim.schemas.machine import MachineConfig


@pytest.fixture
def tiny() -> MachineConfig:
    return TINY


@pytest.fixture
def machine(tiny) -> Machine:
    return Machine(tiny, seed=0)


@pytest.fixture
def attacker(machine):
    return machine.spawn("attacker", kind=ActorKind.ATTACKER)


@pytest.fixture
def cpu(machine, attacker):
    return machine.cpu(attacker)
